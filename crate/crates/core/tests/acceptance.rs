//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{affine_volume, auc_by_pairs, derivative, grid_study, rng, tied_instance, two_pass};
use mpstream_autodiff::gradcheck::cases;
use mpstream_autodiff::{Graph, Mode, Tensor};
use mpstream_core::densenet::{build_stream, plan, Architecture, StreamConfig};
use mpstream_core::ensemble::Selection;
use mpstream_core::loss::{cross_entropy, focal_loss, focal_loss_grad, FocalParams};
use mpstream_core::metrics::{roc_auc, MetricRow};
use mpstream_core::patchgen::{extract_study, sample_centers, Family, Geometry, PatchSpec, Proposal, ENVELOPE, GEOMETRIES};
use mpstream_core::phantom::{generate_cohort, PhantomSpec};
use mpstream_core::pipeline::{checkpoint_files, file_digest, Pipeline, PipelineConfig};
use mpstream_core::preprocess::{fit_cohort_stats, resample, standardize_study, unify_study, GridSpec};
use mpstream_core::trainer::JobFilter;
use mpstream_core::volstore::{ClinSig, Modality};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e <= limit, || format!("{what} took {e:?}, limit {limit:?}"))
}

fn gradient_soundness() -> Outcome {
    let t = Instant::now();
    let mut worst = BTreeMap::new();
    for (name, case) in cases::all() {
        let mut w: f64 = 0.0;
        for seed in 0..50 {
            let r = case(seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            ensure(r.checked > 0, || format!("{name}: nothing checked"))?;
            w = w.max(r.max_rel);
        }
        ensure(w <= 1e-4, || format!("{name}: relative error {w:e}"))?;
        worst.insert(name, w);
    }
    let mut r = rng(1);
    let mut focal: f64 = 0.0;
    for _ in 0..50 {
        let p = FocalParams {
            alpha: r.random_range(0.05..1.0),
            gamma: r.random_range(0.0..4.0),
            class_weighted: false,
        };
        let x = r.random_range(-12.0..12.0);
        let y = if r.random::<bool>() { 1.0 } else { -1.0 };
        let a = focal_loss_grad(x, y, &p).unwrap();
        let n = derivative(|v| focal_loss(v, y, &p).unwrap(), x, 1e-3);
        focal = focal.max((a - n).abs() / a.abs().max(1.0));
    }
    ensure(focal <= 1e-8, || format!("focal gradient error {focal:e}"))?;
    within(t, Duration::from_secs(120), "gradient checks")?;
    let overall = worst.values().cloned().fold(0.0, f64::max);
    Ok(format!(
        "{} operators x 50 instances, worst rel {overall:.2e}; focal worst {focal:.2e}; {:?}",
        worst.len(),
        t.elapsed()
    ))
}

fn focal_reductions() -> Outcome {
    let ce_params = FocalParams {
        alpha: 1.0,
        gamma: 0.0,
        class_weighted: false,
    };
    let mut worst: f64 = 0.0;
    for i in 0..=60_000 {
        let x = -30.0 + i as f64 * 1e-3;
        for y in [1.0, -1.0] {
            worst = worst.max((focal_loss(x, y, &ce_params).unwrap() - cross_entropy(x, y).unwrap()).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("CE reduction off by {worst:e}"))?;
    let gammas = [0.0, 0.5, 1.0, 2.0, 5.0];
    let mut points = 0;
    for i in 0..5000 {
        let x = -20.0 + i as f64 * 0.008;
        for y in [1.0, -1.0] {
            points += 1;
            let ce = cross_entropy(x, y).unwrap();
            let mut prev = f64::INFINITY;
            for &gamma in &gammas {
                let fl = focal_loss(x, y, &FocalParams { alpha: 0.5, gamma, class_weighted: false }).unwrap();
                ensure(fl <= 0.5 * ce, || format!("dominance fails at x {x} gamma {gamma}"))?;
                ensure(fl <= prev, || format!("focusing not monotone at x {x} gamma {gamma}"))?;
                prev = fl;
            }
        }
    }
    Ok(format!("CE max diff {worst:.1e} over [-30, 30]; dominance and focusing on {points} points"))
}

fn auc_oracle() -> Outcome {
    let mut r = rng(2024);
    let mut ties = 0;
    for k in 0..200 {
        let (s, y) = tied_instance(&mut r, 50);
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        ties += (sorted.len() < s.len()) as usize;
        let a = roc_auc(&s, &y).map_err(|e| e.to_string())?.auc;
        let b = auc_by_pairs(&s, &y);
        ensure(a == b, || format!("instance {k}: {a} != {b}"))?;
    }
    Ok(format!("200 instances exact, {ties} with tied scores"))
}

fn geometry_suite() -> Outcome {
    let t = Instant::now();
    let study = grid_study("S1", [6, 128, 124], &[([3, 60, 62], ClinSig::Positive), ([2, 70, 50], ClinSig::Negative)], 5);
    let (sets, _) = extract_study(&study, &PatchSpec { patches_per_study: 40, ..Default::default() }, 3).map_err(|e| e.to_string())?;
    for set in &sets {
        for m in Modality::ALL {
            let v = study.volume(m);
            for g in GEOMETRIES {
                let [gz, gy, gx] = g.zyx();
                let start = [set.index[0] - gz / 2, set.index[1] - gy / 2, set.index[2] - gx / 2];
                ensure((0..3).all(|a| start[a] + g.zyx()[a] <= v.dims[a]), || format!("{} out of bounds at {:?}", g.name(), set.index))?;
                let big = set.patch(ENVELOPE, Family::Solo);
                let patch = set.patch(g, Family::Solo);
                let [ez, ey, ex] = ENVELOPE.zyx();
                let mut k = 0;
                for z in 0..gz {
                    for y in 0..gy {
                        for x in 0..gx {
                            let e = big[((ez / 2 - gz / 2 + z) * ey + ey / 2 - gy / 2 + y) * ex + ex / 2 - gx / 2 + x];
                            ensure(patch[k].to_bits() == e.to_bits(), || format!("{} is not the centered crop", g.name()))?;
                            if m == Modality::Ktrans {
                                let d = v.at(start[0] + z, start[1] + y, start[2] + x);
                                ensure(patch[k].to_bits() == d.to_bits(), || "patch differs from the volume".into())?;
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    let one = grid_study("S2", [5, 120, 120], &[([2, 60, 60], ClinSig::Negative)], 6);
    let draws = 10_000;
    let s = sample_centers(&one, &PatchSpec { patches_per_study: draws + 1, ..Default::default() }, 99).map_err(|e| e.to_string())?;
    let hits = s.centers.iter().filter(|c| matches!(c.proposal, Proposal::Neighborhood(_))).count() as f64;
    let p = 10.0 / 11.0;
    let (mean, sigma) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
    ensure((hits - mean).abs() <= 3.0 * sigma, || format!("boosted draws {hits}, expected {mean:.0} +- {:.0}", 3.0 * sigma))?;
    within(t, Duration::from_secs(60), "geometry suite")?;
    Ok(format!("{} patch sets bitwise; boosted draws {hits} vs {mean:.1} +- {:.1} (3 sigma)", sets.len(), 3.0 * sigma))
}

fn preprocessing_suite() -> Outcome {
    let t = Instant::now();
    let g = GridSpec { crop: 64, ..Default::default() };
    let (c, a) = (40.0, [1.25, -0.75, 0.5]);
    let mut worst: f64 = 0.0;
    for (dims, spacing) in [([6, 40, 40], [3.0, 1.0, 1.0]), ([5, 27, 27], [3.0, 1.5, 1.5]), ([8, 33, 41], [2.0, 0.9, 0.6])] {
        let v = affine_volume(Modality::Adc, dims, spacing, [0.0, -10.0, -12.0], c, a);
        let out = resample(&v, &g).map_err(|e| e.to_string())?;
        for z in 0..out.dims[0] {
            for y in 0..out.dims[1] {
                for x in 0..out.dims[2] {
                    let w = out.world_of([z, y, x]);
                    let f = c + a[0] * w[0] + a[1] * w[1] + a[2] * w[2];
                    worst = worst.max((out.at(z, y, x) as f64 - f).abs() / f.abs().max(1.0));
                }
            }
        }
    }
    ensure(worst <= 1e-5, || format!("affine reproduction error {worst:e}"))?;
    let on_grid = affine_volume(Modality::T2w, [4, 30, 30], [3.0, 0.5, 0.5], [0.0; 3], 1.0, [0.1, 0.2, 0.3]);
    let once = resample(&on_grid, &g).map_err(|e| e.to_string())?;
    ensure(once == on_grid && resample(&once, &g).map_err(|e| e.to_string())? == once, || "resampling is not idempotent".into())?;

    let cohort = generate_cohort(&PhantomSpec { n_subjects: 6, ..Default::default() }).map_err(|e| e.to_string())?;
    let grid = GridSpec { crop: 240, ..Default::default() };
    let unified: Vec<_> = cohort.studies.iter().map(|s| unify_study(s, &grid).unwrap()).collect();
    let stats = fit_cohort_stats(&unified).map_err(|e| e.to_string())?;
    let std: Vec<_> = unified.iter().map(|s| standardize_study(s, &stats).unwrap()).collect();
    let (mut wm, mut ws): (f64, f64) = (0.0, 0.0);
    for m in Modality::ALL {
        let (mean, sd) = two_pass(std.iter().flat_map(|s| s.volume(m).voxels.iter().map(|&v| v as f64)));
        wm = wm.max(mean.abs());
        ws = ws.max((sd - 1.0).abs());
    }
    ensure(wm <= 1e-6 && ws <= 1e-6, || format!("standardized |mean| {wm:e}, |std - 1| {ws:e}"))?;
    within(t, Duration::from_secs(60), "preprocessing suite")?;
    Ok(format!("affine error {worst:.1e}; idempotent; |mean| {wm:.1e}, |std-1| {ws:.1e}"))
}

fn architecture_bookkeeping() -> Outcome {
    let arch = Architecture::default();
    let mut points = 0;
    for g in GEOMETRIES {
        for family in Family::ALL {
            let cfg = StreamConfig { geometry: g, channels: family.channels(), arch: arch.clone() };
            let p = plan(&cfg).map_err(|e| e.to_string())?;
            // c0 + L g per block, floor(theta c) at each transition.
            let mut c = 2 * arch.growth;
            let mut expect = vec![family.channels(), c, c];
            let blocks = if g.h >= 96 { 4 } else { 3 };
            for b in 0..blocks {
                for l in 1..=arch.layers_per_block {
                    expect.push(c + l * arch.growth);
                }
                c += arch.layers_per_block * arch.growth;
                if b + 1 < blocks {
                    c = (arch.compression * c as f64).floor() as usize;
                    expect.push(c);
                }
            }
            expect.extend([c, arch.head, 1]);
            let planned: Vec<usize> = p.iter().map(|q| q.channels).collect();
            ensure(planned == expect, || format!("{} {}: {planned:?} vs {expect:?}", g.name(), family.name()))?;
            let mut m = build_stream::<f32>(&cfg, 0).map_err(|e| e.to_string())?;
            let gr = Graph::new();
            let x = gr.constant(Tensor::zeros(m.input_shape(1)));
            let mut trace = Vec::new();
            m.forward_traced(&gr, x, Mode::Train, 0, Some(&mut trace)).map_err(|e| e.to_string())?;
            let traced: Vec<usize> = trace.iter().map(|(_, s)| s[1]).collect();
            ensure(traced == expect, || format!("{} {} traced {traced:?}", g.name(), family.name()))?;
            points += traced.len();
        }
    }
    let collapsed = StreamConfig { geometry: Geometry { h: 4, w: 4, d: 1 }, channels: 1, arch };
    ensure(build_stream::<f32>(&collapsed, 0).is_err(), || "4x4x1 stream built despite spatial collapse".into())?;
    Ok(format!("{points} graph points across 4 geometries x 2 families; collapse rejected"))
}

fn benchmark_config(output: &Path) -> PipelineConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.json");
    let mut cfg = PipelineConfig::load(&path).expect("benchmark config");
    cfg.output = output.to_path_buf();
    cfg
}

struct BenchRun {
    elapsed: Duration,
    pipeline: Pipeline,
    checkpoints_before: BTreeMap<String, String>,
    checkpoints_after: BTreeMap<String, String>,
}

fn checkpoint_digests(p: &Pipeline) -> BTreeMap<String, String> {
    checkpoint_files(p)
        .unwrap()
        .into_iter()
        .map(|f| {
            let d = file_digest(&p.dir("train").join(&f)).unwrap();
            (f, d)
        })
        .collect()
}

fn run_benchmark(output: &Path) -> mpstream_core::Result<BenchRun> {
    let t = Instant::now();
    let p = Pipeline::new(benchmark_config(output))?;
    p.gen_phantom()?;
    p.preprocess()?;
    p.extract()?;
    p.train(&JobFilter::default())?;
    let before = checkpoint_digests(&p);
    p.ensemble()?;
    let after = checkpoint_digests(&p);
    p.predict()?;
    p.evaluate()?;
    p.report()?;
    Ok(BenchRun {
        elapsed: t.elapsed(),
        pipeline: p,
        checkpoints_before: before,
        checkpoints_after: after,
    })
}

fn read_row(path: &Path) -> MetricRow {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn benchmark(run: &BenchRun) -> Outcome {
    let p = &run.pipeline;
    let epochs = p.config.train.max_epochs;
    ensure(epochs <= 30, || format!("{epochs} epochs"))?;
    ensure(p.config.phantom.n_subjects == 40, || "phantom is not 40 subjects".into())?;
    let mut best: BTreeMap<Family, f64> = BTreeMap::new();
    let mut worst = (f64::INFINITY, String::new());
    for j in p.jobs() {
        let auc = read_row(&p.stream_dir(&j).join("metrics.json")).validation.auc.unwrap_or(f64::NAN);
        if !(auc >= worst.0) {
            worst = (auc, j.name());
        }
        let b = best.entry(j.family).or_insert(f64::NEG_INFINITY);
        *b = b.max(auc);
    }
    let ens = |s: Selection| read_row(&p.dir("ensemble").join(s.name()).join("metrics.json")).validation.auc.unwrap_or(f64::NAN);
    let (c, s, q) = (ens(Selection::Composite), ens(Selection::Solo), ens(Selection::Quadruple));
    let summary = format!(
        "weakest stream {} AUC {:.4}; composite {c:.4} (best stream {:.4}); solo {s:.4} (best stream {:.4}); quadruple {q:.4}; {:?}",
        worst.1, worst.0, best[&Family::Composite], best[&Family::Solo], run.elapsed
    );
    ensure(worst.0 >= 0.85, || format!("(a) fails: {summary}"))?;
    ensure(c >= best[&Family::Composite] - 0.02 && s >= best[&Family::Solo] - 0.02, || format!("(b) fails: {summary}"))?;
    ensure(q >= c - 0.02, || format!("(c) fails: {summary}"))?;
    Ok(summary)
}

fn freeze(run: &BenchRun) -> Outcome {
    ensure(!run.checkpoints_before.is_empty(), || "no checkpoints".into())?;
    ensure(run.checkpoints_before == run.checkpoints_after, || "checkpoint files changed during meta-training".into())?;
    Ok(format!("{} checkpoint files unchanged across meta-training", run.checkpoints_before.len()))
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let a = tree(first);
    let b = tree(second);
    ensure(a.keys().eq(b.keys()), || "the two runs produced different file sets".into())?;
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    ensure(differing.is_empty(), || format!("{} files differ, e.g. {:?}", differing.len(), &differing[..differing.len().min(5)]))?;
    let count = |pred: &dyn Fn(&str) -> bool| a.keys().filter(|k| pred(k)).count();
    Ok(format!(
        "{} files bitwise identical: {} checkpoint files, {} manifests, {} CSVs",
        a.len(),
        count(&|k| k.ends_with("model.raw") || k.ends_with("model.json")),
        count(&|k| k.ends_with("stage.json")),
        count(&|k| k.ends_with(".csv")),
    ))
}

fn structural_counts(run: &BenchRun) -> Outcome {
    let p = &run.pipeline;
    for family in Family::ALL {
        let n = run
            .checkpoints_before
            .keys()
            .filter(|k| k.starts_with(&format!("streams/{}/", family.name())) && k.ends_with("model.json"))
            .count();
        ensure(n == 20, || format!("{} checkpoints for {}", n, family.name()))?;
        let width = Selection::parse(family.name()).unwrap().inputs(&p.config.geometries, p.config.train.folds).len();
        ensure(width == 20, || format!("{} ensemble input width {width}", family.name()))?;
    }
    let lines = |f: &str| std::fs::read_to_string(p.dir("report").join(f)).unwrap().lines().count() - 1;
    let (t1, t2, t3) = (lines("table1_composite.csv"), lines("table2_solo.csv"), lines("table3_ensemble.csv"));
    ensure(t1 == 20 && t2 == 20 && t3 == 3, || format!("table rows {t1}/{t2}/{t3}"))?;
    let roc = std::fs::read_dir(p.dir("report").join("roc")).unwrap().count();
    Ok(format!("20 checkpoints per family; tables {t1}/{t2}/{t3} rows; {roc} ROC files"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient soundness", gradient_soundness()),
        ("2 focal-loss reductions", focal_reductions()),
        ("3 AUC oracle equivalence", auc_oracle()),
        ("4 geometry suite", geometry_suite()),
        ("5 preprocessing suite", preprocessing_suite()),
        ("6 architecture bookkeeping", architecture_bookkeeping()),
    ];
    for (name, r) in &results {
        print_line(name, r);
    }

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let first = tmp.path().join("first");
    let bench = run_benchmark(&out).and_then(|r| {
        std::fs::rename(&out, &first).unwrap();
        run_benchmark(&out).map(|second| (r, second))
    });
    let tail: Vec<(&str, Outcome)> = match &bench {
        Ok((r1, _)) => vec![
            ("7 phantom benchmark", benchmark(r1)),
            ("8 freeze invariant", freeze(r1)),
            ("9 determinism", determinism(&first, &out)),
            ("10 structural counts", structural_counts(r1)),
        ],
        Err(e) => ["7 phantom benchmark", "8 freeze invariant", "9 determinism", "10 structural counts"]
            .into_iter()
            .map(|n| (n, Err(format!("benchmark run failed: {e}"))))
            .collect(),
    };
    for (name, r) in &tail {
        print_line(name, r);
    }
    results.extend(tail);
    let failed: Vec<&str> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn print_line(name: &str, r: &Outcome) {
    match r {
        Ok(m) => println!("PASS criterion {name}: {m}"),
        Err(m) => println!("FAIL criterion {name}: {m}"),
    }
}

