#![allow(dead_code)]

use mpstream_core::volstore::{ClinSig, Cohort, Finding, Modality, Study, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mann-Whitney statistic by direct pair counting; ties count one half.
pub fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi {
            p += 1;
        } else {
            n += 1;
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj {
                continue;
            }
            if scores[i] > scores[j] {
                twice += 2;
            } else if scores[i] == scores[j] {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

/// Scores drawn from a handful of levels so ties are common, with both
/// classes present.
pub fn tied_instance(r: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = r.random_range(2..=max_n);
        let levels = r.random_range(1..=8);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
        if labels.iter().any(|&y| y) && labels.iter().any(|&y| !y) {
            return (scores, labels);
        }
    }
}

/// Focal loss written directly from probabilities:
/// `-alpha (1 - p_t)^gamma ln p_t`.
pub fn focal_from_probability(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    let pt = if y > 0.0 { p } else { 1.0 - p };
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Five-point central difference.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// Mean and population standard deviation, two passes in f64.
pub fn two_pass(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `c + a . (z, y, x)` sampled on a voxel grid.
pub fn affine_volume(m: Modality, dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], c: f64, a: [f64; 3]) -> Volume {
    let mut voxels = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let w = [
                    origin[0] + z as f64 * spacing[0],
                    origin[1] + y as f64 * spacing[1],
                    origin[2] + x as f64 * spacing[2],
                ];
                voxels.push((c + a[0] * w[0] + a[1] * w[1] + a[2] * w[2]) as f32);
            }
        }
    }
    Volume::new(m, dims, spacing, origin, voxels).unwrap()
}

/// Study with random voxels on one shared grid and findings at the given
/// `(z, y, x)` voxels.
pub fn grid_study(id: &str, dims: [usize; 3], findings: &[([usize; 3], ClinSig)], seed: u64) -> Study {
    let spacing = [3.0, 0.5, 0.5];
    let origin = [0.0, -30.0, -30.0];
    let mut r = rng(seed);
    let volumes = Modality::ALL.map(|m| {
        let voxels = (0..dims.iter().product::<usize>()).map(|_| r.random::<f32>() * 2.0 - 1.0).collect();
        Volume::new(m, dims, spacing, origin, voxels).unwrap()
    });
    let findings = findings
        .iter()
        .enumerate()
        .map(|(k, (idx, sig))| Finding {
            subject_id: id.to_string(),
            finding_id: k as u32 + 1,
            world_pos: [
                origin[2] + idx[2] as f64 * spacing[2],
                origin[1] + idx[1] as f64 * spacing[1],
                origin[0] + idx[0] as f64 * spacing[0],
            ],
            clin_sig: *sig,
        })
        .collect();
    Study::new(id, volumes, findings, Cohort::Train).unwrap()
}

/// A pipeline small enough to run end to end in seconds.
pub fn small_pipeline(output: &std::path::Path) -> mpstream_core::pipeline::PipelineConfig {
    use mpstream_core::densenet::Architecture;
    use mpstream_core::patchgen::{PatchSpec, GEOMETRIES};
    use mpstream_core::phantom::PhantomSpec;
    use mpstream_core::preprocess::GridSpec;
    use mpstream_core::trainer::TrainConfig;
    mpstream_core::pipeline::PipelineConfig {
        output: output.to_path_buf(),
        phantom: PhantomSpec {
            n_subjects: 8,
            n_test_subjects: 2,
            ..Default::default()
        },
        grid: GridSpec {
            crop: 240,
            ..Default::default()
        },
        patch: PatchSpec {
            patches_per_study: 5,
            ..Default::default()
        },
        geometries: GEOMETRIES[..2].to_vec(),
        arch: Architecture {
            growth: 2,
            layers_per_block: 1,
            init_filters: Some(2),
            bottleneck: Some(4),
            head: 4,
            ..Default::default()
        },
        train: TrainConfig {
            learning_rate: 0.02,
            max_epochs: 2,
            patience: 1,
            batch_size: 16,
            folds: 2,
            ..Default::default()
        },
        meta: mpstream_core::ensemble::MetaConfig {
            epochs: 5,
            ..Default::default()
        },
        ..Default::default()
    }
}
