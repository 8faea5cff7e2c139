//! Stage orchestration.
//!
//! Every stage writes into `<output>/<stage>/` and finishes by recording a
//! `stage.json` manifest: the master seed, a digest of the configuration
//! sections the stage depends on, the digests of its upstream manifests and
//! a SHA-256 for every file it produced. A stage refuses to run when an
//! upstream manifest is missing, was produced under a different
//! configuration, or lists a file whose content has since changed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::densenet::{load_checkpoint, save_checkpoint, Architecture};
use crate::ensemble::{predict_finding, train_ensemble, EnsembleModel, FeatureTable, MetaConfig, RowInfo, Selection, StreamBank};
use crate::error::{read_file, read_json, write_file, write_json, Error, Result};
use crate::loss::FocalParams;
use crate::metrics::{evaluate, write_table, Evaluation, MetricRow};
use crate::patchgen::{extract_study, index_rows, read_archive, write_archive, Family, Geometry, PatchSet, PatchSpec, GEOMETRIES, INDEX_HEADER};
use crate::phantom::{generate_cohort, PhantomSpec};
use crate::preprocess::{fit_cohort_stats, standardize_study, unify_study, GridSpec};
use crate::seed_of;
use crate::trainer::{all_jobs, make_folds, run_all_streams, FoldSplit, JobFilter, StreamJob, StreamPlan, TrainConfig};
use crate::volstore::{read_findings_csv, read_predictions_csv, write_cohort, write_findings_csv, write_predictions_csv, ClinSig, Cohort, LoadedManifest, Prediction, Study};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input cohort manifest; the generated phantom when absent.
    pub manifest: Option<PathBuf>,
    /// Findings with true labels for the test cohort, used by `evaluate`;
    /// the phantom ground truth when absent.
    pub truth: Option<PathBuf>,
    /// Run directory; left out of snapshots so a run can be moved.
    #[serde(skip_serializing)]
    pub output: PathBuf,
    pub phantom: PhantomSpec,
    pub grid: GridSpec,
    pub patch: PatchSpec,
    pub geometries: Vec<Geometry>,
    pub families: Vec<Family>,
    pub arch: Architecture,
    /// Per-geometry replacements for `arch`, keyed like `96x96x3`.
    pub arch_overrides: BTreeMap<String, Architecture>,
    pub train: TrainConfig,
    pub loss: FocalParams,
    pub meta: MetaConfig,
    pub selections: Vec<Selection>,
    pub seed: u64,
    /// Thread count; scheduling only, never part of any digest.
    #[serde(skip_serializing)]
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            truth: None,
            output: PathBuf::from("run"),
            phantom: PhantomSpec::default(),
            grid: GridSpec::default(),
            patch: PatchSpec::default(),
            geometries: GEOMETRIES.to_vec(),
            families: Family::ALL.to_vec(),
            arch: Architecture::default(),
            arch_overrides: BTreeMap::new(),
            train: TrainConfig::default(),
            loss: FocalParams::default(),
            meta: MetaConfig::default(),
            selections: Selection::ALL.to_vec(),
            seed: 20_220_101,
            workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.patch.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.meta.validate()?;
        if self.geometries.is_empty() || self.families.is_empty() {
            return Err(Error::invalid("at least one geometry and one family are required"));
        }
        for key in self.arch_overrides.keys() {
            if !self.geometries.iter().any(|g| g.name() == *key) {
                return Err(Error::invalid(format!("architecture override for unknown geometry `{key}`")));
            }
        }
        for s in &self.selections {
            if s.families().iter().any(|f| !self.families.contains(f)) {
                return Err(Error::invalid(format!("ensemble `{}` needs families that are not trained", s.name())));
            }
        }
        Ok(())
    }

    fn section(&self, stage: &str) -> Value {
        match stage {
            "gen-phantom" => json!({ "phantom": self.phantom }),
            "preprocess" => json!({ "manifest": self.manifest, "grid": self.grid }),
            "extract" => json!({ "patch": self.patch, "seed": self.seed }),
            "train" => json!({
                "geometries": self.geometries,
                "families": self.families,
                "arch": self.arch,
                "arch_overrides": self.arch_overrides,
                "train": self.train,
                "loss": self.loss,
                "seed": self.seed,
            }),
            "ensemble" => json!({ "selections": self.selections, "meta": self.meta, "loss": self.loss, "seed": self.seed }),
            "predict" => json!({ "patch": self.patch }),
            "evaluate" => json!({ "truth": self.truth }),
            _ => json!({}),
        }
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(digest_bytes(&read_file(path)?))
}

fn value_digest(v: &Value) -> String {
    digest_bytes(serde_json::to_string(v).expect("json value").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the stage directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamDigest {
    pub stage: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    /// False for a filtered `train` run that left streams missing.
    pub complete: bool,
    pub inputs: Vec<UpstreamDigest>,
    pub artifacts: Vec<Artifact>,
    pub config: Value,
}

const MANIFEST_NAME: &str = "stage.json";

fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let e = e.map_err(|e| Error::io(&dir, e))?;
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// What a stage run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: &'static str,
    pub dir: PathBuf,
    pub lines: Vec<String>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pool: rayon::ThreadPool,
}

fn stage_dir_name(stage: &str) -> &str {
    if stage == "gen-phantom" {
        "phantom"
    } else {
        stage
    }
}

fn stale(stage: &'static str, detail: impl Into<String>) -> Error {
    Error::Stale {
        stage,
        detail: detail.into(),
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
        Ok(Self { config, pool })
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.config.output.join(stage_dir_name(stage))
    }

    fn manifest_path(&self) -> PathBuf {
        self.config
            .manifest
            .clone()
            .unwrap_or_else(|| self.dir("gen-phantom").join("manifest.json"))
    }

    fn truth_path(&self) -> Option<PathBuf> {
        match &self.config.truth {
            Some(p) => Some(p.clone()),
            None if self.config.manifest.is_none() => Some(self.dir("gen-phantom").join("truth.csv")),
            None => None,
        }
    }

    /// Clears a stage directory before it is rebuilt.
    fn fresh(&self, stage: &str) -> Result<PathBuf> {
        let d = self.dir(stage);
        if d.exists() {
            std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    /// Verifies an upstream manifest and returns its digest.
    fn require(&self, stage: &'static str, need_complete: bool) -> Result<UpstreamDigest> {
        let dir = self.dir(stage);
        let path = dir.join(MANIFEST_NAME);
        if !path.is_file() {
            return Err(stale(stage, format!("{} is missing", path.display())));
        }
        let bytes = read_file(&path)?;
        let m: StageManifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.config_digest != value_digest(&self.config.section(stage)) {
            return Err(stale(stage, format!("`{stage}` outputs were produced under a different configuration")));
        }
        if need_complete && !m.complete {
            return Err(stale(stage, format!("`{stage}` ran on a subset of its jobs")));
        }
        for a in &m.artifacts {
            let p = dir.join(&a.path);
            if !p.is_file() || file_digest(&p)? != a.sha256 {
                return Err(stale(stage, format!("{} changed since `{stage}` ran", p.display())));
            }
        }
        Ok(UpstreamDigest {
            stage: stage.to_string(),
            sha256: digest_bytes(&bytes),
        })
    }

    fn finish(&self, stage: &'static str, inputs: Vec<UpstreamDigest>, complete: bool) -> Result<StageManifest> {
        let dir = self.dir(stage);
        write_json(&dir.join("config.json"), &self.config)?;
        let mut artifacts = Vec::new();
        for p in list_files(&dir)? {
            let r = rel(&dir, &p);
            if r == MANIFEST_NAME {
                continue;
            }
            artifacts.push(Artifact {
                path: r,
                sha256: file_digest(&p)?,
            });
        }
        let m = StageManifest {
            stage: stage.to_string(),
            seed: self.config.seed,
            config_digest: value_digest(&self.config.section(stage)),
            complete,
            inputs,
            artifacts,
            config: serde_json::to_value(&self.config).map_err(|e| Error::invalid(e.to_string()))?,
        };
        write_json(&dir.join(MANIFEST_NAME), &m)?;
        Ok(m)
    }

    fn summary(&self, stage: &'static str, lines: Vec<String>) -> StageSummary {
        StageSummary {
            stage,
            dir: self.dir(stage),
            lines,
        }
    }

    pub fn gen_phantom(&self) -> Result<StageSummary> {
        self.pool.install(|| {
            let dir = self.fresh("gen-phantom")?;
            let cohort = generate_cohort(&self.config.phantom)?;
            write_cohort(&cohort.studies, &dir.join("manifest.json"), &[])?;
            write_findings_csv(&cohort.truth, &dir.join("truth.csv"))?;
            self.finish("gen-phantom", vec![], true)?;
            let train = cohort.studies.iter().filter(|s| s.cohort == Cohort::Train).count();
            Ok(self.summary(
                "gen-phantom",
                vec![format!(
                    "{train} training and {} test subjects",
                    cohort.studies.len() - train
                )],
            ))
        })
    }

    fn external_manifest_digest(&self) -> Result<UpstreamDigest> {
        let path = self.manifest_path();
        let loaded = LoadedManifest::load(&path)?;
        let mut h = Sha256::new();
        h.update(read_file(&path)?);
        for id in loaded.subject_ids() {
            let e = &loaded.manifest.studies[&id];
            for f in [&e.t2w, &e.adc, &e.dwi, &e.ktrans] {
                let p = loaded.root.join(f);
                h.update(read_file(&p)?);
                h.update(read_file(&crate::volstore::blob_path(&p))?);
            }
            h.update(read_file(&loaded.root.join(&e.findings))?);
        }
        Ok(UpstreamDigest {
            stage: "input".into(),
            sha256: hex::encode(h.finalize()),
        })
    }

    pub fn preprocess(&self) -> Result<StageSummary> {
        self.pool.install(|| {
            let upstream = if self.config.manifest.is_none() {
                self.require("gen-phantom", true)?
            } else {
                self.external_manifest_digest()?
            };
            let loaded = LoadedManifest::load(&self.manifest_path())?;
            let ids = loaded.subject_ids();
            let grid = &self.config.grid;
            use rayon::prelude::*;
            let unified: Vec<Study> = ids
                .par_iter()
                .map(|id| unify_study(&loaded.load_study(id)?, grid))
                .collect::<Result<_>>()?;
            let training: Vec<Study> = unified.iter().filter(|s| s.cohort == Cohort::Train).cloned().collect();
            if training.is_empty() {
                return Err(Error::invalid("the cohort has no training subjects"));
            }
            let stats = fit_cohort_stats(&training)?;
            drop(training);
            let standardized: Vec<Study> = unified
                .par_iter()
                .map(|s| standardize_study(s, &stats))
                .collect::<Result<_>>()?;
            drop(unified);
            let dir = self.fresh("preprocess")?;
            write_cohort(&standardized, &dir.join("manifest.json"), &[])?;
            write_json(&dir.join("stats.json"), &stats)?;
            self.finish("preprocess", vec![upstream], true)?;
            let d = standardized[0].volumes[0].dims;
            Ok(self.summary(
                "preprocess",
                vec![format!("{} studies on a {}x{}x{} grid", standardized.len(), d[0], d[1], d[2])],
            ))
        })
    }

    fn preprocessed(&self) -> Result<LoadedManifest> {
        LoadedManifest::load(&self.dir("preprocess").join("manifest.json"))
    }

    pub fn extract(&self) -> Result<StageSummary> {
        self.pool.install(|| {
            let upstream = self.require("preprocess", true)?;
            let loaded = self.preprocessed()?;
            let dir = self.fresh("extract")?;
            use rayon::prelude::*;
            let results: Vec<(String, Cohort, Vec<PatchSet>, Vec<u32>)> = loaded
                .subject_ids()
                .par_iter()
                .map(|id| {
                    let study = loaded.load_study(id)?;
                    let (sets, skipped) = extract_study(&study, &self.config.patch, seed_of!(self.config.seed, "extract", id.as_str()))?;
                    write_archive(&dir.join("patches").join(format!("{id}.json")), id, study.cohort, &sets)?;
                    Ok((id.clone(), study.cohort, sets, skipped))
                })
                .collect::<Result<_>>()?;
            let mut index = String::from(INDEX_HEADER);
            let mut skipped = String::from("subject_id,finding_id\n");
            let mut n = 0;
            for (id, _, sets, sk) in &results {
                index.push_str(&index_rows(sets));
                n += sets.len();
                for f in sk {
                    skipped.push_str(&format!("{id},{f}\n"));
                }
            }
            write_file(&dir.join("index.csv"), index.as_bytes())?;
            write_file(&dir.join("skipped.csv"), skipped.as_bytes())?;
            self.finish("extract", vec![upstream], true)?;
            let n_skipped: usize = results.iter().map(|r| r.3.len()).sum();
            Ok(self.summary("extract", vec![format!("{n} patch sets, {n_skipped} findings skipped")]))
        })
    }

    /// Patch sets of one cohort, subjects in sorted order.
    pub fn load_patch_sets(&self, cohort: Cohort) -> Result<Vec<PatchSet>> {
        let dir = self.dir("extract").join("patches");
        let mut out = Vec::new();
        for p in list_files(&dir)? {
            if p.extension().is_some_and(|e| e == "json") {
                let (c, sets) = read_archive(&p)?;
                if c == cohort {
                    out.extend(sets);
                }
            }
        }
        Ok(out)
    }

    fn folds(&self) -> Result<Vec<FoldSplit>> {
        let loaded = self.preprocessed()?;
        let mut subjects = Vec::new();
        for id in loaded.subject_ids() {
            let e = &loaded.manifest.studies[&id];
            if e.cohort != Cohort::Train {
                continue;
            }
            let findings = read_findings_csv(&loaded.root.join(&e.findings))?;
            subjects.push((id, findings.iter().any(|f| f.clin_sig == ClinSig::Positive)));
        }
        make_folds(&subjects, self.config.train.folds, seed_of!(self.config.seed, "folds"))
    }

    pub fn jobs(&self) -> Vec<StreamJob> {
        all_jobs(&self.config.families, &self.config.geometries, self.config.train.folds)
    }

    pub fn stream_dir(&self, job: &StreamJob) -> PathBuf {
        self.dir("train")
            .join("streams")
            .join(job.family.name())
            .join(job.geometry.name())
            .join(format!("fold{}", job.fold))
    }

    fn job_key(&self, job: &StreamJob, upstream: &UpstreamDigest) -> String {
        value_digest(&json!({
            "job": job,
            "section": self.config.section("train"),
            "upstream": upstream,
            "seeds": job.seeds(self.config.seed),
        }))
    }

    fn job_done(&self, job: &StreamJob, key: &str) -> bool {
        let d = self.stream_dir(job);
        let ok = |n: &str| d.join(n).is_file();
        if !(ok("model.json") && ok("model.raw") && ok("metrics.json") && ok("history.csv")) {
            return false;
        }
        read_json::<Value>(&d.join("job.json"))
            .ok()
            .and_then(|v| v.get("key").and_then(|k| k.as_str().map(str::to_string)))
            .is_some_and(|k| k == key)
    }

    /// Trains every stream matching `filter`; finished streams with a
    /// matching job record are kept.
    pub fn train(&self, filter: &JobFilter) -> Result<StageSummary> {
        self.pool.install(|| {
            let upstream = self.require("extract", true)?;
            let dir = self.dir("train");
            let folds = self.folds()?;
            let folds_path = dir.join("folds.json");
            let stored_folds: Option<Vec<FoldSplit>> = read_json(&folds_path).ok();
            if stored_folds.as_ref().is_some_and(|f| *f != folds) || (dir.exists() && stored_folds.is_none()) {
                self.fresh("train")?;
            }
            write_json(&folds_path, &folds)?;
            let all = self.jobs();
            let selected: Vec<StreamJob> = all.iter().copied().filter(|j| filter.matches(j)).collect();
            if selected.is_empty() {
                return Err(Error::Usage("the job filter matches no stream".into()));
            }
            let todo: Vec<StreamJob> = selected
                .iter()
                .copied()
                .filter(|j| !self.job_done(j, &self.job_key(j, &upstream)))
                .collect();
            let sets = self.load_patch_sets(Cohort::Train)?;
            let plan = StreamPlan {
                arch: &self.config.arch_overrides,
                default_arch: &self.config.arch,
                train: &self.config.train,
                loss: &self.config.loss,
                folds: &folds,
                master_seed: self.config.seed,
            };
            run_all_streams(&plan, &todo, &sets, |out| {
                let d = self.stream_dir(&out.job);
                save_checkpoint(&out.model, &d.join("model.json"))?;
                write_file(&d.join("history.csv"), out.history.to_csv().as_bytes())?;
                write_json(&d.join("metrics.json"), &out.row)?;
                write_json(
                    &d.join("job.json"),
                    &json!({
                        "job": out.job,
                        "key": self.job_key(&out.job, &upstream),
                        "seeds": out.job.seeds(self.config.seed),
                        "best_epoch": out.history.best_epoch,
                        "epochs_run": out.history.epochs.len(),
                        "stopped_early": out.history.stopped_early,
                    }),
                )
            })?;
            let key_ok = |j: &StreamJob| self.job_done(j, &self.job_key(j, &upstream));
            let complete = all.iter().all(key_ok);
            self.finish("train", vec![upstream.clone()], complete)?;
            let mut lines = vec![format!(
                "{} streams trained, {} reused, {} of {} present",
                todo.len(),
                selected.len() - todo.len(),
                all.iter().filter(|j| key_ok(j)).count(),
                all.len()
            )];
            for j in &selected {
                let row: MetricRow = read_json(&self.stream_dir(j).join("metrics.json"))?;
                lines.push(format!("{} validation AUC {}", j.name(), fmt_opt(row.validation.auc)));
            }
            Ok(self.summary("train", lines))
        })
    }

    fn load_bank(&self) -> Result<(StreamBank, BTreeMap<String, String>)> {
        let mut models = BTreeMap::new();
        let mut files = BTreeMap::new();
        for j in self.jobs() {
            let path = self.stream_dir(&j).join("model.json");
            let m = load_checkpoint(&path)
                .map_err(|e| stale("train", format!("checkpoint for {}: {e}", j.name())))?;
            for p in [path.clone(), crate::volstore::blob_path(&path)] {
                files.insert(p.display().to_string(), file_digest(&p)?);
            }
            models.insert(j, m);
        }
        Ok((StreamBank::new(models), files))
    }

    fn ensemble_path(&self, s: Selection) -> PathBuf {
        self.dir("ensemble").join(s.name()).join("meta.json")
    }

    pub fn ensemble(&self) -> Result<StageSummary> {
        self.pool.install(|| {
            let train = self.require("train", true)?;
            let extract = self.require("extract", true)?;
            let folds: Vec<FoldSplit> = read_json(&self.dir("train").join("folds.json"))?;
            let (bank, before) = self.load_bank()?;
            let sets = self.load_patch_sets(Cohort::Train)?;
            let rows = RowInfo::of(&sets)?;
            let table = FeatureTable::compute(&bank, &bank.jobs(), &sets)?;
            let dir = self.fresh("ensemble")?;
            let mut lines = Vec::new();
            for &s in &self.config.selections {
                let inputs = s.inputs(&self.config.geometries, self.config.train.folds);
                let out = train_ensemble(s, &bank, &inputs, &table, &rows, &folds, &self.config.loss, &self.config.meta, self.config.seed)?;
                out.model.save(&self.ensemble_path(s))?;
                write_json(&dir.join(s.name()).join("metrics.json"), &out.row)?;
                lines.push(format!(
                    "{}: {} inputs, validation AUC {}, findings AUC {}",
                    s.name(),
                    inputs.len(),
                    fmt_opt(out.row.validation.auc),
                    fmt_opt(out.row.findings.auc)
                ));
            }
            bank.verify_frozen()?;
            let mut after = BTreeMap::new();
            for p in before.keys() {
                after.insert(p.clone(), file_digest(Path::new(p))?);
            }
            if after != before {
                let changed: Vec<&String> = before.keys().filter(|k| before[*k] != after[*k]).collect();
                return Err(Error::FreezeViolation(format!("checkpoint files changed: {changed:?}")));
            }
            let digests: BTreeMap<String, String> = bank
                .refs(&bank.jobs())?
                .into_iter()
                .map(|r| (r.job().name(), r.digest))
                .collect();
            write_json(&dir.join("frozen.json"), &digests)?;
            self.finish("ensemble", vec![train, extract], true)?;
            Ok(self.summary("ensemble", lines))
        })
    }

    pub fn predict(&self) -> Result<StageSummary> {
        self.pool.install(|| {
            let inputs = vec![
                self.require("preprocess", true)?,
                self.require("train", true)?,
                self.require("ensemble", true)?,
            ];
            let (bank, _) = self.load_bank()?;
            let loaded = self.preprocessed()?;
            let mut test = Vec::new();
            for id in loaded.subject_ids() {
                if loaded.manifest.studies[&id].cohort == Cohort::Test {
                    test.push(loaded.load_study(&id)?);
                }
            }
            let dir = self.fresh("predict")?;
            let mut lines = Vec::new();
            for &s in &self.config.selections {
                let expected = bank.refs(&s.inputs(&self.config.geometries, self.config.train.folds))?;
                let model = EnsembleModel::load(&self.ensemble_path(s), Some(&expected))?;
                use rayon::prelude::*;
                let outcomes: Vec<(String, u32, Result<f64>)> = test
                    .par_iter()
                    .flat_map_iter(|study| {
                        study.findings.iter().map(|f| {
                            (
                                study.subject_id.clone(),
                                f.finding_id,
                                predict_finding(&model, &bank, study, f, &self.config.patch),
                            )
                        })
                    })
                    .collect();
                let mut rows = Vec::new();
                let mut errors = String::from("subject_id,finding_id,error\n");
                for (subject_id, finding_id, r) in outcomes {
                    match r {
                        Ok(probability) => rows.push(Prediction {
                            subject_id,
                            finding_id,
                            probability,
                        }),
                        Err(e @ (Error::FreezeViolation(_) | Error::NonFinite(_) | Error::Tensor(_))) => return Err(e),
                        Err(e) => {
                            errors.push_str(&format!("{subject_id},{finding_id},\"{}\"\n", e.to_string().replace('"', "'")))
                        }
                    }
                }
                write_predictions_csv(&rows, &dir.join(format!("predictions_{}.csv", s.name())))?;
                write_file(&dir.join(format!("errors_{}.csv", s.name())), errors.as_bytes())?;
                lines.push(format!("{}: {} findings scored", s.name(), rows.len()));
            }
            self.finish("predict", inputs, true)?;
            Ok(self.summary("predict", lines))
        })
    }

    pub fn evaluate(&self) -> Result<StageSummary> {
        self.pool.install(|| {
            let upstream = self.require("predict", true)?;
            let truth_path = self
                .truth_path()
                .ok_or_else(|| Error::Usage("evaluate needs `truth` in the configuration".into()))?;
            let truth: BTreeMap<(String, u32), bool> = read_findings_csv(&truth_path)?
                .into_iter()
                .filter(|f| f.clin_sig != ClinSig::Unknown)
                .map(|f| ((f.subject_id, f.finding_id), f.clin_sig == ClinSig::Positive))
                .collect();
            let dir = self.fresh("evaluate")?;
            let mut results: BTreeMap<String, Evaluation> = BTreeMap::new();
            let mut lines = Vec::new();
            for &s in &self.config.selections {
                let preds = read_predictions_csv(&self.dir("predict").join(format!("predictions_{}.csv", s.name())))?;
                let (scores, labels): (Vec<f64>, Vec<bool>) = preds
                    .iter()
                    .filter_map(|p| truth.get(&(p.subject_id.clone(), p.finding_id)).map(|&y| (p.probability, y)))
                    .unzip();
                if scores.is_empty() {
                    return Err(Error::invalid(format!("no `{}` prediction has a ground-truth label", s.name())));
                }
                let e = evaluate(&scores, &labels)?;
                lines.push(format!("{}: {} findings, test AUC {}", s.name(), e.count, fmt_opt(e.auc)));
                results.insert(s.name().to_string(), e);
            }
            write_json(&dir.join("test_metrics.json"), &results)?;
            self.finish("evaluate", vec![upstream], true)?;
            Ok(self.summary("evaluate", lines))
        })
    }

    /// Rebuilds every table and figure from stored metrics.
    pub fn report(&self) -> Result<StageSummary> {
        let mut inputs = vec![self.require("train", true)?, self.require("ensemble", true)?];
        let evaluated = self.require("evaluate", true).ok();
        let dir = self.fresh("report")?;
        let mut lines = Vec::new();
        for (n, family) in self.config.families.iter().enumerate() {
            let mut rows = Vec::new();
            for j in self.jobs().iter().filter(|j| j.family == *family) {
                rows.push(read_json::<MetricRow>(&self.stream_dir(j).join("metrics.json"))?);
            }
            let stem = format!("table{}_{}", n + 1, family.name());
            write_table(&dir, &stem, &format!("{} streams, validation ROC", family.name()), &rows)?;
            lines.push(format!("{stem}.csv: {} rows", rows.len()));
        }
        let mut rows = Vec::new();
        for &s in &self.config.selections {
            rows.push(read_json::<MetricRow>(&self.dir("ensemble").join(s.name()).join("metrics.json"))?);
        }
        write_table(&dir, "table3_ensemble", "stacked ensembles, validation ROC", &rows)?;
        lines.push(format!("table3_ensemble.csv: {} rows", rows.len()));
        if let Some(ev) = evaluated {
            let results: BTreeMap<String, Evaluation> = read_json(&self.dir("evaluate").join("test_metrics.json"))?;
            let mut s = String::from("model,count,positives,accuracy,auc\n");
            for (k, e) in &results {
                s.push_str(&format!("{k},{},{},{},{}\n", e.count, e.positives, fmt_opt(e.accuracy), fmt_opt(e.auc)));
            }
            write_file(&dir.join("test.csv"), s.as_bytes())?;
            lines.push(format!("test.csv: {} rows", results.len()));
            inputs.push(ev);
        }
        self.finish("report", inputs, true)?;
        Ok(self.summary("report", lines))
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageSummary>> {
        let mut out = Vec::new();
        if self.config.manifest.is_none() {
            out.push(self.gen_phantom()?);
        }
        out.push(self.preprocess()?);
        out.push(self.extract()?);
        out.push(self.train(&JobFilter::default())?);
        out.push(self.ensemble()?);
        out.push(self.predict()?);
        if self.truth_path().is_some_and(|p| p.is_file()) {
            out.push(self.evaluate()?);
        }
        out.push(self.report()?);
        Ok(out)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Checkpoint files of a finished train stage, relative to `<output>/train`.
pub fn checkpoint_files(p: &Pipeline) -> Result<Vec<String>> {
    let dir = p.dir("train");
    let set: BTreeSet<String> = list_files(&dir)?
        .iter()
        .map(|f| rel(&dir, f))
        .filter(|r| r.ends_with("model.json") || r.ends_with("model.raw"))
        .collect();
    Ok(set.into_iter().collect())
}
