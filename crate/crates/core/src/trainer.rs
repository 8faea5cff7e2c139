//! Cross-validation folds, SGD with Nesterov momentum, and the per-stream
//! training loop with early stopping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use mpstream_autodiff::{Graph, Mode, Parameter, Scalar, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densenet::{build_stream, Architecture, StreamConfig, StreamModel};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, FocalParams};
use crate::metrics::{evaluate, MetricRow};
use crate::patchgen::{Family, Geometry, PatchSet};
use crate::seed::{self, Tag};
use crate::seed_of;
use crate::volstore::ClinSig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a lower validation loss before stopping.
    pub patience: usize,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            momentum: 0.9,
            weight_decay: 1e-5,
            max_epochs: 200,
            batch_size: 72,
            patience: 20,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "training needs learning_rate >= 0, momentum in [0, 1) and weight_decay >= 0",
            ));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.folds < 2 {
            return Err(Error::invalid(
                "training needs max_epochs, batch_size and patience >= 1 and folds >= 2",
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Subject-level folds stratified by whether a subject has a positive
/// finding. Each stratum is shuffled, then dealt round-robin, positives
/// first, so fold sizes differ by at most one.
pub fn make_folds(subjects: &[(String, bool)], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    let unique: BTreeMap<&str, bool> = subjects.iter().map(|(s, p)| (s.as_str(), *p)).collect();
    if unique.len() != subjects.len() {
        return Err(Error::invalid("duplicate subject ids in fold input"));
    }
    if unique.len() < k {
        return Err(Error::invalid(format!("{} subjects cannot fill {k} folds", unique.len())));
    }
    let mut rng = seed::rng(seed, &["folds".into()]);
    let mut pos: Vec<&str> = unique.iter().filter(|(_, &p)| p).map(|(s, _)| *s).collect();
    let mut neg: Vec<&str> = unique.iter().filter(|(_, &p)| !p).map(|(s, _)| *s).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut members = vec![BTreeSet::new(); k];
    for (i, s) in pos.iter().chain(neg.iter()).enumerate() {
        members[i % k].insert(*s);
    }
    Ok((0..k)
        .map(|f| FoldSplit {
            fold: f,
            validation: members[f].iter().map(|s| s.to_string()).collect(),
            train: unique
                .keys()
                .filter(|s| !members[f].contains(*s))
                .map(|s| s.to_string())
                .collect(),
        })
        .collect())
}

/// One Nesterov step with coupled L2 decay:
///
/// ```text
/// g' = g + weight_decay w
/// v  = momentum v - lr g'
/// w  = w + momentum v - lr g'
/// ```
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut [Parameter<T>],
    grads: &[Option<Tensor<T>>],
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    for (p, g) in params.iter_mut().zip(grads) {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter {}", p.name)))?;
        if g.shape() != p.shape() {
            return Err(Error::invalid(format!(
                "gradient for {} has shape {:?}, expected {:?}",
                p.name,
                g.shape(),
                p.shape()
            )));
        }
        let w = p.value.data_mut();
        let v = p.velocity.data_mut();
        for i in 0..w.len() {
            let eff = g.data()[i].as_f64() + wd * w[i].as_f64();
            let vel = mu * v[i].as_f64() - lr * eff;
            v[i] = T::of(vel);
            w[i] = T::of(w[i].as_f64() + mu * vel - lr * eff);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Only a strictly lower loss counts as an improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        match self.best {
            Some((_, b)) if loss >= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Patches of one geometry and channel family, stacked `(n, c, d, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchData {
    pub sample_len: usize,
    pub data: Vec<f32>,
    pub labels: Vec<bool>,
    pub subjects: Vec<String>,
    pub finding_centered: Vec<bool>,
}

impl PatchData {
    pub fn from_sets<'a>(
        sets: impl IntoIterator<Item = &'a PatchSet>,
        geometry: Geometry,
        family: Family,
    ) -> Result<Self> {
        let sample_len = geometry.volume() * family.channels();
        let mut d = PatchData {
            sample_len,
            data: Vec::new(),
            labels: Vec::new(),
            subjects: Vec::new(),
            finding_centered: Vec::new(),
        };
        for s in sets {
            let label = match s.label {
                ClinSig::Positive => true,
                ClinSig::Negative => false,
                ClinSig::Unknown => {
                    return Err(Error::invalid(format!(
                        "patch of {} at {:?} has no label",
                        s.subject_id, s.index
                    )))
                }
            };
            s.patch_into(geometry, family, &mut d.data);
            d.labels.push(label);
            d.subjects.push(s.subject_id.clone());
            d.finding_centered.push(s.finding_id().is_some());
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.data[i * self.sample_len..(i + 1) * self.sample_len]
    }
}

/// Seeds of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSeeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's mini-batches, weighted by batch size.
    pub train_loss: f64,
    /// Eval-mode loss after the epoch.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
        }
        s
    }
}

fn signed(labels: &[bool]) -> Vec<f64> {
    labels.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect()
}

/// Mean focal loss of `model` over `data` in eval mode.
pub fn eval_loss(model: &mut StreamModel<f32>, data: &PatchData, loss: &FocalParams) -> Result<f64> {
    let logits = model.logits(&data.data, Mode::Eval, 0)?;
    Ok(batch_loss(&logits, &signed(&data.labels), loss)?.0)
}

fn check_data(model: &StreamModel<f32>, data: &PatchData, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    if data.sample_len != model.sample_len() {
        return Err(Error::invalid(format!(
            "{what} patches hold {} values, stream {} expects {}",
            data.sample_len,
            model.config.geometry.name(),
            model.sample_len()
        )));
    }
    Ok(())
}

/// Trains until `max_epochs` or until validation loss stalls for `patience`
/// epochs, then restores the weights of the best epoch.
pub fn train_stream(
    model: &mut StreamModel<f32>,
    train: &PatchData,
    val: &PatchData,
    loss: &FocalParams,
    cfg: &TrainConfig,
    seeds: StreamSeeds,
) -> Result<History> {
    cfg.validate()?;
    loss.validate()?;
    check_data(model, train, "training")?;
    check_data(model, val, "validation")?;
    let val_pos = val.labels.iter().filter(|&&y| y).count();
    if val_pos == 0 || val_pos == val.len() {
        return Err(Error::invalid(format!(
            "validation fold has a single class ({val_pos} of {} positive); AUC is undefined",
            val.len()
        )));
    }
    let labels = signed(&train.labels);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size * train.sample_len);
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seeds.shuffle, &[Tag::Index(epoch as u64)]));
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            for &i in idx {
                batch.extend_from_slice(train.sample(i));
            }
            let g = Graph::new();
            let x = g.constant(Tensor::new(model.input_shape(idx.len()), batch.clone())?);
            let f = model.forward(&g, x, Mode::Train, seed_of!(seeds.dropout, epoch, b))?;
            let logits: Vec<f64> = g.value(f.logits).data().iter().map(|v| v.as_f64()).collect();
            let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
            let (value, grads) = batch_loss(&logits, &y, loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            total += value * idx.len() as f64;
            let obj = g.objective(f.logits, value as f32, grads.iter().map(|&v| v as f32).collect())?;
            g.backward(obj)?;
            let grads: Vec<_> = f.params.iter().map(|&p| g.grad(p)).collect();
            sgd_nesterov_step(&mut model.params, &grads, cfg)?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = eval_loss(model, val, loss)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        model.meta.epochs_seen += 1;
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best = model.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    let epochs_seen = model.meta.epochs_seen;
    *model = best;
    model.meta.epochs_seen = epochs_seen;
    model.meta.best_epoch = Some(best_epoch);
    model.meta.best_val_loss = Some(best_val_loss);
    Ok(History {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

/// One (family, geometry, fold) training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamJob {
    pub family: Family,
    pub geometry: Geometry,
    pub fold: usize,
}

impl StreamJob {
    pub fn name(&self) -> String {
        format!("{}/{}/fold{}", self.family.name(), self.geometry.name(), self.fold)
    }

    pub fn seeds(&self, master: u64) -> StreamSeeds {
        let f = self.family.name();
        let g = self.geometry.name();
        StreamSeeds {
            init: seed_of!(master, "init", f, g.as_str(), self.fold),
            shuffle: seed_of!(master, "shuffle", f, g.as_str(), self.fold),
            dropout: seed_of!(master, "dropout", f, g.as_str(), self.fold),
        }
    }
}

/// Split predicate restricting `--only`-style runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFilter {
    pub family: Option<Family>,
    pub geometry: Option<Geometry>,
    pub fold: Option<usize>,
}

impl JobFilter {
    /// Parses `family=composite,geometry=96,fold=2`; every key is optional.
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = JobFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("filter term `{part}` is not key=value")))?;
            match k.trim() {
                "family" => {
                    f.family = Some(Family::parse(v.trim()).ok_or_else(|| Error::Usage(format!("unknown family `{v}`")))?)
                }
                "geometry" => {
                    f.geometry =
                        Some(Geometry::parse(v.trim()).ok_or_else(|| Error::Usage(format!("unknown geometry `{v}`")))?)
                }
                "fold" => {
                    f.fold = Some(v.trim().parse().map_err(|_| Error::Usage(format!("fold `{v}` is not a number")))?)
                }
                other => return Err(Error::Usage(format!("unknown filter key `{other}`"))),
            }
        }
        Ok(f)
    }

    pub fn matches(&self, job: &StreamJob) -> bool {
        self.family.is_none_or(|f| f == job.family)
            && self.geometry.is_none_or(|g| g == job.geometry)
            && self.fold.is_none_or(|k| k == job.fold)
    }

    pub fn is_empty(&self) -> bool {
        *self == JobFilter::default()
    }
}

/// Jobs in family, geometry, fold order.
pub fn all_jobs(families: &[Family], geometries: &[Geometry], folds: usize) -> Vec<StreamJob> {
    let mut jobs = Vec::new();
    for &family in families {
        for &geometry in geometries {
            for fold in 0..folds {
                jobs.push(StreamJob { family, geometry, fold });
            }
        }
    }
    jobs
}

/// Train-mode-free metrics of a trained stream on its fold.
pub fn evaluate_stream(
    model: &mut StreamModel<f32>,
    label: &str,
    fold: usize,
    train: &PatchData,
    val: &PatchData,
) -> Result<MetricRow> {
    let train_scores = model.predict(&train.data)?;
    let val_scores = model.predict(&val.data)?;
    row_from_scores(label, Some(fold), (&train_scores, train), (&val_scores, val))
}

pub(crate) fn row_from_scores(
    label: &str,
    fold: Option<usize>,
    train: (&[f64], &PatchData),
    val: (&[f64], &PatchData),
) -> Result<MetricRow> {
    let (fs, fl): (Vec<f64>, Vec<bool>) = val
        .0
        .iter()
        .zip(&val.1.labels)
        .zip(&val.1.finding_centered)
        .filter(|(_, &c)| c)
        .map(|((&s, &y), _)| (s, y))
        .unzip();
    Ok(MetricRow {
        model: label.to_string(),
        fold,
        training: evaluate(train.0, &train.1.labels)?,
        validation: evaluate(val.0, &val.1.labels)?,
        findings: evaluate(&fs, &fl)?,
    })
}

/// A finished stream: weights restored to the best epoch, plus its record.
pub struct StreamOutcome {
    pub job: StreamJob,
    pub model: StreamModel<f32>,
    pub history: History,
    pub row: MetricRow,
}

/// Everything a set of stream jobs needs besides the patches.
#[derive(Debug, Clone)]
pub struct StreamPlan<'a> {
    pub arch: &'a BTreeMap<String, Architecture>,
    pub default_arch: &'a Architecture,
    pub train: &'a TrainConfig,
    pub loss: &'a FocalParams,
    pub folds: &'a [FoldSplit],
    pub master_seed: u64,
}

impl StreamPlan<'_> {
    pub fn stream_config(&self, job: &StreamJob) -> StreamConfig {
        StreamConfig {
            geometry: job.geometry,
            channels: job.family.channels(),
            arch: self
                .arch
                .get(&job.geometry.name())
                .unwrap_or(self.default_arch)
                .clone(),
        }
    }
}

/// Trains `job` on the training cohort patch sets.
pub fn run_stream(plan: &StreamPlan<'_>, job: &StreamJob, sets: &[PatchSet]) -> Result<StreamOutcome> {
    let split = plan
        .folds
        .iter()
        .find(|f| f.fold == job.fold)
        .ok_or_else(|| Error::invalid(format!("no fold {} in the split", job.fold)))?;
    let val_ids: BTreeSet<&str> = split.validation.iter().map(String::as_str).collect();
    let train_ids: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let train = PatchData::from_sets(
        sets.iter().filter(|s| train_ids.contains(s.subject_id.as_str())),
        job.geometry,
        job.family,
    )?;
    let val = PatchData::from_sets(
        sets.iter().filter(|s| val_ids.contains(s.subject_id.as_str())),
        job.geometry,
        job.family,
    )?;
    let seeds = job.seeds(plan.master_seed);
    let mut model = build_stream::<f32>(&plan.stream_config(job), seeds.init)?;
    let history = train_stream(&mut model, &train, &val, plan.loss, plan.train, seeds)
        .map_err(|e| annotate(e, job))?;
    let row = evaluate_stream(&mut model, &job.geometry.name(), job.fold, &train, &val)?;
    Ok(StreamOutcome {
        job: *job,
        model,
        history,
        row,
    })
}

fn annotate(e: Error, job: &StreamJob) -> Error {
    match e {
        Error::Invalid(m) => Error::Invalid(format!("{}: {m}", job.name())),
        Error::NonFinite(m) => Error::NonFinite(format!("{}: {m}", job.name())),
        other => other,
    }
}

/// Runs `jobs` on the current rayon pool, handing each outcome to `sink`
/// as it completes. Results do not depend on the pool size.
pub fn run_all_streams<F>(plan: &StreamPlan<'_>, jobs: &[StreamJob], sets: &[PatchSet], sink: F) -> Result<Vec<MetricRow>>
where
    F: Fn(&StreamOutcome) -> Result<()> + Sync,
{
    jobs.par_iter()
        .map(|job| {
            let outcome = run_stream(plan, job, sets)?;
            sink(&outcome)?;
            Ok(outcome.row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_off_is_plain_sgd() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![Parameter::new("w", Tensor::new(vec![2], vec![1.0f64, -2.0]).unwrap())];
        let g = vec![Some(Tensor::new(vec![2], vec![0.5, 0.25]).unwrap())];
        sgd_nesterov_step(&mut p, &g, &cfg).unwrap();
        assert_eq!(p[0].value.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![Parameter::new("w", Tensor::new(vec![1], vec![3.0f64]).unwrap())];
        sgd_nesterov_step(&mut p, &[Some(Tensor::zeros(vec![1]))], &cfg).unwrap();
        assert_eq!(p[0].value.data(), &[3.0]);
        assert!(sgd_nesterov_step(&mut p, &[None], &cfg).is_err());
    }

    #[test]
    fn patience_arithmetic() {
        let mut es = EarlyStopping::new(3);
        let curve = [1.0, 0.9, 0.8, 0.7, 0.6, 0.6, 0.65, 0.6, 0.5];
        let mut stop = None;
        for (i, &v) in curve.iter().enumerate() {
            if es.observe(i + 1, v) == Verdict::Stop {
                stop = Some(i + 1);
                break;
            }
        }
        assert_eq!(stop, Some(8));
        assert_eq!(es.best(), Some((5, 0.6)));
    }

    #[test]
    fn fold_partition() {
        let subjects: Vec<(String, bool)> = (0..10).map(|i| (format!("S{i:02}"), i % 3 == 0)).collect();
        let folds = make_folds(&subjects, 5, 7).unwrap();
        let mut seen = BTreeSet::new();
        for f in &folds {
            assert_eq!(f.validation.len(), 2);
            assert_eq!(f.train.len(), 8);
            for s in &f.validation {
                assert!(seen.insert(s.clone()));
                assert!(!f.train.contains(s));
            }
        }
        assert_eq!(seen.len(), 10);
        assert_eq!(folds, make_folds(&subjects, 5, 7).unwrap());
        assert!(make_folds(&subjects[..4], 5, 7).is_err());
    }

    #[test]
    fn filter_parsing() {
        let f = JobFilter::parse("geometry=96,fold=2").unwrap();
        assert_eq!(f.geometry.unwrap().h, 96);
        assert_eq!(f.fold, Some(2));
        assert!(f.family.is_none());
        assert!(JobFilter::parse("size=3").is_err());
        assert!(JobFilter::parse("").unwrap().is_empty());
    }
}
