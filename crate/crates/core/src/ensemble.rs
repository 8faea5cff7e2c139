//! Stacked generalization over frozen stream models.
//!
//! Each selected stream contributes one eval-mode probability per patch
//! set; the concatenated vector (geometry-major, fold-minor, composite bank
//! before solo bank) feeds a two-layer meta network `width -> hidden -> 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use mpstream_autodiff::{Graph, Parameter, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densenet::StreamModel;
use crate::error::{read_file, read_json, write_file, write_json, Error, Result};
use crate::loss::{batch_loss, sigmoid, FocalParams};
use crate::metrics::{evaluate, MetricRow};
use crate::patchgen::{
    align_modalities, extract_patch_set, Family, Geometry, PatchSet, PatchSpec, Proposal, Provenance, SampledCenter,
};
use crate::seed::{self, Tag};
use crate::trainer::{sgd_nesterov_step, FoldSplit, StreamJob, TrainConfig};
use crate::volstore::{blob_path, ClinSig, Finding, Study};

pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Composite,
    Solo,
    /// Composite and solo banks together.
    Quadruple,
}

impl Selection {
    pub const ALL: [Selection; 3] = [Selection::Composite, Selection::Solo, Selection::Quadruple];

    pub fn families(self) -> &'static [Family] {
        match self {
            Selection::Composite => &[Family::Composite],
            Selection::Solo => &[Family::Solo],
            Selection::Quadruple => &[Family::Composite, Family::Solo],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Selection::Composite => "composite",
            Selection::Solo => "solo",
            Selection::Quadruple => "quadruple",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Stream order of the meta input vector.
    pub fn inputs(self, geometries: &[Geometry], folds: usize) -> Vec<StreamJob> {
        let mut out = Vec::new();
        for &family in self.families() {
            for &geometry in geometries {
                for fold in 0..folds {
                    out.push(StreamJob { family, geometry, fold });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRef {
    pub family: Family,
    pub geometry: Geometry,
    pub fold: usize,
    /// [`StreamModel::digest`] of the frozen model.
    pub digest: String,
}

impl StreamRef {
    pub fn job(&self) -> StreamJob {
        StreamJob {
            family: self.family,
            geometry: self.geometry,
            fold: self.fold,
        }
    }
}

/// Frozen stream models keyed by job, with their digests at load time.
pub struct StreamBank {
    models: BTreeMap<StreamJob, StreamModel<f32>>,
    digests: BTreeMap<StreamJob, String>,
}

impl StreamBank {
    pub fn new(models: BTreeMap<StreamJob, StreamModel<f32>>) -> Self {
        let digests = models.iter().map(|(j, m)| (*j, m.digest())).collect();
        Self { models, digests }
    }

    pub fn jobs(&self) -> Vec<StreamJob> {
        self.models.keys().copied().collect()
    }

    pub fn get(&self, job: &StreamJob) -> Result<&StreamModel<f32>> {
        self.models.get(job).ok_or_else(|| {
            Error::invalid(format!(
                "no checkpoint for geometry {}, fold {}, family {}",
                job.geometry.name(),
                job.fold,
                job.family.name()
            ))
        })
    }

    pub fn refs(&self, jobs: &[StreamJob]) -> Result<Vec<StreamRef>> {
        jobs.iter()
            .map(|j| {
                self.get(j)?;
                Ok(StreamRef {
                    family: j.family,
                    geometry: j.geometry,
                    fold: j.fold,
                    digest: self.digests[j].clone(),
                })
            })
            .collect()
    }

    /// Fails if any model's parameters or statistics changed since load.
    pub fn verify_frozen(&self) -> Result<()> {
        for (job, m) in &self.models {
            let now = m.digest();
            if now != self.digests[job] {
                return Err(Error::FreezeViolation(format!(
                    "{} digest {} became {now}",
                    job.name(),
                    self.digests[job]
                )));
            }
        }
        Ok(())
    }
}

/// Eval-mode probabilities of one stream on `sets`.
pub fn stream_scores(model: &StreamModel<f32>, job: &StreamJob, sets: &[PatchSet]) -> Result<Vec<f64>> {
    if model.config.geometry != job.geometry || model.config.channels != job.family.channels() {
        return Err(Error::invalid(format!("checkpoint for {} holds a different architecture", job.name())));
    }
    let mut data = Vec::with_capacity(sets.len() * model.sample_len());
    for s in sets {
        s.patch_into(job.geometry, job.family, &mut data);
    }
    model.clone().predict(&data)
}

/// Per-stream probabilities for a list of patch sets, one column per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub rows: usize,
    pub columns: BTreeMap<StreamJob, Vec<f64>>,
}

impl FeatureTable {
    pub fn compute(bank: &StreamBank, jobs: &[StreamJob], sets: &[PatchSet]) -> Result<Self> {
        let cols: Vec<(StreamJob, Vec<f64>)> = jobs
            .par_iter()
            .map(|j| Ok((*j, stream_scores(bank.get(j)?, j, sets)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            rows: sets.len(),
            columns: cols.into_iter().collect(),
        })
    }

    /// Row-major `rows x inputs.len()` features in `inputs` order.
    pub fn features(&self, inputs: &[StreamJob]) -> Result<Vec<f64>> {
        let cols: Vec<&Vec<f64>> = inputs
            .iter()
            .map(|j| {
                self.columns.get(j).ok_or_else(|| {
                    Error::invalid(format!(
                        "no features for geometry {}, fold {}, family {}",
                        j.geometry.name(),
                        j.fold,
                        j.family.name()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            out.extend(cols.iter().map(|c| c[r]));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 50,
            batch_size: 16,
        }
    }
}

impl MetaConfig {
    fn optimizer(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            max_epochs: self.epochs.max(2),
            batch_size: self.batch_size,
            patience: 1,
            folds: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("meta network needs hidden, epochs and batch_size >= 1"));
        }
        self.optimizer().validate()
    }
}

/// `FC(width -> hidden) + relu -> FC(1)`; sigmoid applied on output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet {
    pub width: usize,
    pub params: Vec<Parameter<f64>>,
}

impl MetaNet {
    pub fn new(width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &["meta-init".into()]);
        let mut he = |name: &str, out: usize, inp: usize| {
            let n = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("positive std");
            let data: Vec<f64> = (0..out * inp).map(|_| n.sample(&mut rng)).collect();
            Parameter::new(name, Tensor::new(vec![out, inp], data).expect("shape matches"))
        };
        let w1 = he("fc1.weight", hidden, width);
        let w2 = he("fc2.weight", 1, hidden);
        Self {
            width,
            params: vec![
                w1,
                Parameter::new("fc1.bias", Tensor::zeros(vec![hidden])),
                w2,
                Parameter::new("fc2.bias", Tensor::zeros(vec![1])),
            ],
        }
    }

    pub fn hidden(&self) -> usize {
        self.params[1].len()
    }

    fn graph_logits(&self, g: &Graph<f64>, x: &[f64]) -> Result<(mpstream_autodiff::Var, Vec<mpstream_autodiff::Var>)> {
        let n = x.len() / self.width;
        let xv = g.constant(Tensor::new(vec![n, self.width], x.to_vec())?);
        let pv: Vec<_> = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        let h = g.fully_connected(xv, pv[0], Some(pv[1]))?;
        let h = g.relu(h)?;
        let out = g.fully_connected(h, pv[2], Some(pv[3]))?;
        Ok((out, pv))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.is_empty() || x.len() % self.width != 0 {
            return Err(Error::invalid(format!(
                "meta input of {} values is not a whole number of {}-wide rows",
                x.len(),
                self.width
            )));
        }
        let g = Graph::new();
        let (out, _) = self.graph_logits(&g, x)?;
        let v = g.value(out).data().to_vec();
        if let Some(bad) = v.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("meta logit {bad}")));
        }
        Ok(v)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Mini-batch SGD on focal loss; returns the mean loss of each epoch.
    pub fn train(
        &mut self,
        x: &[f64],
        labels: &[bool],
        loss: &FocalParams,
        cfg: &MetaConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        if labels.is_empty() || x.len() != labels.len() * self.width {
            return Err(Error::invalid(format!(
                "meta training needs {} x {} features, got {} values",
                labels.len(),
                self.width,
                x.len()
            )));
        }
        let opt = cfg.optimizer();
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        let mut batch = Vec::new();
        for epoch in 1..=cfg.epochs {
            order.sort_unstable();
            order.shuffle(&mut seed::rng(seed, &["meta-shuffle".into(), Tag::Index(epoch as u64)]));
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                batch.clear();
                for &i in idx {
                    batch.extend_from_slice(&x[i * self.width..(i + 1) * self.width]);
                }
                let g = Graph::new();
                let (out, pv) = self.graph_logits(&g, &batch)?;
                let logits = g.value(out).data().to_vec();
                let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                let (value, grads) = batch_loss(&logits, &yb, loss)?;
                total += value * idx.len() as f64;
                let obj = g.objective(out, value, grads)?;
                g.backward(obj)?;
                let grads: Vec<_> = pv.iter().map(|&p| g.grad(p)).collect();
                sgd_nesterov_step(&mut self.params, &grads, &opt)?;
            }
            curve.push(total / labels.len() as f64);
        }
        Ok(curve)
    }
}

/// Frozen stream references plus the trained meta network.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub selection: Selection,
    pub inputs: Vec<StreamRef>,
    pub net: MetaNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnsembleHeader {
    format_version: u32,
    selection: Selection,
    inputs: Vec<StreamRef>,
    layers: Vec<(String, Vec<usize>)>,
    dtype: String,
}

impl EnsembleModel {
    pub fn jobs(&self) -> Vec<StreamJob> {
        self.inputs.iter().map(StreamRef::job).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = EnsembleHeader {
            format_version: ENSEMBLE_VERSION,
            selection: self.selection,
            inputs: self.inputs.clone(),
            layers: self.net.params.iter().map(|p| (p.name.clone(), p.shape().to_vec())).collect(),
            dtype: "f64le".into(),
        };
        write_json(path, &header)?;
        let mut blob = Vec::new();
        for p in &self.net.params {
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(&blob_path(path), &blob)
    }

    /// Loads an ensemble; `expected`, when given, must match the stored
    /// input ordering and digests exactly.
    pub fn load(path: &Path, expected: Option<&[StreamRef]>) -> Result<Self> {
        let h: EnsembleHeader = read_json(path)?;
        if h.format_version != ENSEMBLE_VERSION || h.dtype != "f64le" {
            return Err(Error::format(path, "unsupported ensemble format"));
        }
        if let Some(exp) = expected {
            if exp != h.inputs.as_slice() {
                let first = exp
                    .iter()
                    .zip(&h.inputs)
                    .position(|(a, b)| a != b)
                    .unwrap_or(exp.len().min(h.inputs.len()));
                return Err(Error::format(
                    path,
                    format!(
                        "meta input ordering differs from the available streams at position {first} ({} stored, {} expected)",
                        h.inputs.len(),
                        exp.len()
                    ),
                ));
            }
        }
        let width = h.inputs.len();
        let hidden = h.layers.first().map(|l| l.1[0]).unwrap_or(0);
        let mut net = MetaNet::new(width, hidden.max(1), 0);
        let shapes: Vec<(String, Vec<usize>)> =
            net.params.iter().map(|p| (p.name.clone(), p.shape().to_vec())).collect();
        if shapes != h.layers {
            return Err(Error::format(path, format!("meta layers {:?} do not fit {width} inputs", h.layers)));
        }
        let blob = blob_path(path);
        let bytes = read_file(&blob)?;
        let total: usize = net.params.iter().map(|p| p.len()).sum();
        if bytes.len() != total * 8 {
            return Err(Error::format(&blob, format!("{} bytes, expected {}", bytes.len(), total * 8)));
        }
        let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for p in &mut net.params {
            for v in p.value.data_mut() {
                *v = vals.next().expect("length checked");
            }
        }
        Ok(Self {
            selection: h.selection,
            inputs: h.inputs,
            net,
        })
    }
}

/// Labels, subjects and provenance of the rows of a [`FeatureTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct RowInfo {
    pub labels: Vec<bool>,
    pub subjects: Vec<String>,
    pub finding_centered: Vec<bool>,
}

impl RowInfo {
    pub fn of(sets: &[PatchSet]) -> Result<Self> {
        let mut labels = Vec::with_capacity(sets.len());
        for s in sets {
            labels.push(match s.label {
                ClinSig::Positive => true,
                ClinSig::Negative => false,
                ClinSig::Unknown => {
                    return Err(Error::invalid(format!("unlabelled patch of {} in the training cohort", s.subject_id)))
                }
            });
        }
        Ok(Self {
            labels,
            subjects: sets.iter().map(|s| s.subject_id.clone()).collect(),
            finding_centered: sets.iter().map(|s| s.finding_id().is_some()).collect(),
        })
    }
}

fn take(x: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&x[r * width..(r + 1) * width]);
    }
    out
}

/// Outcome of [`train_ensemble`].
pub struct EnsembleOutcome {
    /// Meta network fitted on every training-cohort finding.
    pub model: EnsembleModel,
    /// Training: final model on all training patches. Validation and
    /// findings: per-fold meta networks on their held-out subjects, pooled.
    pub row: MetricRow,
    pub out_of_fold: Vec<f64>,
}

/// Fits the meta network of `selection` on finding-centered rows.
///
/// For each fold a meta network is fitted on the findings of the fold's
/// training subjects and scored on its validation subjects; the pooled
/// held-out scores give the validation columns. The final model is then
/// fitted on all findings.
pub fn train_ensemble(
    selection: Selection,
    bank: &StreamBank,
    inputs: &[StreamJob],
    table: &FeatureTable,
    rows: &RowInfo,
    folds: &[FoldSplit],
    loss: &FocalParams,
    cfg: &MetaConfig,
    master_seed: u64,
) -> Result<EnsembleOutcome> {
    let refs = bank.refs(inputs)?;
    let width = inputs.len();
    let x = table.features(inputs)?;
    if table.rows != rows.labels.len() {
        return Err(Error::invalid("feature rows and row labels differ in length"));
    }
    let findings: Vec<usize> = (0..table.rows).filter(|&r| rows.finding_centered[r]).collect();
    let fit = |train_rows: &[usize], tag: Tag<'_>| -> Result<MetaNet> {
        let s = seed::derive(master_seed, &["meta".into(), selection.name().into(), tag]);
        let mut net = MetaNet::new(width, cfg.hidden, s);
        let labels: Vec<bool> = train_rows.iter().map(|&r| rows.labels[r]).collect();
        net.train(&take(&x, width, train_rows), &labels, loss, cfg, s)?;
        Ok(net)
    };
    let mut oof = vec![f64::NAN; table.rows];
    for split in folds {
        let val: BTreeSet<&str> = split.validation.iter().map(String::as_str).collect();
        let train_rows: Vec<usize> = findings
            .iter()
            .copied()
            .filter(|&r| !val.contains(rows.subjects[r].as_str()))
            .collect();
        let val_rows: Vec<usize> = (0..table.rows).filter(|&r| val.contains(rows.subjects[r].as_str())).collect();
        if train_rows.is_empty() || val_rows.is_empty() {
            return Err(Error::invalid(format!("fold {} leaves no meta training or validation rows", split.fold)));
        }
        let net = fit(&train_rows, Tag::Index(split.fold as u64))?;
        for (r, p) in val_rows.iter().zip(net.predict(&take(&x, width, &val_rows))?) {
            oof[*r] = p;
        }
    }
    if oof.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("folds do not cover every training subject"));
    }
    let net = fit(&findings, "final".into())?;
    let train_scores = net.predict(&x)?;
    let (fs, fl): (Vec<f64>, Vec<bool>) = findings.iter().map(|&r| (oof[r], rows.labels[r])).unzip();
    let row = MetricRow {
        model: selection.name().to_string(),
        fold: None,
        training: evaluate(&train_scores, &rows.labels)?,
        validation: evaluate(&oof, &rows.labels)?,
        findings: evaluate(&fs, &fl)?,
    };
    bank.verify_frozen()?;
    Ok(EnsembleOutcome {
        model: EnsembleModel {
            selection,
            inputs: refs,
            net,
        },
        row,
        out_of_fold: oof,
    })
}

/// Meta features of one patch set, in the ensemble's input order.
pub fn meta_features(ensemble: &EnsembleModel, bank: &StreamBank, set: &PatchSet) -> Result<Vec<f64>> {
    ensemble
        .inputs
        .iter()
        .map(|r| {
            let job = r.job();
            let m = bank.get(&job)?;
            if bank.digests[&job] != r.digest {
                return Err(Error::FreezeViolation(format!(
                    "{} no longer matches the digest recorded in the ensemble",
                    job.name()
                )));
            }
            Ok(stream_scores(m, &job, std::slice::from_ref(set))?[0])
        })
        .collect()
}

/// Probability that `finding` of a standardized `study` is clinically
/// significant.
pub fn predict_finding(
    ensemble: &EnsembleModel,
    bank: &StreamBank,
    study: &Study,
    finding: &Finding,
    spec: &PatchSpec,
) -> Result<f64> {
    let index = align_modalities(study, finding)?;
    let center = SampledCenter {
        index,
        provenance: Provenance::FindingCentered(finding.finding_id),
        proposal: Proposal::Forced,
    };
    let set = extract_patch_set(study, &center, spec)
        .map_err(|e| Error::invalid(format!("finding {} of {}: {e}", finding.finding_id, study.subject_id)))?;
    let x = meta_features(ensemble, bank, &set)?;
    Ok(ensemble.net.predict(&x)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchgen::GEOMETRIES;

    #[test]
    fn input_widths_and_order() {
        assert_eq!(Selection::Composite.inputs(&GEOMETRIES, 5).len(), 20);
        let q = Selection::Quadruple.inputs(&GEOMETRIES, 5);
        assert_eq!(q.len(), 40);
        assert_eq!((q[0].geometry, q[0].fold), (GEOMETRIES[0], 0));
        assert_eq!((q[1].geometry, q[1].fold), (GEOMETRIES[0], 1));
        assert_eq!(q[5].geometry, GEOMETRIES[1]);
        assert!(q[..20].iter().all(|j| j.family == Family::Composite));
        assert!(q[20..].iter().all(|j| j.family == Family::Solo));
    }

    #[test]
    fn meta_net_learns_a_threshold() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64) / 40.0).collect();
        let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let mut net = MetaNet::new(1, 16, 3);
        let cfg = MetaConfig {
            epochs: 200,
            learning_rate: 0.1,
            ..MetaConfig::default()
        };
        let curve = net.train(&x, &labels, &FocalParams::default(), &cfg, 1).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let p = net.predict(&x).unwrap();
        assert!(p[39] > p[0]);
    }

    #[test]
    fn save_load_checks_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let inputs: Vec<StreamRef> = Selection::Solo
            .inputs(&GEOMETRIES, 2)
            .iter()
            .map(|j| StreamRef {
                family: j.family,
                geometry: j.geometry,
                fold: j.fold,
                digest: format!("d{}", j.fold),
            })
            .collect();
        let e = EnsembleModel {
            selection: Selection::Solo,
            inputs: inputs.clone(),
            net: MetaNet::new(inputs.len(), 16, 2),
        };
        let path = dir.path().join("meta.json");
        e.save(&path).unwrap();
        assert_eq!(EnsembleModel::load(&path, Some(&inputs)).unwrap(), e);
        let mut swapped = inputs.clone();
        swapped.swap(0, 1);
        assert!(EnsembleModel::load(&path, Some(&swapped)).is_err());
    }
}
