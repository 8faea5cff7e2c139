//! Patch-size-specific 3D DenseNet streams.
//!
//! ```text
//! conv 3x3x3 (same) -> maxpool 2x2 in-plane
//!   -> [dense block -> transition] x (blocks - 1) -> dense block
//!   -> BN + relu -> global average pool -> dropout
//!   -> FC(head) + relu -> FC(1) -> sigmoid
//! ```
//!
//! A dense layer maps `c` channels to `c + g`: the 1x1x1 bottleneck conv to
//! `b` channels, BN, relu, then BN, relu and a 3x3x3 conv to `g` channels,
//! concatenated onto its input. A transition is BN, relu, a 1x1x1 conv to
//! `floor(compression * c)` channels and a 2x2x2 pool (2x2x1 once depth is 1).
//!
//! Parameter count, with `c_in` the input channels and `f0` the initial
//! filters, summed over every layer:
//!
//! ```text
//! initial conv   27 f0 c_in + f0
//! dense layer    b c + b + 4 b + 27 b g + g      (input width c)
//! transition     2 c + c' c + c'                 (c' = floor(compression c))
//! final BN       2 c
//! head           h c + h + h + 1                 (h = head width)
//! ```

use std::path::Path;

use mpstream_autodiff::{BatchNormState, Graph, Mode, Padding, Parameter, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_file, read_json, write_file, write_json, Error, Result};
use crate::patchgen::Geometry;
use crate::volstore::{blob_path, f32_to_le, le_to_f32};

pub const CHECKPOINT_VERSION: u32 = 1;
/// Samples per eval-mode forward pass.
pub const EVAL_CHUNK: usize = 32;

/// Width and depth choices shared by every stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub growth: usize,
    pub layers_per_block: usize,
    /// Dense blocks; `None` picks 4 for the 96 geometry and 3 otherwise.
    pub blocks: Option<usize>,
    /// Defaults to `2 * growth`.
    pub init_filters: Option<usize>,
    /// Defaults to `4 * growth`.
    pub bottleneck: Option<usize>,
    pub compression: f64,
    pub dropout: f64,
    pub head: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            growth: 12,
            layers_per_block: 4,
            blocks: None,
            init_filters: None,
            bottleneck: None,
            compression: 0.5,
            dropout: 0.2,
            head: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub geometry: Geometry,
    pub channels: usize,
    #[serde(default)]
    pub arch: Architecture,
}

impl StreamConfig {
    pub fn new(geometry: Geometry, channels: usize) -> Self {
        Self {
            geometry,
            channels,
            arch: Architecture::default(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.arch
            .blocks
            .unwrap_or(if self.geometry.h >= 96 { 4 } else { 3 })
    }

    pub fn init_filters(&self) -> usize {
        self.arch.init_filters.unwrap_or(2 * self.arch.growth)
    }

    pub fn bottleneck(&self) -> usize {
        self.arch.bottleneck.unwrap_or(4 * self.arch.growth)
    }

    pub fn transition_width(&self, channels: usize) -> usize {
        (self.arch.compression * channels as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if !matches!(self.blocks(), 3 | 4) {
            return Err(Error::invalid(format!("dense block count must be 3 or 4, got {}", self.blocks())));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::invalid(format!("stream input channels must be 1 or 3, got {}", self.channels)));
        }
        for (name, v) in [
            ("growth", a.growth),
            ("layers_per_block", a.layers_per_block),
            ("init_filters", self.init_filters()),
            ("bottleneck", self.bottleneck()),
            ("head", a.head),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(a.compression > 0.0 && a.compression <= 1.0) {
            return Err(Error::invalid(format!("compression must be in (0, 1], got {}", a.compression)));
        }
        if !(0.0..1.0).contains(&a.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", a.dropout)));
        }
        plan(self).map(|_| ())
    }
}

/// Channel count and `(z, y, x)` extent after a named graph point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanPoint {
    pub name: String,
    pub channels: usize,
    pub extent: [usize; 3],
}

fn pool_window(extent: [usize; 3], pool_depth: bool) -> [usize; 3] {
    if pool_depth && extent[0] >= 2 {
        [2, 2, 2]
    } else {
        [1, 2, 2]
    }
}

fn pooled(name: &str, extent: [usize; 3], window: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if extent[a] < window[a] {
            return Err(Error::invalid(format!(
                "spatial collapse at {name}: extent {:?} cannot be pooled by {:?}",
                extent, window
            )));
        }
        out[a] = (extent[a] - window[a]) / window[a] + 1;
    }
    Ok(out)
}

/// Analytic channel and extent bookkeeping for `config`.
pub fn plan(config: &StreamConfig) -> Result<Vec<PlanPoint>> {
    let mut points = Vec::new();
    let mut extent = config.geometry.zyx();
    let mut c = config.channels;
    let mut push = |name: String, c: usize, e: [usize; 3]| {
        points.push(PlanPoint {
            name,
            channels: c,
            extent: e,
        })
    };
    push("input".into(), c, extent);
    c = config.init_filters();
    push("init.conv".into(), c, extent);
    extent = pooled("init.pool", extent, [1, 2, 2])?;
    push("init.pool".into(), c, extent);
    let blocks = config.blocks();
    for b in 0..blocks {
        for l in 0..config.arch.layers_per_block {
            c += config.arch.growth;
            push(format!("block{b}.layer{l}"), c, extent);
        }
        if b + 1 < blocks {
            c = config.transition_width(c);
            if c == 0 {
                return Err(Error::invalid(format!("transition{b} compresses to zero channels")));
            }
            let name = format!("transition{b}");
            extent = pooled(&name, extent, pool_window(extent, true))?;
            push(name, c, extent);
        }
    }
    push("pool".into(), c, [1, 1, 1]);
    push("head".into(), config.arch.head, [1, 1, 1]);
    push("logit".into(), 1, [1, 1, 1]);
    Ok(points)
}

/// Closed-form parameter count; see the module docs.
pub fn parameter_count(config: &StreamConfig) -> Result<usize> {
    let points = plan(config)?;
    let g = config.arch.growth;
    let b = config.bottleneck();
    let f0 = config.init_filters();
    let h = config.arch.head;
    let mut total = 27 * f0 * config.channels + f0;
    let mut c = f0;
    for p in points.iter().skip(3) {
        if p.name.starts_with("block") {
            total += b * c + b + 4 * b + 27 * b * g + g;
        } else if p.name.starts_with("transition") {
            total += 2 * c + p.channels * c + p.channels;
        } else if p.name == "pool" {
            total += 2 * c + h * c + h + h + 1;
        }
        c = p.channels;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
struct Conv {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    scale: usize,
    shift: usize,
    state: usize,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    reduce: Conv,
    norm_a: Norm,
    norm_b: Norm,
    grow: Conv,
}

#[derive(Debug, Clone)]
struct Transition {
    norm: Norm,
    conv: Conv,
}

#[derive(Debug, Clone)]
struct Layers {
    init: Conv,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_norm: Norm,
    fc1: Conv,
    fc2: Conv,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_seen: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

/// One 3D DenseNet with its parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct StreamModel<T> {
    pub config: StreamConfig,
    pub params: Vec<Parameter<T>>,
    pub norms: Vec<(String, BatchNormState<T>)>,
    pub meta: TrainingMeta,
    layers: Layers,
}

struct Builder<'a, T> {
    params: Vec<Parameter<T>>,
    norms: Vec<(String, BatchNormState<T>)>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let len = shape.iter().product();
        let data: Vec<T> = (0..len).map(|_| T::of(normal.sample(self.rng))).collect();
        self.params.push(Parameter::new(name, Tensor::new(shape, data).expect("shape matches")));
        self.params.len() - 1
    }

    fn fill(&mut self, name: String, len: usize, v: f64) -> usize {
        self.params.push(Parameter::new(name, Tensor::full(vec![len], T::of(v))));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Conv {
        let weight = self.he(format!("{name}.weight"), vec![cout, cin, k, k, k], cin * k * k * k);
        let bias = self.fill(format!("{name}.bias"), cout, 0.0);
        Conv { weight, bias }
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) -> Conv {
        let weight = self.he(format!("{name}.weight"), vec![out, inp], inp);
        let bias = self.fill(format!("{name}.bias"), out, 0.0);
        Conv { weight, bias }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let scale = self.fill(format!("{name}.scale"), c, 1.0);
        let shift = self.fill(format!("{name}.shift"), c, 0.0);
        self.norms.push((name.to_string(), BatchNormState::new(c)));
        Norm {
            scale,
            shift,
            state: self.norms.len() - 1,
        }
    }
}

/// Builds a stream with He-normal weights drawn from `seed` and zero biases.
pub fn build_stream<T: Scalar>(config: &StreamConfig, seed: u64) -> Result<StreamModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: Vec::new(),
        norms: Vec::new(),
        rng: &mut rng,
    };
    let g = config.arch.growth;
    let bw = config.bottleneck();
    let mut c = config.init_filters();
    let init = b.conv("init.conv", c, config.channels, 3);
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    let nb = config.blocks();
    for bi in 0..nb {
        let mut layers = Vec::new();
        for l in 0..config.arch.layers_per_block {
            let p = format!("block{bi}.layer{l}");
            let reduce = b.conv(&format!("{p}.reduce"), bw, c, 1);
            let norm_a = b.norm(&format!("{p}.norm_a"), bw);
            let norm_b = b.norm(&format!("{p}.norm_b"), bw);
            let grow = b.conv(&format!("{p}.grow"), g, bw, 3);
            layers.push(DenseLayer {
                reduce,
                norm_a,
                norm_b,
                grow,
            });
            c += g;
        }
        blocks.push(layers);
        if bi + 1 < nb {
            let p = format!("transition{bi}");
            let norm = b.norm(&format!("{p}.norm"), c);
            let out = config.transition_width(c);
            let conv = b.conv(&format!("{p}.conv"), out, c, 1);
            transitions.push(Transition { norm, conv });
            c = out;
        }
    }
    let final_norm = b.norm("final.norm", c);
    let fc1 = b.dense("head.fc1", config.arch.head, c);
    let fc2 = b.dense("head.fc2", 1, config.arch.head);
    let Builder { params, norms, .. } = b;
    Ok(StreamModel {
        config: config.clone(),
        params,
        norms,
        meta: TrainingMeta::default(),
        layers: Layers {
            init,
            blocks,
            transitions,
            final_norm,
            fc1,
            fc2,
        },
    })
}

/// Graph handles produced by [`StreamModel::forward`].
pub struct Forward {
    /// Pre-sigmoid outputs, shape `(n, 1)`.
    pub logits: Var,
    /// One handle per entry of [`StreamModel::params`], in order.
    pub params: Vec<Var>,
}

impl<T: Scalar> StreamModel<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Expected input shape `(n, c, d, h, w)` for `n` samples.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        let [d, h, w] = self.config.geometry.zyx();
        vec![n, self.config.channels, d, h, w]
    }

    pub fn sample_len(&self) -> usize {
        self.config.channels * self.config.geometry.volume()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = self.input_shape(shape.first().copied().unwrap_or(0));
        if shape != expected.as_slice() || shape[0] == 0 {
            return Err(Error::invalid(format!(
                "stream {} expects input (n, c, d, h, w) = (n, {}, {}, {}, {}), got {:?}",
                self.config.geometry.name(),
                expected[1],
                expected[2],
                expected[3],
                expected[4],
                shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `trace` receives the shape after
    /// every point listed by [`plan`].
    pub fn forward_traced(
        &mut self,
        g: &Graph<T>,
        x: Var,
        mode: Mode,
        dropout_seed: u64,
        mut trace: Option<&mut Vec<(String, Vec<usize>)>>,
    ) -> Result<Forward> {
        self.check_input(&g.shape(x))?;
        let pv: Vec<Var> = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        let norms = &mut self.norms;
        let layers = &self.layers;
        let mut record = |name: String, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name, g.shape(v)));
            }
        };
        let conv = |x: Var, c: &Conv, padding: Padding| {
            g.conv3d(x, pv[c.weight], Some(pv[c.bias]), [1, 1, 1], padding)
        };
        let mut bn_relu = |x: Var, n: &Norm| -> Result<Var> {
            let y = g.batch_norm(x, pv[n.scale], pv[n.shift], &mut norms[n.state].1, mode)?;
            Ok(g.relu(y)?)
        };

        record("input".into(), x);
        let mut h = conv(x, &layers.init, Padding::Same)?;
        record("init.conv".into(), h);
        h = g.maxpool3d(h, [1, 2, 2], [1, 2, 2])?;
        record("init.pool".into(), h);
        for (bi, block) in layers.blocks.iter().enumerate() {
            for (l, layer) in block.iter().enumerate() {
                let r = conv(h, &layer.reduce, Padding::Same)?;
                let r = bn_relu(r, &layer.norm_a)?;
                let r = bn_relu(r, &layer.norm_b)?;
                let new = conv(r, &layer.grow, Padding::Same)?;
                h = g.concat_channels(&[h, new])?;
                record(format!("block{bi}.layer{l}"), h);
            }
            if let Some(t) = layers.transitions.get(bi) {
                let r = bn_relu(h, &t.norm)?;
                let r = conv(r, &t.conv, Padding::Same)?;
                let extent = g.shape(r);
                let window = pool_window([extent[2], extent[3], extent[4]], true);
                h = g.maxpool3d(r, window, window)?;
                record(format!("transition{bi}"), h);
            }
        }
        h = bn_relu(h, &layers.final_norm)?;
        h = g.global_avg_pool(h)?;
        h = g.flatten(h)?;
        record("pool".into(), h);
        h = g.dropout(h, self.config.arch.dropout, mode, dropout_seed)?;
        h = g.fully_connected(h, pv[layers.fc1.weight], Some(pv[layers.fc1.bias]))?;
        h = g.relu(h)?;
        record("head".into(), h);
        let logits = g.fully_connected(h, pv[layers.fc2.weight], Some(pv[layers.fc2.bias]))?;
        record("logit".into(), logits);
        Ok(Forward { logits, params: pv })
    }

    pub fn forward(&mut self, g: &Graph<T>, x: Var, mode: Mode, dropout_seed: u64) -> Result<Forward> {
        self.forward_traced(g, x, mode, dropout_seed, None)
    }

    /// Logits for `n` contiguous `(c, d, h, w)` samples.
    pub fn logits(&mut self, data: &[T], mode: Mode, dropout_seed: u64) -> Result<Vec<f64>> {
        let len = self.sample_len();
        if data.is_empty() || data.len() % len != 0 {
            return Err(Error::invalid(format!(
                "input of {} values is not a whole number of {}-value samples",
                data.len(),
                len
            )));
        }
        let mut out = Vec::with_capacity(data.len() / len);
        for (i, chunk) in data.chunks(EVAL_CHUNK * len).enumerate() {
            let g = Graph::new();
            let x = g.constant(Tensor::new(self.input_shape(chunk.len() / len), chunk.to_vec())?);
            let f = self.forward(&g, x, mode, dropout_seed.wrapping_add(i as u64))?;
            out.extend(g.value(f.logits).data().iter().map(|v| v.as_f64()));
        }
        if let Some(v) = out.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("stream logit {v}")));
        }
        Ok(out)
    }

    /// Eval-mode probabilities in `(0, 1)`.
    pub fn predict(&mut self, data: &[T]) -> Result<Vec<f64>> {
        Ok(self
            .logits(data, Mode::Eval, 0)?
            .into_iter()
            .map(crate::loss::sigmoid)
            .collect())
    }

    /// Values of every parameter and running statistic, in checkpoint order.
    fn snapshot_values(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend(p.value.data().iter().map(|v| v.as_f64() as f32));
        }
        for (_, s) in &self.norms {
            out.extend(s.running_mean.iter().map(|v| v.as_f64() as f32));
            out.extend(s.running_var.iter().map(|v| v.as_f64() as f32));
        }
        out
    }

    /// SHA-256 over parameter names, values and running statistics.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
        }
        h.update(f32_to_le(&self.snapshot_values()));
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> StreamModel<U> {
        StreamModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    velocity: p.velocity.cast(),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        BatchNormState {
                            running_mean: s.running_mean.iter().map(|v| U::of(v.as_f64())).collect(),
                            running_var: s.running_var.iter().map(|v| U::of(v.as_f64())).collect(),
                            initialized: s.initialized,
                        },
                    )
                })
                .collect(),
            meta: self.meta.clone(),
            layers: self.layers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NormEntry {
    name: String,
    channels: usize,
    initialized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: StreamConfig,
    meta: TrainingMeta,
    params: Vec<TensorEntry>,
    batch_norm: Vec<NormEntry>,
}

/// Writes `<path>` (JSON manifest) and its `.raw` blob.
pub fn save_checkpoint(model: &StreamModel<f32>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        meta: model.meta.clone(),
        params: model
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
        batch_norm: model
            .norms
            .iter()
            .map(|(n, s)| NormEntry {
                name: n.clone(),
                channels: s.channels(),
                initialized: s.initialized,
            })
            .collect(),
    };
    write_json(path, &header)?;
    write_file(&blob_path(path), &f32_to_le(&model.snapshot_values()))
}

/// Loads a checkpoint, matching every tensor by name and shape.
pub fn load_checkpoint(path: &Path) -> Result<StreamModel<f32>> {
    let header: CheckpointHeader = read_json(path)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint format {} (expected {CHECKPOINT_VERSION})", header.format_version),
        ));
    }
    let mut model = build_stream::<f32>(&header.config, 0).map_err(|e| Error::format(path, e.to_string()))?;
    let blob = blob_path(path);
    let values = le_to_f32(&read_file(&blob)?).ok_or_else(|| Error::format(&blob, "length is not a multiple of 4"))?;
    let expected: usize = model.parameter_count() + model.norms.iter().map(|(_, s)| 2 * s.channels()).sum::<usize>();
    if values.len() != expected {
        return Err(Error::format(&blob, format!("{} values, expected {expected}", values.len())));
    }
    if header.params.len() != model.params.len() || header.batch_norm.len() != model.norms.len() {
        return Err(Error::format(path, "tensor list does not match the configured architecture"));
    }
    let mut at = 0;
    for (entry, p) in header.params.iter().zip(model.params.iter_mut()) {
        if entry.name != p.name || entry.shape != p.shape() {
            return Err(Error::format(
                path,
                format!("tensor {} {:?} where {} {:?} was expected", entry.name, entry.shape, p.name, p.shape()),
            ));
        }
        let n = p.len();
        p.value.data_mut().copy_from_slice(&values[at..at + n]);
        at += n;
    }
    for (entry, (name, s)) in header.batch_norm.iter().zip(model.norms.iter_mut()) {
        if entry.name != *name || entry.channels != s.channels() {
            return Err(Error::format(path, format!("batch-norm {} does not match {name}", entry.name)));
        }
        let c = s.channels();
        s.running_mean.copy_from_slice(&values[at..at + c]);
        s.running_var.copy_from_slice(&values[at + c..at + 2 * c]);
        s.initialized = entry.initialized;
        at += 2 * c;
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
    }
    model.meta = header.meta;
    Ok(model)
}
