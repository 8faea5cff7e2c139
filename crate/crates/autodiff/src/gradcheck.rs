//! Central finite-difference gradient checks in `f64`.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_abs: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`, maximized.
    pub max_rel: f64,
    /// Number of elements compared.
    pub checked: usize,
}

/// Denominator floor so gradients that are zero up to rounding compare
/// absolutely instead of blowing up the ratio.
pub const REL_FLOOR: f64 = 1e-3;

/// Relative gap between one-sided slopes treated as a kink inside the step.
const KINK_JUMP: f64 = 1e-2;
const MAX_REFINEMENTS: usize = 2;

/// Compares gradients of `build` with respect to every element of `inputs`.
///
/// `build` receives a fresh graph and one parameter per input and must
/// return a scalar loss. It is called once plus twice per checked element, so it
/// must be deterministic.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
        .collect();
    check_elements(inputs, &all, eps, build)
}

/// Like [`check`] but only perturbs the listed `(input, element)` pairs.
pub fn check_elements<F>(
    inputs: &[Tensor<f64>],
    elements: &[(usize, usize)],
    eps: f64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&g, &vars)?;
        let v = g.value(loss).data()[0];
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let mut report = GradReport {
        max_abs: 0.0,
        max_rel: 0.0,
        checked: 0,
    };
    let centre = eval(inputs)?;
    let mut work = inputs.to_vec();
    for &(k, i) in elements {
        let orig = inputs[k].data()[i];
        let mut h = eps;
        let mut numeric;
        let mut refinements = 0;
        loop {
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            numeric = (up - down) / (2.0 * h);
            // One-sided slopes that disagree mean a relu or max-pool kink lies
            // inside the step; shrink until the step clears it.
            let (fwd, bwd) = ((up - centre) / h, (centre - down) / h);
            let jump = (fwd - bwd).abs();
            if jump <= KINK_JUMP * fwd.abs().max(bwd.abs()).max(REL_FLOOR) || refinements == MAX_REFINEMENTS {
                break;
            }
            h /= 10.0;
            refinements += 1;
        }
        let a = analytic[k].data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs = report.max_abs.max(abs);
        report.max_rel = report.max_rel.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Randomized gradient-check instances, one generator per operator.
///
/// Each case builds shapes and values from `seed`, attaches a random
/// linear read-out so every output element carries a distinct weight, and
/// returns the worst disagreement with central differences.
pub mod cases {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check, GradReport};
    use crate::error::Result;
    use crate::graph::{Graph, Var};
    use crate::kernels::conv::Padding;
    use crate::kernels::norm::BatchNormState;
    use crate::tensor::Tensor;
    use crate::Mode;

    /// Finite-difference step used by every case.
    pub const STEP: f64 = 1e-5;

    pub type Case = fn(u64) -> Result<GradReport>;

    /// All operator cases by name.
    pub fn all() -> Vec<(&'static str, Case)> {
        vec![
            ("conv3d", conv3d as Case),
            ("maxpool3d", maxpool3d),
            ("global_avg_pool", global_avg_pool),
            ("batch_norm_train", batch_norm_train),
            ("batch_norm_eval", batch_norm_eval),
            ("relu", relu),
            ("sigmoid", sigmoid),
            ("fully_connected", fully_connected),
            ("concat_channels", concat_channels),
            ("dropout_train", dropout_train),
            ("dropout_eval", dropout_eval),
            ("flatten_add_mul_mean", elementwise),
            ("composite", composite),
        ]
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
    }

    /// Values bounded away from zero so relu never sits on its kink.
    fn off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = 0.05 + rng.random::<f64>();
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
    }

    /// Distinct values with gaps far above the step, in shuffled order.
    fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        Tensor::new(shape, order.iter().map(|&k| k as f64 * 0.1 - 1.0).collect())
            .expect("shape product")
    }

    /// `sum(y * r)` for a fixed random `r` drawn from `seed`.
    fn readout(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut r = rng(seed ^ 0x5eed);
        let w = uniform(&mut r, g.shape(y), 1.0);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
        [
            r.random_range(lo..=hi),
            r.random_range(lo..=hi),
            r.random_range(lo..=hi),
        ]
    }

    pub fn conv3d(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let n = r.random_range(1..=2);
        let cin = r.random_range(1..=3);
        let cout = r.random_range(1..=3);
        let k = dims(&mut r, 1, 3);
        let stride = dims(&mut r, 1, 2);
        let padding = if r.random::<bool>() {
            Padding::Same
        } else {
            Padding::Valid
        };
        let sp = [
            k[0] + r.random_range(0..=2),
            k[1] + r.random_range(0..=2),
            k[2] + r.random_range(0..=2),
        ];
        let x = uniform(&mut r, vec![n, cin, sp[0], sp[1], sp[2]], 1.0);
        let w = uniform(&mut r, vec![cout, cin, k[0], k[1], k[2]], 0.5);
        let b = uniform(&mut r, vec![cout], 0.5);
        check(&[x, w, b], STEP, |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), stride, padding)?;
            readout(g, y, seed)
        })
    }

    pub fn maxpool3d(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let window = dims(&mut r, 1, 2);
        let stride = dims(&mut r, 1, 2);
        let sp = dims(&mut r, 2, 4);
        let c = r.random_range(1..=2);
        let x = distinct(&mut r, vec![1, c, sp[0], sp[1], sp[2]]);
        check(&[x], STEP, |g, v| {
            let y = g.maxpool3d(v[0], window, stride)?;
            readout(g, y, seed)
        })
    }

    pub fn global_avg_pool(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let sp = dims(&mut r, 1, 3);
        let c = r.random_range(1..=3);
        let x = uniform(&mut r, vec![2, c, sp[0], sp[1], sp[2]], 1.0);
        check(&[x], STEP, |g, v| {
            let y = g.global_avg_pool(v[0])?;
            readout(g, y, seed)
        })
    }

    fn bn_inputs(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let c = r.random_range(1..=3);
        let sp = dims(r, 1, 3);
        let n = r.random_range(2..=3);
        let x = uniform(r, vec![n, c, sp[0], sp[1], sp[2]], 2.0);
        let scale = Tensor::from_fn(vec![c], |_| 0.5 + r.random::<f64>());
        let shift = uniform(r, vec![c], 1.0);
        (x, scale, shift)
    }

    pub fn batch_norm_train(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let (x, s, b) = bn_inputs(&mut r);
        check(&[x, s, b], STEP, |g, v| {
            let mut st = BatchNormState::new(g.shape(v[1])[0]);
            let y = g.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train)?;
            readout(g, y, seed)
        })
    }

    pub fn batch_norm_eval(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let (x, s, b) = bn_inputs(&mut r);
        let warm = uniform(&mut r, x.shape().to_vec(), 3.0);
        check(&[x, s, b], STEP, |g, v| {
            let mut st = BatchNormState::new(g.shape(v[1])[0]);
            let w = g.constant(warm.clone());
            g.batch_norm(w, v[1], v[2], &mut st, Mode::Train)?;
            let y = g.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval)?;
            readout(g, y, seed)
        })
    }

    pub fn relu(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let x = off_kink(&mut r, vec![2, 3, 1, 2, 2]);
        check(&[x], STEP, |g, v| {
            let y = g.relu(v[0])?;
            readout(g, y, seed)
        })
    }

    pub fn sigmoid(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![3, 4], 6.0);
        check(&[x], STEP, |g, v| {
            let y = g.sigmoid(v[0])?;
            readout(g, y, seed)
        })
    }

    pub fn fully_connected(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let (n, fi, fo) = (
            r.random_range(1..=3),
            r.random_range(1..=6),
            r.random_range(1..=4),
        );
        let x = uniform(&mut r, vec![n, fi], 1.0);
        let w = uniform(&mut r, vec![fo, fi], 1.0);
        let b = uniform(&mut r, vec![fo], 1.0);
        check(&[x, w, b], STEP, |g, v| {
            let y = g.fully_connected(v[0], v[1], Some(v[2]))?;
            readout(g, y, seed)
        })
    }

    pub fn concat_channels(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let sp = dims(&mut r, 1, 2);
        let count = r.random_range(1..=3);
        let mut parts = Vec::with_capacity(count);
        for _ in 0..count {
            let c = r.random_range(1..=3);
            parts.push(uniform(&mut r, vec![2, c, sp[0], sp[1], sp[2]], 1.0));
        }
        check(&parts, STEP, |g, v| {
            let y = g.concat_channels(v)?;
            readout(g, y, seed)
        })
    }

    pub fn dropout_train(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![2, 8], 1.0);
        let rate = 0.1 + 0.6 * r.random::<f64>();
        check(&[x], STEP, |g, v| {
            let y = g.dropout(v[0], rate, Mode::Train, seed)?;
            readout(g, y, seed)
        })
    }

    pub fn dropout_eval(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![2, 8], 1.0);
        check(&[x], STEP, |g, v| {
            let y = g.dropout(v[0], 0.5, Mode::Eval, seed)?;
            let s = g.sigmoid(y)?;
            readout(g, s, seed)
        })
    }

    pub fn elementwise(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let a = uniform(&mut r, vec![2, 2, 1, 1, 3], 1.0);
        let b = uniform(&mut r, vec![2, 2, 1, 1, 3], 1.0);
        check(&[a, b], STEP, |g, v| {
            let p = g.mul(v[0], v[1])?;
            let s = g.add(p, v[0])?;
            let f = g.flatten(s)?;
            let q = g.mul(f, f)?;
            Ok(g.mean(q))
        })
    }

    /// A miniature stream: conv, batch norm, relu, pool, dense concat,
    /// global pooling, two fully-connected layers and a sigmoid.
    pub fn composite(seed: u64) -> Result<GradReport> {
        let mut r = rng(seed);
        let x = uniform(&mut r, vec![2, 2, 2, 4, 4], 1.0);
        let w1 = uniform(&mut r, vec![3, 2, 3, 3, 3], 0.4);
        let b1 = uniform(&mut r, vec![3], 0.1);
        let s1 = Tensor::from_fn(vec![3], |_| 0.5 + r.random::<f64>());
        let t1 = uniform(&mut r, vec![3], 0.5);
        let w2 = uniform(&mut r, vec![2, 3, 1, 1, 1], 0.5);
        let fw = uniform(&mut r, vec![4, 5], 0.5);
        let fb = uniform(&mut r, vec![4], 0.1);
        let ow = uniform(&mut r, vec![1, 4], 0.5);
        check(&[x, w1, b1, s1, t1, w2, fw, fb, ow], STEP, |g, v| {
            let mut st = BatchNormState::new(3);
            let c = g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], Padding::Same)?;
            let n = g.batch_norm(c, v[3], v[4], &mut st, Mode::Train)?;
            let a = g.relu(n)?;
            let p = g.maxpool3d(a, [1, 2, 2], [1, 2, 2])?;
            let q = g.conv3d(p, v[5], None, [1, 1, 1], Padding::Valid)?;
            let cat = g.concat_channels(&[p, q])?;
            let gap = g.global_avg_pool(cat)?;
            let h = g.fully_connected(gap, v[6], Some(v[7]))?;
            let h = g.sigmoid(h)?;
            let o = g.fully_connected(h, v[8], None)?;
            let o = g.sigmoid(o)?;
            Ok(g.sum(o))
        })
    }
}
