//! Per-channel batch normalization over batch and spatial axes.

use crate::scalar::Scalar;

/// Added to the variance inside the square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Running statistics: `running = momentum * running + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running mean and (biased) variance for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until the first train-mode step; eval mode refuses to run before.
    pub initialized: bool,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub(crate) fn update(&mut self, mean: &[f64], var: &[f64]) {
        for c in 0..self.channels() {
            let rm = self.running_mean[c].as_f64();
            let rv = self.running_var[c].as_f64();
            self.running_mean[c] = T::of(BN_MOMENTUM * rm + (1.0 - BN_MOMENTUM) * mean[c]);
            self.running_var[c] = T::of(BN_MOMENTUM * rv + (1.0 - BN_MOMENTUM) * var[c]);
        }
        self.initialized = true;
    }
}

pub(crate) struct Layout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl Layout {
    fn index(&self, n: usize, c: usize) -> std::ops::Range<usize> {
        let start = (n * self.channels + c) * self.spatial;
        start..start + self.spatial
    }
}

pub(crate) struct Normalized<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalize with batch statistics (biased variance).
pub(crate) fn train_forward<T: Scalar>(
    x: &[T],
    scale: &[T],
    shift: &[T],
    l: &Layout,
) -> Normalized<T> {
    let m = (l.batch * l.spatial) as f64;
    let mut mean = vec![0.0; l.channels];
    let mut var = vec![0.0; l.channels];
    for c in 0..l.channels {
        let mut s = 0.0;
        for n in 0..l.batch {
            s += x[l.index(n, c)].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for n in 0..l.batch {
            ss += x[l.index(n, c)]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = ss / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let (y, xhat) = apply(x, scale, shift, l, &mean, &inv_std);
    Normalized {
        y,
        xhat,
        inv_std: inv_std.into_iter().map(T::of).collect(),
        mean,
        var,
    }
}

/// Normalize with frozen running statistics.
pub(crate) fn eval_forward<T: Scalar>(
    x: &[T],
    scale: &[T],
    shift: &[T],
    l: &Layout,
    state: &BatchNormState<T>,
) -> Normalized<T> {
    let mean: Vec<f64> = state.running_mean.iter().map(|v| v.as_f64()).collect();
    let var: Vec<f64> = state.running_var.iter().map(|v| v.as_f64()).collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let (y, xhat) = apply(x, scale, shift, l, &mean, &inv_std);
    Normalized {
        y,
        xhat,
        inv_std: inv_std.into_iter().map(T::of).collect(),
        mean,
        var,
    }
}

fn apply<T: Scalar>(
    x: &[T],
    scale: &[T],
    shift: &[T],
    l: &Layout,
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for n in 0..l.batch {
        for c in 0..l.channels {
            let mu = T::of(mean[c]);
            let is = T::of(inv_std[c]);
            let r = l.index(n, c);
            for i in r {
                let h = (x[i] - mu) * is;
                xhat[i] = h;
                y[i] = scale[c] * h + shift[c];
            }
        }
    }
    (y, xhat)
}

pub(crate) struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dscale: Vec<T>,
    pub dshift: Vec<T>,
}

/// Gradient through batch statistics (`batch_stats = true`) or through a
/// fixed affine map (`batch_stats = false`, eval mode).
pub(crate) fn backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    scale: &[T],
    inv_std: &[T],
    l: &Layout,
    batch_stats: bool,
) -> NormGrads<T> {
    let m = (l.batch * l.spatial) as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dscale = vec![T::zero(); l.channels];
    let mut dshift = vec![T::zero(); l.channels];
    for c in 0..l.channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..l.batch {
            for i in l.index(n, c) {
                let g = dy[i].as_f64();
                sum_dy += g;
                sum_dy_xhat += g * xhat[i].as_f64();
            }
        }
        dscale[c] = T::of(sum_dy_xhat);
        dshift[c] = T::of(sum_dy);
        let gamma = scale[c].as_f64();
        let is = inv_std[c].as_f64();
        for n in 0..l.batch {
            for i in l.index(n, c) {
                let g = dy[i].as_f64();
                let v = if batch_stats {
                    // dxhat = dy * gamma; sums of dxhat scale the same way.
                    gamma * is / m * (m * g - sum_dy - xhat[i].as_f64() * sum_dy_xhat)
                } else {
                    gamma * is * g
                };
                dx[i] = T::of(v);
            }
        }
    }
    NormGrads { dx, dscale, dshift }
}
