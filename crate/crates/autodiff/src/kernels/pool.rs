use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub input: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeom {
    pub fn new(x_shape: &[usize], window: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        if x_shape.len() != 5 {
            return Err(AutodiffError::Rank {
                op: "maxpool3d",
                expected: 5,
                got: x_shape.to_vec(),
            });
        }
        let input = [x_shape[2], x_shape[3], x_shape[4]];
        if window.iter().zip(&input).any(|(&k, &n)| k == 0 || k > n) {
            return Err(AutodiffError::WindowTooLarge {
                op: "maxpool3d",
                window,
                extent: input,
            });
        }
        if stride.contains(&0) {
            return Err(AutodiffError::InvalidArgument {
                op: "maxpool3d",
                reason: format!("stride {stride:?} must be positive"),
            });
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = (input[a] - window[a]) / stride[a] + 1;
        }
        Ok(Self {
            planes: x_shape[0] * x_shape[1],
            input,
            window,
            stride,
            output,
        })
    }
}

/// Max pooling. Returns values and, per output, the flat input index of the
/// winner; ties go to the lowest linear index inside the window.
pub(crate) fn max_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let mut values = Vec::with_capacity(g.planes * out_vol);
    let mut argmax = Vec::with_capacity(g.planes * out_vol);
    for plane in 0..g.planes {
        let base = plane * in_vol;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best =
                        base + ((oz * g.stride[0]) * h + oy * g.stride[1]) * w + ox * g.stride[2];
                    let mut best_v = x[best];
                    for kz in 0..g.window[0] {
                        for ky in 0..g.window[1] {
                            let row = base
                                + ((oz * g.stride[0] + kz) * h + oy * g.stride[1] + ky) * w
                                + ox * g.stride[2];
                            for kx in 0..g.window[2] {
                                let v = x[row + kx];
                                if v > best_v {
                                    best_v = v;
                                    best = row + kx;
                                }
                            }
                        }
                    }
                    values.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    (values, argmax)
}

pub(crate) fn max_backward<T: Scalar>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

/// Mean over all trailing spatial positions of each (sample, channel) plane.
pub(crate) fn global_avg_forward<T: Scalar>(x: &[T], planes: usize, volume: usize) -> Vec<T> {
    let inv = 1.0 / volume as f64;
    x.chunks_exact(volume)
        .take(planes)
        .map(|p| T::of(p.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect()
}

pub(crate) fn global_avg_backward<T: Scalar>(dy: &[T], volume: usize) -> Vec<T> {
    let inv = T::of(1.0 / volume as f64);
    let mut dx = Vec::with_capacity(dy.len() * volume);
    for &g in dy {
        dx.extend(std::iter::repeat_n(g * inv, volume));
    }
    dx
}
