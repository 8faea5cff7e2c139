//! 3D cross-correlation via im2col + GEMM.
//!
//! The kernel is not flipped. Per-sample products are accumulated in
//! ascending sample order so gradients are bitwise reproducible.

use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;

/// Zero padding applied symmetrically on each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// No padding.
    Valid,
    /// `k / 2` voxels per side; keeps extents for stride 1 and odd kernels.
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub input: [usize; 3],
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

const AXES: [&str; 3] = ["z", "y", "x"];

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        if x_shape.len() != 5 {
            return Err(AutodiffError::Rank {
                op: "conv3d",
                expected: 5,
                got: x_shape.to_vec(),
            });
        }
        if w_shape.len() != 5 {
            return Err(AutodiffError::Rank {
                op: "conv3d kernel",
                expected: 5,
                got: w_shape.to_vec(),
            });
        }
        if w_shape[1] != x_shape[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv3d",
                axis: "input channels",
                expected: w_shape[1],
                got: x_shape[1],
            });
        }
        if stride.contains(&0) {
            return Err(AutodiffError::InvalidArgument {
                op: "conv3d",
                reason: format!("stride {stride:?} must be positive"),
            });
        }
        let kernel = [w_shape[2], w_shape[3], w_shape[4]];
        let input = [x_shape[2], x_shape[3], x_shape[4]];
        let pad = match padding {
            Padding::Valid => [0; 3],
            Padding::Same => [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        };
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if kernel[a] == 0 || padded < kernel[a] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv3d",
                    axis: AXES[a],
                    expected: kernel[a],
                    got: padded,
                });
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            batch: x_shape[0],
            cin: x_shape[1],
            input,
            cout: w_shape[0],
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the im2col matrix: `cin * kz * ky * kx`.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    /// 1x1x1, stride 1, unpadded: the input is already its own im2col matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cout,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    /// Output x-range `[lo, hi)` whose input column `ox*s + kx - p` is in bounds.
    fn x_span(&self, kx: usize) -> (usize, usize) {
        let (w, s, p, ow) = (self.input[2], self.stride[2], self.pad[2], self.output[2]);
        let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
        // ox*s + kx - p <= w - 1  <=>  ox <= (w - 1 + p - kx) / s
        let hi = if w + p > kx {
            ((w - 1 + p - kx) / s + 1).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn in_range(idx: isize, len: usize) -> Option<usize> {
    (idx >= 0 && (idx as usize) < len).then_some(idx as usize)
}

/// Expand one sample (`cin x volume`) into a `patch_len x out_volume` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let vol = g.in_volume();
    let p_len = g.out_volume();
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * vol..(ci + 1) * vol];
        for kz in 0..g.kernel[0] {
            for ky in 0..g.kernel[1] {
                for kx in 0..g.kernel[2] {
                    let dst = &mut cols[row * p_len..(row + 1) * p_len];
                    let (lo, hi) = g.x_span(kx);
                    for oz in 0..od {
                        let iz = in_range((oz * g.stride[0] + kz) as isize - g.pad[0] as isize, d);
                        for oy in 0..oh {
                            let seg = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let iy =
                                in_range((oy * g.stride[1] + ky) as isize - g.pad[1] as isize, h);
                            let (Some(iz), Some(iy)) = (iz, iy) else {
                                seg.fill(T::zero());
                                continue;
                            };
                            let base = (iz * h + iy) * w;
                            seg[..lo].fill(T::zero());
                            seg[hi..].fill(T::zero());
                            if g.stride[2] == 1 {
                                let start = base + lo + kx - g.pad[2];
                                seg[lo..hi].copy_from_slice(&xc[start..start + (hi - lo)]);
                            } else {
                                for (ox, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                                    *v = xc[base + ox * g.stride[2] + kx - g.pad[2]];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-add an im2col-shaped gradient back onto one sample's input gradient.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let vol = g.in_volume();
    let p_len = g.out_volume();
    let mut row = 0;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * vol..(ci + 1) * vol];
        for kz in 0..g.kernel[0] {
            for ky in 0..g.kernel[1] {
                for kx in 0..g.kernel[2] {
                    let src = &cols[row * p_len..(row + 1) * p_len];
                    let (lo, hi) = g.x_span(kx);
                    for oz in 0..od {
                        let Some(iz) =
                            in_range((oz * g.stride[0] + kz) as isize - g.pad[0] as isize, d)
                        else {
                            continue;
                        };
                        for oy in 0..oh {
                            let Some(iy) =
                                in_range((oy * g.stride[1] + ky) as isize - g.pad[1] as isize, h)
                            else {
                                continue;
                            };
                            let seg = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let base = (iz * h + iy) * w;
                            for (ox, &v) in seg.iter().enumerate().take(hi).skip(lo) {
                                dxc[base + ox * g.stride[2] + kx - g.pad[2]] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let k = g.patch_len();
    let p = g.out_volume();
    let vol = g.in_volume();
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.batch {
        let xn = &x[n * g.cin * vol..(n + 1) * g.cin * vol];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let yn = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        T::gemm(
            g.cout,
            k,
            p,
            T::one(),
            w,
            (k, 1),
            src,
            (p, 1),
            T::zero(),
            yn,
            (p, 1),
        );
        if let Some(b) = b {
            for (co, row) in yn.chunks_exact_mut(p).enumerate() {
                let bias = b[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let k = g.patch_len();
    let p = g.out_volume();
    let vol = g.in_volume();
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * g.cin * vol]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.cout * k]);
    let mut db = need_db.then(|| vec![T::zero(); g.cout]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise || !need_dw {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcols = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.cout * p..(n + 1) * g.cout * p];
        let xn = &x[n * g.cin * vol..(n + 1) * g.cin * vol];
        if let Some(db) = db.as_mut() {
            for (co, row) in dyn_.chunks_exact(p).enumerate() {
                db[co] += row.iter().fold(T::zero(), |acc, &v| acc + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW (cout x k) += dY (cout x p) * cols^T (p x k)
            T::gemm(
                g.cout,
                p,
                k,
                T::one(),
                dyn_,
                (p, 1),
                src,
                (1, p),
                T::one(),
                dw,
                (k, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.cin * vol..(n + 1) * g.cin * vol];
            // dcols (k x p) = W^T (k x cout) * dY (cout x p)
            if pointwise {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    w,
                    (1, k),
                    dyn_,
                    (p, 1),
                    T::zero(),
                    dxn,
                    (p, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.cout,
                    p,
                    T::one(),
                    w,
                    (1, k),
                    dyn_,
                    (p, 1),
                    T::zero(),
                    &mut dcols,
                    (p, 1),
                );
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
