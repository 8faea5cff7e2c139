//! Recording graph and reverse sweep.

use std::cell::{Cell, Ref, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::kernels::conv::{self, ConvGeom, Padding};
use crate::kernels::norm::{self, BatchNormState, Layout};
use crate::kernels::{dense, pool};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Mode;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvg {
        x: usize,
        volume: usize,
    },
    BatchNorm {
        x: usize,
        scale: usize,
        shift: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Concat {
        parts: Vec<(usize, usize)>,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    Reshape {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Objective {
        x: usize,
        dvalue: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Leaves keep their gradients after [`Graph::backward`]; intermediate
/// gradients are dropped once propagated.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.borrow().len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownVar(v.0))
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, labels).
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow().get(v.0).and_then(|n| n.grad.clone())
    }

    /// Clears all gradients and re-arms [`Graph::backward`].
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
        self.consumed.set(false);
    }

    /// 3D cross-correlation. `x`: `(n, cin, z, y, x)`, `kernel`:
    /// `(cout, cin, kz, ky, kx)`, `bias`: `(cout)`.
    pub fn conv3d(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(kernel)?;
        let (value, geom) = {
            let nodes = self.nodes.borrow();
            let xs = nodes[x.0].value.shape();
            let ws = nodes[kernel.0].value.shape();
            let geom = ConvGeom::new(xs, ws, stride, padding)?;
            let b = match bias {
                Some(b) => {
                    let bt = &nodes.get(b.0).ok_or(AutodiffError::UnknownVar(b.0))?.value;
                    if bt.shape() != [geom.cout] {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "conv3d bias",
                            axis: "output channels",
                            expected: geom.cout,
                            got: bt.len(),
                        });
                    }
                    Some(bt.data())
                }
                None => None,
            };
            let out = conv::forward(
                nodes[x.0].value.data(),
                nodes[kernel.0].value.data(),
                b,
                &geom,
            );
            (Tensor::new(geom.output_shape(), out)?, geom)
        };
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv {
                x: x.0,
                w: kernel.0,
                b: bias.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    /// Max pooling over `(z, y, x)` windows. Window and stride are given in
    /// `(z, y, x)` order, so a 2x2 in-plane window preserving depth is `[1, 2, 2]`.
    pub fn maxpool3d(&self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        self.check(x)?;
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let xs = nodes[x.0].value.shape();
            let g = pool::PoolGeom::new(xs, window, stride)?;
            let (v, am) = pool::max_forward(nodes[x.0].value.data(), &g);
            let shape = vec![xs[0], xs[1], g.output[0], g.output[1], g.output[2]];
            (Tensor::new(shape, v)?, am)
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x: x.0, argmax }, rg))
    }

    /// `(n, c, ...)` to `(n, c)` by averaging every trailing position.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (value, volume) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() < 3 {
                return Err(AutodiffError::Rank {
                    op: "global_avg_pool",
                    expected: 5,
                    got: t.shape().to_vec(),
                });
            }
            let (n, c) = (t.shape()[0], t.shape()[1]);
            let volume: usize = t.shape()[2..].iter().product();
            let v = pool::global_avg_forward(t.data(), n * c, volume);
            (Tensor::new(vec![n, c], v)?, volume)
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvg { x: x.0, volume }, rg))
    }

    /// Per-channel batch normalization of `(n, c, ...)`.
    ///
    /// Train mode normalizes by batch statistics and folds them into
    /// `state`; eval mode uses `state` and fails if it was never trained.
    pub fn batch_norm(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(scale)?;
        self.check(shift)?;
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() < 2 {
                return Err(AutodiffError::Rank {
                    op: "batch_norm",
                    expected: 2,
                    got: t.shape().to_vec(),
                });
            }
            let layout = Layout {
                batch: t.shape()[0],
                channels: t.shape()[1],
                spatial: t.shape()[2..].iter().product(),
            };
            for (name, p) in [("scale", scale), ("shift", shift)] {
                let len = nodes[p.0].value.len();
                if len != layout.channels {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "batch_norm",
                        axis: name,
                        expected: layout.channels,
                        got: len,
                    });
                }
            }
            if state.channels() != layout.channels {
                return Err(AutodiffError::ShapeMismatch {
                    op: "batch_norm",
                    axis: "running statistics",
                    expected: layout.channels,
                    got: state.channels(),
                });
            }
            let (s, b) = (nodes[scale.0].value.data(), nodes[shift.0].value.data());
            let out = match mode {
                Mode::Train => {
                    let out = norm::train_forward(t.data(), s, b, &layout);
                    state.update(&out.mean, &out.var);
                    out
                }
                Mode::Eval => {
                    if !state.initialized {
                        return Err(AutodiffError::UninitializedRunningStats);
                    }
                    norm::eval_forward(t.data(), s, b, &layout, state)
                }
            };
            (
                Tensor::new(t.shape().to_vec(), out.y)?,
                out.xhat,
                out.inv_std,
            )
        };
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Rectified linear unit; the subgradient at exactly 0 is 0.
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        Ok(self.push(value, Op::Relu { x: x.0 }, rg))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(dense::sigmoid);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sigmoid { x: x.0 }, rg))
    }

    /// `(n, in)` times a weight stored `(out, in)`, plus bias `(out)`.
    pub fn fully_connected(&self, x: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(weights)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xs = nodes[x.0].value.shape();
            let ws = nodes[weights.0].value.shape();
            if xs.len() != 2 || ws.len() != 2 {
                return Err(AutodiffError::Rank {
                    op: "fully_connected",
                    expected: 2,
                    got: if xs.len() != 2 {
                        xs.to_vec()
                    } else {
                        ws.to_vec()
                    },
                });
            }
            if xs[1] != ws[1] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "fully_connected",
                    axis: "features",
                    expected: ws[1],
                    got: xs[1],
                });
            }
            let b = match bias {
                Some(b) => {
                    let bt = &nodes.get(b.0).ok_or(AutodiffError::UnknownVar(b.0))?.value;
                    if bt.len() != ws[0] {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "fully_connected bias",
                            axis: "outputs",
                            expected: ws[0],
                            got: bt.len(),
                        });
                    }
                    Some(bt.data())
                }
                None => None,
            };
            let y = dense::linear_forward(
                nodes[x.0].value.data(),
                nodes[weights.0].value.data(),
                b,
                xs[0],
                xs[1],
                ws[0],
            );
            Tensor::new(vec![xs[0], ws[0]], y)?
        };
        let rg = self.rg(x) || self.rg(weights) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: weights.0,
                b: bias.map(|b| b.0),
            },
            rg,
        ))
    }

    /// Concatenate along the channel axis; earlier parts come first.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_channels",
            reason: "no inputs".into(),
        })?;
        for &p in parts {
            self.check(p)?;
        }
        let (value, layout) = {
            let nodes = self.nodes.borrow();
            let s0 = nodes[first.0].value.shape().to_vec();
            if s0.len() < 2 {
                return Err(AutodiffError::Rank {
                    op: "concat_channels",
                    expected: 5,
                    got: s0,
                });
            }
            let mut layout = Vec::with_capacity(parts.len());
            for &p in parts {
                let s = nodes[p.0].value.shape();
                if s.len() != s0.len() || s[0] != s0[0] {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_channels",
                        axis: "batch",
                        expected: s0[0],
                        got: s.first().copied().unwrap_or(0),
                    });
                }
                if s[2..] != s0[2..] {
                    let axis = s[2..]
                        .iter()
                        .zip(&s0[2..])
                        .position(|(a, b)| a != b)
                        .unwrap_or(0);
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_channels",
                        axis: ["z", "y", "x"].get(axis).copied().unwrap_or("spatial"),
                        expected: s0[2 + axis],
                        got: s[2 + axis],
                    });
                }
                layout.push((p.0, s[1]));
            }
            let batch = s0[0];
            let spatial: usize = s0[2..].iter().product();
            let total_c: usize = layout.iter().map(|(_, c)| c).sum();
            let mut data = Vec::with_capacity(batch * total_c * spatial);
            for n in 0..batch {
                for &(id, c) in &layout {
                    let d = nodes[id].value.data();
                    data.extend_from_slice(&d[n * c * spatial..(n + 1) * c * spatial]);
                }
            }
            let mut shape = s0.clone();
            shape[1] = total_c;
            (Tensor::new(shape, data)?, layout)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat { parts: layout }, rg))
    }

    /// Inverted dropout. Train mode zeroes each element with probability
    /// `rate` (drawn from a ChaCha8 stream seeded by `seed`) and scales
    /// survivors by `1 / (1 - rate)`; eval mode returns `x` unchanged.
    pub fn dropout(&self, x: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (value, mask) = {
            let xv = self.value(x);
            let mask: Vec<T> = (0..xv.len())
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (Tensor::new(xv.shape().to_vec(), data)?, mask)
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x: x.0, mask }, rg))
    }

    /// `(n, ...)` to `(n, prod(...))`.
    pub fn flatten(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = {
            let t = self.value(x);
            let n = t.shape().first().copied().unwrap_or(1);
            let rest = t.len().checked_div(n).unwrap_or(0);
            t.clone().reshape(vec![n, rest])?
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x: x.0 }, rg))
    }

    fn binary(&self, a: Var, b: Var, op: &'static str) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(b)?;
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                axis: "elements",
                expected: ta.len(),
                got: tb.len(),
            });
        }
        let f: fn(T, T) -> T = if op == "add" {
            |x, y| x + y
        } else {
            |x, y| x * y
        };
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Elementwise sum of equal shapes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = T::of(self.value(x).data().iter().map(|v| v.as_f64()).sum());
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let t = self.value(x);
        let m = T::of(t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len().max(1) as f64);
        drop(t);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean { x: x.0 }, rg)
    }

    /// Scalar objective computed outside the graph.
    ///
    /// `value` is the objective; `dvalue[i]` is its derivative with respect
    /// to element `i` of `x`. Lets closed-form losses plug into the sweep.
    pub fn objective(&self, x: Var, value: T, dvalue: Vec<T>) -> Result<Var> {
        self.check(x)?;
        let len = self.value(x).len();
        if dvalue.len() != len {
            return Err(AutodiffError::ShapeMismatch {
                op: "objective",
                axis: "elements",
                expected: len,
                got: dvalue.len(),
            });
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Objective { x: x.0, dvalue }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.consumed.get() {
            return Err(AutodiffError::BackwardTwice);
        }
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.consumed.set(true);
        nodes[loss.0].grad = Some(Tensor::full(shape, T::one()));
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = nodes[id].grad.take() else {
                continue;
            };
            if matches!(nodes[id].op, Op::Leaf) {
                nodes[id].grad = Some(gout);
                continue;
            }
            let contributions = backward_op(&nodes, id, &gout)?;
            for (input, g) in contributions {
                let node = &mut nodes[input];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    gout: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    let like = |i: usize, data: Vec<T>| Tensor::new(nodes[i].value.shape().to_vec(), data);
    let dy = gout.data();
    let mut out = Vec::new();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv { x, w, b, geom } => {
            let grads = conv::backward(
                val(*x).data(),
                val(*w).data(),
                dy,
                geom,
                (needs(*x), needs(*w), b.is_some_and(needs)),
            );
            if let Some(dx) = grads.dx {
                out.push((*x, like(*x, dx)?));
            }
            if let Some(dw) = grads.dw {
                out.push((*w, like(*w, dw)?));
            }
            if let (Some(b), Some(db)) = (b, grads.db) {
                out.push((*b, like(*b, db)?));
            }
        }
        Op::MaxPool { x, argmax } => {
            let dx = pool::max_backward(dy, argmax, val(*x).len());
            out.push((*x, like(*x, dx)?));
        }
        Op::GlobalAvg { x, volume } => {
            out.push((*x, like(*x, pool::global_avg_backward(dy, *volume))?));
        }
        Op::BatchNorm {
            x,
            scale,
            shift,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let s = val(*x).shape();
            let layout = Layout {
                batch: s[0],
                channels: s[1],
                spatial: s[2..].iter().product(),
            };
            let g = norm::backward(dy, xhat, val(*scale).data(), inv_std, &layout, *batch_stats);
            out.push((*x, like(*x, g.dx)?));
            out.push((*scale, like(*scale, g.dscale)?));
            out.push((*shift, like(*shift, g.dshift)?));
        }
        Op::Relu { x } => {
            let dx = val(*x)
                .data()
                .iter()
                .zip(dy)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect();
            out.push((*x, like(*x, dx)?));
        }
        Op::Sigmoid { x } => {
            let dx = nodes[id]
                .value
                .data()
                .iter()
                .zip(dy)
                .map(|(&s, &g)| g * s * (T::one() - s))
                .collect();
            out.push((*x, like(*x, dx)?));
        }
        Op::Linear { x, w, b } => {
            let xs = val(*x).shape();
            let fan_out = val(*w).shape()[0];
            let (dx, dw, db) = dense::linear_backward(
                val(*x).data(),
                val(*w).data(),
                dy,
                xs[0],
                xs[1],
                fan_out,
                (needs(*x), needs(*w), b.is_some_and(needs)),
            );
            if let Some(dx) = dx {
                out.push((*x, like(*x, dx)?));
            }
            if let Some(dw) = dw {
                out.push((*w, like(*w, dw)?));
            }
            if let (Some(b), Some(db)) = (b, db) {
                out.push((*b, like(*b, db)?));
            }
        }
        Op::Concat { parts } => {
            let s = gout.shape();
            let batch = s[0];
            let spatial: usize = s[2..].iter().product();
            let total: usize = parts.iter().map(|(_, c)| c).sum();
            let mut offset = 0;
            for &(pid, c) in parts {
                if needs(pid) {
                    let mut d = Vec::with_capacity(batch * c * spatial);
                    for n in 0..batch {
                        let start = (n * total + offset) * spatial;
                        d.extend_from_slice(&dy[start..start + c * spatial]);
                    }
                    out.push((pid, like(pid, d)?));
                }
                offset += c;
            }
        }
        Op::Dropout { x, mask } => {
            let dx = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
            out.push((*x, like(*x, dx)?));
        }
        Op::Reshape { x } => {
            out.push((*x, like(*x, dy.to_vec())?));
        }
        Op::Add { a, b } => {
            out.push((*a, like(*a, dy.to_vec())?));
            out.push((*b, like(*b, dy.to_vec())?));
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let da = dy.iter().zip(vb).map(|(&g, &v)| g * v).collect();
            let db = dy.iter().zip(va).map(|(&g, &v)| g * v).collect();
            out.push((*a, like(*a, da)?));
            out.push((*b, like(*b, db)?));
        }
        Op::Sum { x } => {
            let n = val(*x).len();
            out.push((*x, like(*x, vec![dy[0]; n])?));
        }
        Op::Mean { x } => {
            let n = val(*x).len();
            let g = dy[0] / T::of(n.max(1) as f64);
            out.push((*x, like(*x, vec![g; n])?));
        }
        Op::Objective { x, dvalue } => {
            let dx = dvalue.iter().map(|&d| d * dy[0]).collect();
            out.push((*x, like(*x, dx)?));
        }
    }
    Ok(out)
}
