//! Tensor operations: eager forward evaluation plus per-op backward rules.

use ndarray::{concatenate, ArrayViewD, Axis, IxDyn, Slice};

use crate::store::ParamId;
use crate::{Arr, Tape, Var};

pub enum Op {
    Const,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Sin(usize),
    Cos(usize),
    LeakyRelu(usize, f64),
    Softplus(usize),
    Sigmoid(usize),
    Sum { x: usize, axes: Vec<usize>, keep: bool },
    Mean { x: usize, axes: Vec<usize>, keep: bool },
    Reshape { x: usize, from: Vec<usize> },
    Permute { x: usize, perm: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Conv1d { x: usize, w: usize, stride: usize, pad_left: usize, pad_right: usize },
    AdaptiveAvgPool1d { x: usize },
    HoldUpsample { x: usize, stride: usize },
    MaxPoolTime { x: usize, argmax: Vec<usize> },
    BceWithLogits { z: usize, targets: Arr },
}

/// Numpy-style broadcast of two shapes; panics on incompatibility.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("incompatible broadcast shapes {:?} vs {:?}", a, b),
        };
    }
    out
}

fn broadcast_to(a: &Arr, shape: &[usize]) -> Arr {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
        .to_owned()
}

/// Sum `grad` down to `shape` (inverse of an implicit broadcast).
fn reduce_to_shape(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && gd != 1 {
            let summed = g.sum_axis(Axis(ax));
            g = summed.insert_axis(Axis(ax));
        }
    }
    g
}

fn unary_needs(tape: &Tape, x: Var) -> bool {
    tape.nodes[x.0].needs_grad
}

impl Tape {
    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(&Arr, &Arr) -> Arr,
        op: Op,
    ) -> Var {
        let shape = broadcast_shapes(self.value(a).shape(), self.value(b).shape());
        let va = broadcast_to(self.value(a), &shape);
        let vb = broadcast_to(self.value(b), &shape);
        let needs = unary_needs(self, a) || unary_needs(self, b);
        self.push(f(&va, &vb), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_broadcast(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_broadcast(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_broadcast(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_broadcast(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| -t);
        let needs = unary_needs(self, x);
        self.push(v, Op::Neg(x.0), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).mapv(|t| c * t);
        let needs = unary_needs(self, x);
        self.push(v, Op::Scale(x.0, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).mapv(|t| t + c);
        let needs = unary_needs(self, x);
        self.push(v, Op::AddScalar(x.0, c), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| t * t);
        let needs = unary_needs(self, x);
        self.push(v, Op::Square(x.0), needs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::sqrt);
        let needs = unary_needs(self, x);
        self.push(v, Op::Sqrt(x.0), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        let needs = unary_needs(self, x);
        self.push(v, Op::Exp(x.0), needs)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::ln);
        let needs = unary_needs(self, x);
        self.push(v, Op::Ln(x.0), needs)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::sin);
        let needs = unary_needs(self, x);
        self.push(v, Op::Sin(x.0), needs)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::cos);
        let needs = unary_needs(self, x);
        self.push(v, Op::Cos(x.0), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|t| if t >= 0.0 { t } else { slope * t });
        let needs = unary_needs(self, x);
        self.push(v, Op::LeakyRelu(x.0, slope), needs)
    }

    /// `ln(1 + e^x)`, evaluated in its overflow-safe form.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| t.max(0.0) + (-t.abs()).exp().ln_1p());
        let needs = unary_needs(self, x);
        self.push(v, Op::Softplus(x.0), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        let needs = unary_needs(self, x);
        self.push(v, Op::Sigmoid(x.0), needs)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keep: bool) -> Var {
        let v = reduce_axes(self.value(x), axes, keep, false);
        let needs = unary_needs(self, x);
        self.push(v, Op::Sum { x: x.0, axes: axes.to_vec(), keep }, needs)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keep: bool) -> Var {
        let v = reduce_axes(self.value(x), axes, keep, true);
        let needs = unary_needs(self, x);
        self.push(v, Op::Mean { x: x.0, axes: axes.to_vec(), keep }, needs)
    }

    /// Reduce over every axis to a 0-d scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.sum_axes(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.mean_axes(x, &axes, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let from = self.value(x).shape().to_vec();
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let v = Arr::from_shape_vec(IxDyn(shape), flat)
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?} size mismatch", from, shape));
        let needs = unary_needs(self, x);
        self.push(v, Op::Reshape { x: x.0, from }, needs)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let needs = unary_needs(self, x);
        self.push(v, Op::Permute { x: x.0, perm: perm.to_vec() }, needs)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let needs = unary_needs(self, x);
        self.push(v, Op::Narrow { x: x.0, axis, start }, needs)
    }

    /// Index along `axis`, dropping it (like `select`).
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Var {
        let n = self.narrow(x, axis, index, 1);
        let mut shape = self.value(n).shape().to_vec();
        shape.remove(axis);
        self.reshape(n, &shape)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<ArrayViewD<f64>> = xs.iter().map(|v| self.value(*v).view()).collect();
        let v = concatenate(Axis(axis), &views)
            .expect("concat shape mismatch")
            .as_standard_layout()
            .to_owned();
        let needs = xs.iter().any(|v| unary_needs(self, *v));
        self.push(v, Op::Concat { xs: xs.iter().map(|v| v.0).collect(), axis }, needs)
    }

    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Var {
        let unsqueezed: Vec<Var> = xs
            .iter()
            .map(|v| {
                let mut shape = self.value(*v).shape().to_vec();
                shape.insert(axis, 1);
                self.reshape(*v, &shape)
            })
            .collect();
        self.concat(&unsqueezed, axis)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as_2d(self.value(a));
        let vb = as_2d(self.value(b));
        let v = va.dot(&vb).into_dyn();
        let needs = unary_needs(self, a) || unary_needs(self, b);
        self.push(v, Op::MatMul(a.0, b.0), needs)
    }

    /// Batched matrix product over the trailing two axes, with numpy-style
    /// broadcasting of the leading axes. Intended for small inner dimensions
    /// (3x3 rotation chains); large GEMMs should go through `conv1d`/`matmul`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let v = batch_matmul_value(self.value(a), self.value(b));
        let needs = unary_needs(self, a) || unary_needs(self, b);
        self.push(v, Op::BatchMatMul(a.0, b.0), needs)
    }

    /// 1-D convolution: `x` is `(B, C_in, T)`, `w` is `(C_out, C_in, K)`.
    /// Asymmetric padding supports causal (past-only) variants.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad_left: usize, pad_right: usize) -> Var {
        let v = conv1d_value(self.value(x), self.value(w), stride, pad_left, pad_right);
        let needs = unary_needs(self, x) || unary_needs(self, w);
        self.push(v, Op::Conv1d { x: x.0, w: w.0, stride, pad_left, pad_right }, needs)
    }

    /// Adaptive average pooling along the time axis of `(B, C, T)` to `out_len`.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, out_len: usize) -> Var {
        let v = adaptive_avg_pool_value(self.value(x), out_len);
        let needs = unary_needs(self, x);
        self.push(v, Op::AdaptiveAvgPool1d { x: x.0 }, needs)
    }

    /// Causal length restoration after a strided conv: `out[t] = x[t / stride]`.
    /// Each output frame holds the most recent strided sample, so no future
    /// frame leaks backwards.
    pub fn hold_upsample(&mut self, x: Var, stride: usize, out_len: usize) -> Var {
        let xv = self.value(x);
        let (b, c, t_in) = dims3(xv);
        let mut v = Arr::zeros(IxDyn(&[b, c, out_len]));
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..out_len {
                    let src = (t / stride).min(t_in - 1);
                    v[[bi, ci, t]] = xv[[bi, ci, src]];
                }
            }
        }
        let needs = unary_needs(self, x);
        self.push(v, Op::HoldUpsample { x: x.0, stride }, needs)
    }

    /// Max pooling over the whole time axis: `(B, C, T)` -> `(B, C, 1)`.
    /// Ties resolve to the earliest frame.
    pub fn max_pool_time(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, t) = dims3(xv);
        let mut v = Arr::zeros(IxDyn(&[b, c, 1]));
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_t = 0;
                for ti in 0..t {
                    let val = xv[[bi, ci, ti]];
                    if val > best {
                        best = val;
                        best_t = ti;
                    }
                }
                v[[bi, ci, 0]] = best;
                argmax[bi * c + ci] = best_t;
            }
        }
        let needs = unary_needs(self, x);
        self.push(v, Op::MaxPoolTime { x: x.0, argmax }, needs)
    }

    /// Elementwise binary cross-entropy on logits against constant targets,
    /// in the max-form that never overflows.
    pub fn bce_with_logits(&mut self, z: Var, targets: Arr) -> Var {
        assert_eq!(self.value(z).shape(), targets.shape(), "bce target shape mismatch");
        let zv = self.value(z);
        let v = ndarray::Zip::from(zv)
            .and(&targets)
            .map_collect(|&z, &y| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        let needs = unary_needs(self, z);
        self.push(v, Op::BceWithLogits { z: z.0, targets }, needs)
    }

    /// Mean squared error between two nodes, reduced over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean_all(s)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims3(a: &Arr) -> (usize, usize, usize) {
    assert_eq!(a.ndim(), 3, "expected rank-3 tensor, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2])
}

fn as_2d(a: &Arr) -> ndarray::Array2<f64> {
    assert_eq!(a.ndim(), 2, "expected rank-2 tensor, got {:?}", a.shape());
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned()
}

fn reduce_axes(a: &Arr, axes: &[usize], keep: bool, mean: bool) -> Arr {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut count = 1usize;
    let mut v = a.clone();
    // Reduce from the highest axis down so indices stay valid.
    for &ax in sorted.iter().rev() {
        count *= a.shape()[ax];
        let summed = v.sum_axis(Axis(ax));
        v = if keep { summed.insert_axis(Axis(ax)) } else { summed };
    }
    if mean {
        v.mapv_inplace(|t| t / count as f64);
    }
    v
}

/// Expand `grad` of a reduced tensor back to `full_shape`, re-inserting the
/// collapsed axes when `keep` was false.
fn expand_reduced(grad: &Arr, axes: &[usize], keep: bool, full_shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    if !keep {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter() {
            g = g.insert_axis(Axis(ax));
        }
    }
    broadcast_to(&g, full_shape)
}

fn batch_matmul_value(a: &Arr, b: &Arr) -> Arr {
    assert!(a.ndim() >= 2 && b.ndim() >= 2, "batch_matmul needs rank >= 2");
    let (m, ka) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (kb, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    assert_eq!(ka, kb, "batch_matmul inner dims {} vs {}", ka, kb);
    let lead = broadcast_shapes(&a.shape()[..a.ndim() - 2], &b.shape()[..b.ndim() - 2]);

    let mut a_shape = lead.clone();
    a_shape.extend([m, ka]);
    let mut b_shape = lead.clone();
    b_shape.extend([kb, n]);
    let ab = broadcast_to(a, &a_shape);
    let bb = broadcast_to(b, &b_shape);

    let batch: usize = lead.iter().product();
    let a2 = ab.into_shape_with_order(IxDyn(&[batch, m, ka])).unwrap();
    let b2 = bb.into_shape_with_order(IxDyn(&[batch, kb, n])).unwrap();
    let mut out = Arr::zeros(IxDyn(&[batch, m, n]));
    for l in 0..batch {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..ka {
                    acc += a2[[l, i, k]] * b2[[l, k, j]];
                }
                out[[l, i, j]] = acc;
            }
        }
    }
    let mut out_shape = lead;
    out_shape.extend([m, n]);
    out.into_shape_with_order(IxDyn(&out_shape)).unwrap()
}

fn conv_out_len(t: usize, k: usize, stride: usize, pad_left: usize, pad_right: usize) -> usize {
    let padded = t + pad_left + pad_right;
    assert!(padded >= k, "conv1d: padded length {} < kernel {}", padded, k);
    (padded - k) / stride + 1
}

/// im2col: `(B, C_in, T)` -> per-batch `(C_in * K, T_out)` column matrix.
fn im2col(
    x: &Arr,
    b: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    t_out: usize,
) -> ndarray::Array2<f64> {
    let c_in = x.shape()[1];
    let t = x.shape()[2];
    let mut col = ndarray::Array2::<f64>::zeros((c_in * k, t_out));
    for ci in 0..c_in {
        for kk in 0..k {
            let row = ci * k + kk;
            for to in 0..t_out {
                let ti = (to * stride + kk) as isize - pad_left as isize;
                if ti >= 0 && (ti as usize) < t {
                    col[[row, to]] = x[[b, ci, ti as usize]];
                }
            }
        }
    }
    col
}

fn conv1d_value(x: &Arr, w: &Arr, stride: usize, pad_left: usize, pad_right: usize) -> Arr {
    let (bsz, c_in, t) = dims3(x);
    assert_eq!(w.ndim(), 3, "conv1d weight must be (C_out, C_in, K)");
    let (c_out, wc_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(c_in, wc_in, "conv1d channel mismatch: input {} vs weight {}", c_in, wc_in);
    let t_out = conv_out_len(t, k, stride, pad_left, pad_right);

    let w2 = w
        .view()
        .into_shape_with_order((c_out, c_in * k))
        .unwrap()
        .to_owned();
    let mut out = Arr::zeros(IxDyn(&[bsz, c_out, t_out]));
    for b in 0..bsz {
        let col = im2col(x, b, k, stride, pad_left, t_out);
        let y = w2.dot(&col);
        out.index_axis_mut(Axis(0), b)
            .assign(&y.into_shape_with_order((c_out, t_out)).unwrap());
    }
    out
}

fn adaptive_bins(t_in: usize, t_out: usize, t: usize) -> (usize, usize) {
    let lo = t * t_in / t_out;
    let hi = ((t + 1) * t_in).div_ceil(t_out);
    (lo, hi.max(lo + 1))
}

fn adaptive_avg_pool_value(x: &Arr, out_len: usize) -> Arr {
    let (b, c, t_in) = dims3(x);
    let mut out = Arr::zeros(IxDyn(&[b, c, out_len]));
    for bi in 0..b {
        for ci in 0..c {
            for to in 0..out_len {
                let (lo, hi) = adaptive_bins(t_in, out_len, to);
                let mut acc = 0.0;
                for ti in lo..hi {
                    acc += x[[bi, ci, ti]];
                }
                out[[bi, ci, to]] = acc / (hi - lo) as f64;
            }
        }
    }
    out
}

/// Dispatch the node-local backward rule, accumulating into `grads`.
pub(crate) fn backward_node(tape: &Tape, id: usize, grad: &Arr, grads: &mut Vec<Option<Arr>>) {
    let add = |target: usize, g: Arr, grads: &mut Vec<Option<Arr>>| {
        if !tape.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    };

    match &tape.nodes[id].op {
        Op::Const | Op::Param(_) => {}
        Op::Add(a, b) => {
            let ga = reduce_to_shape(grad, tape.nodes[*a].value.shape());
            let gb = reduce_to_shape(grad, tape.nodes[*b].value.shape());
            add(*a, ga, grads);
            add(*b, gb, grads);
        }
        Op::Sub(a, b) => {
            let ga = reduce_to_shape(grad, tape.nodes[*a].value.shape());
            let gb = reduce_to_shape(&grad.mapv(|t| -t), tape.nodes[*b].value.shape());
            add(*a, ga, grads);
            add(*b, gb, grads);
        }
        Op::Mul(a, b) => {
            let shape = grad.shape();
            let va = broadcast_to(&tape.nodes[*a].value, shape);
            let vb = broadcast_to(&tape.nodes[*b].value, shape);
            add(*a, reduce_to_shape(&(grad * &vb), tape.nodes[*a].value.shape()), grads);
            add(*b, reduce_to_shape(&(grad * &va), tape.nodes[*b].value.shape()), grads);
        }
        Op::Div(a, b) => {
            let shape = grad.shape();
            let va = broadcast_to(&tape.nodes[*a].value, shape);
            let vb = broadcast_to(&tape.nodes[*b].value, shape);
            let ga = grad / &vb;
            let gb = -(grad * &va) / (&vb * &vb);
            add(*a, reduce_to_shape(&ga, tape.nodes[*a].value.shape()), grads);
            add(*b, reduce_to_shape(&gb, tape.nodes[*b].value.shape()), grads);
        }
        Op::Neg(x) => add(*x, grad.mapv(|t| -t), grads),
        Op::Scale(x, c) => add(*x, grad.mapv(|t| t * c), grads),
        Op::AddScalar(x, _) => add(*x, grad.clone(), grads),
        Op::Square(x) => {
            let g = 2.0 * &(grad * &tape.nodes[*x].value);
            add(*x, g, grads);
        }
        Op::Sqrt(x) => {
            let y = &tape.nodes[id].value;
            add(*x, grad / &(2.0 * y), grads);
        }
        Op::Exp(x) => add(*x, grad * &tape.nodes[id].value, grads),
        Op::Ln(x) => add(*x, grad / &tape.nodes[*x].value, grads),
        Op::Sin(x) => {
            let c = tape.nodes[*x].value.mapv(f64::cos);
            add(*x, grad * &c, grads);
        }
        Op::Cos(x) => {
            let s = tape.nodes[*x].value.mapv(|t| -t.sin());
            add(*x, grad * &s, grads);
        }
        Op::LeakyRelu(x, slope) => {
            let mask = tape.nodes[*x].value.mapv(|t| if t >= 0.0 { 1.0 } else { *slope });
            add(*x, grad * &mask, grads);
        }
        Op::Softplus(x) => {
            let s = tape.nodes[*x].value.mapv(sigmoid);
            add(*x, grad * &s, grads);
        }
        Op::Sigmoid(x) => {
            let y = &tape.nodes[id].value;
            add(*x, grad * &(y * &(1.0 - y)), grads);
        }
        Op::Sum { x, axes, keep } => {
            let g = expand_reduced(grad, axes, *keep, tape.nodes[*x].value.shape());
            add(*x, g, grads);
        }
        Op::Mean { x, axes, keep } => {
            let full = tape.nodes[*x].value.shape();
            let count: usize = {
                let mut sorted = axes.clone();
                sorted.sort_unstable();
                sorted.dedup();
                sorted.iter().map(|&ax| full[ax]).product()
            };
            let g = expand_reduced(grad, axes, *keep, full).mapv(|t| t / count as f64);
            add(*x, g, grads);
        }
        Op::Reshape { x, from } => {
            let flat: Vec<f64> = grad.iter().copied().collect();
            let g = Arr::from_shape_vec(IxDyn(from), flat).unwrap();
            add(*x, g, grads);
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let g = grad.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
            add(*x, g, grads);
        }
        Op::Narrow { x, axis, start } => {
            let mut g = Arr::zeros(tape.nodes[*x].value.raw_dim());
            let len = grad.shape()[*axis];
            g.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                .assign(grad);
            add(*x, g, grads);
        }
        Op::Concat { xs, axis } => {
            let mut offset = 0usize;
            for &xi in xs {
                let len = tape.nodes[xi].value.shape()[*axis];
                let g = grad
                    .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                    .to_owned();
                add(xi, g, grads);
                offset += len;
            }
        }
        Op::MatMul(a, b) => {
            let va = as_2d(&tape.nodes[*a].value);
            let vb = as_2d(&tape.nodes[*b].value);
            let g2 = as_2d(grad);
            add(*a, g2.dot(&vb.t()).into_dyn(), grads);
            add(*b, va.t().dot(&g2).into_dyn(), grads);
        }
        Op::BatchMatMul(a, b) => {
            let va = &tape.nodes[*a].value;
            let vb = &tape.nodes[*b].value;
            // dA = g . B^T, dB = A^T . g, then reduce broadcast leading dims.
            let ga = batch_matmul_value(grad, &swap_last2(vb));
            let gb = batch_matmul_value(&swap_last2(va), grad);
            add(*a, reduce_to_shape(&ga, va.shape()), grads);
            add(*b, reduce_to_shape(&gb, vb.shape()), grads);
        }
        Op::Conv1d { x, w, stride, pad_left, pad_right: _ } => {
            let xv = &tape.nodes[*x].value;
            let wv = &tape.nodes[*w].value;
            let (bsz, c_in, t) = dims3(xv);
            let (c_out, _, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
            let t_out = grad.shape()[2];
            let w2 = wv
                .view()
                .into_shape_with_order((c_out, c_in * k))
                .unwrap()
                .to_owned();
            let mut dw2 = ndarray::Array2::<f64>::zeros((c_out, c_in * k));
            let mut dx = Arr::zeros(xv.raw_dim());
            for b in 0..bsz {
                let col = im2col(xv, b, k, *stride, *pad_left, t_out);
                let gy = grad
                    .index_axis(Axis(0), b)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned();
                dw2 = dw2 + gy.dot(&col.t());
                let dcol = w2.t().dot(&gy);
                // col2im scatter-add
                for ci in 0..c_in {
                    for kk in 0..k {
                        let row = ci * k + kk;
                        for to in 0..t_out {
                            let ti = (to * stride + kk) as isize - *pad_left as isize;
                            if ti >= 0 && (ti as usize) < t {
                                dx[[b, ci, ti as usize]] += dcol[[row, to]];
                            }
                        }
                    }
                }
            }
            let dw = dw2.into_shape_with_order((c_out, c_in, k)).unwrap().into_dyn();
            add(*x, dx, grads);
            add(*w, dw, grads);
        }
        Op::AdaptiveAvgPool1d { x } => {
            let xv = &tape.nodes[*x].value;
            let (b, c, t_in) = dims3(xv);
            let t_out = grad.shape()[2];
            let mut g = Arr::zeros(xv.raw_dim());
            for bi in 0..b {
                for ci in 0..c {
                    for to in 0..t_out {
                        let (lo, hi) = adaptive_bins(t_in, t_out, to);
                        let share = grad[[bi, ci, to]] / (hi - lo) as f64;
                        for ti in lo..hi {
                            g[[bi, ci, ti]] += share;
                        }
                    }
                }
            }
            add(*x, g, grads);
        }
        Op::HoldUpsample { x, stride } => {
            let xv = &tape.nodes[*x].value;
            let (b, c, t_in) = dims3(xv);
            let t_out = grad.shape()[2];
            let mut g = Arr::zeros(xv.raw_dim());
            for bi in 0..b {
                for ci in 0..c {
                    for to in 0..t_out {
                        let src = (to / stride).min(t_in - 1);
                        g[[bi, ci, src]] += grad[[bi, ci, to]];
                    }
                }
            }
            add(*x, g, grads);
        }
        Op::MaxPoolTime { x, argmax } => {
            let xv = &tape.nodes[*x].value;
            let (b, c, _) = dims3(xv);
            let mut g = Arr::zeros(xv.raw_dim());
            for bi in 0..b {
                for ci in 0..c {
                    g[[bi, ci, argmax[bi * c + ci]]] += grad[[bi, ci, 0]];
                }
            }
            add(*x, g, grads);
        }
        Op::BceWithLogits { z, targets } => {
            let zv = &tape.nodes[*z].value;
            let dz = ndarray::Zip::from(zv)
                .and(targets)
                .map_collect(|&z, &y| sigmoid(z) - y);
            add(*z, grad * &dz, grads);
        }
    }
}

fn swap_last2(a: &Arr) -> Arr {
    let n = a.ndim();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.swap(n - 2, n - 1);
    a.view().permuted_axes(IxDyn(&perm)).as_standard_layout().to_owned()
}
