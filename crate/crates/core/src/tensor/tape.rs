//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value plus
//! whatever it needs for the backward sweep. Nodes only reference earlier
//! nodes, so the tape is always in topological order and `backward` is a
//! single reverse pass.

use super::{gemm, Tensor, TensorError};

/// Floor applied before `log` and in divisions.
pub const LOG_EPS: f64 = 1e-8;

/// Ranges narrower than this normalize to all zeros.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        /// im2col buffers, one `[C*kh*kw, OH*OW]` block per batch item.
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Grl(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Upsample2x(Var),
    AvgPool(Var),
    MinMaxNorm { input: Var, extrema: Vec<Option<(usize, usize, f64)>> },
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    Mse(Var, Var),
    BceWithLogits { logits: Var, targets: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    SmoothL1 { pred: Var, targets: Vec<f64>, mask: Vec<f64>, beta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of executed ops.
///
/// A tape with gradients disabled still evaluates every op but keeps no
/// backward state; calling [`Tape::backward`] on it is an error.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`; zeros when the node does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(diff: f64, beta: f64) -> (f64, f64) {
    let a = diff.abs();
    if a < beta {
        (0.5 * diff * diff / beta, diff / beta)
    } else {
        (a - 0.5 * beta, diff.signum())
    }
}

/// Splits `shape` into (outer, dim, inner) around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn pool_bin(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that evaluates ops without retaining backward state.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[N, C, H, W]`, `kernel` is `[K, C, kh, kw]`, `bias` is `[K]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: xs.to_vec(),
            right: ks.to_vec(),
        };
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] {
            return Err(mismatch());
        }
        if bs != [ks[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: bs.to_vec(),
                right: vec![ks[0]],
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: xs.to_vec(),
                reason: "stride must be at least 1".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(mismatch());
        }
        let geom = gemm::ConvGeom { c, h, w, kh, kw, stride, pad };
        let (oh, ow) = geom.out_hw();
        let (rows, cols_n) = (c * kh * kw, oh * ow);

        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * k * cols_n];
        let mut saved = vec![0.0; n * rows * cols_n];
        for i in 0..n {
            let cols = &mut saved[i * rows * cols_n..(i + 1) * rows * cols_n];
            geom.im2col(&x[i * c * h * w..(i + 1) * c * h * w], cols);
            let o = &mut out[i * k * cols_n..(i + 1) * k * cols_n];
            gemm::matmul(k, rows, cols_n, wt, false, cols, false, o, false);
            for (row, bias) in o.chunks_mut(cols_n).zip(b) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        if !self.grad_enabled {
            saved = Vec::new();
        }
        let value = Tensor::new([n, k, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, stride, pad, cols: saved }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log of `max(x, LOG_EPS)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_EPS).ln(), Op::Log(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Gradient reversal: identity forward, gradient scaled by `-coeff` backward.
    pub fn grl(&mut self, x: Var, coeff: f64) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Grl(x, coeff))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: Vec::new(),
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let part = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * part..(o + 1) * part]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("cannot take [{start}, {}) on axis {axis}", start + len),
            });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Narrow { input: x, axis, start }))
    }

    /// Nearest-neighbour ×2 upsampling of the two trailing axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "upsample2x",
                shape,
                reason: "need at least two axes".into(),
            });
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = shape[..r - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut data = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = 2 * h;
        out_shape[r - 1] = 2 * w;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Upsample2x(x)))
    }

    /// Adaptive average pooling of the two trailing axes to `out_h × out_w`.
    pub fn avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || out_h == 0 || out_w == 0 || out_h > shape[r - 2] || out_w > shape[r - 1] {
            return Err(TensorError::InvalidShape {
                op: "avg_pool",
                shape,
                reason: format!("cannot pool to {out_h}x{out_w}"),
            });
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = shape[..r - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut data = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += s[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    data[p * out_h * out_w + oy * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = out_h;
        out_shape[r - 1] = out_w;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::AvgPool(x)))
    }

    /// Min-max normalization of each trailing `H×W` plane to `[0, 1]`.
    ///
    /// Planes whose range is below [`NORM_EPS`] map to zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "minmax_normalize",
                shape,
                reason: "need at least two axes".into(),
            });
        }
        let plane = shape[r - 2] * shape[r - 1];
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        let mut extrema = Vec::new();
        for (p, chunk) in src.chunks(plane.max(1)).enumerate() {
            let (mut lo, mut hi) = (0, 0);
            for (i, &v) in chunk.iter().enumerate() {
                if v < chunk[lo] {
                    lo = i;
                }
                if v > chunk[hi] {
                    hi = i;
                }
            }
            let range = chunk[hi] - chunk[lo];
            if range < NORM_EPS {
                extrema.push(None);
                continue;
            }
            let out = &mut data[p * plane..(p + 1) * plane];
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = (v - chunk[lo]) / range;
            }
            extrema.push(Some((lo, hi, range)));
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MinMaxNorm { input: x, extrema }))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x))
    }

    /// `Σ coeff·term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(TensorError::NonScalar { op: "weighted_sum", shape: t.shape().to_vec() });
            }
            total += c * t.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Mean squared error with mean reduction.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mse", va, vb)?;
        let n = va.len().max(1) as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    /// Binary cross-entropy on logits, mean over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var, TensorError> {
        let x = self.value(logits);
        same_shape("bce_with_logits", x, targets)?;
        let n = x.len().max(1) as f64;
        let s: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &z)| x.max(0.0) - x * z + (-x.abs()).exp().ln_1p())
            .sum();
        let op = Op::BceWithLogits { logits, targets: targets.data().to_vec() };
        Ok(self.push(Tensor::scalar(s / n), op))
    }

    /// Softmax cross-entropy over axis 1 of `logits`.
    ///
    /// `targets` has one entry per position (every index except the class
    /// axis, row-major); `None` positions are ignored. The loss is the mean
    /// over labeled positions, or zero when nothing is labeled.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape,
                reason: "need a class axis at position 1".into(),
            });
        }
        let (outer, classes, inner) = split_axis(&shape, 1);
        if targets.len() != outer * inner {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape,
                reason: format!("class {bad} out of range"),
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        let mut labeled = 0usize;
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * classes + c) * inner + i;
                let max = (0..classes).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..classes).map(|c| (x[at(c)] - max).exp()).sum();
                for c in 0..classes {
                    probs[at(c)] = (x[at(c)] - max).exp() / z;
                }
                if let Some(t) = targets[o * inner + i] {
                    loss += max + z.ln() - x[at(t)];
                    labeled += 1;
                }
            }
        }
        let value = if labeled == 0 { 0.0 } else { loss / labeled as f64 };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(value), op))
    }

    /// Masked smooth-L1 with transition point `beta`, averaged over the
    /// total mask weight (zero when the mask is empty).
    pub fn smooth_l1(&mut self, pred: Var, targets: &Tensor, mask: &Tensor, beta: f64) -> Result<Var, TensorError> {
        let p = self.value(pred);
        same_shape("smooth_l1", p, targets)?;
        same_shape("smooth_l1 mask", p, mask)?;
        let weight: f64 = mask.data().iter().sum();
        let mut s = 0.0;
        for ((&x, &t), &m) in p.data().iter().zip(targets.data()).zip(mask.data()) {
            if m != 0.0 {
                s += m * smooth_l1(x - t, beta).0;
            }
        }
        let value = if weight > 0.0 { s / weight } else { 0.0 };
        let op = Op::SmoothL1 {
            pred,
            targets: targets.data().to_vec(),
            mask: mask.data().to_vec(),
            beta,
        };
        Ok(self.push(Tensor::scalar(value), op))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalar { op: "backward", shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => acc(*x, &mut |gx| {
                for ((gx, &gi), &o) in gx.iter_mut().zip(g).zip(out) {
                    if o > 0.0 {
                        *gx += gi;
                    }
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((gx, &gi), &o) in gx.iter_mut().zip(g).zip(out) {
                    *gx += gi * o * (1.0 - o);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for ((gx, &gi), &o) in gx.iter_mut().zip(g).zip(out) {
                    *gx += gi * o;
                }
            }),
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((gx, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > LOG_EPS {
                            *gx += gi / v;
                        }
                    }
                })
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b)),
            Op::Grl(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a -= c * b)),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let dim = node.value.shape()[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let part = self.nodes[v.0].value.shape()[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[(o * dim + offset) * inner..(o * dim + offset + part) * inner];
                            let dst = &mut gv[o * part * inner..(o + 1) * part * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += part;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.nodes[input.0].value.shape();
                let (outer, dim, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                acc(*input, &mut |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Upsample2x(x) => {
                let s = node.value.shape();
                let r = s.len();
                let (oh, ow) = (s[r - 2], s[r - 1]);
                let (h, w) = (oh / 2, ow / 2);
                acc(*x, &mut |gx| {
                    for (p, gp) in gx.chunks_mut(h * w).enumerate() {
                        let src = &g[p * oh * ow..(p + 1) * oh * ow];
                        for y in 0..oh {
                            for xx in 0..ow {
                                gp[(y / 2) * w + xx / 2] += src[y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool(x) => {
                let in_shape = self.nodes[x.0].value.shape();
                let r = in_shape.len();
                let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
                let s = node.value.shape();
                let (out_h, out_w) = (s[r - 2], s[r - 1]);
                acc(*x, &mut |gx| {
                    for (p, gp) in gx.chunks_mut(h * w).enumerate() {
                        for oy in 0..out_h {
                            let (y0, y1) = pool_bin(oy, h, out_h);
                            for ox in 0..out_w {
                                let (x0, x1) = pool_bin(ox, w, out_w);
                                let share = g[p * out_h * out_w + oy * out_w + ox]
                                    / ((y1 - y0) * (x1 - x0)) as f64;
                                for y in y0..y1 {
                                    gp[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += share);
                                }
                            }
                        }
                    }
                });
            }
            Op::MinMaxNorm { input, extrema } => {
                let s = node.value.shape();
                let plane = s[s.len() - 2] * s[s.len() - 1];
                acc(*input, &mut |gx| {
                    for (p, ext) in extrema.iter().enumerate() {
                        let Some((lo, hi, range)) = *ext else { continue };
                        let gp = &g[p * plane..(p + 1) * plane];
                        let yp = &out[p * plane..(p + 1) * plane];
                        let dst = &mut gx[p * plane..(p + 1) * plane];
                        let mut to_lo = 0.0;
                        let mut to_hi = 0.0;
                        for ((d, &gi), &y) in dst.iter_mut().zip(gp).zip(yp) {
                            *d += gi / range;
                            to_lo += gi * (y - 1.0) / range;
                            to_hi -= gi * y / range;
                        }
                        dst[lo] += to_lo;
                        dst[hi] += to_hi;
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len().max(1) as f64;
                let share = g[0] / n;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += share));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    acc(v, &mut |gv| gv[0] += c * g[0]);
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let k = 2.0 * g[0] / va.len().max(1) as f64;
                acc(*a, &mut |ga| {
                    for ((d, x), y) in ga.iter_mut().zip(va).zip(vb) {
                        *d += k * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, x), y) in gb.iter_mut().zip(va).zip(vb) {
                        *d -= k * (x - y);
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.nodes[logits.0].value.data();
                let k = g[0] / x.len().max(1) as f64;
                acc(*logits, &mut |gx| {
                    for ((d, &xi), &z) in gx.iter_mut().zip(x).zip(targets) {
                        *d += k * (sigmoid(xi) - z);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let labeled = targets.iter().filter(|t| t.is_some()).count();
                if labeled == 0 {
                    return;
                }
                let shape = self.nodes[logits.0].value.shape();
                let (_, classes, inner) = split_axis(shape, 1);
                let k = g[0] / labeled as f64;
                acc(*logits, &mut |gx| {
                    for (pos, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let (o, i) = (pos / inner, pos % inner);
                        for c in 0..classes {
                            let at = (o * classes + c) * inner + i;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gx[at] += k * (probs[at] - onehot);
                        }
                    }
                });
            }
            Op::SmoothL1 { pred, targets, mask, beta } => {
                let weight: f64 = mask.iter().sum();
                if weight <= 0.0 {
                    return;
                }
                let x = self.nodes[pred.0].value.data();
                let k = g[0] / weight;
                acc(*pred, &mut |gx| {
                    for (((d, &xi), &t), &m) in gx.iter_mut().zip(x).zip(targets).zip(mask) {
                        if m != 0.0 {
                            *d += k * m * smooth_l1(xi - t, *beta).1;
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, bias, stride, pad, cols } => {
                let xs = self.nodes[input.0].value.shape();
                let ks = self.nodes[kernel.0].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (k, kh, kw) = (ks[0], ks[2], ks[3]);
                let geom = gemm::ConvGeom { c, h, w, kh, kw, stride: *stride, pad: *pad };
                let (oh, ow) = geom.out_hw();
                let (rows, p) = (c * kh * kw, oh * ow);
                let wt = self.nodes[kernel.0].value.data();

                acc(*bias, &mut |gb| {
                    for i in 0..n {
                        for (kk, d) in gb.iter_mut().enumerate() {
                            *d += g[(i * k + kk) * p..(i * k + kk + 1) * p].iter().sum::<f64>();
                        }
                    }
                });
                acc(*kernel, &mut |gw| {
                    for i in 0..n {
                        let go = &g[i * k * p..(i + 1) * k * p];
                        let col = &cols[i * rows * p..(i + 1) * rows * p];
                        gemm::matmul_acc(k, p, rows, go, false, col, true, gw);
                    }
                });
                acc(*input, &mut |gx| {
                    let mut dcols = vec![0.0; rows * p];
                    for i in 0..n {
                        let go = &g[i * k * p..(i + 1) * k * p];
                        gemm::matmul(rows, k, p, wt, true, go, false, &mut dcols, false);
                        geom.col2im(&dcols, &mut gx[i * c * h * w..(i + 1) * c * h * w]);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([1, 1, 3, 3], |i| i as f64 * 0.5 - 1.0));
        let k = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_hand_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_output_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 3, 8, 8]));
        let k = tape.leaf(Tensor::zeros([4, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros([4]));
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 3, 8, 8]));
        let k = tape.leaf(Tensor::zeros([4, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros([4]));
        let msg = tape.conv2d(x, k, b, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 8, 8]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let l = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let z = tape.leaf(t(&[2], &[0.0, 0.0]));
        let o = tape.leaf(t(&[2], &[1.0, 1.0]));
        let l = tape.mse(z, o).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy(x, &[Some(0)]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_without_labels_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 3, 2, 2], 0.3));
        let l = tape.cross_entropy(x, &[None; 4]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grl_flips_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let y = tape.grl(x, 1.0);
        assert_eq!(tape.value(y), tape.value(x));
        let target = tape.leaf(Tensor::zeros([3]));
        let l = tape.mse(y, target).unwrap();
        let g = tape.backward(l).unwrap();
        let expected: Vec<f64> = tape.value(x).data().iter().map(|v| -2.0 * v / 3.0).collect();
        assert_eq!(g.wrt(x).data(), expected.as_slice());

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let y = tape.grl(x, 0.0);
        let target = tape.leaf(Tensor::zeros([3]));
        let l = tape.mse(y, target).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_hand_derivative() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let zero = tape.leaf(Tensor::scalar(0.0));
        let other = tape.leaf(Tensor::scalar(7.0));
        let l = tape.mse(w, zero).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(w).item(), 6.0);
        assert_eq!(g.wrt(other).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalar { .. })));
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.exp(x);
        assert!((tape.value(y).item() - std::f64::consts::E).abs() < 1e-15);
        assert!(matches!(tape.backward(y), Err(TensorError::GradDisabled)));
    }

    #[test]
    fn log_is_floored() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, -3.0]));
        let y = tape.log(x);
        assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
        assert_eq!(tape.value(y).data()[0], LOG_EPS.ln());
    }

    #[test]
    fn minmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = tape.minmax_normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.0]);
        let c = tape.leaf(Tensor::full([2, 2], 4.0));
        let y = tape.minmax_normalize(c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 5, 2], |i| i as f64));
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 3).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn avg_pool_blocks() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
        let y = tape.avg_pool(x, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn upsample_repeats() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
