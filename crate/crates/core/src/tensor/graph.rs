use super::{numel, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var, axis: usize },
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    LogSigmoid(Var),
    Powi { x: Var, n: i32 },
    Clamp { x: Var, lo: f64, hi: f64 },
    SmoothL1 { x: Var, beta: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    ReduceMax { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    Reshape(Var),
    Gather { x: Var, indices: Vec<usize> },
    ScatterAdd { x: Var, indices: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample { x: Var, factor: usize },
    MaskedMax { x: Var, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward sweep is a single reverse pass over the node list.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
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

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Output extent of a 3x3 convolution; `None` if the padded input is too small.
pub(crate) fn conv_out_len(n: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= 3).then(|| (padded - 3) / stride + 1)
}

/// Output indices `o` for which `o * stride + k - pad` lands inside `[0, n)`.
fn conv_valid_range(n: usize, out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let last_in = n as isize - 1 + pad as isize - k as isize;
    if last_in < 0 {
        return (0, 0);
    }
    let hi = ((last_in as usize) / stride + 1).min(out);
    (lo.min(hi), hi)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        check_finite(value.data(), name)?;
        let rg = self.op_requires_grad(&op);
        Ok(self.push(value, op, rg))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => rg(a) || rg(b),
            Op::AddBias { x, bias, .. } => rg(x) || rg(bias),
            Op::Conv2d { x, w, b, .. } => rg(x) || rg(w) || rg(b),
            Op::Concat { inputs, .. } => inputs.iter().any(rg),
            Op::Transpose(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sin(x)
            | Op::LogSigmoid(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Affine { x, .. }
            | Op::Powi { x, .. }
            | Op::Clamp { x, .. }
            | Op::SmoothL1 { x, .. }
            | Op::Slice { x, .. }
            | Op::ReduceMax { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::Upsample { x, .. }
            | Op::MaskedMax { x, .. } => rg(x),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward output with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, op: &str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    // ----- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_checked(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.value(a).data(), m, n);
        let value = Tensor::new(vec![n, m], out)?;
        self.push_checked(value, Op::Transpose(a), "transpose")
    }

    // ----- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(a, b, name)?;
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_checked(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_checked(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_checked(value, Op::Mul(a, b), "mul")
    }

    /// `x + bias`, with the 1-D `bias` broadcast along `axis`. The only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "add_bias")?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        if self.shape(bias) != [len] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match axis {axis} of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for o in 0..outer {
            for (l, &bv) in b.iter().enumerate() {
                let base = (o * len + l) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push_checked(value, Op::AddBias { x, bias, axis }, "add_bias")
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.map(x, |v| scale * v + shift);
        self.push_checked(value, Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, sigmoid);
        self.push_checked(value, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push_checked(value, Op::Relu(x), "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::exp);
        self.push_checked(value, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::ln);
        self.push_checked(value, Op::Log(x), "log")
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::sin);
        self.push_checked(value, Op::Sin(x), "sin")
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, log_sigmoid);
        self.push_checked(value, Op::LogSigmoid(x), "log_sigmoid")
    }

    pub fn powi(&mut self, x: Var, n: i32) -> Result<Var> {
        let value = self.map(x, |v| v.powi(n));
        self.push_checked(value, Op::Powi { x, n }, "powi")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.map(x, |v| v.clamp(lo, hi));
        self.push_checked(value, Op::Clamp { x, lo, hi }, "clamp")
    }

    /// Elementwise Huber-style smooth L1 with transition point `beta`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        let value = self.map(x, |v| smooth_l1(v, beta));
        self.push_checked(value, Op::SmoothL1 { x, beta }, "smooth_l1")
    }

    // ----- structural -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), self.requires_grad(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {:?} vs {:?} on axis {axis}", s, base)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, Op::Concat { inputs: inputs.to_vec(), axis }, "concat")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let s = self.shape(x).to_vec();
        if start > end || end > s[axis] {
            return Err(Error::Index(format!("slice {start}..{end} of axis length {}", s[axis])));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, Op::Slice { x, axis, start }, "slice")
    }

    // ----- reductions -------------------------------------------------------

    /// Max along `axis`; backward routes to the first maximal element.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "reduce_max")?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&s, axis);
        if len == 0 {
            return Err(Error::dim("reduce_max over an empty axis"));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, Op::ReduceMax { x, argmax }, "reduce_max")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push_checked(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().sum();
        self.push_checked(Tensor::scalar(s / n as f64), Op::Mean(x), "mean")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&s, axis);
        if len == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (d[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        self.push_checked(value, Op::Softmax { x, axis }, "softmax")
    }

    /// Stable `ln(sum(exp(x)))` along `axis`.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "logsumexp")?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&s, axis);
        if len == 0 {
            return Err(Error::dim("logsumexp over an empty axis"));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| d[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| (d[idx(l)] - m).exp()).sum();
                out.push(m + z.ln());
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, Op::LogSumExp { x, axis }, "logsumexp")
    }

    // ----- indexing ---------------------------------------------------------

    /// `out.flat[i] = x.flat[indices[i]]`.
    pub fn gather(&mut self, x: Var, indices: &[usize], shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != indices.len() {
            return Err(Error::dim(format!(
                "gather: {} indices cannot fill shape {:?}",
                indices.len(),
                shape
            )));
        }
        let d = self.value(x).data();
        let out = indices
            .iter()
            .map(|&i| {
                d.get(i)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("gather index {i} >= {}", d.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, Op::Gather { x, indices: indices.to_vec() }, "gather")
    }

    /// `out = zeros(shape); out.flat[indices[i]] += x.flat[i]`. Adjoint of [`Graph::gather`].
    pub fn scatter_add(&mut self, x: Var, indices: &[usize], shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let d = self.value(x).data();
        if d.len() != indices.len() {
            return Err(Error::dim(format!(
                "scatter_add: {} values but {} indices",
                d.len(),
                indices.len()
            )));
        }
        let mut out = vec![0.0; numel(&shape)];
        for (&i, &v) in indices.iter().zip(d) {
            let n = out.len();
            *out.get_mut(i)
                .ok_or_else(|| Error::Index(format!("scatter index {i} >= {n}")))? += v;
        }
        let value = Tensor::new(shape, out)?;
        self.push_checked(value, Op::ScatterAdd { x, indices: indices.to_vec() }, "scatter_add")
    }

    // ----- image ops --------------------------------------------------------

    /// 3x3 cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, 3, 3]` plus bias.
    ///
    /// Output size is `floor((H + 2*pad - 3) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if !(1..=2).contains(&stride) || pad > 1 {
            return Err(Error::dim(format!("conv2d: stride {stride}, pad {pad} unsupported")));
        }
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::dim(format!("conv2d: input {:?}, kernel {:?}", sx, sw)));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::dim(format!("conv2d: bias {:?} for {} outputs", self.shape(b), sw[0])));
        }
        let (ci, h, wd, co) = (sx[0], sx[1], sx[2], sw[0]);
        let (ho, wo) = match (conv_out_len(h, stride, pad), conv_out_len(wd, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::dim(format!("conv2d: input {h}x{wd} too small for pad {pad}"))),
        };
        let geom = ConvGeom { ci, h, w: wd, co, ho, wo, stride, pad };
        let out = conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(vec![co, ho, wo], out)?;
        self.push_checked(value, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::dim(format!("upsample: shape {:?}, factor {factor}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let d = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let src = &d[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                let dst = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
                for (xo, v) in dst.iter_mut().enumerate() {
                    *v = src[xo / factor];
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        self.push_checked(value, Op::Upsample { x, factor }, "upsample")
    }

    /// Max over the first `counts[n]` rows of each `x[n]` (`x: [N, P, D]`); rows with
    /// count zero produce zeros.
    pub fn masked_max(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != counts.len() {
            return Err(Error::dim(format!("masked_max: shape {:?} with {} counts", s, counts.len())));
        }
        let (n, p, dim) = (s[0], s[1], s[2]);
        if let Some(&c) = counts.iter().find(|&&c| c > p) {
            return Err(Error::Index(format!("masked_max: count {c} exceeds {p} rows")));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; n * dim];
        let mut argmax = vec![usize::MAX; n * dim];
        for (i, &cnt) in counts.iter().enumerate() {
            if cnt == 0 {
                continue;
            }
            for c in 0..dim {
                let mut best = (i * p) * dim + c;
                for j in 1..cnt {
                    let idx = (i * p + j) * dim + c;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out[i * dim + c] = d[best];
                argmax[i * dim + c] = best;
            }
        }
        let value = Tensor::new(vec![n, dim], out)?;
        self.push_checked(value, Op::MaskedMax { x, argmax }, "masked_max")
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Errors if `loss` is not a single element or if gradients from a
    /// previous sweep have not been cleared with [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward called twice without reset_grads"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        // Accumulates into the gradient buffer of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                acc(*a, &mut |ga| {
                    // ga += g * b^T
                    let bt = transpose_raw(val(*b), k, n);
                    let prod = matmul_raw(g, &bt, m, n, k);
                    add_into(ga, &prod);
                });
                acc(*b, &mut |gb| {
                    let at = transpose_raw(val(*a), m, k);
                    let prod = matmul_raw(&at, g, k, m, n);
                    add_into(gb, &prod);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (shp(*a)[0], shp(*a)[1]);
                acc(*a, &mut |ga| add_into(ga, &transpose_raw(g, n, m)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddBias { x, bias, axis } => {
                acc(*x, &mut |gx| add_into(gx, g));
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                acc(*bias, &mut |gb| {
                    for o in 0..outer {
                        for (l, d) in gb.iter_mut().enumerate().take(len) {
                            let base = (o * len + l) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += scale * s));
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |gx| {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                acc(*x, &mut |gx| {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                });
            }
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gi / xi;
                    }
                });
            }
            Op::Sin(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gi * xi.cos();
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gi * sigmoid(-xi);
                    }
                });
            }
            Op::Powi { x, n } => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        *d += gi * (*n as f64) * xi.powi(n - 1);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        if xi > lo && xi < hi {
                            *d += gi;
                        }
                    }
                });
            }
            Op::SmoothL1 { x, beta } => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        let slope = if xi.abs() < *beta { xi / beta } else { xi.signum() };
                        *d += gi * slope;
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = shp(v)[*axis];
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                let width = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + width) * inner];
                        add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                    }
                });
            }
            Op::ReduceMax { x, argmax, .. } => {
                acc(*x, &mut |gx| {
                    for (&src, gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = shp(*x).iter().product::<usize>() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { x, axis } => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let lse = y[o * inner + i];
                            let go = g[o * inner + i];
                            for l in 0..len {
                                let idx = (o * len + l) * inner + i;
                                gx[idx] += go * (vx[idx] - lse).exp();
                            }
                        }
                    }
                });
            }
            Op::Gather { x, indices } => {
                acc(*x, &mut |gx| {
                    for (&src, gi) in indices.iter().zip(g) {
                        gx[src] += gi;
                    }
                });
            }
            Op::ScatterAdd { x, indices } => {
                acc(*x, &mut |gx| {
                    for (d, &dst) in gx.iter_mut().zip(indices) {
                        *d += g[dst];
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (sx, sw) = (shp(*x), shp(*w));
                let so = node.value.shape();
                let geom = ConvGeom {
                    ci: sx[0],
                    h: sx[1],
                    w: sx[2],
                    co: sw[0],
                    ho: so[1],
                    wo: so[2],
                    stride: *stride,
                    pad: *pad,
                };
                acc(*x, &mut |gx| conv_backward_input(g, val(*w), gx, &geom));
                acc(*w, &mut |gw| conv_backward_weight(g, val(*x), gw, &geom));
                acc(*b, &mut |gb| {
                    let plane = geom.ho * geom.wo;
                    for (o, d) in gb.iter_mut().enumerate() {
                        *d += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let s = shp(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h * factor, w * factor);
                acc(*x, &mut |gx| {
                    for ch in 0..c {
                        for yo in 0..ho {
                            let row = (ch * h + yo / factor) * w;
                            for xo in 0..wo {
                                gx[row + xo / factor] += g[(ch * ho + yo) * wo + xo];
                            }
                        }
                    }
                });
            }
            Op::MaskedMax { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (&src, gi) in argmax.iter().zip(g) {
                        if src != usize::MAX {
                            gx[src] += gi;
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn smooth_l1(v: f64, beta: f64) -> f64 {
    if v.abs() < beta {
        0.5 * v * v / beta
    } else {
        v.abs() - 0.5 * beta
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

/// Visits every (output row, input row, output col range, input col start) for a kernel tap.
fn for_each_tap_row(g: &ConvGeom, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (oy_lo, oy_hi) = conv_valid_range(g.h, g.ho, g.stride, g.pad, ky);
    let (ox_lo, ox_hi) = conv_valid_range(g.w, g.wo, g.stride, g.pad, kx);
    if ox_lo >= ox_hi {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * g.stride + ky - g.pad;
        let ix0 = ox_lo * g.stride + kx - g.pad;
        f(oy, iy, ox_lo, ox_hi, ix0);
    }
}

/// Unfolds `x` into `[C_in * 9, H' * W']` patch columns; out-of-image taps are zero.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut cols = vec![0.0; g.ci * 9 * plane_out];
    for i in 0..g.ci {
        let in_plane = &x[i * plane_in..(i + 1) * plane_in];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((i * 3 + ky) * 3 + kx) * plane_out..][..plane_out];
                for_each_tap_row(g, ky, kx, |oy, iy, lo, hi, ix0| {
                    let dst = &mut row[oy * g.wo + lo..oy * g.wo + hi];
                    let src_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = src_row[ix0 + j * g.stride];
                    }
                });
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch-column gradients back onto the image.
fn col2im(cols: &[f64], gx: &mut [f64], g: &ConvGeom) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for i in 0..g.ci {
        let gx_plane = &mut gx[i * plane_in..(i + 1) * plane_in];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((i * 3 + ky) * 3 + kx) * plane_out..][..plane_out];
                for_each_tap_row(g, ky, kx, |oy, iy, lo, hi, ix0| {
                    let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                    let dst_row = &mut gx_plane[iy * g.w..(iy + 1) * g.w];
                    for (j, s) in src.iter().enumerate() {
                        dst_row[ix0 + j * g.stride] += s;
                    }
                });
            }
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(d, s)| *d += alpha * s);
}

/// Dot product with four partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let k = g.ci * 9;
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.co * plane_out];
    for o in 0..g.co {
        let dst = &mut out[o * plane_out..(o + 1) * plane_out];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for r in 0..k {
            let wv = w[o * k + r];
            if wv != 0.0 {
                axpy(wv, &cols[r * plane_out..(r + 1) * plane_out], dst);
            }
        }
    }
    out
}

fn conv_backward_input(gout: &[f64], w: &[f64], gx: &mut [f64], g: &ConvGeom) {
    let plane_out = g.ho * g.wo;
    let k = g.ci * 9;
    let mut gcols = vec![0.0; k * plane_out];
    for o in 0..g.co {
        let go = &gout[o * plane_out..(o + 1) * plane_out];
        for r in 0..k {
            let wv = w[o * k + r];
            if wv != 0.0 {
                axpy(wv, go, &mut gcols[r * plane_out..(r + 1) * plane_out]);
            }
        }
    }
    col2im(&gcols, gx, g);
}

fn conv_backward_weight(gout: &[f64], x: &[f64], gw: &mut [f64], g: &ConvGeom) {
    let plane_out = g.ho * g.wo;
    let k = g.ci * 9;
    let cols = im2col(x, g);
    for o in 0..g.co {
        let go = &gout[o * plane_out..(o + 1) * plane_out];
        for r in 0..k {
            gw[o * k + r] += dot(go, &cols[r * plane_out..(r + 1) * plane_out]);
        }
    }
}
