//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! The op set is closed and enumerable: every op records itself on the
//! [`Tape`] and owns one backward rule, so gradient correctness is testable
//! op by op against central finite differences (see [`grad_check`]).
//!
//! A tape is single-threaded; independent tapes may run concurrently.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major tensor. Shape is interpreted per op: images and feature
/// maps are `[N, C, H, W]`, matrices `[m, k]`, vectors `[n]`, scalars `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(Error::shape("tensor_new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Add { a: VarId, b: VarId, out: VarId },
    Sub { a: VarId, b: VarId, out: VarId },
    Mul { a: VarId, b: VarId, out: VarId },
    ScalarMul { a: VarId, c: f64, out: VarId },
    Matmul { a: VarId, b: VarId, bias: Option<VarId>, out: VarId, m: usize, k: usize, n: usize },
    Conv2d { x: VarId, w: VarId, bias: Option<VarId>, out: VarId, stride: usize, pad: usize, dilation: usize },
    LeakyRelu { x: VarId, slope: f64, out: VarId },
    Sigmoid { x: VarId, out: VarId },
    Mean { x: VarId, out: VarId },
    MeanHw { x: VarId, out: VarId },
    Sum { x: VarId, out: VarId },
    Square { x: VarId, out: VarId },
    Sqrt { x: VarId, out: VarId },
    ConcatChannels { xs: Vec<VarId>, out: VarId },
    L2NormPerSample { x: VarId, out: VarId },
    LogSoftmaxChannels { x: VarId, out: VarId },
    NllFromLogSoftmax { logp: VarId, labels: Vec<usize>, out: VarId },
    Reshape { x: VarId, out: VarId },
}

/// Wengert tape: ops are recorded in execution order and replayed in reverse
/// by [`Tape::backward`]. Gradients persist on `requires_grad` leaves and
/// accumulate across backward calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    needs: Vec<bool>,
    is_leaf: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, t: Tensor, needs: bool, leaf: bool) -> VarId {
        let id = VarId(self.vals.len());
        self.vals.push(t);
        self.needs.push(needs);
        self.is_leaf.push(leaf);
        self.grads.push(None);
        id
    }

    /// Register an input value. Gradients flow to it only if `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<VarId> {
        if !t.all_finite() {
            return Err(Error::NonFinite { context: "leaf" });
        }
        Ok(self.push(t, requires_grad, true))
    }

    /// Convenience: a leaf that does not participate in differentiation.
    pub fn constant(&mut self, t: Tensor) -> Result<VarId> {
        self.leaf(t, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient accumulated on a `requires_grad` leaf, if any backward pass
    /// reached it.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn record(&mut self, out: Tensor, inputs: &[VarId], op: impl FnOnce(VarId) -> Op, name: &'static str) -> Result<VarId> {
        if !out.all_finite() {
            return Err(Error::NonFinite { context: name });
        }
        let needs = inputs.iter().any(|i| self.needs[i.0]);
        let id = self.push(out, needs, false);
        self.ops.push(op(id));
        Ok(id)
    }

    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.vals[a.0].shape != self.vals[b.0].shape {
            return Err(Error::shape(op, &self.vals[a.0].shape, &self.vals[b.0].shape));
        }
        Ok(())
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x + y);
        self.record(data, &[a, b], |out| Op::Add { a, b, out }, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x - y);
        self.record(data, &[a, b], |out| Op::Sub { a, b, out }, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x * y);
        self.record(data, &[a, b], |out| Op::Mul { a, b, out }, "mul")
    }

    pub fn scalar_mul(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let data = map(&self.vals[a.0], |x| c * x);
        self.record(data, &[a], |out| Op::ScalarMul { a, c, out }, "scalar_mul")
    }

    pub fn square(&mut self, x: VarId) -> Result<VarId> {
        let data = map(&self.vals[x.0], |v| v * v);
        self.record(data, &[x], |out| Op::Square { x, out }, "square")
    }

    pub fn sqrt(&mut self, x: VarId) -> Result<VarId> {
        let data = map(&self.vals[x.0], math::sqrt);
        self.record(data, &[x], |out| Op::Sqrt { x, out }, "sqrt")
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> Result<VarId> {
        let data = map(&self.vals[x.0], |v| if v > 0.0 { v } else { slope * v });
        self.record(data, &[x], |out| Op::LeakyRelu { x, slope, out }, "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let data = map(&self.vals[x.0], math::sigmoid);
        self.record(data, &[x], |out| Op::Sigmoid { x, out }, "sigmoid")
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.vals[x.0].data.iter().sum();
        self.record(Tensor::scalar(s), &[x], |out| Op::Sum { x, out }, "sum")
    }

    pub fn mean(&mut self, x: VarId) -> Result<VarId> {
        let n = self.vals[x.0].numel() as f64;
        let s: f64 = self.vals[x.0].data.iter().sum();
        self.record(Tensor::scalar(s / n), &[x], |out| Op::Mean { x, out }, "mean")
    }

    /// Mean over the two spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn mean_hw(&mut self, x: VarId) -> Result<VarId> {
        let sh = self.vals[x.0].shape.clone();
        if sh.len() != 4 {
            return Err(Error::shape("mean_hw", &sh, &[0, 0, 0, 0]));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let hw = (h * w) as f64;
        let src = &self.vals[x.0].data;
        let mut data = vec![0.0; n * c];
        for i in 0..n * c {
            let base = i * h * w;
            data[i] = src[base..base + h * w].iter().sum::<f64>() / hw;
        }
        let t = Tensor::new(&[n, c], data)?;
        self.record(t, &[x], |out| Op::MeanHw { x, out }, "mean_hw")
    }

    /// Per-sample Euclidean norm over all trailing axes: `[N, ...] -> [N]`.
    pub fn l2_norm_per_sample(&mut self, x: VarId) -> Result<VarId> {
        let sh = self.vals[x.0].shape.clone();
        let n = sh[0];
        let per = self.vals[x.0].numel() / n;
        let src = &self.vals[x.0].data;
        let mut data = vec![0.0; n];
        for i in 0..n {
            data[i] = math::l2_norm(&src[i * per..(i + 1) * per]);
        }
        let t = Tensor::new(&[n], data)?;
        self.record(t, &[x], |out| Op::L2NormPerSample { x, out }, "l2_norm_per_sample")
    }

    // -- structure -----------------------------------------------------------

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.vals[x.0].numel() {
            return Err(Error::shape("reshape", &self.vals[x.0].shape, shape));
        }
        let t = Tensor::new(shape, self.vals[x.0].data.clone())?;
        self.record(t, &[x], |out| Op::Reshape { x, out }, "reshape")
    }

    /// Concatenate along the channel axis: every input `[N, C_i, H, W]`.
    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::Usage("concat_channels: no inputs".into()));
        }
        let first = self.vals[xs[0].0].shape.clone();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", &first, &[0, 0, 0, 0]));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for x in xs {
            let sh = &self.vals[x.0].shape;
            if sh.len() != 4 || sh[0] != n || sh[2] != h || sh[3] != w {
                return Err(Error::shape("concat_channels", &first, sh));
            }
            c_total += sh[1];
        }
        let mut data = vec![0.0; n * c_total * h * w];
        let plane = h * w;
        for i in 0..n {
            let mut c_off = 0;
            for x in xs {
                let ci = self.vals[x.0].shape[1];
                let src = &self.vals[x.0].data[i * ci * plane..(i + 1) * ci * plane];
                let dst = &mut data[(i * c_total + c_off) * plane..(i * c_total + c_off + ci) * plane];
                dst.copy_from_slice(src);
                c_off += ci;
            }
        }
        let t = Tensor::new(&[n, c_total, h, w], data)?;
        let xs = xs.to_vec();
        self.record(t, &xs.clone(), |out| Op::ConcatChannels { xs, out }, "concat_channels")
    }

    // -- linear maps ---------------------------------------------------------

    /// `a [m,k] @ b [k,n] (+ bias [n]) -> [m,n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId, bias: Option<VarId>) -> Result<VarId> {
        let (sa, sb) = (self.vals[a.0].shape.clone(), self.vals[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if let Some(bid) = bias {
            let sbias = &self.vals[bid.0].shape;
            if self.vals[bid.0].numel() != n {
                return Err(Error::shape("matmul_bias", sbias, &[n]));
            }
        }
        let (da, db) = (&self.vals[a.0].data, &self.vals[b.0].data);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        if let Some(bid) = bias {
            let bd = self.vals[bid.0].data.clone();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += bd[j];
                }
            }
        }
        let t = Tensor::new(&[m, n], data)?;
        let mut inputs = vec![a, b];
        if let Some(bid) = bias {
            inputs.push(bid);
        }
        self.record(t, &inputs, |out| Op::Matmul { a, b, bias, out, m, k, n }, "matmul")
    }

    /// 2-D convolution: `x [N,C,H,W] * w [O,C,kh,kw] (+ bias [O]) -> [N,O,OH,OW]`.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<VarId> {
        if stride < 1 || dilation < 1 {
            return Err(Error::Usage(format!(
                "conv2d: stride and dilation must be >= 1 (got {stride}, {dilation})"
            )));
        }
        let (sx, sw) = (self.vals[x.0].shape.clone(), self.vals[w.0].shape.clone());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(bid) = bias {
            if self.vals[bid.0].numel() != sw[0] {
                return Err(Error::shape("conv2d_bias", &self.vals[bid.0].shape, &[sw[0]]));
            }
        }
        let geom = ConvGeom::new(&sx, &sw, stride, pad, dilation)
            .ok_or_else(|| Error::shape("conv2d", &sx, &sw))?;
        let bias_data = bias.map(|bid| self.vals[bid.0].data.clone());
        let out = conv2d_forward(&self.vals[x.0], &self.vals[w.0], bias_data.as_deref(), &geom);
        let mut inputs = vec![x, w];
        if let Some(bid) = bias {
            inputs.push(bid);
        }
        self.record(out, &inputs, |out| Op::Conv2d { x, w, bias, out, stride, pad, dilation }, "conv2d")
    }

    // -- classification ------------------------------------------------------

    /// Log-softmax over the channel axis of `[N, C, H, W]`.
    pub fn log_softmax_channels(&mut self, x: VarId) -> Result<VarId> {
        let sh = self.vals[x.0].shape.clone();
        if sh.len() != 4 {
            return Err(Error::shape("log_softmax_channels", &sh, &[0, 0, 0, 0]));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let plane = h * w;
        let src = &self.vals[x.0].data;
        let mut data = vec![0.0; src.len()];
        for i in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (i * c + ch) * plane + p;
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(src[idx(ch)]);
                }
                let mut lse = 0.0;
                for ch in 0..c {
                    lse += math::exp(src[idx(ch)] - mx);
                }
                let lse = mx + math::ln(lse);
                for ch in 0..c {
                    data[idx(ch)] = src[idx(ch)] - lse;
                }
            }
        }
        let t = Tensor::new(&sh, data)?;
        self.record(t, &[x], |out| Op::LogSoftmaxChannels { x, out }, "log_softmax_channels")
    }

    /// Mean negative log-likelihood of per-pixel labels against log-softmax
    /// scores. `labels` is row-major `[N, H, W]`, values in `0..C`.
    pub fn nll_from_log_softmax(&mut self, logp: VarId, labels: &[usize]) -> Result<VarId> {
        let sh = self.vals[logp.0].shape.clone();
        if sh.len() != 4 {
            return Err(Error::shape("nll_from_log_softmax", &sh, &[0, 0, 0, 0]));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::shape("nll_labels", &[labels.len()], &[n * plane]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let src = &self.vals[logp.0].data;
        let total = (n * plane) as f64;
        let mut s = 0.0;
        for i in 0..n {
            for p in 0..plane {
                s -= src[(i * c + labels[i * plane + p]) * plane + p];
            }
        }
        let labels = labels.to_vec();
        self.record(
            Tensor::scalar(s / total),
            &[logp],
            |out| Op::NllFromLogSoftmax { logp, labels, out },
            "nll_from_log_softmax",
        )
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// `requires_grad` leaf the loss depends on; accumulates across calls.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.vals[loss.0].shape
            )));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        scratch[loss.0] = Some(vec![1.0]);
        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backward_op(&op, &mut scratch);
        }
        for i in 0..self.vals.len() {
            if self.is_leaf[i] && self.needs[i] {
                if let Some(g) = scratch[i].take() {
                    accumulate(&mut self.grads[i], &g);
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, op: &Op, scratch: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Add { a, b, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    self.acc(scratch, *a, &d);
                    self.acc(scratch, *b, &d);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    self.acc(scratch, *a, &d);
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    self.acc(scratch, *b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    if self.needs[a.0] {
                        let da: Vec<f64> = d.iter().zip(&self.vals[b.0].data).map(|(x, y)| x * y).collect();
                        self.acc(scratch, *a, &da);
                    }
                    if self.needs[b.0] {
                        let db: Vec<f64> = d.iter().zip(&self.vals[a.0].data).map(|(x, y)| x * y).collect();
                        self.acc(scratch, *b, &db);
                    }
                }
            }
            Op::ScalarMul { a, c, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let da: Vec<f64> = d.iter().map(|v| c * v).collect();
                    self.acc(scratch, *a, &da);
                }
            }
            Op::Square { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let dx: Vec<f64> = d.iter().zip(&self.vals[x.0].data).map(|(g, v)| 2.0 * v * g).collect();
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::Sqrt { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(&self.vals[out.0].data)
                        .map(|(g, r)| 0.5 * g / r)
                        .collect();
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::LeakyRelu { x, slope, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(&self.vals[x.0].data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { slope * g })
                        .collect();
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::Sigmoid { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(&self.vals[out.0].data)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::Sum { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let dx = vec![d[0]; self.vals[x.0].numel()];
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::Mean { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let n = self.vals[x.0].numel() as f64;
                    let dx = vec![d[0] / n; self.vals[x.0].numel()];
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::MeanHw { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let sh = &self.vals[x.0].shape;
                    let (nc, hw) = (sh[0] * sh[1], sh[2] * sh[3]);
                    let mut dx = vec![0.0; self.vals[x.0].numel()];
                    for i in 0..nc {
                        let v = d[i] / hw as f64;
                        for p in 0..hw {
                            dx[i * hw + p] = v;
                        }
                    }
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::L2NormPerSample { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let n = self.vals[out.0].numel();
                    let per = self.vals[x.0].numel() / n;
                    let norms = &self.vals[out.0].data;
                    let src = &self.vals[x.0].data;
                    let mut dx = vec![0.0; self.vals[x.0].numel()];
                    for i in 0..n {
                        // Zero vector: subgradient 0 by convention.
                        if norms[i] > 0.0 {
                            let scale = d[i] / norms[i];
                            for p in 0..per {
                                dx[i * per + p] = scale * src[i * per + p];
                            }
                        }
                    }
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::Reshape { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    self.acc(scratch, *x, &d);
                }
            }
            Op::ConcatChannels { xs, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let osh = &self.vals[out.0].shape;
                    let (n, c_total, plane) = (osh[0], osh[1], osh[2] * osh[3]);
                    let mut c_off = 0;
                    for x in xs {
                        let ci = self.vals[x.0].shape[1];
                        if self.needs[x.0] {
                            let mut dx = vec![0.0; self.vals[x.0].numel()];
                            for i in 0..n {
                                let src = &d[(i * c_total + c_off) * plane..(i * c_total + c_off + ci) * plane];
                                dx[i * ci * plane..(i + 1) * ci * plane].copy_from_slice(src);
                            }
                            self.acc(scratch, *x, &dx);
                        }
                        c_off += ci;
                    }
                }
            }
            Op::Matmul { a, b, bias, out, m, k, n } => {
                if let Some(d) = scratch[out.0].clone() {
                    let (m, k, n) = (*m, *k, *n);
                    if self.needs[a.0] {
                        // dA = dOut @ B^T
                        let db_ = &self.vals[b.0].data;
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let g = d[i * n + j];
                                for p in 0..k {
                                    da[i * k + p] += g * db_[p * n + j];
                                }
                            }
                        }
                        self.acc(scratch, *a, &da);
                    }
                    if self.needs[b.0] {
                        // dB = A^T @ dOut
                        let da_ = &self.vals[a.0].data;
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = da_[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += av * d[i * n + j];
                                }
                            }
                        }
                        self.acc(scratch, *b, &db);
                    }
                    if let Some(bid) = bias {
                        if self.needs[bid.0] {
                            let mut dbias = vec![0.0; n];
                            for i in 0..m {
                                for j in 0..n {
                                    dbias[j] += d[i * n + j];
                                }
                            }
                            self.acc(scratch, *bid, &dbias);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, out, stride, pad, dilation } => {
                if let Some(d) = scratch[out.0].clone() {
                    let geom = ConvGeom::new(
                        &self.vals[x.0].shape,
                        &self.vals[w.0].shape,
                        *stride,
                        *pad,
                        *dilation,
                    )
                    .expect("geometry validated at forward");
                    let (dx, dw, dbias) = conv2d_backward(
                        &self.vals[x.0],
                        &self.vals[w.0],
                        &d,
                        &geom,
                        self.needs[x.0],
                        self.needs[w.0],
                        bias.map(|b| self.needs[b.0]).unwrap_or(false),
                    );
                    if let Some(dx) = dx {
                        self.acc(scratch, *x, &dx);
                    }
                    if let Some(dw) = dw {
                        self.acc(scratch, *w, &dw);
                    }
                    if let (Some(bid), Some(dbias)) = (bias, dbias) {
                        self.acc(scratch, *bid, &dbias);
                    }
                }
            }
            Op::LogSoftmaxChannels { x, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let sh = &self.vals[x.0].shape;
                    let (n, c, plane) = (sh[0], sh[1], sh[2] * sh[3]);
                    let logp = &self.vals[out.0].data;
                    let mut dx = vec![0.0; self.vals[x.0].numel()];
                    for i in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (i * c + ch) * plane + p;
                            let mut dsum = 0.0;
                            for ch in 0..c {
                                dsum += d[idx(ch)];
                            }
                            for ch in 0..c {
                                dx[idx(ch)] = d[idx(ch)] - math::exp(logp[idx(ch)]) * dsum;
                            }
                        }
                    }
                    self.acc(scratch, *x, &dx);
                }
            }
            Op::NllFromLogSoftmax { logp, labels, out } => {
                if let Some(d) = scratch[out.0].clone() {
                    let sh = &self.vals[logp.0].shape;
                    let (n, c, plane) = (sh[0], sh[1], sh[2] * sh[3]);
                    let scale = d[0] / (n * plane) as f64;
                    let mut dx = vec![0.0; self.vals[logp.0].numel()];
                    for i in 0..n {
                        for p in 0..plane {
                            dx[(i * c + labels[i * plane + p]) * plane + p] = -scale;
                        }
                    }
                    self.acc(scratch, *logp, &dx);
                }
            }
        }
    }

    fn acc(&self, scratch: &mut [Option<Vec<f64>>], id: VarId, g: &[f64]) {
        if !self.needs[id.0] {
            return;
        }
        accumulate(&mut scratch[id.0], g);
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize, dilation: usize) -> Option<Self> {
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let eff_h = dilation * (kh - 1) + 1;
        let eff_w = dilation * (kw - 1) + 1;
        if h + 2 * pad < eff_h || w + 2 * pad < eff_w {
            return None;
        }
        let oh = (h + 2 * pad - eff_h) / stride + 1;
        let ow = (w + 2 * pad - eff_w) / stride + 1;
        Some(ConvGeom { n, c, h, w, o, kh, kw, oh, ow, stride, pad, dilation })
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: &ConvGeom) -> Tensor {
    let xd = &x.data;
    let wd = &w.data;
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    for ni in 0..g.n {
        for oi in 0..g.o {
            let obase = (ni * g.o + oi) * g.oh * g.ow;
            if let Some(b) = bias {
                out[obase..obase + g.oh * g.ow].fill(b[oi]);
            }
            for ci in 0..g.c {
                let xbase = (ni * g.c + ci) * g.h * g.w;
                let wbase = (oi * g.c + ci) * g.kh * g.kw;
                for khi in 0..g.kh {
                    for kwi in 0..g.kw {
                        let wv = wd[wbase + khi * g.kw + kwi];
                        if wv == 0.0 {
                            continue;
                        }
                        for ohi in 0..g.oh {
                            let ih = (ohi * g.stride + khi * g.dilation) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * g.w;
                            let orow = obase + ohi * g.ow;
                            for owi in 0..g.ow {
                                let iw = (owi * g.stride + kwi * g.dilation) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                out[orow + owi] += wv * xd[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![g.n, g.o, g.oh, g.ow],
        data: out,
    }
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let xd = &x.data;
    let wd = &w.data;
    let mut dx = if need_dx { Some(vec![0.0; x.numel()]) } else { None };
    let mut dw = if need_dw { Some(vec![0.0; w.numel()]) } else { None };
    let mut db = if need_db { Some(vec![0.0; g.o]) } else { None };
    for ni in 0..g.n {
        for oi in 0..g.o {
            let obase = (ni * g.o + oi) * g.oh * g.ow;
            if let Some(db) = db.as_mut() {
                db[oi] += dout[obase..obase + g.oh * g.ow].iter().sum::<f64>();
            }
            for ci in 0..g.c {
                let xbase = (ni * g.c + ci) * g.h * g.w;
                let wbase = (oi * g.c + ci) * g.kh * g.kw;
                for khi in 0..g.kh {
                    for kwi in 0..g.kw {
                        let wv = wd[wbase + khi * g.kw + kwi];
                        let mut wgrad = 0.0;
                        for ohi in 0..g.oh {
                            let ih = (ohi * g.stride + khi * g.dilation) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * g.w;
                            let orow = obase + ohi * g.ow;
                            for owi in 0..g.ow {
                                let iw = (owi * g.stride + kwi * g.dilation) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                let gv = dout[orow + owi];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xrow + iw as usize] += gv * wv;
                                }
                                wgrad += gv * xd[xrow + iw as usize];
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wbase + khi * g.kw + kwi] += wgrad;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Compare the tape gradient of a scalar-valued tensor function against
/// central finite differences at `at`. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, at: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Usage(format!("grad_check: h must be in (0, 1e-3], got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone(), true)?;
    let loss = f(&mut tape, x)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Usage(String::from("grad_check: function must be scalar-valued")));
    }
    tape.backward(loss)?;
    let analytic: Vec<f64> = match tape.grad(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; at.numel()],
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(at.shape(), data)?, false)?;
        let l = f(&mut t, x)?;
        Ok(t.value(l).item())
    };

    let mut max_err: f64 = 0.0;
    for i in 0..at.numel() {
        let mut plus = at.data().to_vec();
        plus[i] += h;
        let mut minus = at.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
