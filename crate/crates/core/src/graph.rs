//! Reverse-mode tape.
//!
//! Every operation computes its value eagerly and records itself on the tape;
//! [`Graph::backward`] walks the tape in reverse and runs the hand-written
//! adjoint of each op. Parameters are borrowed from a [`ParamStore`] and their
//! gradients are returned separately, so the store is never mutated by a pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::param::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// How attention scores are turned into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalizer {
    /// `exp(s_i) / Σ exp(s_m)` with max subtraction.
    #[default]
    Softmax,
    /// `s_i / Σ s_m`, no exponentiation.
    Ratio,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new(
        in_shape: &[usize],
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if in_shape.len() != 4 {
            return Err(dim_err(format!("expected [B,H,W,C] input, got {in_shape:?}")));
        }
        if stride == 0 {
            return Err(dim_err("stride must be positive"));
        }
        let (batch, h, w, cin) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(dim_err(format!(
                        "kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        Ok(Self { batch, h, w, cin, kh, kw, cout, stride, oh, ow, pad_top, pad_left })
    }

    #[inline]
    fn input_pos(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = o * self.stride + k;
        if p < pad || p - pad >= limit {
            None
        } else {
            Some(p - pad)
        }
    }
}

/// Output spatial size of a convolution or pooling window, without running it.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (kernel <= input).then(|| (input - kernel) / stride + 1),
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add { a: Var, b: Var, broadcast: bool },
    Sub(Var, Var),
    Mul { a: Var, b: Var, broadcast: bool },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Affine { x: Var, scale: f64 },
    Lerp { z: Var, a: Var, b: Var },
    ScaleRows { x: Var, scale: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Interleave(Vec<Var>),
    RepeatRows { x: Var, times: usize },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, mask: Vec<f64>, normalizer: Normalizer, denom: Vec<f64> },
    WeightedSum { w: Var, keys: Var },
    Reshape(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    BatchNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    ChannelScale { x: Var, scale: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, groups: usize },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    MaxPool { x: Var, argmax: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add { .. } => "add",
            Op::Sub(..) => "sub",
            Op::Mul { .. } => "mul",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Affine { .. } => "affine",
            Op::Lerp { .. } => "lerp",
            Op::ScaleRows { .. } => "scale_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Interleave(_) => "interleave",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Gather { .. } => "gather",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax_masked",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelScale { .. } => "channel_scale",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::MaxPool { .. } => "max_pool",
        }
    }
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Counts of mechanism invocations, for instrumentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub decoder_steps: usize,
    pub decoder_attends: usize,
    pub encoder_attends: usize,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    pub counters: Counters,
    flipped: Option<&'static str>,
}

/// Gradients from one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            counters: Counters::default(),
            flipped: None,
        }
    }

    /// Negates the adjoint pushed through every node of kind `op` (for
    /// example `"tanh"`). A deliberate backward bug for testing the
    /// gradient checker.
    pub fn inject_sign_flip(&mut self, op: &'static str) {
        self.flipped = Some(op);
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { op, value: Some(value), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf; never receives gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Input, value: Some(t), requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let trainable = self.params.get(id).trainable;
        self.nodes.push(Node { op: Op::Param(id), value: None, requires_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.input(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, rg)
    }

    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap_or(&0) {
            Ok(true)
        } else {
            Err(dim_err(format!("{what}: cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b).data();
        let mut out = ta.clone();
        if broadcast {
            let c = tb.len();
            for row in out.data_mut().chunks_mut(c) {
                for (o, &y) in row.iter_mut().zip(tb) {
                    *o = f(*o, y);
                }
            }
        } else {
            for (o, &y) in out.data_mut().iter_mut().zip(tb) {
                *o = f(*o, y);
            }
        }
        out
    }

    /// `a + b`, with `b` either the same shape or a vector over the last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind(a, b, "add")?;
        let out = self.zip_broadcast(a, b, broadcast, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(Op::Add { a, b, broadcast }, out, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("sub {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.zip_broadcast(a, b, false, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(Op::Sub(a, b), out, rg)
    }

    /// `a ⊙ b`, with `b` either the same shape or a vector over the last axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind(a, b, "mul")?;
        let out = self.zip_broadcast(a, b, broadcast, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul { a, b, broadcast }, out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(math::tanh);
        let rg = self.rg(&[x]);
        self.push(Op::Tanh(x), out, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(math::sigmoid);
        let rg = self.rg(&[x]);
        self.push(Op::Sigmoid(x), out, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), out, rg)
    }

    /// `scale · x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(Op::Affine { x, scale }, out, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// `(1 − z) ⊙ a + z ⊙ b`, the GRU state blend.
    pub fn lerp(&mut self, z: Var, a: Var, b: Var) -> Result<Var> {
        let (sz, sa, sb) = (self.shape(z), self.shape(a), self.shape(b));
        if sz != sa || sa != sb {
            return Err(dim_err(format!("lerp {sz:?} {sa:?} {sb:?}")));
        }
        let (tz, ta, tb) = (self.value(z).data(), self.value(a).data(), self.value(b).data());
        let data = tz
            .iter()
            .zip(ta)
            .zip(tb)
            .map(|((&z, &a), &b)| (1.0 - z) * a + z * b)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[z, a, b]);
        self.push(Op::Lerp { z, a, b }, out, rg)
    }

    /// Multiplies row `i` of `x` (viewed as `[rows, last]`) by the constant `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != scale.len() {
            return Err(dim_err(format!("scale_rows: {} rows, {} scales", t.rows(), scale.len())));
        }
        let c = t.last_dim();
        let mut out = t.clone();
        for (row, s) in out.data_mut().chunks_mut(c).zip(&scale) {
            for v in row {
                *v *= s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Op::ScaleRows { x, scale }, out, rg)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.shape(xs[0])[0];
        let mut cols = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != rows {
                return Err(dim_err(format!("concat_cols: {s:?} with {rows} rows")));
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let rg = self.rg(xs);
        self.push(Op::ConcatCols(xs.to_vec()), Tensor::new(&[rows, cols], data)?, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(dim_err(format!("slice_cols {start}..{} of {s:?}", start + len)));
        }
        let rows = s[0];
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Op::SliceCols { x, start }, Tensor::new(&[rows, len], data)?, rg)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.shape(xs[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[1] != cols {
                return Err(dim_err(format!("concat_rows: {s:?} with {cols} cols")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let rg = self.rg(xs);
        self.push(Op::ConcatRows(xs.to_vec()), Tensor::new(&[rows, cols], data)?, rg)
    }

    /// `N` matrices `[B, d]` to one `[B·N, d]` whose row `b·N + i` is row `b` of input `i`.
    pub fn interleave(&mut self, xs: &[Var]) -> Result<Var> {
        let s0 = self.shape(xs[0]).to_vec();
        if s0.len() != 2 {
            return Err(dim_err("interleave needs matrices"));
        }
        for &x in xs {
            if self.shape(x) != s0.as_slice() {
                return Err(dim_err("interleave: shape mismatch"));
            }
        }
        let (b, d, n) = (s0[0], s0[1], xs.len());
        let mut data = Vec::with_capacity(b * n * d);
        for r in 0..b {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let rg = self.rg(xs);
        self.push(Op::Interleave(xs.to_vec()), Tensor::new(&[b * n, d], data)?, rg)
    }

    /// `[B, d]` to `[B·times, d]`, each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err("repeat_rows needs a matrix"));
        }
        let (b, d) = (s[0], s[1]);
        let t = self.value(x);
        let mut data = Vec::with_capacity(b * times * d);
        for r in 0..b {
            for _ in 0..times {
                data.extend_from_slice(t.row(r));
            }
        }
        let rg = self.rg(&[x]);
        self.push(Op::RepeatRows { x, times }, Tensor::new(&[b * times, d], data)?, rg)
    }

    /// Row lookup: `table[ids[i]]` for each `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(dim_err("gather needs a matrix table"));
        }
        let (v, d) = (s[0], s[1]);
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(Op::Gather { table, ids: ids.to_vec() }, Tensor::new(&[ids.len(), d], data)?, rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d < 2 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err(format!("layer_norm over {s:?}")));
        }
        let t = self.value(x);
        let (g, bvec) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bvec[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, Tensor::new(&s, out)?, rg)
    }

    /// Row-wise normalization restricted to positions where `mask` is 1.
    /// Masked positions are exactly zero. The normalizer sum is taken in
    /// ascending order, so weights are exactly permutation-equivariant.
    pub fn softmax_masked(&mut self, x: Var, mask: &[f64], normalizer: Normalizer) -> Result<Var> {
        let t = self.value(x);
        if t.len() != mask.len() {
            return Err(dim_err(format!("softmax over {:?} with mask of {}", t.shape(), mask.len())));
        }
        let n = t.last_dim();
        let rows = t.rows();
        let mut out = vec![0.0; t.len()];
        let mut denom = vec![0.0; rows];
        let mut scratch = Vec::with_capacity(n);
        for r in 0..rows {
            let row = t.row(r);
            let m = &mask[r * n..(r + 1) * n];
            if !m.iter().any(|&v| v != 0.0) {
                return Err(Error::EmptySupport("all positions masked"));
            }
            let o = &mut out[r * n..(r + 1) * n];
            match normalizer {
                Normalizer::Softmax => {
                    let max = row
                        .iter()
                        .zip(m)
                        .filter(|(_, &k)| k != 0.0)
                        .map(|(&v, _)| v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    for j in 0..n {
                        if m[j] != 0.0 {
                            o[j] = math::exp(row[j] - max);
                        }
                    }
                }
                Normalizer::Ratio => {
                    for j in 0..n {
                        if m[j] != 0.0 {
                            o[j] = row[j];
                        }
                    }
                }
            }
            scratch.clear();
            scratch.extend(o.iter().zip(m).filter(|(_, &k)| k != 0.0).map(|(&v, _)| v));
            let s = math::canonical_sum(&mut scratch);
            if s == 0.0 {
                return Err(Error::NonFinite("softmax_masked"));
            }
            for v in o.iter_mut() {
                *v /= s;
            }
            denom[r] = s;
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x]);
        self.push(Op::Softmax { x, mask: mask.to_vec(), normalizer, denom }, out, rg)
    }

    /// `out[b] = Σ_i w[b,i] · keys[b·N + i]` for weights `[B, N]` and keys `[B·N, d]`,
    /// summed in sorted order so the result does not depend on key order.
    pub fn weighted_sum(&mut self, w: Var, keys: Var) -> Result<Var> {
        let (sw, sk) = (self.shape(w).to_vec(), self.shape(keys).to_vec());
        if sw.len() != 2 || sk.len() != 2 || sw[0] * sw[1] != sk[0] {
            return Err(dim_err(format!("weighted_sum {sw:?} over {sk:?}")));
        }
        let (b, n, d) = (sw[0], sw[1], sk[1]);
        let (tw, tk) = (self.value(w).data(), self.value(keys).data());
        let mut out = vec![0.0; b * d];
        let mut terms = Vec::with_capacity(n);
        for r in 0..b {
            for (c, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                terms.clear();
                terms.extend((0..n).map(|i| tw[r * n + i] * tk[(r * n + i) * d + c]));
                *o = math::canonical_sum(&mut terms);
            }
        }
        let rg = self.rg(&[w, keys]);
        self.push(Op::WeightedSum { w, keys }, Tensor::new(&[b, d], out)?, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(Op::Reshape(x), t, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Op::SumAll(x), Tensor::scalar(s), rg)
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != targets.len() || s[0] != weights.len() {
            return Err(dim_err(format!(
                "cross_entropy {s:?} with {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let (rows, v) = (s[0], s[1]);
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = t.row(r);
            let tgt = targets[r];
            if tgt >= v {
                return Err(Error::Vocabulary { id: tgt, size: v });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = math::exp(x - max);
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (max + math::ln(z) - row[tgt]);
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Cross-correlation of `[B,H,W,Cin]` with `[kh,kw,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        if ks.len() != 4 {
            return Err(dim_err(format!("kernel must be [kh,kw,cin,cout], got {ks:?}")));
        }
        let geom = ConvGeom::new(self.shape(x), ks[0], ks[1], ks[3], stride, padding)?;
        if ks[2] != geom.cin {
            return Err(dim_err(format!("kernel expects {} channels, input has {}", ks[2], geom.cin)));
        }
        let g = geom;
        let (xd, kd) = (self.value(x).data(), self.value(k).data());
        let mut out = vec![0.0; g.batch * g.oh * g.ow * g.cout];
        for b in 0..g.batch {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let o_off = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                    let orow = &mut out[o_off..o_off + g.cout];
                    for ky in 0..g.kh {
                        let Some(iy) = g.input_pos(oy, ky, g.pad_top, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.input_pos(ox, kx, g.pad_left, g.w) else { continue };
                            let i_off = ((b * g.h + iy) * g.w + ix) * g.cin;
                            let k_off = (ky * g.kw + kx) * g.cin * g.cout;
                            for ci in 0..g.cin {
                                let xv = xd[i_off + ci];
                                let krow = &kd[k_off + ci * g.cout..k_off + (ci + 1) * g.cout];
                                for (o, &kv) in orow.iter_mut().zip(krow) {
                                    *o += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[g.batch, g.oh, g.ow, g.cout], out)?;
        let rg = self.rg(&[x, k]);
        self.push(Op::Conv2d { x, k, geom }, out, rg)
    }

    /// Normalizes each channel (last axis) with statistics over all other
    /// axes. No affine part; see [`Graph::channel_affine`].
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        let n = t.rows();
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let d = t.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..n {
            for j in 0..c {
                mean[j] += d[r * c + j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for r in 0..n {
            for j in 0..c {
                let dv = d[r * c + j] - mean[j];
                var[j] += dv * dv;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let mut xhat = vec![0.0; d.len()];
        for r in 0..n {
            for j in 0..c {
                xhat[r * c + j] = (d[r * c + j] - mean[j]) * inv_std[j];
            }
        }
        let out = Tensor::new(t.shape(), xhat.clone())?;
        let rg = self.rg(&[x]);
        self.push(Op::BatchNorm { x, xhat, inv_std, mean, var }, out, rg)
    }

    /// Batch mean and (biased) variance recorded by a `batch_norm_train` node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// `x · scale[c] + shift[c]` with constant per-channel vectors.
    pub fn channel_scale_shift(&mut self, x: Var, scale: Vec<f64>, shift: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if scale.len() != c || shift.len() != c {
            return Err(dim_err("channel_scale_shift: channel mismatch"));
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * scale[j] + shift[j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Op::ChannelScale { x, scale }, out, rg)
    }

    /// `y = x · γ + β` per channel. `gamma`/`beta` are `[C]` (shared by the
    /// batch) or `[B, C]` (one row per example).
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap_or(&0);
        let b = xs[0];
        let gs = self.shape(gamma).to_vec();
        if gs != self.shape(beta) {
            return Err(dim_err("channel_affine: gamma and beta shapes differ"));
        }
        let groups = match gs.as_slice() {
            [cc] if *cc == c => 1,
            [bb, cc] if *bb == b && *cc == c => b,
            _ => {
                return Err(Error::Pairing(format!(
                    "scale/shift of shape {gs:?} for input {xs:?}"
                )))
            }
        };
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        let per_group = out.len() / groups;
        for (gi, chunk) in out.data_mut().chunks_mut(per_group).enumerate() {
            let gam = &gd[gi * c..(gi + 1) * c];
            let bet = &bd[gi * c..(gi + 1) * c];
            for row in chunk.chunks_mut(c) {
                for j in 0..c {
                    row[j] = row[j] * gam[j] + bet[j];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Op::ChannelAffine { x, gamma, beta, groups }, out, rg)
    }

    /// Max over all spatial positions of `[B, ..., C]`, giving `[B, C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(dim_err("global_max_pool needs [B, ..., C]"));
        }
        let (b, c) = (s[0], s[s.len() - 1]);
        let per = t.len() / (b * c);
        let d = t.data();
        let mut out = vec![f64::NEG_INFINITY; b * c];
        let mut argmax = vec![0; b * c];
        for bi in 0..b {
            for p in 0..per {
                let off = (bi * per + p) * c;
                for j in 0..c {
                    if d[off + j] > out[bi * c + j] {
                        out[bi * c + j] = d[off + j];
                        argmax[bi * c + j] = off + j;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Op::GlobalMaxPool { x, argmax }, Tensor::new(&[b, c], out)?, rg)
    }

    /// Spatial max pooling over `[B,H,W,C]` with a square window.
    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize, padding: Padding) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let g = ConvGeom::new(&s, window, window, s.get(3).copied().unwrap_or(0), stride, padding)?;
        let d = self.value(x).data();
        let n = g.batch * g.oh * g.ow * g.cin;
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0; n];
        for b in 0..g.batch {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let o_off = ((b * g.oh + oy) * g.ow + ox) * g.cin;
                    for ky in 0..g.kh {
                        let Some(iy) = g.input_pos(oy, ky, g.pad_top, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.input_pos(ox, kx, g.pad_left, g.w) else { continue };
                            let i_off = ((b * g.h + iy) * g.w + ix) * g.cin;
                            for c in 0..g.cin {
                                if d[i_off + c] > out[o_off + c] {
                                    out[o_off + c] = d[i_off + c];
                                    argmax[o_off + c] = i_off + c;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Op::MaxPool { x, argmax }, Tensor::new(&[g.batch, g.oh, g.ow, g.cin], out)?, rg)
    }

    /// Runs the adjoints from a scalar `loss` node back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut pgrads = ParamGrads::new(self.params.len());
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.flipped == Some(self.nodes[i].op.name()) {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.backward_node(i, &neg, &mut grads, &mut pgrads);
            } else {
                self.backward_node(i, &g, &mut grads, &mut pgrads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { nodes: grads, params: pgrads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], pgrads: &mut ParamGrads) {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => pgrads.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bd = self.value(*b).data();
                if let Some(da) = self.slot(grads, *a) {
                    matmul_nt_into(g, bd, da, m, k, n);
                }
                let ad = self.value(*a).data();
                if let Some(db) = self.slot(grads, *b) {
                    matmul_tn_into(ad, g, db, m, k, n);
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *broadcast {
                        for row in g.chunks(db.len()) {
                            add_into(db, row);
                        }
                    } else {
                        add_into(db, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    if *broadcast {
                        let c = bd.len();
                        for (j, (d, gv)) in da.iter_mut().zip(g).enumerate() {
                            *d += gv * bd[j % c];
                        }
                    } else {
                        for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                            *d += gv * bv;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *broadcast {
                        let c = db.len();
                        for (j, (gv, av)) in g.iter().zip(ad).enumerate() {
                            db[j % c] += gv * av;
                        }
                    } else {
                        for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                            *d += gv * av;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let y = out.expect("own value").data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.expect("own value").data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * scale;
                    }
                }
            }
            Op::Lerp { z, a, b } => {
                let (zd, ad, bd) = (self.value(*z).data(), self.value(*a).data(), self.value(*b).data());
                if let Some(dz) = self.slot(grads, *z) {
                    for j in 0..g.len() {
                        dz[j] += g[j] * (bd[j] - ad[j]);
                    }
                }
                if let Some(da) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        da[j] += g[j] * (1.0 - zd[j]);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for j in 0..g.len() {
                        db[j] += g[j] * zd[j];
                    }
                }
            }
            Op::ScaleRows { x, scale } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = dx.len() / scale.len().max(1);
                    for (r, s) in scale.iter().enumerate() {
                        for j in r * c..(r + 1) * c {
                            dx[j] += g[j] * s;
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = self.value(Var(i)).last_dim();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    if let Some(dx) = self.slot(grads, x) {
                        for r in 0..rows {
                            add_into(&mut dx[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let total = self.shape(*x)[1];
                let len = self.value(Var(i)).last_dim();
                if let Some(dx) = self.slot(grads, *x) {
                    let rows = g.len() / len.max(1);
                    for r in 0..rows {
                        add_into(&mut dx[r * total + start..r * total + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if let Some(dx) = self.slot(grads, x) {
                        add_into(dx, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Interleave(xs) => {
                let n = xs.len();
                let d = self.shape(xs[0])[1];
                let b = self.shape(xs[0])[0];
                for (idx, &x) in xs.iter().enumerate() {
                    if let Some(dx) = self.slot(grads, x) {
                        for r in 0..b {
                            let src = (r * n + idx) * d;
                            add_into(&mut dx[r * d..(r + 1) * d], &g[src..src + d]);
                        }
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                let d = self.shape(*x)[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (row, chunk) in g.chunks(d).enumerate() {
                        let r = row / times;
                        add_into(&mut dx[r * d..(r + 1) * d], chunk);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.shape(*gain)[0];
                let gd = self.value(*gain).data();
                if let Some(dg) = self.slot(grads, *gain) {
                    for (j, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        dg[j % d] += gv * xh;
                    }
                }
                if let Some(dbias) = self.slot(grads, *bias) {
                    for (j, gv) in g.iter().enumerate() {
                        dbias[j % d] += gv;
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxh = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxh[j] = gr[j] * gd[j];
                            mean_d += dxh[j];
                            mean_dx += dxh[j] * xh[j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] += is * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x, mask, normalizer, denom } => {
                let y = out.expect("own value").data();
                let n = self.value(*x).last_dim();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, s) in denom.iter().enumerate() {
                        let (yr, gr, mr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n], &mask[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            if mr[j] == 0.0 {
                                continue;
                            }
                            dx[r * n + j] += match normalizer {
                                Normalizer::Softmax => yr[j] * (gr[j] - dot),
                                Normalizer::Ratio => (gr[j] - dot) / s,
                            };
                        }
                    }
                }
            }
            Op::WeightedSum { w, keys } => {
                let (sw, d) = (self.shape(*w), self.shape(*keys)[1]);
                let (b, n) = (sw[0], sw[1]);
                let (wd, kd) = (self.value(*w).data(), self.value(*keys).data());
                if let Some(dw) = self.slot(grads, *w) {
                    for r in 0..b {
                        let gr = &g[r * d..(r + 1) * d];
                        for i2 in 0..n {
                            let krow = &kd[(r * n + i2) * d..(r * n + i2 + 1) * d];
                            dw[r * n + i2] += gr.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(dk) = self.slot(grads, *keys) {
                    for r in 0..b {
                        let gr = &g[r * d..(r + 1) * d];
                        for i2 in 0..n {
                            let wv = wd[r * n + i2];
                            let drow = &mut dk[(r * n + i2) * d..(r * n + i2 + 1) * d];
                            for (dv, gv) in drow.iter_mut().zip(gr) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let v = self.shape(*logits)[1];
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w;
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * v + j] += s * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Conv2d { x, k, geom } => conv_backward(self, *x, *k, geom, g, grads),
            Op::BatchNorm { x, xhat, inv_std, .. } => {
                let c = inv_std.len();
                let n = (xhat.len() / c) as f64;
                if let Some(dx) = self.slot(grads, *x) {
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (j, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        sum_g[j % c] += gv;
                        sum_gx[j % c] += gv * xh;
                    }
                    for (j, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        let ch = j % c;
                        dx[j] += inv_std[ch] * (gv - sum_g[ch] / n - xh * sum_gx[ch] / n);
                    }
                }
            }
            Op::ChannelScale { x, scale } => {
                let c = scale.len();
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, (d, gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gv * scale[j % c];
                    }
                }
            }
            Op::ChannelAffine { x, gamma, beta, groups } => {
                let xd = self.value(*x).data();
                let c = self.value(*x).last_dim();
                let per_group = xd.len() / groups;
                let gd = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (j, (gv, xv)) in g.iter().zip(xd).enumerate() {
                        dg[(j / per_group) * c + j % c] += gv * xv;
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for (j, gv) in g.iter().enumerate() {
                        dbeta[(j / per_group) * c + j % c] += gv;
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, (d, gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gv * gd[(j / per_group) * c + j % c];
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } | Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += gv;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_backward(
    graph: &Graph<'_>,
    x: Var,
    k: Var,
    geom: &ConvGeom,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let gm = *geom;
    let (xd, kd) = (graph.value(x).data(), graph.value(k).data());
    let need_x = graph.requires_grad(x);
    let need_k = graph.requires_grad(k);
    let mut dx = need_x.then(|| vec![0.0; xd.len()]);
    let mut dk = need_k.then(|| vec![0.0; kd.len()]);
    for b in 0..gm.batch {
        for oy in 0..gm.oh {
            for ox in 0..gm.ow {
                let o_off = ((b * gm.oh + oy) * gm.ow + ox) * gm.cout;
                let grow = &g[o_off..o_off + gm.cout];
                for ky in 0..gm.kh {
                    let Some(iy) = gm.input_pos(oy, ky, gm.pad_top, gm.h) else { continue };
                    for kx in 0..gm.kw {
                        let Some(ix) = gm.input_pos(ox, kx, gm.pad_left, gm.w) else { continue };
                        let i_off = ((b * gm.h + iy) * gm.w + ix) * gm.cin;
                        let k_off = (ky * gm.kw + kx) * gm.cin * gm.cout;
                        for ci in 0..gm.cin {
                            let kr = k_off + ci * gm.cout;
                            if let Some(dx) = dx.as_mut() {
                                let krow = &kd[kr..kr + gm.cout];
                                dx[i_off + ci] += grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(dk) = dk.as_mut() {
                                let xv = xd[i_off + ci];
                                for (d, gv) in dk[kr..kr + gm.cout].iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let (Some(d), Some(slot)) = (dx, graph.slot(grads, x)) {
        add_into(slot, &d);
    }
    if let (Some(d), Some(slot)) = (dk, graph.slot(grads, k)) {
        add_into(slot, &d);
    }
}
