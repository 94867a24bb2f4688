//! Dense-array numerical substrate with reverse-mode differentiation.
//!
//! All computation happens on a [`Tape`]: every operation appends a node
//! holding the forward value and a record of how it was produced, and
//! [`Tape::backward`] walks the recording in reverse to accumulate
//! gradients. Tapes live for one forward/backward cycle and are discarded
//! afterwards; parameters persist outside the tape (see [`Parameter`]) and
//! are re-leased onto a fresh tape each step.
//!
//! Everything is `f64`. Shapes follow row-major layout: matrices are
//! `[rows, cols]`, feature maps are `[channels, height, width]`, vectors
//! are `[n]`, scalars are `[1]`.

mod backward;
mod grad_check;

pub use grad_check::{grad_check, grad_check_with_corruption, CheckInput};

use crate::error::{Error, Result};

/// Index of a tensor node on its tape.
pub type TensorId = usize;

/// Recorded provenance of a tape node.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    MatVec { m: TensorId, v: TensorId },
    Conv2d { input: TensorId, kernel: TensorId, bias: TensorId, stride: usize, padding: usize },
    AvgPool2 { input: TensorId },
    GlobalAvgPool { input: TensorId },
    BilinearUpsample { input: TensorId, factor: usize },
    Relu { input: TensorId },
    Tanh { input: TensorId },
    Add { a: TensorId, b: TensorId },
    Hadamard { a: TensorId, b: TensorId },
    Scale { input: TensorId, factor: f64 },
    ScaleByScalar { input: TensorId, scalar: TensorId },
    AddRowBroadcast { m: TensorId, v: TensorId },
    Softmax { input: TensorId },
    Sum { input: TensorId },
    Reshape { input: TensorId },
    Transpose { input: TensorId },
    ConcatChannels { inputs: Vec<TensorId> },
    FieldToTokens { input: TensorId },
    TokensToField { input: TensorId },
    ConcatRows { a: TensorId, b: TensorId },
    StackRows { inputs: Vec<TensorId> },
    SliceRows { input: TensorId, start: usize },
    RowToVec { input: TensorId, row: usize },
    TileSpatial { v: TensorId },
    SnrLoss { input: TensorId, pos: Vec<usize>, neg: Vec<usize> },
}

/// One node of the computation graph: a dense value plus bookkeeping for
/// reverse-mode differentiation.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub(crate) op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A named learnable tensor living outside any tape.
///
/// `decay_enabled` marks whether the optimizer's decoupled weight decay
/// applies to this parameter.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub decay_enabled: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>, decay_enabled: bool) -> Self {
        let name = name.into();
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "parameter {name}: data length does not match shape"
        );
        Parameter { name, shape, value, grad: None, decay_enabled }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Add `scale * grad` into the parameter's gradient accumulator.
    pub fn accumulate_grad(&mut self, grad: &[f64], scale: f64) {
        let acc = self.grad.get_or_insert_with(|| vec![0.0; self.value.len()]);
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += scale * g;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Recording of one forward computation.
///
/// Node ids are strictly increasing, so inputs of any node always precede
/// it; the backward pass walks ids in reverse. A tape is confined to one
/// execution context (it is `Send` but not shared), which keeps parallel
/// evaluation safe: workers each build their own tape from a read-only
/// parameter snapshot.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: TensorId) -> &Tensor {
        &self.nodes[id]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Gradient of the last `backward` call w.r.t. node `id`, if the node
    /// participates in differentiation.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Tensor { shape, data, requires_grad, grad: None, op });
        self.nodes.len() - 1
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Introduce an input tensor. `requires_grad` marks it as a
    /// differentiation target.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel == 0 || shape.is_empty() {
            return Err(Error::Contract("leaf tensors must have positive dimensions".into()));
        }
        if data.len() != numel {
            return Err(Error::Contract(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Lease a parameter's current value onto the tape as a trainable leaf.
    pub fn param(&mut self, p: &Parameter) -> TensorId {
        self.push(p.shape.clone(), p.value.clone(), true, Op::Leaf)
    }

    /// Constant (non-differentiable) leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let (da, db) = (&self.nodes[a].data, &self.nodes[b].data);
            for i in 0..m {
                for p in 0..k {
                    let av = da[i * k + p];
                    let brow = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    /// Matrix-vector product `[r,c] x [c] -> [r]`.
    pub fn matvec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (sm, sv) = (&self.nodes[m].shape, &self.nodes[v].shape);
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch { op: "matvec", lhs: sm.clone(), rhs: sv.clone() });
        }
        let (r, c) = (sm[0], sm[1]);
        let mut out = vec![0.0; r];
        {
            let (dm, dv) = (&self.nodes[m].data, &self.nodes[v].data);
            for i in 0..r {
                let row = &dm[i * c..(i + 1) * c];
                out[i] = row.iter().zip(dv).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(vec![r], out, rg, Op::MatVec { m, v }))
    }

    /// Add a vector to every row of a matrix: `[r,c] + [c] -> [r,c]`.
    pub fn add_row_broadcast(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (sm, sv) = (&self.nodes[m].shape, &self.nodes[v].shape);
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch { op: "add_row_broadcast", lhs: sm.clone(), rhs: sv.clone() });
        }
        let (r, c) = (sm[0], sm[1]);
        let mut out = self.nodes[m].data.clone();
        {
            let dv = &self.nodes[v].data;
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += dv[j];
                }
            }
        }
        let rg = self.rg(m) || self.rg(v);
        Ok(self.push(vec![r, c], out, rg, Op::AddRowBroadcast { m, v }))
    }

    // ── Convolution and pooling ─────────────────────────────────────

    /// Cross-correlation convolution.
    ///
    /// `input [c_in,h,w]`, `kernel [c_out,c_in,k,k]` (k odd), `bias [c_out]`.
    /// The output size `(h + 2*padding - k)/stride + 1` must be integral.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let si = self.nodes[input].shape.clone();
        let sk = self.nodes[kernel].shape.clone();
        let sb = self.nodes[bias].shape.clone();
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kci, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kci != ci || kh != kw {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        if sb != [co] {
            return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: sb, rhs: vec![co] });
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (oh, ow) = (conv_out(h, k, stride, padding)?, conv_out(w, k, stride, padding)?);
        let mut out = vec![0.0; co * oh * ow];
        {
            let dx = &self.nodes[input].data;
            let dk = &self.nodes[kernel].data;
            let db = &self.nodes[bias].data;
            for oc in 0..co {
                let b = db[oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for ic in 0..ci {
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = (ic * h + iy as usize) * w;
                                let krow = ((oc * ci + ic) * k + ky) * k;
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += dk[krow + kx] * dx[xrow + ix as usize];
                                }
                            }
                        }
                        out[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(vec![co, oh, ow], out, rg, Op::Conv2d { input, kernel, bias, stride, padding }))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "avg_pool2", lhs: s, rhs: vec![] });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("avg_pool2 requires even spatial dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        {
            let dx = &self.nodes[input].data;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = (ch * h + 2 * oy) * w + 2 * ox;
                        out[(ch * oh + oy) * ow + ox] =
                            0.25 * (dx[base] + dx[base + 1] + dx[base + w] + dx[base + w + 1]);
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![c, oh, ow], out, rg, Op::AvgPool2 { input }))
    }

    /// Per-channel mean over all spatial positions: `[c,h,w] -> [c]`.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "global_avg_pool", lhs: s, rhs: vec![] });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let plane = &self.nodes[input].data[ch * h * w..(ch + 1) * h * w];
            out[ch] = plane.iter().sum::<f64>() * inv;
        }
        let rg = self.rg(input);
        Ok(self.push(vec![c], out, rg, Op::GlobalAvgPool { input }))
    }

    /// Corner-aligned bilinear upsampling by an integer factor.
    ///
    /// Output corner samples equal input corner samples; `factor == 1` is
    /// the identity.
    pub fn bilinear_upsample(&mut self, input: TensorId, factor: usize) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "bilinear_upsample", lhs: s, rhs: vec![] });
        }
        if factor == 0 {
            return Err(Error::Config("bilinear_upsample factor must be >= 1".into()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ty = lerp_table(h, oh);
        let tx = lerp_table(w, ow);
        let mut out = vec![0.0; c * oh * ow];
        {
            let dx = &self.nodes[input].data;
            for ch in 0..c {
                let plane = &dx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let top = (1.0 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1];
                        let bot = (1.0 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1];
                        out[(ch * oh + oy) * ow + ox] = (1.0 - wy) * top + wy * bot;
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![c, oh, ow], out, rg, Op::BilinearUpsample { input, factor }))
    }

    // ── Pointwise ───────────────────────────────────────────────────

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[input].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[input].shape.clone();
        let rg = self.rg(input);
        self.push(shape, data, rg, Op::Relu { input })
    }

    pub fn tanh(&mut self, input: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[input].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[input].shape.clone();
        let rg = self.rg(input);
        self.push(shape, data, rg, Op::Tanh { input })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "add", lhs: sa.clone(), rhs: sb.clone() });
        }
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = sa.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Add { a, b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "hadamard", lhs: sa.clone(), rhs: sb.clone() });
        }
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::Hadamard { a, b }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[input].data.iter().map(|v| v * factor).collect();
        let shape = self.nodes[input].shape.clone();
        let rg = self.rg(input);
        self.push(shape, data, rg, Op::Scale { input, factor })
    }

    /// Multiply by a learnable scalar (shape `[1]`) living on the tape.
    pub fn scale_by_scalar(&mut self, input: TensorId, scalar: TensorId) -> Result<TensorId> {
        if self.nodes[scalar].shape != [1] {
            return Err(Error::ShapeMismatch {
                op: "scale_by_scalar",
                lhs: self.nodes[input].shape.clone(),
                rhs: self.nodes[scalar].shape.clone(),
            });
        }
        let s = self.nodes[scalar].data[0];
        let data: Vec<f64> = self.nodes[input].data.iter().map(|v| v * s).collect();
        let shape = self.nodes[input].shape.clone();
        let rg = self.rg(input) || self.rg(scalar);
        Ok(self.push(shape, data, rg, Op::ScaleByScalar { input, scalar }))
    }

    /// Numerically stabilized softmax over the last axis of a `[n]` vector
    /// or `[r,c]` matrix (row-wise).
    pub fn softmax(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        let (rows, cols) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::ShapeMismatch { op: "softmax", lhs: s, rhs: vec![] }),
        };
        let mut data = self.nodes[input].data.clone();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(input);
        Ok(self.push(s, data, rg, Op::Softmax { input }))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let total: f64 = self.nodes[input].data.iter().sum();
        let rg = self.rg(input);
        self.push(vec![1], vec![total], rg, Op::Sum { input })
    }

    // ── Shape plumbing ──────────────────────────────────────────────

    /// Reinterpret the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[input].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[input].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[input].data.clone();
        let rg = self.rg(input);
        Ok(self.push(shape, data, rg, Op::Reshape { input }))
    }

    /// 2-D matrix transpose.
    pub fn transpose(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let mut data = vec![0.0; r * c];
        {
            let dx = &self.nodes[input].data;
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = dx[i * c + j];
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![c, r], data, rg, Op::Transpose { input }))
    }

    /// Concatenate `[c_i,h,w]` maps along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat_channels needs at least one input".into()));
        }
        let s0 = self.nodes[inputs[0]].shape.clone();
        if s0.len() != 3 {
            return Err(Error::ShapeMismatch { op: "concat_channels", lhs: s0, rhs: vec![] });
        }
        let (h, w) = (s0[1], s0[2]);
        let mut c_total = 0;
        for &id in inputs {
            let s = &self.nodes[id].shape;
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::ShapeMismatch { op: "concat_channels", lhs: s0, rhs: s.clone() });
            }
            c_total += s[0];
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &id in inputs {
            data.extend_from_slice(&self.nodes[id].data);
        }
        let rg = inputs.iter().any(|&id| self.rg(id));
        Ok(self.push(vec![c_total, h, w], data, rg, Op::ConcatChannels { inputs: inputs.to_vec() }))
    }

    /// Transpose a feature map into a token matrix: `[d,h,w] -> [h*w, d]`.
    pub fn field_to_tokens(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "field_to_tokens", lhs: s, rhs: vec![] });
        }
        let (d, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let mut data = vec![0.0; hw * d];
        {
            let dx = &self.nodes[input].data;
            for ch in 0..d {
                for t in 0..hw {
                    data[t * d + ch] = dx[ch * hw + t];
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![hw, d], data, rg, Op::FieldToTokens { input }))
    }

    /// Inverse of [`Tape::field_to_tokens`]: `[h*w, d] -> [d,h,w]`.
    pub fn tokens_to_field(&mut self, input: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::ShapeMismatch { op: "tokens_to_field", lhs: s, rhs: vec![h * w] });
        }
        let d = s[1];
        let hw = h * w;
        let mut data = vec![0.0; d * hw];
        {
            let dx = &self.nodes[input].data;
            for t in 0..hw {
                for ch in 0..d {
                    data[ch * hw + t] = dx[t * d + ch];
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![d, h, w], data, rg, Op::TokensToField { input }))
    }

    /// Concatenate two matrices along the row axis.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch { op: "concat_rows", lhs: sa.clone(), rhs: sb.clone() });
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.nodes[a].data.clone();
        data.extend_from_slice(&self.nodes[b].data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::ConcatRows { a, b }))
    }

    /// Stack `[d]` vectors into an `[n,d]` matrix.
    pub fn stack_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Contract("stack_rows needs at least one input".into()));
        }
        let d = self.nodes[inputs[0]].shape.clone();
        if d.len() != 1 {
            return Err(Error::ShapeMismatch { op: "stack_rows", lhs: d, rhs: vec![] });
        }
        let d = d[0];
        let mut data = Vec::with_capacity(inputs.len() * d);
        for &id in inputs {
            if self.nodes[id].shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: self.nodes[id].shape.clone(),
                });
            }
            data.extend_from_slice(&self.nodes[id].data);
        }
        let rg = inputs.iter().any(|&id| self.rg(id));
        Ok(self.push(vec![inputs.len(), d], data, rg, Op::StackRows { inputs: inputs.to_vec() }))
    }

    /// Contiguous row slice of a matrix.
    pub fn slice_rows(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of bounds for {s:?}",
                start + len
            )));
        }
        let d = s[1];
        let data = self.nodes[input].data[start * d..(start + len) * d].to_vec();
        let rg = self.rg(input);
        Ok(self.push(vec![len, d], data, rg, Op::SliceRows { input, start }))
    }

    /// Extract one row of a matrix as a `[d]` vector.
    pub fn row_to_vec(&mut self, input: TensorId, row: usize) -> Result<TensorId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 2 || row >= s[0] {
            return Err(Error::Contract(format!("row_to_vec row {row} out of bounds for {s:?}")));
        }
        let d = s[1];
        let data = self.nodes[input].data[row * d..(row + 1) * d].to_vec();
        let rg = self.rg(input);
        Ok(self.push(vec![d], data, rg, Op::RowToVec { input, row }))
    }

    /// Tile a `[d]` vector over an `h x w` grid: result `[d,h,w]`.
    pub fn tile_spatial(&mut self, v: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let s = self.nodes[v].shape.clone();
        if s.len() != 1 {
            return Err(Error::ShapeMismatch { op: "tile_spatial", lhs: s, rhs: vec![] });
        }
        let d = s[0];
        let hw = h * w;
        let mut data = vec![0.0; d * hw];
        for ch in 0..d {
            let val = self.nodes[v].data[ch];
            data[ch * hw..(ch + 1) * hw].fill(val);
        }
        let rg = self.rg(v);
        Ok(self.push(vec![d, h, w], data, rg, Op::TileSpatial { v }))
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Signal-to-noise ratio loss over labeled positions of a score map:
    /// `-log( sum_pos e^s / (sum_pos e^s + sum_neg e^s) )`, stabilized by
    /// max subtraction. `pos` must be non-empty; `neg` may be empty (the
    /// loss is then exactly zero).
    pub fn snr_loss(&mut self, input: TensorId, pos: Vec<usize>, neg: Vec<usize>) -> Result<TensorId> {
        let n = self.nodes[input].data.len();
        if pos.is_empty() {
            return Err(Error::Contract("snr_loss requires at least one positive position".into()));
        }
        if pos.iter().chain(&neg).any(|&i| i >= n) {
            return Err(Error::Contract("snr_loss label index out of bounds".into()));
        }
        let dx = &self.nodes[input].data;
        let m = pos
            .iter()
            .chain(&neg)
            .map(|&i| dx[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let p: f64 = pos.iter().map(|&i| (dx[i] - m).exp()).sum();
        let q: f64 = neg.iter().map(|&i| (dx[i] - m).exp()).sum();
        let loss = (p + q).ln() - p.ln();
        let rg = self.rg(input);
        Ok(self.push(vec![1], vec![loss], rg, Op::SnrLoss { input, pos, neg }))
    }
}

fn conv_out(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = n + 2 * padding;
    if padded < k {
        return Err(Error::Config(format!(
            "conv2d kernel {k} larger than padded input {padded}"
        )));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d output size ({n} + 2*{padding} - {k})/{stride} + 1 is not integral"
        )));
    }
    Ok(span / stride + 1)
}

/// Corner-aligned interpolation table: for each output index, the two
/// source indices and the weight of the second one.
fn lerp_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(shape: Vec<usize>, data: Vec<f64>) -> (Tape, TensorId) {
        let mut t = Tape::new();
        let id = t.leaf(shape, data, true).unwrap();
        (t, id)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = t.matmul(i, a).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_dimension_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        match t.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn conv2d_one_by_one_identity_is_bit_exact() {
        let mut t = Tape::new();
        let x = t
            .constant(vec![1, 3, 3], vec![0.3, -1.2, 4.5, 0.0, 2.25, -0.5, 7.125, 1.0, -3.0])
            .unwrap();
        let k = t.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn conv2d_all_ones_kernel_on_constant_input() {
        let c = 1.7;
        let mut t = Tape::new();
        let x = t.constant(vec![1, 5, 5], vec![c; 25]).unwrap();
        let k = t.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 3]);
        for &v in t.data(y) {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_stride_two_output_size() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 5, 5], vec![0.0; 25]).unwrap();
        let k = t.constant(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.conv2d(x, k, b, 2, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2]);
    }

    #[test]
    fn conv2d_non_integral_output_is_config_error() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 6, 6], vec![0.0; 36]).unwrap();
        let k = t.constant(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        assert!(matches!(t.conv2d(x, k, b, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn global_avg_pool_hand_mean() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = t.global_avg_pool(x).unwrap();
        assert_eq!(t.data(y), &[3.0]);
    }

    #[test]
    fn global_avg_pool_constant_and_degenerate() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 3, 3], vec![0.5; 18]).unwrap();
        let y = t.global_avg_pool(x).unwrap();
        assert_eq!(t.data(y), &[0.5, 0.5]);
        let one = t.constant(vec![2, 1, 1], vec![4.0, -1.0]).unwrap();
        let z = t.global_avg_pool(one).unwrap();
        assert_eq!(t.data(z), &[4.0, -1.0]);
    }

    #[test]
    fn upsample_corner_aligned_hand_values() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = t.bilinear_upsample(x, 2).unwrap();
        let expect = [0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, e) in t.data(y).iter().zip(expect) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn upsample_constant_and_factor_one() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 2, 2], vec![3.25; 4]).unwrap();
        let y = t.bilinear_upsample(x, 3).unwrap();
        assert_eq!(t.shape(y), &[1, 6, 6]);
        assert!(t.data(y).iter().all(|&v| (v - 3.25).abs() < 1e-15));
        let z = t.bilinear_upsample(x, 1).unwrap();
        assert_eq!(t.data(z), t.data(x));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = t.relu(x);
        assert_eq!(t.data(r), &[0.0, 0.0, 2.0]);

        let z = t.constant(vec![1], vec![0.0]).unwrap();
        let th = t.tanh(z);
        assert_eq!(t.data(th), &[0.0]);
        // f64 tanh saturates to exactly 1.0 near |x| ~ 19, so probe below that
        let big = t.constant(vec![2], vec![5.0, -5.0]).unwrap();
        let tb = t.tanh(big);
        assert!(t.data(tb).iter().all(|&v| v > -1.0 && v < 1.0));

        let a = t.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.constant(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        let h = t.hadamard(a, b).unwrap();
        assert_eq!(t.data(h), &[4.0, 10.0, 18.0]);

        let c = t.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let d = t.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(t.add(c, d).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let u = t.constant(vec![4], vec![0.7; 4]).unwrap();
        let s = t.softmax(u).unwrap();
        for &v in t.data(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = t.constant(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
        let s = t.softmax(x).unwrap();
        assert!((t.data(s)[0] - 0.25).abs() < 1e-12);
        assert!((t.data(s)[1] - 0.75).abs() < 1e-12);

        let one = t.constant(vec![1], vec![123.0]).unwrap();
        let s = t.softmax(one).unwrap();
        assert_eq!(t.data(s), &[1.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut t = Tape::new();
        let vals = vec![3.1, -2.0, 0.5, 700.0 / 100.0, 4.25];
        let x = t.constant(vec![5], vals.clone()).unwrap();
        let s = t.softmax(x).unwrap();
        let total: f64 = t.data(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.456).collect();
        let xs = t.constant(vec![5], shifted).unwrap();
        let ss = t.softmax(xs).unwrap();
        for (a, b) in t.data(s).iter().zip(t.data(ss)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snr_loss_hand_values() {
        // one pos, one neg, equal values -> ln 2
        let mut t = Tape::new();
        let x = t.constant(vec![2], vec![0.4, 0.4]).unwrap();
        let l = t.snr_loss(x, vec![0], vec![1]).unwrap();
        assert!((t.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // pos {10}, neg {0} -> log(1 + e^-10)
        let mut t = Tape::new();
        let x = t.constant(vec![2], vec![10.0, 0.0]).unwrap();
        let l = t.snr_loss(x, vec![0], vec![1]).unwrap();
        assert!((t.data(l)[0] - (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-15);

        // pos {0,0}, neg {0,0} -> ln 2
        let mut t = Tape::new();
        let x = t.constant(vec![4], vec![0.0; 4]).unwrap();
        let l = t.snr_loss(x, vec![0, 1], vec![2, 3]).unwrap();
        assert!((t.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn reshape_and_concat_channels() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshape(x, vec![1, 2, 2]).unwrap();
        assert_eq!(t.shape(r), &[1, 2, 2]);
        let y = t.constant(vec![2, 2, 2], vec![0.0; 8]).unwrap();
        let c = t.concat_channels(&[y, r]).unwrap();
        assert_eq!(t.shape(c), &[3, 2, 2]);
        assert_eq!(&t.data(c)[8..], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tokens_round_trip() {
        let (mut t, x) = tape_with(vec![2, 2, 3], (0..12).map(|v| v as f64).collect());
        let tok = t.field_to_tokens(x).unwrap();
        assert_eq!(t.shape(tok), &[6, 2]);
        // token 0 is position (0,0): channels [0, 6]
        assert_eq!(&t.data(tok)[..2], &[0.0, 6.0]);
        let back = t.tokens_to_field(tok, 2, 3).unwrap();
        assert_eq!(t.data(back), t.data(x));
    }

    #[test]
    fn avg_pool2_hand_values() {
        let mut t = Tape::new();
        let x = t
            .constant(vec![1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let y = t.avg_pool2(x).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2]);
        assert_eq!(t.data(y), &[3.5, 5.5]);
        let odd = t.constant(vec![1, 3, 3], vec![0.0; 9]).unwrap();
        assert!(matches!(t.avg_pool2(odd), Err(Error::Config(_))));
    }
}
