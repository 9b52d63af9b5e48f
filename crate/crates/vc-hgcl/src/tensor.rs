//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is a dynamic Wengert tape: every operation records itself
//! while computing its forward value, and [`Tape::backward`] replays the
//! recording in reverse. Tensors live in the tape arena and are addressed
//! by [`TensorId`] handles. Gradients accumulate additively, so running
//! backward twice without clearing doubles every gradient.
//!
//! The operation set is deliberately closed: matmul, same-shape
//! add/mul/sub, concat, slice, sum, mean, tanh, sigmoid, relu, exp, log,
//! softmax, layer norm, transpose, bias broadcast-add, plus rank-only
//! reshape. Everything else in the crate is composed from these.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional array of 64-bit reals, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default, skip)]
    requires_grad: bool,
    #[serde(default, skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape extents multiply out to
    /// the data length and that every extent is positive.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a gradient leaf.
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in g.iter_mut().zip(delta) {
            *dst += src;
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Operation recorded per tape node; indices refer to earlier nodes.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Concat { a: usize, b: usize, axis: usize },
    Slice { input: usize, axis: usize, start: usize, end: usize },
    SumAll { input: usize },
    MeanAll { input: usize },
    SumAxis { input: usize, axis: usize },
    MeanAxis { input: usize, axis: usize },
    Tanh { input: usize },
    Sigmoid { input: usize },
    Relu { input: usize },
    Exp { input: usize },
    Log { input: usize },
    Softmax { input: usize, axis: usize },
    LayerNorm { input: usize, gain: usize, shift: usize, eps: f64 },
    Transpose { input: usize },
    Reshape { input: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when a tracked leaf is reachable below this node; backward
    /// skips subtrees where this is false.
    needs: bool,
}

/// Raw 2-D matrix product: a [m×k] · b [k×n] → [m×n]. Row-times-row
/// accumulation keeps the inner loop contiguous; the zero skip makes
/// 0/1 selection matrices cheap.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Dynamic recording tape. One tape corresponds to one forward pass;
/// distinct tapes share no state.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(cap: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(cap),
        }
    }

    /// Number of recorded nodes. Useful for auditing which branches of a
    /// model were actually constructed.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Records an externally built tensor as a leaf.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let needs = value.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(data, shape)?))
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, needs });
        TensorId(id)
    }

    fn push_derived(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, parents: &[usize]) -> TensorId {
        let needs = parents.iter().any(|&p| self.nodes[p].needs);
        let value = Tensor {
            shape,
            data,
            requires_grad: needs,
            grad: None,
        };
        self.push(value, op, needs)
    }

    // ── Forward operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push_derived(data, vec![m, n], Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(data, shape, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds a `[n]` bias vector to every row of a `[m×n]` matrix.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        let n = *sa.last().unwrap_or(&0);
        if sa.is_empty() || sb.len() != 1 || sb[0] != n || sa.len() > 2 {
            return Err(Error::Shape { op: "add_bias", lhs: sa, rhs: sb });
        }
        let bias_data = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias_data[i % n])
            .collect();
        Ok(self.push_derived(data, sa, Op::AddBias { a: a.0, bias: bias.0 }, &[a.0, bias.0]))
    }

    /// Concatenates along `axis`. 1-D tensors concat along axis 0; 2-D
    /// tensors along rows (0) or columns (1).
    pub fn concat(&mut self, a: TensorId, b: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::Shape { op: "concat", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != sb.len() || axis >= sa.len() || sa.len() > 2 {
            return Err(bad());
        }
        let (data, shape) = match sa.len() {
            1 => {
                let mut d = self.data(a).to_vec();
                d.extend_from_slice(self.data(b));
                (d, vec![sa[0] + sb[0]])
            }
            2 if axis == 0 => {
                if sa[1] != sb[1] {
                    return Err(bad());
                }
                let mut d = self.data(a).to_vec();
                d.extend_from_slice(self.data(b));
                (d, vec![sa[0] + sb[0], sa[1]])
            }
            2 => {
                if sa[0] != sb[0] {
                    return Err(bad());
                }
                let (na, nb) = (sa[1], sb[1]);
                let mut d = Vec::with_capacity(sa[0] * (na + nb));
                for i in 0..sa[0] {
                    d.extend_from_slice(&self.data(a)[i * na..(i + 1) * na]);
                    d.extend_from_slice(&self.data(b)[i * nb..(i + 1) * nb]);
                }
                (d, vec![sa[0], na + nb])
            }
            _ => return Err(bad()),
        };
        Ok(self.push_derived(data, shape, Op::Concat { a: a.0, b: b.0, axis }, &[a.0, b.0]))
    }

    /// Takes the half-open range `start..end` along `axis`.
    pub fn slice(&mut self, input: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || s.len() > 2 || start >= end || end > s[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{end} on axis {axis} is out of bounds for shape {s:?}"
            )));
        }
        let (data, shape) = match s.len() {
            1 => (self.data(input)[start..end].to_vec(), vec![end - start]),
            _ if axis == 0 => {
                let n = s[1];
                (self.data(input)[start * n..end * n].to_vec(), vec![end - start, n])
            }
            _ => {
                let n = s[1];
                let mut d = Vec::with_capacity(s[0] * (end - start));
                for i in 0..s[0] {
                    d.extend_from_slice(&self.data(input)[i * n + start..i * n + end]);
                }
                (d, vec![s[0], end - start])
            }
        };
        Ok(self.push_derived(data, shape, Op::Slice { input: input.0, axis, start, end }, &[input.0]))
    }

    /// Sums all entries to a `[1]` scalar.
    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.data(input).iter().sum();
        self.push_derived(vec![s], vec![1], Op::SumAll { input: input.0 }, &[input.0])
    }

    /// Mean over all entries, to a `[1]` scalar.
    pub fn mean_all(&mut self, input: TensorId) -> TensorId {
        let n = self.data(input).len() as f64;
        let s: f64 = self.data(input).iter().sum();
        self.push_derived(vec![s / n], vec![1], Op::MeanAll { input: input.0 }, &[input.0])
    }

    /// Axis reduction on a 2-D tensor, keeping the reduced axis with
    /// extent 1: axis 0 gives `[1×n]`, axis 1 gives `[m×1]`.
    pub fn sum_axis(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(input, axis, false)
    }

    pub fn mean_axis(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(input, axis, true)
    }

    fn reduce_axis(&mut self, input: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || axis > 1 {
            return Err(Error::Shape { op: "reduce_axis", lhs: s, rhs: vec![axis] });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(input);
        let (data, shape) = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += d[i * n + j];
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= m as f64);
            }
            (out, vec![1, n])
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = d[i * n..(i + 1) * n].iter().sum();
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= n as f64);
            }
            (out, vec![m, 1])
        };
        let op = if mean {
            Op::MeanAxis { input: input.0, axis }
        } else {
            Op::SumAxis { input: input.0, axis }
        };
        Ok(self.push_derived(data, shape, op, &[input.0]))
    }

    fn unary(&mut self, input: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data: Vec<f64> = self.data(input).iter().map(|&x| f(x)).collect();
        let shape = self.shape(input).to_vec();
        self.push_derived(data, shape, op, &[input.0])
    }

    pub fn tanh(&mut self, input: TensorId) -> TensorId {
        self.unary(input, f64::tanh, Op::Tanh { input: input.0 })
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        self.unary(input, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { input: input.0 })
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        self.unary(input, |x| x.max(0.0), Op::Relu { input: input.0 })
    }

    pub fn exp(&mut self, input: TensorId) -> TensorId {
        self.unary(input, f64::exp, Op::Exp { input: input.0 })
    }

    pub fn log(&mut self, input: TensorId) -> TensorId {
        self.unary(input, f64::ln, Op::Log { input: input.0 })
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    /// 1-D tensors use axis 0; 2-D tensors normalize rows (axis 1) or
    /// columns (axis 0). Rejects non-finite inputs.
    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if (s.len() == 1 && axis != 0) || (s.len() == 2 && axis > 1) || s.len() > 2 {
            return Err(Error::Shape { op: "softmax", lhs: s, rhs: vec![axis] });
        }
        if self.data(input).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax", "non-finite logit".to_string()));
        }
        let d = self.data(input);
        let mut out = vec![0.0; d.len()];
        let (lanes, lane_len, stride, lane_stride) = lane_layout(&s, axis);
        for lane in 0..lanes {
            let base = lane * lane_stride;
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(d[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (d[base + i * stride] - max).exp();
                out[base + i * stride] = e;
                sum += e;
            }
            for i in 0..lane_len {
                out[base + i * stride] /= sum;
            }
        }
        Ok(self.push_derived(out, s, Op::Softmax { input: input.0, axis }, &[input.0]))
    }

    /// Normalizes over the last axis: `gain ⊙ (x − mean)/sqrt(var + eps) + shift`,
    /// with population variance per row. `gain` and `shift` are `[n]`.
    pub fn layer_norm(
        &mut self,
        input: TensorId,
        gain: TensorId,
        shift: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        let n = *s.last().unwrap_or(&0);
        if s.is_empty() || s.len() > 2 {
            return Err(Error::Shape { op: "layer_norm", lhs: s, rhs: vec![] });
        }
        if n < 2 {
            return Err(Error::contract(format!(
                "layer_norm needs at least 2 entries per row, got shape {s:?}"
            )));
        }
        for (name, pid) in [("gain", gain), ("shift", shift)] {
            let ps = self.shape(pid);
            if ps != [n] {
                return Err(Error::Shape {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm shift" },
                    lhs: s,
                    rhs: ps.to_vec(),
                });
            }
        }
        let rows = s.iter().take(s.len() - 1).product::<usize>();
        let d = self.data(input);
        let g = self.data(gain).to_vec();
        let b = self.data(shift).to_vec();
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let std = (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = g[j] * (row[j] - mean) / std + b[j];
            }
        }
        Ok(self.push_derived(
            out,
            s,
            Op::LayerNorm { input: input.0, gain: gain.0, shift: shift.0, eps },
            &[input.0, gain.0, shift.0],
        ))
    }

    pub fn transpose(&mut self, input: TensorId) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(input);
        let mut out = vec![0.0; d.len()];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push_derived(out, vec![n, m], Op::Transpose { input: input.0 }, &[input.0]))
    }

    /// Rank-only view change; data order is untouched and the gradient
    /// passes through unchanged.
    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(input).len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(input).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(input).to_vec();
        Ok(self.push_derived(data, shape.to_vec(), Op::Reshape { input: input.0 }, &[input.0]))
    }

    // ── Composed helpers ────────────────────────────────────────────

    /// Multiplies by a constant (elementwise mul with a filled tensor).
    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let c = self.leaf(Tensor::full(self.nodes[input.0].value.shape(), factor));
        self.mul(input, c).expect("same-shape by construction")
    }

    pub fn neg(&mut self, input: TensorId) -> TensorId {
        self.scale(input, -1.0)
    }

    /// Cosine similarity of two same-shape tensors, flattened:
    /// `x·y / (‖x‖‖y‖)`. Composed from mul/sum/log/exp so gradients flow
    /// through both operands. Errors on zero-norm input.
    pub fn cosine_similarity(&mut self, x: TensorId, y: TensorId) -> Result<TensorId> {
        if self.data(x).len() != self.data(y).len() {
            return Err(Error::Shape {
                op: "cosine_similarity",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(y).to_vec(),
            });
        }
        let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm(self.data(x)) == 0.0 || norm(self.data(y)) == 0.0 {
            return Err(Error::degenerate(
                "cosine_similarity",
                "zero-norm operand".to_string(),
            ));
        }
        let xf = self.flatten(x)?;
        let yf = self.flatten(y)?;
        let xy = self.mul(xf, yf)?;
        let dot = self.sum_all(xy);
        // 1/‖v‖ as exp(−½·log Σv²); the squared norms are strictly positive here.
        let mut inv_norm = |t: TensorId| -> Result<TensorId> {
            let sq = self.mul(t, t)?;
            let ss = self.sum_all(sq);
            let ls = self.log(ss);
            let half = self.scale(ls, -0.5);
            Ok(self.exp(half))
        };
        let ix = inv_norm(xf)?;
        let iy = inv_norm(yf)?;
        let a = self.mul(dot, ix)?;
        self.mul(a, iy)
    }

    fn flatten(&mut self, t: TensorId) -> Result<TensorId> {
        let n = self.data(t).len();
        if self.shape(t).len() == 1 {
            Ok(t)
        } else {
            self.reshape(t, &[n])
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Errors when the root is not a
    /// single-element tensor. Gradients are accumulated into every
    /// reachable node that requires them.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.data(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        // Fresh per-pass buffers keep repeated backward calls additive
        // instead of compounding.
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].value.requires_grad() {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |idx: usize, delta: Vec<f64>, nodes: &[Node]| {
            if !nodes[idx].needs {
                return;
            }
            match &mut grads[idx] {
                Some(buf) => {
                    for (dst, src) in buf.iter_mut().zip(&delta) {
                        *dst += src;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = nodes[*a].value.shape();
                let sb = nodes[*b].value.shape();
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if nodes[*a].needs {
                    let da = matmul_nt(g, nodes[*b].value.data(), m, nn, k);
                    send(*a, da, nodes);
                }
                if nodes[*b].needs {
                    let db = matmul_tn(nodes[*a].value.data(), g, k, nn);
                    send(*b, db, nodes);
                }
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec(), nodes);
                send(*b, g.to_vec(), nodes);
            }
            Op::Sub { a, b } => {
                send(*a, g.to_vec(), nodes);
                send(*b, g.iter().map(|v| -v).collect(), nodes);
            }
            Op::Mul { a, b } => {
                if nodes[*a].needs {
                    let bd = nodes[*b].value.data();
                    send(*a, g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect(), nodes);
                }
                if nodes[*b].needs {
                    let ad = nodes[*a].value.data();
                    send(*b, g.iter().zip(ad).map(|(gv, av)| gv * av).collect(), nodes);
                }
            }
            Op::AddBias { a, bias } => {
                let n = nodes[*bias].value.numel();
                let mut db = vec![0.0; n];
                for (idx, gv) in g.iter().enumerate() {
                    db[idx % n] += gv;
                }
                send(*a, g.to_vec(), nodes);
                send(*bias, db, nodes);
            }
            Op::Concat { a, b, axis } => {
                let sa = nodes[*a].value.shape().to_vec();
                let sb = nodes[*b].value.shape().to_vec();
                if sa.len() == 1 || *axis == 0 {
                    let na = nodes[*a].value.numel();
                    send(*a, g[..na].to_vec(), nodes);
                    send(*b, g[na..].to_vec(), nodes);
                } else {
                    let rows = sa[0];
                    let (ca, cb) = (sa[1], sb[1]);
                    let mut da = vec![0.0; rows * ca];
                    let mut db = vec![0.0; rows * cb];
                    for r in 0..rows {
                        let base = r * (ca + cb);
                        da[r * ca..(r + 1) * ca].copy_from_slice(&g[base..base + ca]);
                        db[r * cb..(r + 1) * cb].copy_from_slice(&g[base + ca..base + ca + cb]);
                    }
                    send(*a, da, nodes);
                    send(*b, db, nodes);
                }
            }
            Op::Slice { input, axis, start, end } => {
                let s = nodes[*input].value.shape().to_vec();
                let mut di = vec![0.0; nodes[*input].value.numel()];
                match s.len() {
                    1 => di[*start..*end].copy_from_slice(g),
                    _ if *axis == 0 => {
                        let n = s[1];
                        di[*start * n..*end * n].copy_from_slice(g);
                    }
                    _ => {
                        let n = s[1];
                        let w = end - start;
                        for r in 0..s[0] {
                            di[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                        }
                    }
                }
                send(*input, di, nodes);
            }
            Op::SumAll { input } => {
                let n = nodes[*input].value.numel();
                send(*input, vec![g[0]; n], nodes);
            }
            Op::MeanAll { input } => {
                let n = nodes[*input].value.numel();
                send(*input, vec![g[0] / n as f64; n], nodes);
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let s = nodes[*input].value.shape().to_vec();
                let (m, n) = (s[0], s[1]);
                let mean = matches!(nodes[i].op, Op::MeanAxis { .. });
                let denom = if mean {
                    if *axis == 0 { m as f64 } else { n as f64 }
                } else {
                    1.0
                };
                let mut di = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        let gv = if *axis == 0 { g[c] } else { g[r] };
                        di[r * n + c] = gv / denom;
                    }
                }
                send(*input, di, nodes);
            }
            Op::Tanh { input } => {
                let y = nodes[i].value.data();
                send(*input, g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect(), nodes);
            }
            Op::Sigmoid { input } => {
                let y = nodes[i].value.data();
                send(*input, g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect(), nodes);
            }
            Op::Relu { input } => {
                let x = nodes[*input].value.data();
                send(
                    *input,
                    g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect(),
                    nodes,
                );
            }
            Op::Exp { input } => {
                let y = nodes[i].value.data();
                send(*input, g.iter().zip(y).map(|(gv, e)| gv * e).collect(), nodes);
            }
            Op::Log { input } => {
                let x = nodes[*input].value.data();
                send(*input, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect(), nodes);
            }
            Op::Softmax { input, axis } => {
                let s = nodes[i].value.shape().to_vec();
                let y = nodes[i].value.data();
                let (lanes, lane_len, stride, lane_stride) = lane_layout(&s, *axis);
                let mut di = vec![0.0; y.len()];
                for lane in 0..lanes {
                    let base = lane * lane_stride;
                    let mut dot = 0.0;
                    for idx in 0..lane_len {
                        let p = base + idx * stride;
                        dot += g[p] * y[p];
                    }
                    for idx in 0..lane_len {
                        let p = base + idx * stride;
                        di[p] = y[p] * (g[p] - dot);
                    }
                }
                send(*input, di, nodes);
            }
            Op::LayerNorm { input, gain, shift, eps } => {
                let s = nodes[*input].value.shape().to_vec();
                let n = *s.last().unwrap();
                let rows = nodes[*input].value.numel() / n;
                let x = nodes[*input].value.data();
                let gd = nodes[*gain].value.data();
                let mut di = vec![0.0; x.len()];
                let mut dgain = vec![0.0; n];
                let mut dshift = vec![0.0; n];
                for r in 0..rows {
                    let row = &x[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let std = (var + eps).sqrt();
                    let mut dxhat = vec![0.0; n];
                    for j in 0..n {
                        let xhat = (row[j] - mean) / std;
                        dgain[j] += grow[j] * xhat;
                        dshift[j] += grow[j];
                        dxhat[j] = grow[j] * gd[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let dvar: f64 = dxhat
                        .iter()
                        .zip(row)
                        .map(|(dxh, &xv)| dxh * (xv - mean))
                        .sum::<f64>()
                        * (-0.5)
                        / (std * std * std);
                    let dmu = -sum_dxhat / std;
                    for j in 0..n {
                        di[r * n + j] =
                            dxhat[j] / std + dvar * 2.0 * (row[j] - mean) / n as f64 + dmu / n as f64;
                    }
                }
                send(*input, di, nodes);
                send(*gain, dgain, nodes);
                send(*shift, dshift, nodes);
            }
            Op::Transpose { input } => {
                let s = nodes[i].value.shape().to_vec();
                let (m, n) = (s[0], s[1]);
                let mut di = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        di[c * m + r] = g[r * n + c];
                    }
                }
                send(*input, di, nodes);
            }
            Op::Reshape { input } => {
                send(*input, g.to_vec(), nodes);
            }
        }
    }
}

/// g [m×n] · bᵀ with b stored as [k×n] → [m×k]; rows dot rows, with a
/// four-lane accumulator so the reduction vectorizes.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for (grow, orow) in g.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(n)) {
            let mut acc = [0.0f64; 4];
            let chunks = n / 4;
            for c in 0..chunks {
                let i = c * 4;
                acc[0] += grow[i] * brow[i];
                acc[1] += grow[i + 1] * brow[i + 1];
                acc[2] += grow[i + 2] * brow[i + 2];
                acc[3] += grow[i + 3] * brow[i + 3];
            }
            let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            for i in chunks * 4..n {
                s += grow[i] * brow[i];
            }
            *o = s;
        }
    }
    out
}

/// aᵀ · g with a stored as [m×k], g as [m×n] → [k×n].
fn matmul_tn(a: &[f64], g: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Iteration layout for per-lane ops (softmax): returns
/// (lanes, lane_len, stride within a lane, stride between lanes).
fn lane_layout(shape: &[usize], axis: usize) -> (usize, usize, usize, usize) {
    match (shape.len(), axis) {
        (1, _) => (1, shape[0], 1, 0),
        (2, 1) => (shape[0], shape[1], 1, shape[1]),
        (2, 0) => (shape[1], shape[0], shape[1], 1),
        _ => unreachable!("rank checked by callers"),
    }
}
