//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. Nodes only ever reference earlier
//! nodes, so walking the tape backwards visits each node after all of its
//! consumers. [`Tape::backward`] consumes the tape.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::tensor::{check_finite, numel, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    TransposeLast2(Var),
    Permute { input: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, rstd: Vec<f32> },
    Gelu(Var),
    Mean(Var),
    SumSq(Var),
    Gather { table: Var, ids: Vec<usize> },
    Reweight { input: Var, rows: Range<usize>, cols: Vec<usize>, scale: f32 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<usize, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient of the parameter registered with id `id`, if it took part.
    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    /// Gradient with respect to a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }
}

/// `(outer, axis_len, inner)` for a row-major shape split at `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the caller passes slices whose extents cover every strided
    // access for an m x k by k x n product written into an m x n row-major c.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

const LN_EPS: f32 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(op, value.data())?;
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf value. With `requires_grad` its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf tied to parameter `id`; its gradient is reported by
    /// [`Gradients::param`].
    pub fn param(&mut self, id: usize, value: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf { param: Some(id) },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a).scale(s)?;
        let rg = self.rg(&[a]);
        self.push("scale", v, Op::Scale(a, s), rg)
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || sb.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(numel(sb))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.check_suffix("add_broadcast", a, b)?;
        let bv = self.value(b).data();
        let data: Vec<f32> = self
            .value(a)
            .data()
            .chunks_exact(nb)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let v = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("add_broadcast", v, Op::AddBroadcast(a, b), rg)
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.check_suffix("mul_broadcast", a, b)?;
        let bv = self.value(b).data();
        let data: Vec<f32> = self
            .value(a)
            .data()
            .chunks_exact(nb)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x * y))
            .collect();
        let v = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("mul_broadcast", v, Op::MulBroadcast(a, b), rg)
    }

    /// `a [.., k] @ w [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if sa.is_empty() || sw.len() != 2 || *sa.last().unwrap() != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sw,
            });
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(&sa) / k.max(1);
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(w).data(), (n, 1), &mut out, 0.0);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, w]);
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, w), rg)
    }

    /// Batched product `a [n, m, k] @ b [n, k, p]`, or `@ b[i]^T` for
    /// `b [n, p, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0f32; batch * m * p];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let bstride = if trans_b { (1, k) } else { (p, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                p,
                &av[i * m * k..],
                (k, 1),
                &bv[i * k * p..],
                bstride,
                &mut out[i * m * p..(i + 1) * m * p],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push("bmm", Tensor::from_parts(vec![batch, m, p], out), Op::Bmm { a, b, trans_b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("rank {} < 2", s.len()),
            });
        }
        let r = s.len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let (shape, data) = permute_data(self.value(a).data(), &s, &perm);
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::from_parts(shape, data), Op::TransposeLast2(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", s.len()),
            });
        }
        let (shape, data) = permute_data(self.value(a).data(), &s, perm);
        let rg = self.rg(&[a]);
        self.push(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push("reshape", v, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", s0.len()),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut shape = s0.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {s:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = w;
        let rg = self.rg(&[a]);
        self.push(
            "slice",
            Tensor::from_parts(shape, data),
            Op::Slice { input: a, axis, start },
            rg,
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {s:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for j in 0..len {
                    out[at(j)] *= inv;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("softmax", Tensor::from_parts(s, out), Op::Softmax { input: a, axis }, rg)
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    /// No affine terms; compose with [`mul_broadcast`](Self::mul_broadcast)
    /// and [`add_broadcast`](Self::add_broadcast).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        let x = self.value(a).data();
        let rows = x.len() / d.max(1);
        let mut out = vec![0.0f32; x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS as f64).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = ((v as f64 - mean) * rs) as f32;
            }
            rstd.push(rs as f32);
        }
        let rg = self.rg(&[a]);
        self.push("layer_norm", Tensor::from_parts(s, out), Op::LayerNorm { input: a, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))?;
        let rg = self.rg(&[a]);
        self.push("gelu", v, Op::Gelu(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean() as f32);
        let rg = self.rg(&[a]);
        self.push("mean", v, Op::Mean(a), rg)
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| (x as f64) * (x as f64)).sum();
        if !s.is_finite() || s > f32::MAX as f64 {
            return Err(TensorError::NonFinite { op: "sum_sq" });
        }
        let rg = self.rg(&[a]);
        self.push("sum_sq", Tensor::scalar(s as f32), Op::SumSq(a), rg)
    }

    /// Rows of `table [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("table must be rank 2, got {s:?}"),
            });
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Scales entries `(r, c)` with `r` in `rows` and `c` in `cols` of every
    /// trailing square matrix in `a` by `scale`. Used for attention reweighting.
    pub fn reweight(&mut self, a: Var, rows: Range<usize>, cols: &[usize], scale: f32) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let r = s.len();
        if r < 2 || s[r - 1] != s[r - 2] {
            return Err(TensorError::Invalid {
                op: "reweight",
                msg: format!("expected trailing square matrices, got {s:?}"),
            });
        }
        let n = s[r - 1];
        if rows.end > n || cols.iter().any(|&c| c >= n) {
            return Err(TensorError::Invalid {
                op: "reweight",
                msg: format!("index out of range for {n}x{n} map"),
            });
        }
        let mut data = self.value(a).data().to_vec();
        for m in data.chunks_exact_mut(n * n) {
            scale_block(m, n, rows.clone(), cols, scale);
        }
        let rg = self.rg(&[a]);
        self.push(
            "reweight",
            Tensor::from_parts(s, data),
            Op::Reweight {
                input: a,
                rows,
                cols: cols.to_vec(),
                scale,
            },
            rg,
        )
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Disconnected);
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads, &mut out)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param } = node.op {
                if !node.requires_grad {
                    continue;
                }
                let zero = || Tensor::zeros(node.value.shape().to_vec());
                match param {
                    Some(id) => {
                        out.params.entry(id).or_insert_with(zero);
                    }
                    None => {
                        out.leaves.entry(Var(i)).or_insert_with(zero);
                    }
                }
            }
        }
        Ok(out)
    }

    fn propagate(
        &self,
        index: usize,
        g: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[index];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf { param } => {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match param {
                    Some(id) => {
                        match out.params.get_mut(id) {
                            // a parameter registered twice on one tape accumulates
                            Some(prev) => *prev = prev.add(&t)?,
                            None => {
                                out.params.insert(*id, t);
                            }
                        }
                    }
                    None => {
                        out.leaves.insert(Var(index), t);
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, &g));
                acc(*b, &|s| add_into(s, &g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, &g));
                acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| s.iter_mut().zip(g.iter().zip(vb)).for_each(|(x, (gy, y))| *x += gy * y));
                acc(*b, &|s| s.iter_mut().zip(g.iter().zip(va)).for_each(|(x, (gy, y))| *x += gy * y));
            }
            Op::Scale(a, c) => {
                acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y));
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &|s| add_into(s, &g));
                let nb = val(*b).len();
                acc(*b, &|s| {
                    for row in g.chunks_exact(nb) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulBroadcast(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                acc(*a, &|s| {
                    for (srow, grow) in s.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        srow.iter_mut().zip(grow.iter().zip(vb)).for_each(|(x, (gy, y))| *x += gy * y);
                    }
                });
                acc(*b, &|s| {
                    for (arow, grow) in va.chunks_exact(nb).zip(g.chunks_exact(nb)) {
                        s.iter_mut().zip(grow.iter().zip(arow)).for_each(|(x, (gy, y))| *x += gy * y);
                    }
                });
            }
            Op::MatMul(a, w) => {
                let sw = shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let m = val(*a).len() / k.max(1);
                let (va, vw) = (val(*a), val(*w));
                // dA = G W^T
                acc(*a, &|s| gemm(m, n, k, &g, (n, 1), vw, (1, n), s, 1.0));
                // dW = A^T G
                acc(*w, &|s| gemm(k, m, n, va, (1, k), &g, (n, 1), s, 1.0));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let p = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                let trans_b = *trans_b;
                acc(*a, &|s| {
                    for i in 0..batch {
                        let gi = &g[i * m * p..];
                        let bi = &vb[i * k * p..];
                        // dA = G B^T  (B stored [k,p]) or G B (B stored [p,k])
                        let bs = if trans_b { (k, 1) } else { (1, p) };
                        gemm(m, p, k, gi, (p, 1), bi, bs, &mut s[i * m * k..(i + 1) * m * k], 1.0);
                    }
                });
                acc(*b, &|s| {
                    for i in 0..batch {
                        let gi = &g[i * m * p..];
                        let ai = &va[i * m * k..];
                        let dst = &mut s[i * k * p..(i + 1) * k * p];
                        if trans_b {
                            // dB[p,k] = G^T A
                            gemm(p, m, k, gi, (1, p), ai, (k, 1), dst, 1.0);
                        } else {
                            // dB[k,p] = A^T G
                            gemm(k, m, p, ai, (1, k), gi, (p, 1), dst, 1.0);
                        }
                    }
                });
            }
            Op::TransposeLast2(a) => {
                let so = node.value.shape();
                let r = so.len();
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(r - 2, r - 1);
                let (_, back) = permute_data(&g, so, &perm);
                acc(*a, &|s| add_into(s, &back));
            }
            Op::Permute { input, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute_data(&g, node.value.shape(), &inv);
                acc(*input, &|s| add_into(s, &back));
            }
            Op::Reshape(a) => acc(*a, &|s| add_into(s, &g)),
            Op::Concat { inputs, axis } => {
                let so = node.value.shape();
                let (outer, total, inner) = split_axis(so, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = shape(v)[*axis];
                    acc(v, &|s| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..len * inner];
                            add_into(&mut s[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let si = shape(*input);
                let (outer, len, inner) = split_axis(si, *axis);
                let w = node.value.shape()[*axis];
                acc(*input, &|s| {
                    for o in 0..outer {
                        let dst = &mut s[o * len * inner + start * inner..][..w * inner];
                        add_into(dst, &g[o * w * inner..(o + 1) * w * inner]);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*input, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f32 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { input, rstd } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                acc(*input, &|s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f32>() / d as f32;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            s[r * d + j] += rs * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((d, &gi), &xi) in s.iter_mut().zip(&g).zip(x) {
                        let u = GELU_K * (xi + GELU_C * xi * xi * xi);
                        let th = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * xi * xi);
                        *d += gi * (0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du);
                    }
                });
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f32;
                let gv = g[0] / n;
                acc(*a, &|s| s.iter_mut().for_each(|x| *x += gv));
            }
            Op::SumSq(a) => {
                let x = val(*a);
                let gv = g[0];
                acc(*a, &|s| s.iter_mut().zip(x).for_each(|(d, &xi)| *d += 2.0 * xi * gv));
            }
            Op::Gather { table, ids } => {
                let d = shape(*table)[1];
                acc(*table, &|s| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Reweight {
                input,
                rows,
                cols,
                scale,
            } => {
                let n = *node.value.shape().last().unwrap();
                let mut gs = g.clone();
                for m in gs.chunks_exact_mut(n * n) {
                    scale_block(m, n, rows.clone(), cols, *scale);
                }
                acc(*input, &|s| add_into(s, &gs));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// In-place `m[r, c] *= scale` for `r in rows`, `c in cols` on an `n x n`
/// row-major matrix. `scale == 1` leaves the bits untouched.
pub(crate) fn scale_block(m: &mut [f32], n: usize, rows: Range<usize>, cols: &[usize], scale: f32) {
    if scale == 1.0 {
        return;
    }
    for r in rows {
        for &c in cols {
            m[r * n + c] *= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(eye, a).unwrap();
        // I [3,3] as rows times A [3,2]
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 5], 3.7));
        let y = tape.softmax(x, 1).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1., 2., 3., 10., -5., 0.5, 0.25, 8.]));
        let y = tape.layer_norm(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let m: f32 = row.iter().sum::<f32>() / 4.0;
            let v: f32 = row.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / 4.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let l = tape.sum_sq(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param(0, &t(&[2], &[1., 2.]), true);
        let p = tape.param(1, &t(&[3], &[5., 6., 7.]), true);
        let l = tape.sum_sq(x).unwrap();
        let _ = p;
        let g = tape.backward(l).unwrap();
        assert_eq!(g.param(1).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_without_trainable_leaf_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1., 2.]));
        let l = tape.sum_sq(x).unwrap();
        assert_eq!(tape.backward(l).unwrap_err(), TensorError::Disconnected);
    }

    #[test]
    fn backward_on_non_scalar_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(tape.matmul(a, a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn overflow_is_detected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full([2], 3e38));
        assert!(matches!(tape.add(a, a), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let a = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let q = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(q).data(), &data[..]);
    }

    #[test]
    fn reweight_by_one_is_bit_identical() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3, 3], &[0.1, 0.2, 0.7, 0.3, 0.3, 0.4, 0.5, 0.25, 0.25]));
        let b = tape.reweight(a, 1..3, &[0], 1.0).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        let c = tape.reweight(a, 1..3, &[0], 0.0).unwrap();
        assert_eq!(tape.value(c).data(), &[0.1, 0.2, 0.7, 0.0, 0.3, 0.4, 0.0, 0.25, 0.25]);
    }
}
