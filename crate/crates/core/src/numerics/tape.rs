//! Recorded forward passes with hand-written reverse-mode gradients.
//!
//! Every node stores its forward value. `backward` walks the nodes in reverse
//! recording order; each primitive owns its analytic adjoint. Geometry that
//! does not fit the primitive set enters through [`CustomOp`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, softmax_in_place, Activation, LayerParams};
use super::Matrix;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named learned tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// All parameters concatenated in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::shape(
                "ParamStore::unflatten",
                format!("{} values for {} parameters", flat.len(), self.scalar_count()),
            ));
        }
        let mut at = 0;
        for m in &mut self.values {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Offset of each parameter in the flattened layout.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.values.len());
        let mut at = 0;
        for m in &self.values {
            out.push(at);
            at += m.data().len();
        }
        out
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Geometry or bookkeeping step with its own analytic adjoint.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad_output: &Matrix) -> Vec<Matrix>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    LayerNorm {
        x: usize,
        gain: usize,
        offset: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        bias: Option<usize>,
        groups: usize,
        scale: f64,
        probs: Vec<Matrix>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
    },
    Gather {
        a: usize,
        groups: Arc<Vec<Vec<usize>>>,
    },
    GroupDot {
        x: usize,
        w: usize,
        b: usize,
        group: Arc<Vec<usize>>,
    },
    Reshape(usize),
    Sum(usize),
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// How a second operand broadcasts against the first.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast(a: &Matrix, b: &Matrix, op: &'static str) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.shape() == (1, 1) {
        Ok(Bcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Bcast::Row)
    } else if b.cols() == 1 && b.rows() == a.rows() {
        Ok(Bcast::Col)
    } else {
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} against {:?}", b.shape(), a.shape()),
        ))
    }
}

#[inline]
fn bval(b: &Matrix, mode: Bcast, r: usize, c: usize) -> f64 {
    match mode {
        Bcast::Same => b.get(r, c),
        Bcast::Row => b.get(0, c),
        Bcast::Col => b.get(r, 0),
        Bcast::Scalar => b.get(0, 0),
    }
}

fn reduce_to(g: &Matrix, mode: Bcast, shape: (usize, usize)) -> Matrix {
    match mode {
        Bcast::Same => g.clone(),
        _ => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let (rr, cc) = match mode {
                        Bcast::Row => (0, c),
                        Bcast::Col => (r, 0),
                        _ => (0, 0),
                    };
                    let v = out.get(rr, cc) + g.get(r, c);
                    out.set(rr, cc, v);
                }
            }
            out
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::UnrecordedNode { node: v.idx });
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", va.shape(), vb.shape()),
            ));
        }
        let out = va.matmul_t(vb);
        Ok(self.push(out, Op::MatMulT(ia, ib)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mode = bcast(va, vb, name)?;
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            for c in 0..va.cols() {
                out.set(r, c, f(va.get(r, c), bval(vb, mode, r, c)));
            }
        }
        Ok(self.push(out, op(ia, ib)))
    }

    /// `a + b`, where `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.scaled(s);
        Ok(self.push(out, Op::Scale(ia, s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        Ok(self.push(out, Op::Tanh(ia)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v.max(0.0));
        Ok(self.push(out, Op::Relu(ia)))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        if !(lo <= hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.nodes[ia].value.map(|v| v.clamp(lo, hi));
        Ok(self.push(out, Op::Clamp(ia, lo, hi)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f64::exp);
        Ok(self.push(out, Op::Exp(ia)))
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Linear => Ok(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Relu => self.relu(a),
        }
    }

    /// `activation(x · Wᵀ + b)` with `W` (`out × in`) and `b` (`1 × out`).
    pub fn dense(&mut self, x: Var, w: Var, b: Var, kind: Activation) -> Result<Var> {
        let lin = self.matmul_t(x, w)?;
        let shifted = self.add(lin, b)?;
        self.activate(shifted, kind)
    }

    /// Dense layer from inline parameters recorded as leaves.
    pub fn dense_const(&mut self, x: Var, params: &LayerParams) -> Result<Var> {
        let w = self.leaf(params.weights.clone());
        let b = self.leaf(Matrix::row_vector(&params.bias));
        self.dense(x, w, b, params.kind)
    }

    /// Row-wise layer norm; `gain` and `offset` are `1 × cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, epsilon: f64) -> Result<Var> {
        let (ix, ig, io) = (self.idx(x)?, self.idx(gain)?, self.idx(offset)?);
        let (vx, vg, vo) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[io].value,
        );
        let c = vx.cols();
        if vg.shape() != (1, c) || vo.shape() != (1, c) {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?}, offset {:?}, cols {c}", vg.shape(), vo.shape()),
            ));
        }
        let mut xhat = Matrix::zeros(vx.rows(), c);
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Matrix::zeros(vx.rows(), c);
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            if var + epsilon <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "layer_norm row {r} has zero variance and epsilon = 0"
                )));
            }
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std.push(inv);
            for k in 0..c {
                let h = (row[k] - mean) * inv;
                xhat.set(r, k, h);
                out.set(r, k, h * vg.get(0, k) + vo.get(0, k));
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                offset: io,
                xhat,
                inv_std,
            },
        ))
    }

    /// Grouped scaled-dot-product attention.
    ///
    /// `q` holds `groups` blocks of equal height, `k`/`v` likewise; block `g`
    /// of the queries attends only to block `g` of the keys. `bias`, when
    /// given, is an additive `nq × nk` score offset shared by all blocks.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        groups: usize,
        scale: f64,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let ib = match bias {
            Some(b) => Some(self.idx(b)?),
            None => None,
        };
        let (vq, vk, vv) = (
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
        );
        if groups == 0 || vq.rows() % groups != 0 || vk.rows() % groups != 0 {
            return Err(Error::shape(
                "attention",
                format!("{groups} groups over q {:?}, k {:?}", vq.shape(), vk.shape()),
            ));
        }
        let (nq, nk) = (vq.rows() / groups, vk.rows() / groups);
        if nk == 0 {
            return Err(Error::InvalidArgument("attention with no keys".into()));
        }
        if vq.cols() != vk.cols() || vk.rows() != vv.rows() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", vq.shape(), vk.shape(), vv.shape()),
            ));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != (nq, nk) {
                return Err(Error::shape(
                    "attention",
                    format!("bias {:?} vs ({nq}, {nk})", self.nodes[ib].value.shape()),
                ));
            }
        }
        let dv = vv.cols();
        let d = vq.cols();
        let mut out = Matrix::zeros(vq.rows(), dv);
        let mut probs = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut p = Matrix::zeros(nq, nk);
            for i in 0..nq {
                let qi = vq.row(g * nq + i);
                let prow = p.row_mut(i);
                for (j, s) in prow.iter_mut().enumerate() {
                    let kj = vk.row(g * nk + j);
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += qi[t] * kj[t];
                    }
                    *s = dot * scale;
                    if let Some(ib) = ib {
                        *s += self.nodes[ib].value.get(i, j);
                    }
                }
                softmax_in_place(prow);
            }
            for i in 0..nq {
                let orow = out.row_mut(g * nq + i);
                for j in 0..nk {
                    let pij = p.get(i, j);
                    let vj = vv.row(g * nk + j);
                    for c in 0..dv {
                        orow[c] += pij * vj[c];
                    }
                }
            }
            probs.push(p);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                bias: ib,
                groups,
                scale,
                probs,
            },
        ))
    }

    /// Attention probabilities recorded by an attention node, one matrix per group.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix]> {
        match &self.nodes.get(v.idx)?.op {
            Op::Attention { probs, .. } if v.tape == self.id => Some(probs),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let rows = self.nodes[ids[0]].value.rows();
        if ids.iter().any(|&i| self.nodes[i].value.rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = ids.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &i in &ids {
                let src = self.nodes[i].value.row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(ids)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let cols = self.nodes[ids[0]].value.cols();
        if ids.iter().any(|&i| self.nodes[i].value.cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &i in &ids {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(ids)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if start + len > va.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {} columns", start + len, va.cols()),
            ));
        }
        let out = va.slice_cols(start, len);
        Ok(self.push(out, Op::SliceCols { a: ia, start }))
    }

    /// Row `i` of the output is the mean of the input rows listed in
    /// `groups[i]`; an empty group yields a zero row. Covers pooling,
    /// broadcasting, nearest-neighbour upsampling and row selection.
    pub fn gather(&mut self, a: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let mut out = Matrix::zeros(groups.len(), va.cols());
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let w = 1.0 / g.len() as f64;
            let orow = out.row_mut(i);
            for &j in g {
                if j >= va.rows() {
                    return Err(Error::shape(
                        "gather",
                        format!("row {j} of {}", va.rows()),
                    ));
                }
                for (o, s) in orow.iter_mut().zip(va.row(j)) {
                    *o += w * s;
                }
            }
        }
        Ok(self.push(out, Op::Gather { a: ia, groups }))
    }

    /// `out[r] = x[r] · w[group[r]] + b[group[r]]`: one linear read-out per group.
    pub fn group_dot(&mut self, x: Var, w: Var, b: Var, group: Arc<Vec<usize>>) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (vx, vw, vb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        if group.len() != vx.rows()
            || vw.cols() != vx.cols()
            || vb.shape() != (vw.rows(), 1)
            || group.iter().any(|&g| g >= vw.rows())
        {
            return Err(Error::shape(
                "group_dot",
                format!(
                    "x {:?}, w {:?}, b {:?}, {} group ids",
                    vx.shape(),
                    vw.shape(),
                    vb.shape(),
                    group.len()
                ),
            ));
        }
        let mut out = Matrix::zeros(vx.rows(), 1);
        for r in 0..vx.rows() {
            let g = group[r];
            let dot: f64 = vx.row(r).iter().zip(vw.row(g)).map(|(a, b)| a * b).sum();
            out.set(r, 0, dot + vb.get(g, 0));
        }
        Ok(self.push(
            out,
            Op::GroupDot {
                x: ix,
                w: iw,
                b: ib,
                group,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Matrix::scalar(self.nodes[ia].value.sum());
        Ok(self.push(out, Op::Sum(ia)))
    }

    /// Records a step computed outside the primitive set.
    pub fn custom(&mut self, inputs: &[Var], output: Matrix, op: Box<dyn CustomOp>) -> Result<Var> {
        let ids = inputs
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(output, Op::Custom { inputs: ids, op }))
    }

    /// Reverse sweep seeded with `(node, upstream gradient)` pairs.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            let i = self.idx(*v)?;
            if g.shape() != self.nodes[i].value.shape() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed {:?} for node of shape {:?}",
                        g.shape(),
                        self.nodes[i].value.shape()
                    ),
                ));
            }
            accumulate(&mut grads, i, g.clone());
            top = top.max(i + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul_t(vb));
                    accumulate(&mut grads, *b, va.t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, g.matmul(vb));
                    accumulate(&mut grads, *b, g.t_matmul(va));
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let vb = &self.nodes[*b].value;
                    let mode = bcast(&self.nodes[*a].value, vb, "add")?;
                    let gb = reduce_to(&g, mode, vb.shape());
                    let gb = if matches!(node.op, Op::Sub(..)) {
                        gb.scaled(-1.0)
                    } else {
                        gb
                    };
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let mode = bcast(va, vb, "mul")?;
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    let mut gfull = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        for c in 0..va.cols() {
                            let gv = g.get(r, c);
                            ga.set(r, c, gv * bval(vb, mode, r, c));
                            gfull.set(r, c, gv * va.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, reduce_to(&gfull, mode, vb.shape()));
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scaled(*s)),
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(&self.nodes[*a].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(&self.nodes[*a].value, |gv, x| {
                        if x > *lo && x < *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    xhat,
                    inv_std,
                } => {
                    let vg = &self.nodes[*gain].value;
                    let c = xhat.cols();
                    let mut gx = Matrix::zeros(xhat.rows(), c);
                    let mut gg = Matrix::zeros(1, c);
                    let mut go = Matrix::zeros(1, c);
                    for r in 0..xhat.rows() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for k in 0..c {
                            let dy = g.get(r, k);
                            let h = xhat.get(r, k);
                            gg.data_mut()[k] += dy * h;
                            go.data_mut()[k] += dy;
                            let dh = dy * vg.get(0, k);
                            mean_d += dh;
                            mean_dx += dh * h;
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for k in 0..c {
                            let dh = g.get(r, k) * vg.get(0, k);
                            let h = xhat.get(r, k);
                            gx.set(r, k, inv_std[r] * (dh - mean_d - h * mean_dx));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *offset, go);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    bias,
                    groups,
                    scale,
                    probs,
                } => {
                    let (vq, vk, vv) = (
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                    );
                    let (nq, nk) = (vq.rows() / groups, vk.rows() / groups);
                    let (d, dv) = (vq.cols(), vv.cols());
                    let mut gq = Matrix::zeros(vq.rows(), d);
                    let mut gk = Matrix::zeros(vk.rows(), d);
                    let mut gvv = Matrix::zeros(vv.rows(), dv);
                    let mut gb = bias.map(|_| Matrix::zeros(nq, nk));
                    for (gi, p) in probs.iter().enumerate() {
                        for i in 0..nq {
                            let go = g.row(gi * nq + i);
                            // dP_ij = dO_i · V_j
                            let mut dp = vec![0.0; nk];
                            for (j, dpj) in dp.iter_mut().enumerate() {
                                let vj = vv.row(gi * nk + j);
                                *dpj = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            }
                            let row_dot: f64 = (0..nk).map(|j| dp[j] * p.get(i, j)).sum();
                            for j in 0..nk {
                                let pij = p.get(i, j);
                                {
                                    let gvr = gvv.row_mut(gi * nk + j);
                                    for c in 0..dv {
                                        gvr[c] += pij * go[c];
                                    }
                                }
                                let ds = pij * (dp[j] - row_dot);
                                if let Some(gb) = gb.as_mut() {
                                    let cur = gb.get(i, j);
                                    gb.set(i, j, cur + ds);
                                }
                                let s = ds * scale;
                                let kj = vk.row(gi * nk + j).to_vec();
                                let qi = vq.row(gi * nq + i).to_vec();
                                {
                                    let gqr = gq.row_mut(gi * nq + i);
                                    for t in 0..d {
                                        gqr[t] += s * kj[t];
                                    }
                                }
                                let gkr = gk.row_mut(gi * nk + j);
                                for t in 0..d {
                                    gkr[t] += s * qi[t];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gvv);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::ConcatCols(ids) => {
                    let mut at = 0;
                    for &p in ids {
                        let w = self.nodes[p].value.cols();
                        accumulate(&mut grads, p, g.slice_cols(at, w));
                        at += w;
                    }
                }
                Op::ConcatRows(ids) => {
                    let mut at = 0;
                    let cols = g.cols();
                    for &p in ids {
                        let n = self.nodes[p].value.rows() * cols;
                        let part = Matrix::from_vec(n / cols.max(1), cols, g.data()[at..at + n].to_vec())?;
                        accumulate(&mut grads, p, part);
                        at += n;
                    }
                }
                Op::SliceCols { a, start } => {
                    let va = &self.nodes[*a].value;
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { a, groups } => {
                    let va = &self.nodes[*a].value;
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for (i, grp) in groups.iter().enumerate() {
                        if grp.is_empty() {
                            continue;
                        }
                        let w = 1.0 / grp.len() as f64;
                        for &j in grp {
                            let src = g.row(i);
                            for (o, s) in ga.row_mut(j).iter_mut().zip(src) {
                                *o += w * s;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupDot { x, w, b, group } => {
                    let vx = &self.nodes[*x].value;
                    let vw = &self.nodes[*w].value;
                    let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                    let mut gw = Matrix::zeros(vw.rows(), vw.cols());
                    let mut gbias = Matrix::zeros(vw.rows(), 1);
                    for r in 0..vx.rows() {
                        let gr = g.get(r, 0);
                        let grp = group[r];
                        for (o, wv) in gx.row_mut(r).iter_mut().zip(vw.row(grp)) {
                            *o = gr * wv;
                        }
                        for (o, xv) in gw.row_mut(grp).iter_mut().zip(vx.row(r)) {
                            *o += gr * xv;
                        }
                        let cur = gbias.get(grp, 0);
                        gbias.set(grp, 0, cur + gr);
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gbias);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, g.clone().reshape(r, c)?);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Matrix> = inputs.iter().map(|&p| &self.nodes[p].value).collect();
                    let gs = op.backward(&vals, &node.value, &g);
                    if gs.len() != inputs.len() {
                        return Err(Error::shape(
                            "custom backward",
                            format!("{} returned {} gradients for {} inputs", op.name(), gs.len(), inputs.len()),
                        ));
                    }
                    for (&p, gp) in inputs.iter().zip(gs) {
                        if gp.shape() != self.nodes[p].value.shape() {
                            return Err(Error::shape(
                                "custom backward",
                                format!("{}: gradient {:?} for input {:?}", op.name(), gp.shape(), self.nodes[p].value.shape()),
                            ));
                        }
                        accumulate(&mut grads, p, gp);
                    }
                }
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a node; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into `acc` (aligned with the store).
    pub fn accumulate_params(&self, acc: &mut [Matrix]) {
        for &(id, i) in &self.params {
            if let Some(g) = &self.grads[i] {
                acc[id.0].add_assign(g);
            }
        }
    }
}

/// A dense layer whose weights (`out × in`) and bias (`1 × out`) live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseIds {
    pub w: ParamId,
    pub b: ParamId,
    pub kind: Activation,
}

impl DenseIds {
    pub fn register(store: &mut ParamStore, name: &str, params: LayerParams) -> Self {
        let b = Matrix::row_vector(&params.bias);
        DenseIds {
            w: store.add(format!("{name}.w"), params.weights),
            b: store.add(format!("{name}.b"), b),
            kind: params.kind,
        }
    }

    pub fn layer(&self, store: &ParamStore) -> LayerParams {
        LayerParams {
            weights: store.get(self.w).clone(),
            bias: store.get(self.b).data().to_vec(),
            kind: self.kind,
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.dense(x, w, b, self.kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{glorot_uniform, grad_check};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Checks a graph built from `shapes.len()` leaves, reduced to a scalar by
    /// a fixed random projection of its output.
    fn check_graph(
        seed: u64,
        shapes: &[(usize, usize)],
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<f64> = shapes
            .iter()
            .flat_map(|&(r, c)| (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>())
            .collect();
        let proj_seed = rng.random::<u64>();
        let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let mut at = 0;
            let leaves: Vec<Var> = shapes
                .iter()
                .map(|&(r, c)| {
                    let m = Matrix::from_vec(r, c, x[at..at + r * c].to_vec()).unwrap();
                    at += r * c;
                    tape.leaf(m)
                })
                .collect();
            let out = build(&mut tape, &leaves)?;
            let (r, c) = tape.value(out).shape();
            let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
            let w = glorot_uniform(&mut prng, r, c).scaled(3.0);
            let wv = tape.leaf(w);
            let prod = tape.mul(out, wv)?;
            let s = tape.sum(prod)?;
            let grads = tape.backward(&[(s, Matrix::scalar(1.0))])?;
            let flat = leaves
                .iter()
                .flat_map(|&l| match grads.get(l) {
                    Some(g) => g.data().to_vec(),
                    None => vec![0.0; tape.value(l).data().len()],
                })
                .collect();
            Ok((tape.value(s).item(), flat))
        };
        grad_check(eval, &x0, None, 1e-5, 1e-4).unwrap().max_rel_error
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        let g = t.backward(&[(y, Matrix::scalar(1.0))]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn linear_weight_gradient_is_upstream_t_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xm = glorot_uniform(&mut rng, 3, 4);
        let wm = glorot_uniform(&mut rng, 2, 4);
        let up = glorot_uniform(&mut rng, 3, 2);
        let mut t = Tape::new();
        let x = t.leaf(xm.clone());
        let w = t.leaf(wm);
        let b = t.leaf(Matrix::zeros(1, 2));
        let y = t.dense(x, w, b, Activation::Linear).unwrap();
        let g = t.backward(&[(y, up.clone())]).unwrap();
        let expect = up.t_matmul(&xm);
        for (a, e) in g.get(w).unwrap().data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn foreign_node_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Matrix::scalar(1.0));
        let y = b.leaf(Matrix::scalar(1.0));
        assert!(matches!(b.add(y, x), Err(Error::UnrecordedNode { .. })));
        assert!(b.backward(&[(x, Matrix::scalar(1.0))]).is_err());
    }

    #[test]
    fn dense_layers_match_finite_differences() {
        for kind in [Activation::Linear, Activation::Sigmoid, Activation::Relu] {
            for seed in 0..100 {
                let err = check_graph(seed, &[(3, 4), (5, 4), (1, 5)], |t, v| {
                    t.dense(v[0], v[1], v[2], kind)
                });
                assert!(err < 1e-4, "{kind:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        for seed in 0..100 {
            let err = check_graph(seed, &[(3, 5), (1, 5), (1, 5)], |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn attention_matches_finite_differences() {
        for seed in 0..100 {
            let err = check_graph(seed, &[(4, 3), (6, 3), (6, 2), (2, 3)], |t, v| {
                t.attention(v[0], v[1], v[2], Some(v[3]), 2, 0.6)
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn elementwise_and_structural_ops_match_finite_differences() {
        let groups = Arc::new(vec![vec![0, 2], vec![], vec![1], vec![2, 2, 0]]);
        let ids = Arc::new(vec![1, 0, 1]);
        for seed in 0..100 {
            let g = groups.clone();
            let err = check_graph(seed, &[(3, 4), (3, 1), (1, 4)], move |t, v| {
                let a = t.tanh(v[0])?;
                let b = t.mul(a, v[1])?;
                let c = t.sub(b, v[2])?;
                let e = t.exp(c)?;
                let s = t.scale(e, 0.3)?;
                let cat = t.concat_cols(&[s, v[0]])?;
                let sl = t.slice_cols(cat, 2, 4)?;
                let r = t.reshape(sl, 4, 3)?;
                let rows = t.concat_rows(&[r, r])?;
                t.gather(rows, g.clone())
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
            let ids = ids.clone();
            let err = check_graph(seed, &[(3, 4), (2, 4), (2, 1)], move |t, v| {
                t.group_dot(v[0], v[1], v[2], ids.clone())
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let q = t.leaf(glorot_uniform(&mut rng, 6, 4).scaled(10.0));
        let k = t.leaf(glorot_uniform(&mut rng, 9, 4).scaled(10.0));
        let v = t.leaf(glorot_uniform(&mut rng, 9, 2));
        let out = t.attention(q, k, v, None, 3, 0.5).unwrap();
        for p in t.attention_probs(out).unwrap() {
            for r in 0..p.rows() {
                assert!(p.row(r).iter().all(|&x| x >= 0.0));
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_gradients_accumulate_into_store_layout() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap());
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let x = t.leaf(Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let p = t.mul(wv, x).unwrap();
        let wv2 = t.param(&store, w);
        let q = t.add(p, wv2).unwrap();
        let s = t.sum(q).unwrap();
        let g = t.backward(&[(s, Matrix::scalar(1.0))]).unwrap();
        let mut acc = store.zeros_like();
        g.accumulate_params(&mut acc);
        assert_eq!(acc[0].data(), &[2.0, 4.0]);
    }
}
