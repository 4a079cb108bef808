//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the adjoint. `backward` walks the nodes once in reverse order.

use std::collections::HashMap;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
    CosineRows {
        a: Var,
        b: Var,
        dots: Vec<f64>,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Reshape(Var),
}

fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    masked_rows: usize,
}

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

    /// Number of softmax rows seen so far whose entries were all `-inf`.
    pub fn all_masked_rows(&self) -> usize {
        self.masked_rows
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last loss(es) with respect to `v`; zeros if
    /// `v` was never reached by a backward pass.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- leaves ---------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Adds the gradient of every loaded parameter into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Grads) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                for (o, x) in out.get_mut(id).iter_mut().zip(g) {
                    *o += x;
                }
            }
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[rows x c] + bias[c]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.last_dim();
        if tb.numel() != c {
            return Err(Error::dim(format!(
                "add_row: bias {:?} does not match last dim of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    /// Adds a non-differentiable constant of the same shape (entries may be `-inf`).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(Error::dim(format!(
                "add_const: shapes {:?} and {:?} differ",
                tx.shape(),
                c.shape()
            )));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(t, Op::AddConst(x), rg))
    }

    /// Elementwise product with a non-differentiable constant (dropout masks, slot weights).
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != c.numel() {
            return Err(Error::dim(format!(
                "mul_const: shapes {:?} and {:?} differ",
                tx.shape(),
                c.shape()
            )));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, c.data().to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: cannot multiply {:?} by {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {:?}", tx.shape())));
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let t = Tensor::from_parts(vec![c, r], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last dimension. `-inf` entries map to exactly zero; a
    /// row with no finite entry becomes all zeros and is counted in
    /// [`Tape::all_masked_rows`].
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if tx.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::numeric("softmax input contains NaN or +inf"));
        }
        let mut out = vec![0.0; tx.numel()];
        let mut masked = 0;
        for (row, orow) in tx.data().chunks(c).zip(out.chunks_mut(c)) {
            let m = row
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                masked += 1;
                continue;
            }
            let mut s = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = if v == f64::NEG_INFINITY { 0.0 } else { (v - m).exp() };
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.masked_rows += masked;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Row-wise layer normalisation over the last dimension with learned
    /// `gain` and `bias` (both of length `last_dim`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.last_dim();
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?}/bias {:?} do not match last dim {c}",
                tg.shape(),
                tb.shape()
            )));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- structure ------------------------------------------------------

    /// Concatenates along the last dimension; all inputs need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim(format!(
                    "concat_cols: {:?} has {} rows, expected {rows}",
                    t.shape(),
                    t.rows()
                )));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_parts(vec![rows, total], out);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks inputs vertically; all inputs need the same last dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows of nothing"))?;
        let c = self.value(*first).last_dim();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.last_dim() != c {
                return Err(Error::dim(format!(
                    "concat_rows: {:?} has width {}, expected {c}",
                    t.shape(),
                    t.last_dim()
                )));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / c;
        let t = Tensor::from_parts(vec![rows, c], out);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if start >= end || end > c {
            return Err(Error::dim(format!("slice_cols {start}..{end} of width {c}")));
        }
        let rows = tx.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..end]);
        }
        let t = Tensor::from_parts(vec![rows, end - start], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.value(x).rows();
        if start >= end || end > rows {
            return Err(Error::dim(format!("slice_rows {start}..{end} of {rows} rows")));
        }
        self.gather_rows(x, &(start..end).collect::<Vec<_>>())
    }

    /// Selects rows by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.last_dim());
        if idx.is_empty() {
            return Err(Error::dim("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec()), rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `[rows x c] -> [1 x c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.last_dim());
        let mut out = vec![0.0; c];
        for row in tx.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), rg)
    }

    // ---- losses ---------------------------------------------------------

    /// Row-wise cosine similarity over the last dimension, `[n x d] -> [n]`.
    /// Norms are clamped below at [`COSINE_EPS`].
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.last_dim() != tb.last_dim() || ta.rows() != tb.rows() {
            return Err(Error::dim(format!(
                "cosine: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let (n, d) = (ta.rows(), ta.last_dim());
        let mut dots = vec![0.0; n];
        let mut na = vec![0.0; n];
        let mut nb = vec![0.0; n];
        let mut out = vec![0.0; n];
        for r in 0..n {
            let (x, y) = (&ta.data()[r * d..(r + 1) * d], &tb.data()[r * d..(r + 1) * d]);
            dots[r] = x.iter().zip(y).map(|(p, q)| p * q).sum();
            na[r] = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            nb[r] = y.iter().map(|p| p * p).sum::<f64>().sqrt();
            let c = dots[r] / (na[r].max(COSINE_EPS) * nb[r].max(COSINE_EPS));
            out[r] = c.clamp(-1.0, 1.0);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::CosineRows { a, b, dots, na, nb },
            rg,
        ))
    }

    /// Scalar cosine similarity of two equal-length vectors.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.numel() != tv.numel() {
            return Err(Error::dim(format!(
                "cosine_similarity: lengths {} and {} differ",
                tu.numel(),
                tv.numel()
            )));
        }
        let n = tu.numel();
        let u2 = self.reshape(u, vec![1, n])?;
        let v2 = self.reshape(v, vec![1, n])?;
        self.cosine_rows(u2, v2)
    }

    /// Per-row `-log softmax(logits)[target]`, `[n x C] -> [n]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = (tl.rows(), tl.last_dim());
        if c < 2 {
            return Err(Error::dim(format!("cross_entropy needs >= 2 classes, got {c}")));
        }
        if targets.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label(format!("class {t} out of range for {c} classes")));
        }
        if !tl.is_finite() {
            return Err(Error::numeric("cross_entropy logits are not finite"));
        }
        let mut probs = vec![0.0; n * c];
        let mut out = vec![0.0; n];
        for r in 0..n {
            let row = &tl.data()[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            out[r] = lse - row[targets[r]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scalar cross-entropy for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        let l = self.reshape(logits, vec![1, n])?;
        self.cross_entropy_rows(l, &[target])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.numel() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d`loss`/d(node) to every node on a path to `loss`. Repeated
    /// calls add into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, adj, *a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                let c = nodes[b.0].value.numel();
                if let Some(gb) = slot(nodes, adj, *b) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            Op::MulConst(x, c) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * c[k];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q * s);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = slot(nodes, adj, *a) {
                    gemm_nt_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    gemm_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let tx = &nodes[x.0].value;
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                if let Some(gx) = slot(nodes, adj, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, adj, *x) {
                    for k in 0..g.len() {
                        let v = vx[k];
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        let d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                        gx[k] += g[k] * d;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                if let Some(gx) = slot(nodes, adj, *x) {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let rows = rstd.len();
                let gv = nodes[gain.0].value.data();
                if let Some(gx) = slot(nodes, adj, *x) {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            gx[r * c + j] += rstd[r] * (dxh - m1 - xhat[r * c + j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, adj, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, adj, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if let Some(gp) = slot(nodes, adj, *p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(gp) = slot(nodes, adj, *p) {
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::SliceCols(x, start) => {
                let c = nodes[x.0].value.last_dim();
                let w = node.value.last_dim();
                let rows = node.value.rows();
                if let Some(gx) = slot(nodes, adj, *x) {
                    for r in 0..rows {
                        for j in 0..w {
                            gx[r * c + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let c = node.value.last_dim();
                if let Some(gx) = slot(nodes, adj, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    gx.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            Op::MeanRows(x) => {
                let c = node.value.last_dim();
                let rows = nodes[x.0].value.rows() as f64;
                if let Some(gx) = slot(nodes, adj, *x) {
                    for row in gx.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(p, q)| *p += q / rows);
                    }
                }
            }
            Op::CosineRows { a, b, dots, na, nb } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let d = nodes[a.0].value.last_dim();
                let grad_side = |gx: &mut Vec<f64>, x: &[f64], y: &[f64], nx: &[f64], ny: &[f64]| {
                    for r in 0..dots.len() {
                        let (cx, cy) = (nx[r].max(COSINE_EPS), ny[r].max(COSINE_EPS));
                        let inv = 1.0 / (cx * cy);
                        // derivative of the clamped norm is zero below eps
                        let self_term = if nx[r] > COSINE_EPS {
                            dots[r] / (cx * cx * cx * cy)
                        } else {
                            0.0
                        };
                        for j in 0..d {
                            let k = r * d + j;
                            gx[k] += g[r] * (y[k] * inv - x[k] * self_term);
                        }
                    }
                };
                if let Some(ga) = slot(nodes, adj, *a) {
                    grad_side(ga, va, vb, na, nb);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    grad_side(gb, vb, va, nb, na);
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let c = nodes[logits.0].value.last_dim();
                if let Some(gl) = slot(nodes, adj, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[r] * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let n = va.len() as f64;
                if let Some(ga) = slot(nodes, adj, *a) {
                    for k in 0..va.len() {
                        ga[k] += g[0] * 2.0 * (va[k] - vb[k]) / n;
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for k in 0..va.len() {
                        gb[k] -= g[0] * 2.0 * (va[k] - vb[k]) / n;
                    }
                }
            }
        }
    }
}
