use std::collections::BTreeMap;

use super::{masked_softmax_into, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Log(usize),
    Exp(usize),
    Abs(usize),
    Powf(usize, f64),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    MulCol(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SelectRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    LogSoftmaxRows(usize),
    MaskedSoftmaxRows(usize),
    NormalizeRows(usize),
    IouAligned(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
///
/// Values are computed eagerly as operations are recorded; [`Graph::backward`]
/// walks the tape in reverse. Gradients are only propagated into nodes that
/// depend on a trainable leaf, so frozen sub-networks cost a forward pass and
/// the input-gradient products they sit on, nothing more.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(what: &str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")))
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass slices whose extents match (m, k, n) and the
    // given strides; c is a dense m x n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
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

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; no node will require a gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf; it receives gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    /// Records the parameter at `path`, once per graph.
    ///
    /// Frozen parameters become constants.
    pub fn param(&mut self, params: &ParameterSet, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let t = params
            .get(path)
            .ok_or_else(|| Error::Contract(format!("unknown parameter path {path}")))?
            .clone();
        let trainable = !params.is_frozen(path);
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(what, sa, sb);
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_raw(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_raw(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, Op::Mul(a.0, b.0), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "div")?;
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let t = self.zip_map(a, b, |x, y| x / y);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, Op::Div(a.0, b.0), ng))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        let ng = self.ng(a.0);
        self.push(t, Op::AddScalar(a.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let ng = self.ng(a.0);
        self.push(t, Op::Scale(a.0, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a.0);
        self.push(t, Op::Relu(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let ng = self.ng(a.0);
        self.push(t, Op::Sigmoid(a.0), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        let ng = self.ng(a.0);
        self.push(t, Op::Square(a.0), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.value(a).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {v}")));
        }
        let t = self.map(a, f64::sqrt);
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Sqrt(a.0), ng))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let t = self.map(a, f64::ln);
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Log(a.0), ng))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::exp);
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("exp overflow".into()));
        }
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Exp(a.0), ng))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        let ng = self.ng(a.0);
        self.push(t, Op::Abs(a.0), ng)
    }

    /// `x^p`. Negative bases are only accepted for integral exponents.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 && self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!("negative base with exponent {p}")));
        }
        let t = self.map(a, |x| x.powf(p));
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Powf(a.0, p), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        dgemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a.0, b.0), ng))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`; the form of a linear layer whose
    /// weight is stored `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err("matmul_nt", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        dgemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (1, k),
            0.0,
            &mut out,
        );
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(
            Tensor::from_raw(vec![m, n], out),
            Op::MatMulNT(a.0, b.0),
            ng,
        ))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        let (_, bn) = self.value(bias).dims2();
        if sx.len() != 2 || sx[1] != bn || self.value(bias).len() != bn {
            return shape_err("add_row", sx, self.value(bias).shape());
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let t = Tensor::from_raw(sx.to_vec(), data);
        let ng = self.ng(x.0) || self.ng(bias.0);
        Ok(self.push(t, Op::AddRow(x.0, bias.0), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::Mean(a.0), ng)
    }

    /// Row sums of an `m × n` matrix as an `m × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return shape_err("sum_cols", t.shape(), &[0, 0]);
        }
        let (m, n) = t.dims2();
        let data = (0..m)
            .map(|i| t.data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::from_raw(vec![m, 1], data), Op::SumCols(a.0), ng))
    }

    /// Scales row `i` of `x: m × n` by `s[i]` for `s: m × 1`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.value(x).shape(), self.value(s).shape());
        if sx.len() != 2 || ss != [sx[0], 1] {
            return shape_err("mul_col", sx, ss);
        }
        let n = sx[1];
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / n])
            .collect();
        let t = Tensor::from_raw(sx.to_vec(), data);
        let ng = self.ng(x.0) || self.ng(s.0);
        Ok(self.push(t, Op::MulCol(x.0, s.0), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let m = self.value(*first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.shape()[0] != m {
                return shape_err("concat_cols", self.value(*first).shape(), t.shape());
            }
            widths.push(t.shape()[1]);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::from_raw(vec![m, n], data), Op::ConcatCols(ids), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let n = self.value(*first).dims2().1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.shape()[1] != n {
                return shape_err("concat_rows", self.value(*first).shape(), t.shape());
            }
            m += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::from_raw(vec![m, n], data), Op::ConcatRows(ids), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if t.shape().len() != 2 || len == 0 || start + len > n {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_raw(vec![m, len], data),
            Op::SliceCols(a.0, start),
            ng,
        ))
    }

    /// Rows `idx[0], idx[1], …` of `a`, repeats allowed.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if t.shape().len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::Shape(format!(
                "select_rows {} indices from {:?}",
                idx.len(),
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_raw(vec![idx.len(), n], data),
            Op::SelectRows(a.0, idx.to_vec()),
            ng,
        ))
    }

    /// Places row `r` of `a` at row `idx[r]` of a `total`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut seen = vec![false; total];
        if t.shape().len() != 2 || idx.len() != m {
            return Err(Error::Shape(format!(
                "scatter_rows {} indices for {m} rows",
                idx.len()
            )));
        }
        for &i in idx {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Shape(format!(
                    "scatter_rows index {i} invalid or repeated"
                )));
            }
        }
        let mut data = vec![0.0; total * n];
        for (r, &i) in idx.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(t.row(r));
        }
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_raw(vec![total, n], data),
            Op::ScatterRows(a.0, idx.to_vec()),
            ng,
        ))
    }

    /// Picks column `idx[i]` from row `i`, producing an `m × 1` column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if t.shape().len() != 2 || idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::Shape(format!(
                "gather {} indices from {:?}",
                idx.len(),
                t.shape()
            )));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| t.data()[i * n + j])
            .collect();
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_raw(vec![m, 1], data),
            Op::Gather(a.0, idx.to_vec()),
            ng,
        ))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return shape_err("log_softmax_rows", t.shape(), &[0, 0]);
        }
        let (m, n) = t.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_raw(vec![m, n], data),
            Op::LogSoftmaxRows(a.0),
            ng,
        ))
    }

    /// Row-wise softmax over entries where `mask` (row-major, same shape) is
    /// true. Masked entries are exactly zero.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if t.shape().len() != 2 || mask.len() != m * n {
            return Err(Error::Shape(format!(
                "masked_softmax_rows mask of {} for {:?}",
                mask.len(),
                t.shape()
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            masked_softmax_into(
                t.row(i),
                &mask[i * n..(i + 1) * n],
                &mut data[i * n..(i + 1) * n],
            )?;
        }
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_raw(vec![m, n], data),
            Op::MaskedSoftmaxRows(a.0),
            ng,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return shape_err("normalize_rows", t.shape(), &[0, 0]);
        }
        let (m, n) = t.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding(norm));
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        let ng = self.ng(a.0);
        Ok(self.push(
            Tensor::from_raw(vec![m, n], data),
            Op::NormalizeRows(a.0),
            ng,
        ))
    }

    /// Axis-aligned 3D IoU between rows of `pred` and the constant `target`,
    /// both `m × 6` laid out as (cx, cy, cz, w, l, h). Width spans x, length
    /// spans y.
    pub fn iou_aligned(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(pred);
        if t.shape().len() != 2 || t.shape()[1] != 6 || target.shape() != t.shape() {
            return shape_err("iou_aligned", t.shape(), target.shape());
        }
        let (m, _) = t.dims2();
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            data.push(iou_aligned_row(t.row(i), target.row(i))?.0);
        }
        let ng = self.ng(pred.0);
        Ok(self.push(
            Tensor::from_raw(vec![m, 1], data),
            Op::IouAligned(pred.0, target.data().to_vec()),
            ng,
        ))
    }

    /// Reverse pass from a scalar objective.
    pub fn backward(&self, objective: Var) -> Result<Gradients> {
        let obj = &self.nodes[objective.0];
        if obj.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar objective, got shape {:?}",
                obj.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; objective.0 + 1];
        if obj.needs_grad {
            grads[objective.0] = Some(vec![1.0]);
        }
        for i in (0..=objective.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::from_raw(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients {
            grads: tensors,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    axpy(s, g, 1.0);
                }
                if let Some(s) = slot(&self.nodes, grads, *b) {
                    axpy(s, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    axpy(s, g, 1.0);
                }
                if let Some(s) = slot(&self.nodes, grads, *b) {
                    axpy(s, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] * vb[k];
                    }
                }
                if let Some(s) = slot(&self.nodes, grads, *b) {
                    for k in 0..g.len() {
                        s[k] += g[k] * va[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] / vb[k];
                    }
                }
                if let Some(s) = slot(&self.nodes, grads, *b) {
                    for k in 0..g.len() {
                        s[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    axpy(s, g, 1.0);
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    axpy(s, g, *c);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Square(a) => {
                let x = val(*a);
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        s[k] += 2.0 * g[k] * x[k];
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        // Zero is the subgradient chosen at the origin.
                        if y[k] > 0.0 {
                            s[k] += 0.5 * g[k] / y[k];
                        }
                    }
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] / x[k];
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] * y[k];
                    }
                }
            }
            Op::Abs(a) => {
                let x = val(*a);
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        } else if x[k] < 0.0 {
                            s[k] -= g[k];
                        }
                    }
                }
            }
            Op::Powf(a, p) => {
                let x = val(*a);
                let p = *p;
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for k in 0..g.len() {
                        let d = if p == 0.0 {
                            0.0
                        } else if x[k] == 0.0 {
                            if p == 1.0 {
                                1.0
                            } else {
                                0.0
                            }
                        } else {
                            p * x[k].powf(p - 1.0)
                        };
                        s[k] += g[k] * d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    // dA = dC · Bᵀ
                    dgemm(m, n, k, g, (n, 1), vb, (1, n), 1.0, s);
                }
                if let Some(s) = slot(&self.nodes, grads, *b) {
                    // dB = Aᵀ · dC
                    dgemm(k, m, n, va, (1, k), g, (n, 1), 1.0, s);
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (va, vb) = (val(*a), val(*b));
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    // dA = dC · B
                    dgemm(m, n, k, g, (n, 1), vb, (k, 1), 1.0, s);
                }
                if let Some(s) = slot(&self.nodes, grads, *b) {
                    // dB = dCᵀ · A
                    dgemm(n, m, k, g, (1, n), va, (k, 1), 1.0, s);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(s) = slot(&self.nodes, grads, *x) {
                    axpy(s, g, 1.0);
                }
                let n = self.nodes[*b].value.len();
                if let Some(s) = slot(&self.nodes, grads, *b) {
                    for (k, &gv) in g.iter().enumerate() {
                        s[k % n] += gv;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    let d = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::SumCols(a) => {
                let n = self.nodes[*a].value.dims2().1;
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for (k, v) in s.iter_mut().enumerate() {
                        *v += g[k / n];
                    }
                }
            }
            Op::MulCol(x, sc) => {
                let n = self.nodes[*x].value.dims2().1;
                let (vx, vs) = (val(*x), val(*sc));
                if let Some(s) = slot(&self.nodes, grads, *x) {
                    for k in 0..g.len() {
                        s[k] += g[k] * vs[k / n];
                    }
                }
                if let Some(s) = slot(&self.nodes, grads, *sc) {
                    for k in 0..g.len() {
                        s[k / n] += g[k] * vx[k];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let mut off = 0;
                for &p in parts {
                    let (m, w) = self.nodes[p].value.dims2();
                    if let Some(s) = slot(&self.nodes, grads, p) {
                        for r in 0..m {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(s) = slot(&self.nodes, grads, p) {
                        axpy(s, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, w) = node.value.dims2();
                let n = self.nodes[*a].value.dims2().1;
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for r in 0..m {
                        for c in 0..w {
                            s[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::SelectRows(a, idx) => {
                let n = node.value.dims2().1;
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut s[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                }
            }
            Op::ScatterRows(a, idx) => {
                let n = node.value.dims2().1;
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut s[r * n..(r + 1) * n], &g[i * n..(i + 1) * n], 1.0);
                    }
                }
            }
            Op::Gather(a, idx) => {
                let n = self.nodes[*a].value.dims2().1;
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for (r, &j) in idx.iter().enumerate() {
                        s[r * n + j] += g[r];
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = node.value.dims2();
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let total: f64 = gr.iter().sum();
                        for c in 0..n {
                            s[r * n + c] += gr[c] - y[r * n + c].exp() * total;
                        }
                    }
                }
            }
            Op::MaskedSoftmaxRows(a) => {
                let (m, n) = node.value.dims2();
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            s[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let (m, n) = node.value.dims2();
                let x = val(*a);
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for r in 0..m {
                        let xr = &x[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            s[r * n + c] += (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                }
            }
            Op::IouAligned(a, target) => {
                let x = val(*a);
                if let Some(s) = slot(&self.nodes, grads, *a) {
                    for r in 0..g.len() {
                        // Validated in the forward pass.
                        let (_, d) =
                            iou_aligned_row(&x[r * 6..r * 6 + 6], &target[r * 6..r * 6 + 6])
                                .expect("validated in forward");
                        for c in 0..6 {
                            s[r * 6 + c] += g[r] * d[c];
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    j: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].needs_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// IoU of two axis-aligned boxes (cx, cy, cz, w, l, h) and its gradient with
/// respect to the first box.
pub(crate) fn iou_aligned_row(p: &[f64], t: &[f64]) -> Result<(f64, [f64; 6])> {
    if p[3..6]
        .iter()
        .chain(&t[3..6])
        .any(|&s| s <= 0.0 || !s.is_finite())
    {
        return Err(Error::Domain("iou of box with non-positive size".into()));
    }
    let mut overlap = [0.0; 3];
    let mut d_over_dc = [0.0; 3];
    let mut d_over_ds = [0.0; 3];
    for k in 0..3 {
        let (ph, pl) = (p[k] + 0.5 * p[k + 3], p[k] - 0.5 * p[k + 3]);
        let (th, tl) = (t[k] + 0.5 * t[k + 3], t[k] - 0.5 * t[k + 3]);
        let o = ph.min(th) - pl.max(tl);
        if o > 0.0 {
            overlap[k] = o;
            let hi = if ph <= th { 1.0 } else { 0.0 };
            let lo = if pl >= tl { 1.0 } else { 0.0 };
            d_over_dc[k] = hi - lo;
            d_over_ds[k] = 0.5 * (hi + lo);
        }
    }
    let inter = overlap[0] * overlap[1] * overlap[2];
    let vp = p[3] * p[4] * p[5];
    let vt = t[3] * t[4] * t[5];
    let union = vp + vt - inter;
    let iou = inter / union;
    let mut grad = [0.0; 6];
    let d_inter = (1.0 / union) + inter / (union * union);
    let d_vp = -inter / (union * union);
    for k in 0..3 {
        let others_o = overlap[(k + 1) % 3] * overlap[(k + 2) % 3];
        let others_s = p[3 + (k + 1) % 3] * p[3 + (k + 2) % 3];
        grad[k] = d_inter * others_o * d_over_dc[k];
        grad[k + 3] = d_inter * others_o * d_over_ds[k] + d_vp * others_s;
    }
    Ok((iou, grad))
}

/// Gradients produced by one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path).and_then(|&v| self.get(v))
    }

    /// Gradient for every trainable parameter of `params`. Parameters that
    /// did not take part in the objective get an explicit zero gradient.
    pub fn for_params(&self, params: &ParameterSet) -> BTreeMap<String, Tensor> {
        params
            .trainable_paths()
            .map(|path| {
                let g = self
                    .param(path)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(params.get(path).unwrap().shape()));
                (path.to_string(), g)
            })
            .collect()
    }
}
