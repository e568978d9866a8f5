use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies the kind of primitive that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddBias,
    MatMul,
    MatMulTransposed,
    Concat,
    LeakyRelu,
    Sum,
    Mean,
    SumLastAxis,
    Square,
    Sqrt,
    Recip,
    MulColumn,
    GatherRows,
    ScatterAddRows,
    MinLastAxis,
    PairwiseSqDist,
    NeighborOuterSum,
    Reshape,
}

impl Primitive {
    pub const ALL: [Primitive; 24] = [
        Primitive::Leaf,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::AddBias,
        Primitive::MatMul,
        Primitive::MatMulTransposed,
        Primitive::Concat,
        Primitive::LeakyRelu,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::SumLastAxis,
        Primitive::Square,
        Primitive::Sqrt,
        Primitive::Recip,
        Primitive::MulColumn,
        Primitive::GatherRows,
        Primitive::ScatterAddRows,
        Primitive::MinLastAxis,
        Primitive::PairwiseSqDist,
        Primitive::NeighborOuterSum,
        Primitive::Reshape,
    ];
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for Primitive {
    type Err = Error;

    /// Case-insensitive; underscores and dashes are ignored.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_lowercase();
        Primitive::ALL
            .into_iter()
            .find(|p| p.to_string().to_lowercase() == key)
            .ok_or_else(|| Error::invalid(format!("unknown primitive {s:?}")))
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    MatMul(usize, usize),
    MatMulTransposed(usize, usize),
    Concat(Vec<usize>),
    LeakyRelu(usize, f64),
    Sum(usize),
    Mean(usize),
    SumLastAxis(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    MulColumn(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    MinLastAxis(usize, Rc<[usize]>),
    PairwiseSqDist(usize, usize),
    NeighborOuterSum(usize, usize, usize),
    Reshape(usize),
}

impl Op {
    fn kind(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::AddBias(..) => Primitive::AddBias,
            Op::MatMul(..) => Primitive::MatMul,
            Op::MatMulTransposed(..) => Primitive::MatMulTransposed,
            Op::Concat(..) => Primitive::Concat,
            Op::LeakyRelu(..) => Primitive::LeakyRelu,
            Op::Sum(..) => Primitive::Sum,
            Op::Mean(..) => Primitive::Mean,
            Op::SumLastAxis(..) => Primitive::SumLastAxis,
            Op::Square(..) => Primitive::Square,
            Op::Sqrt(..) => Primitive::Sqrt,
            Op::Recip(..) => Primitive::Recip,
            Op::MulColumn(..) => Primitive::MulColumn,
            Op::GatherRows(..) => Primitive::GatherRows,
            Op::ScatterAddRows(..) => Primitive::ScatterAddRows,
            Op::MinLastAxis(..) => Primitive::MinLastAxis,
            Op::PairwiseSqDist(..) => Primitive::PairwiseSqDist,
            Op::NeighborOuterSum(..) => Primitive::NeighborOuterSum,
            Op::Reshape(..) => Primitive::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    scope: &'static str,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Define-by-run tape. Nodes are appended in evaluation order, so insertion
/// order is a topological order and `backward` walks it in reverse.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    scope: Cell<&'static str>,
    fault: Cell<Option<Primitive>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let len: usize = shape.iter().product();
    match shape.last().copied().unwrap_or(1) {
        0 => (0, 0),
        c => (len / c, c),
    }
}

// c[n x m] += a[n x k] * b[k x m]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * m..(p + 1) * m];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
}

// c[n x m] += a[n x k] * b[m x k]^T
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let bj = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in ai.iter().zip(bj) {
                acc += x * y;
            }
            c[i * m + j] += acc;
        }
    }
}

// c[k x m] += a[n x k]^T * b[n x m]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let bi = &b[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in cp.iter_mut().zip(bi) {
                *cv += aip * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            scope: Cell::new("input"),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels subsequently recorded nodes with `label`; returns the previous label.
    pub fn set_scope(&self, label: &'static str) -> &'static str {
        self.scope.replace(label)
    }

    /// Scales every adjoint of `kind` by 1.5. Only useful as a negative
    /// control for gradient checking.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: Primitive) {
        self.fault.set(Some(kind));
    }

    /// Scope label and primitive of the first computed (non-leaf) node holding a
    /// non-finite value.
    pub fn first_non_finite(&self) -> Option<(&'static str, Primitive)> {
        self.nodes
            .borrow()
            .iter()
            .find(|n| !matches!(n.op.kind(), Primitive::Leaf) && !n.value.all_finite())
            .map(|n| (n.scope, n.op.kind()))
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::ForeignVar);
        }
        Ok(v.id)
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            scope: self.scope.get(),
        });
        Var { graph: self.id, id }
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].value.item()
    }

    fn unary<F>(&self, a: Var, f: F) -> Result<(Tensor, usize)>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let ia = self.check(a)?;
        let nodes = self.nodes.borrow();
        Ok((f(&nodes[ia].value)?, ia))
    }

    fn binary<F>(&self, a: Var, b: Var, f: F) -> Result<(Tensor, usize, usize)>
    where
        F: FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let nodes = self.nodes.borrow();
        Ok((f(&nodes[ia].value, &nodes[ib].value)?, ia, ib))
    }

    fn same_shape(op: Primitive, x: &Tensor, y: &Tensor) -> Result<()> {
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(
        op: Primitive,
        x: &Tensor,
        y: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        Self::same_shape(op, x, y)?;
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, |x, y| {
            Self::zip_with(Primitive::Add, x, y, |p, q| p + q)
        })?;
        Ok(self.push(t, Op::Add(ia, ib)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, |x, y| {
            Self::zip_with(Primitive::Sub, x, y, |p, q| p - q)
        })?;
        Ok(self.push(t, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, |x, y| {
            Self::zip_with(Primitive::Mul, x, y, |p, q| p * q)
        })?;
        Ok(self.push(t, Op::Mul(ia, ib)))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| Ok(Self::map(x, |v| v * s)))?;
        Ok(self.push(t, Op::Scale(ia, s)))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| Ok(Self::map(x, |v| v + s)))?;
        Ok(self.push(t, Op::AddScalar(ia)))
    }

    /// Adds a bias vector (length = last dimension of `x`) to every row.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (t, ix, ib) = self.binary(x, bias, |x, b| {
            let (_, c) = rows_cols(x.shape());
            if b.len() != c {
                return Err(Error::Shape {
                    op: Primitive::AddBias,
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = x.data().to_vec();
            if c > 0 {
                for row in out.chunks_exact_mut(c) {
                    for (o, &bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        })?;
        Ok(self.push(t, Op::AddBias(ix, ib)))
    }

    /// `a[n x k] * b[k x m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, |x, y| {
            let err = || Error::Shape {
                op: Primitive::MatMul,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            };
            let [n, k] = *x.shape() else {
                return Err(err());
            };
            let (k2, m) = match *y.shape() {
                [k2, m] => (k2, m),
                [k2] => (k2, 1),
                _ => return Err(err()),
            };
            if k != k2 {
                return Err(err());
            }
            let mut out = vec![0.0; n * m];
            gemm_nn(x.data(), y.data(), &mut out, n, k, m);
            let shape = if y.shape().len() == 1 {
                vec![n]
            } else {
                vec![n, m]
            };
            Tensor::new(shape, out)
        })?;
        Ok(self.push(t, Op::MatMul(ia, ib)))
    }

    /// `a[n x k] * b[m x k]^T`; the layout of a linear layer's weight.
    pub fn matmul_transposed(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, |x, y| {
            let (n, k) = rows_cols(x.shape());
            let err = || Error::Shape {
                op: Primitive::MatMulTransposed,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            };
            let [m, k2] = *y.shape() else {
                return Err(err());
            };
            if k != k2 {
                return Err(err());
            }
            let mut out = vec![0.0; n * m];
            gemm_nt(x.data(), y.data(), &mut out, n, k, m);
            Tensor::matrix(n, m, out)
        })?;
        Ok(self.push(t, Op::MatMulTransposed(ia, ib)))
    }

    /// Concatenation along the last axis; all inputs must have equal row counts.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let ids = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let t = {
            let nodes = self.nodes.borrow();
            let first = &nodes[ids[0]].value;
            let rows = first.rows();
            let mut total = 0;
            for &i in &ids {
                let v = &nodes[i].value;
                if v.rows() != rows {
                    return Err(Error::Shape {
                        op: Primitive::Concat,
                        lhs: first.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                total += v.cols();
            }
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &i in &ids {
                    out.extend_from_slice(nodes[i].value.row(r));
                }
            }
            Tensor::matrix(rows, total, out)?
        };
        Ok(self.push(t, Op::Concat(ids)))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| {
            Ok(Self::map(x, |v| if v > 0.0 { v } else { slope * v }))
        })?;
        Ok(self.push(t, Op::LeakyRelu(ia, slope)))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| Ok(Tensor::scalar(x.data().iter().sum())))?;
        Ok(self.push(t, Op::Sum(ia)))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| {
            if x.is_empty() {
                return Err(Error::invalid("mean of empty tensor"));
            }
            Ok(Tensor::scalar(
                x.data().iter().sum::<f64>() / x.len() as f64,
            ))
        })?;
        Ok(self.push(t, Op::Mean(ia)))
    }

    /// Row sums: `[r x c] -> [r x 1]`.
    pub fn sum_last_axis(&self, a: Var) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| {
            let (r, c) = rows_cols(x.shape());
            let out = if c == 0 {
                vec![0.0; r]
            } else {
                x.data()
                    .chunks_exact(c)
                    .map(|row| row.iter().sum())
                    .collect()
            };
            Tensor::matrix(r, 1, out)
        })?;
        Ok(self.push(t, Op::SumLastAxis(ia)))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| Ok(Self::map(x, |v| v * v)))?;
        Ok(self.push(t, Op::Square(ia)))
    }

    /// Square root; negative inputs are an error and the adjoint at 0 is 0.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| {
            if let Some(&neg) = x.data().iter().find(|&&v| v < 0.0) {
                return Err(Error::NegativeSqrt(neg));
            }
            Ok(Self::map(x, f64::sqrt))
        })?;
        Ok(self.push(t, Op::Sqrt(ia)))
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| {
            if x.data().contains(&0.0) {
                return Err(Error::invalid("reciprocal of zero"));
            }
            Ok(Self::map(x, f64::recip))
        })?;
        Ok(self.push(t, Op::Recip(ia)))
    }

    /// Scales row `i` of `a[r x c]` by `s[i]`, where `s` is `[r x 1]`.
    pub fn mul_column(&self, a: Var, s: Var) -> Result<Var> {
        let (t, ia, is) = self.binary(a, s, |x, s| {
            let (r, c) = rows_cols(x.shape());
            if s.len() != r {
                return Err(Error::Shape {
                    op: Primitive::MulColumn,
                    lhs: x.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            let mut out = x.data().to_vec();
            if c > 0 {
                for (row, &sv) in out.chunks_exact_mut(c).zip(s.data()) {
                    row.iter_mut().for_each(|v| *v *= sv);
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        })?;
        Ok(self.push(t, Op::MulColumn(ia, is)))
    }

    /// `out[i] = a[index[i]]` row-wise.
    pub fn gather_rows(&self, a: Var, index: impl Into<Rc<[usize]>>) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let (t, ia) = self.unary(a, |x| {
            let (r, c) = rows_cols(x.shape());
            let mut out = Vec::with_capacity(index.len() * c);
            for &i in index.iter() {
                if i >= r {
                    return Err(Error::invalid(format!(
                        "gather_rows: index {i} out of range for {r} rows"
                    )));
                }
                out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
            Tensor::matrix(index.len(), c, out)
        })?;
        Ok(self.push(t, Op::GatherRows(ia, index)))
    }

    /// `out[index[i]] += a[i]` into `rows` output rows.
    pub fn scatter_add_rows(
        &self,
        a: Var,
        index: impl Into<Rc<[usize]>>,
        rows: usize,
    ) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let (t, ia) = self.unary(a, |x| {
            let (r, c) = rows_cols(x.shape());
            if r != index.len() {
                return Err(Error::Shape {
                    op: Primitive::ScatterAddRows,
                    lhs: x.shape().to_vec(),
                    rhs: vec![index.len()],
                });
            }
            let mut out = vec![0.0; rows * c];
            for (src, &dst) in index.iter().enumerate() {
                if dst >= rows {
                    return Err(Error::invalid(format!(
                        "scatter_add_rows: index {dst} out of range for {rows} rows"
                    )));
                }
                for (o, &v) in out[dst * c..(dst + 1) * c]
                    .iter_mut()
                    .zip(&x.data()[src * c..(src + 1) * c])
                {
                    *o += v;
                }
            }
            Tensor::matrix(rows, c, out)
        })?;
        Ok(self.push(t, Op::ScatterAddRows(ia, index)))
    }

    /// Row-wise minimum `[r x c] -> [r x 1]` plus the argmin of each row
    /// (lowest index on ties). The adjoint flows only to the argmin entry.
    pub fn min_last_axis(&self, a: Var) -> Result<(Var, Vec<usize>)> {
        let ia = self.check(a)?;
        let (t, arg) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[ia].value;
            let (r, c) = rows_cols(x.shape());
            if c == 0 {
                return Err(Error::invalid("min over empty axis"));
            }
            let mut vals = Vec::with_capacity(r);
            let mut arg = Vec::with_capacity(r);
            for row in x.data().chunks_exact(c) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v < row[best] {
                        best = j;
                    }
                }
                vals.push(row[best]);
                arg.push(best);
            }
            (Tensor::matrix(r, 1, vals)?, arg)
        };
        let v = self.push(t, Op::MinLastAxis(ia, arg.clone().into()));
        Ok((v, arg))
    }

    /// Squared Euclidean distances between the rows of `a[n x d]` and `b[m x d]`.
    pub fn pairwise_sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.binary(a, b, |x, y| {
            let (n, d) = rows_cols(x.shape());
            let (m, d2) = rows_cols(y.shape());
            if d != d2 {
                return Err(Error::Shape {
                    op: Primitive::PairwiseSqDist,
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let xi = &x.data()[i * d..(i + 1) * d];
                for j in 0..m {
                    let yj = &y.data()[j * d..(j + 1) * d];
                    out.push(xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum());
                }
            }
            Tensor::matrix(n, m, out)
        })?;
        Ok(self.push(t, Op::PairwiseSqDist(ia, ib)))
    }

    /// For groups of `k` consecutive rows, accumulates the outer products of
    /// `w[n*k x p]` and `f[n*k x q]` into `[n x p*q]` (row-major `p x q` blocks).
    pub fn neighbor_outer_sum(&self, w: Var, f: Var, k: usize) -> Result<Var> {
        let (t, iw, i_f) = self.binary(w, f, |w, f| {
            let (rw, p) = rows_cols(w.shape());
            let (rf, q) = rows_cols(f.shape());
            if rw != rf || k == 0 || rw % k != 0 {
                return Err(Error::Shape {
                    op: Primitive::NeighborOuterSum,
                    lhs: w.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
            let n = rw / k;
            let mut out = vec![0.0; n * p * q];
            for c in 0..n {
                let oc = &mut out[c * p * q..(c + 1) * p * q];
                for j in c * k..(c + 1) * k {
                    let wr = &w.data()[j * p..(j + 1) * p];
                    let fr = &f.data()[j * q..(j + 1) * q];
                    for (a, &wa) in wr.iter().enumerate() {
                        for (o, &fb) in oc[a * q..(a + 1) * q].iter_mut().zip(fr) {
                            *o += wa * fb;
                        }
                    }
                }
            }
            Tensor::matrix(n, p * q, out)
        })?;
        Ok(self.push(t, Op::NeighborOuterSum(iw, i_f, k)))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let (t, ia) = self.unary(a, |x| {
            let len: usize = shape.iter().product();
            if len != x.len() {
                return Err(Error::Shape {
                    op: Primitive::Reshape,
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Tensor::new(shape.clone(), x.data().to_vec())
        })?;
        Ok(self.push(t, Op::Reshape(ia)))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_id = self.check(root)?;
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root_id].value.shape();
        if nodes[root_id].value.len() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_id] = Some(vec![1.0]);
        let fault = self.fault.get();

        for id in (0..=root_id).rev() {
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            let val = |i: usize| &nodes[i].value;
            macro_rules! acc {
                ($i:expr) => {{
                    let i = $i;
                    let len = nodes[i].value.len();
                    grads[i].get_or_insert_with(|| vec![0.0; len])
                }};
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc!(*a).iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                    acc!(*b).iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                }
                Op::Sub(a, b) => {
                    acc!(*a).iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                    acc!(*b).iter_mut().zip(&g).for_each(|(o, v)| *o -= v);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    acc!(*a)
                        .iter_mut()
                        .zip(&g)
                        .zip(vb)
                        .for_each(|((o, v), y)| *o += v * y);
                    acc!(*b)
                        .iter_mut()
                        .zip(&g)
                        .zip(va)
                        .for_each(|((o, v), x)| *o += v * x);
                }
                Op::Scale(a, s) => {
                    acc!(*a).iter_mut().zip(&g).for_each(|(o, v)| *o += s * v);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    acc!(*a).iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                }
                Op::AddBias(x, b) => {
                    acc!(*x).iter_mut().zip(&g).for_each(|(o, v)| *o += v);
                    let c = val(*b).len();
                    let gb = acc!(*b);
                    if c > 0 {
                        for row in g.chunks_exact(c) {
                            gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (n, k) = (va.shape()[0], va.shape()[1]);
                    let m = vb.len() / k;
                    // da = g * b^T, db = a^T * g
                    gemm_nt(&g, vb.data(), acc!(*a), n, m, k);
                    gemm_tn(va.data(), &g, acc!(*b), n, k, m);
                }
                Op::MatMulTransposed(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (n, k) = rows_cols(va.shape());
                    let m = vb.shape()[0];
                    // da = g * b, db = g^T * a
                    gemm_nn(&g, vb.data(), acc!(*a), n, m, k);
                    gemm_tn(&g, va.data(), acc!(*b), n, m, k);
                }
                Op::Concat(ids) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &i in ids {
                        let c = val(i).cols();
                        let gi = acc!(i);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            gi[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, v)| *o += v);
                        }
                        offset += c;
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = val(*a).data();
                    acc!(*a)
                        .iter_mut()
                        .zip(&g)
                        .zip(x)
                        .for_each(|((o, v), &xv)| *o += if xv > 0.0 { *v } else { slope * v });
                }
                Op::Sum(a) => {
                    acc!(*a).iter_mut().for_each(|o| *o += g[0]);
                }
                Op::Mean(a) => {
                    let s = g[0] / val(*a).len() as f64;
                    acc!(*a).iter_mut().for_each(|o| *o += s);
                }
                Op::SumLastAxis(a) => {
                    let c = val(*a).cols();
                    let ga = acc!(*a);
                    if c > 0 {
                        for (row, gv) in ga.chunks_exact_mut(c).zip(&g) {
                            row.iter_mut().for_each(|o| *o += gv);
                        }
                    }
                }
                Op::Square(a) => {
                    let x = val(*a).data();
                    acc!(*a)
                        .iter_mut()
                        .zip(&g)
                        .zip(x)
                        .for_each(|((o, v), xv)| *o += 2.0 * xv * v);
                }
                Op::Sqrt(a) => {
                    let y = node.value.data();
                    acc!(*a)
                        .iter_mut()
                        .zip(&g)
                        .zip(y)
                        .for_each(|((o, v), &yv)| {
                            if yv > 0.0 {
                                *o += v / (2.0 * yv);
                            }
                        });
                }
                Op::Recip(a) => {
                    let y = node.value.data();
                    acc!(*a)
                        .iter_mut()
                        .zip(&g)
                        .zip(y)
                        .for_each(|((o, v), yv)| *o -= v * yv * yv);
                }
                Op::MulColumn(a, s) => {
                    let (va, vs) = (val(*a), val(*s));
                    let c = va.cols();
                    if c > 0 {
                        let ga = acc!(*a);
                        for ((row, grow), sv) in
                            ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(vs.data())
                        {
                            row.iter_mut().zip(grow).for_each(|(o, v)| *o += v * sv);
                        }
                        let gs = acc!(*s);
                        for ((o, grow), xrow) in gs
                            .iter_mut()
                            .zip(g.chunks_exact(c))
                            .zip(va.data().chunks_exact(c))
                        {
                            *o += grow.iter().zip(xrow).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                }
                Op::GatherRows(a, index) => {
                    let c = val(*a).cols();
                    let ga = acc!(*a);
                    for (r, &src) in index.iter().enumerate() {
                        ga[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(o, v)| *o += v);
                    }
                }
                Op::ScatterAddRows(a, index) => {
                    let c = val(*a).cols();
                    let ga = acc!(*a);
                    for (r, &dst) in index.iter().enumerate() {
                        ga[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[dst * c..(dst + 1) * c])
                            .for_each(|(o, v)| *o += v);
                    }
                }
                Op::MinLastAxis(a, arg) => {
                    let c = val(*a).cols();
                    let ga = acc!(*a);
                    for (r, &j) in arg.iter().enumerate() {
                        ga[r * c + j] += g[r];
                    }
                }
                Op::PairwiseSqDist(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (n, d) = rows_cols(va.shape());
                    let m = vb.rows();
                    let mut ga = vec![0.0; n * d];
                    let mut gb = vec![0.0; m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                let diff =
                                    2.0 * gij * (va.data()[i * d + t] - vb.data()[j * d + t]);
                                ga[i * d + t] += diff;
                                gb[j * d + t] -= diff;
                            }
                        }
                    }
                    acc!(*a).iter_mut().zip(&ga).for_each(|(o, v)| *o += v);
                    acc!(*b).iter_mut().zip(&gb).for_each(|(o, v)| *o += v);
                }
                Op::NeighborOuterSum(w, f, k) => {
                    let (vw, vf) = (val(*w), val(*f));
                    let (rows, p) = rows_cols(vw.shape());
                    let q = vf.cols();
                    let mut gw = vec![0.0; rows * p];
                    let mut gf = vec![0.0; rows * q];
                    for j in 0..rows {
                        let c = j / k;
                        let gc = &g[c * p * q..(c + 1) * p * q];
                        let wr = &vw.data()[j * p..(j + 1) * p];
                        let fr = &vf.data()[j * q..(j + 1) * q];
                        let gwr = &mut gw[j * p..(j + 1) * p];
                        let gfr = &mut gf[j * q..(j + 1) * q];
                        for a in 0..p {
                            let block = &gc[a * q..(a + 1) * q];
                            let mut s = 0.0;
                            for ((gv, fv), gfo) in block.iter().zip(fr).zip(gfr.iter_mut()) {
                                s += gv * fv;
                                *gfo += gv * wr[a];
                            }
                            gwr[a] += s;
                        }
                    }
                    acc!(*w).iter_mut().zip(&gw).for_each(|(o, v)| *o += v);
                    acc!(*f).iter_mut().zip(&gf).for_each(|(o, v)| *o += v);
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes,
        })
    }
}

/// Result of [`Graph::backward`]: the gradient of the root w.r.t. every node.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.graph, self.graph, "variable from another graph");
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.id].is_some()
    }
}
