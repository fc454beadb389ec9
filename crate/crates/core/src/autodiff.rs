//! Define-by-run reverse-mode autodiff over dense row-major `f64` matrices.
//!
//! A [`Graph`] is an arena of nodes appended in evaluation order, so the
//! arena order is already a topological order and [`Graph::backward`] walks
//! it in reverse. [`Tensor`] is a cheap handle into one graph. A graph is
//! built for a single training step and dropped afterwards.
//!
//! ```
//! use cpcm::autodiff::{Graph, Matrix};
//!
//! let mut g = Graph::new();
//! let x = g.param(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
//! let loss = g.mean_all(x).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
//! ```

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "matrix",
                detail: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        Self {
            rows: rows.len(),
            cols: C,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let dst = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`.
    fn matmul_tn(&self, other: &Self) -> Self {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Self::zeros(self.cols, other.cols);
        let n = other.cols;
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &bv) in out.data[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *d += a * bv;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    fn matmul_nt(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    /// `a + b` with `b` a single row broadcast over the rows of `a`.
    AddRow(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    MatMul(Tensor, Tensor),
    Relu(Tensor),
    RowSoftmax(Tensor),
    Log(Tensor),
    Clamp(Tensor, f64, f64),
    MeanAll(Tensor),
    SumRows(Tensor),
    GatherRows(Tensor, Vec<usize>),
    GroupMean(Tensor, usize),
    NeighborMean(Tensor, Vec<usize>, usize),
    ConcatCols(Tensor, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Matrix, op: Op, inputs: &[Tensor]) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let rg = inputs.iter().any(|t| self.nodes[t.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `t`'s value with no history; gradients never flow through it.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let value = self.nodes[t.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Accumulated gradient, if any backward pass reached `t`.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.nodes[t.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, name: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise sum. `b` may also be a single row, broadcast over `a`.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let v = self.value(a).zip(self.value(b), |x, y| x + y);
            return self.push_op("add", v, Op::Add(a, b), &[a, b]);
        }
        if sb.0 == 1 && sb.1 == sa.1 {
            let bias = self.value(b).data.clone();
            let mut v = self.value(a).clone();
            for row in v.data.chunks_mut(sa.1) {
                for (x, y) in row.iter_mut().zip(&bias) {
                    *x += y;
                }
            }
            return self.push_op("add", v, Op::AddRow(a, b), &[a, b]);
        }
        Err(shape_err("add", format!("{sa:?} vs {sb:?}")))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push_op("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push_op("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Result<Tensor> {
        let v = self.value(a).map(|x| x * s);
        self.push_op("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let v = self.value(a).matmul(self.value(b));
        self.push_op("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_op("relu", v, Op::Relu(a), &[a])
    }

    /// Softmax of every row, computed after subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let mut v = self.value(a).clone();
        let cols = v.cols;
        if cols == 0 {
            return Err(shape_err("row_softmax", "zero columns".into()));
        }
        for row in v.data.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push_op("row_softmax", v, Op::RowSoftmax(a), &[a])
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        let v = self.value(a).map(f64::ln);
        self.push_op("log", v, Op::Log(a), &[a])
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only where the input
    /// is strictly inside the interval or on it.
    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_op("clamp", v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean_all(&mut self, a: Tensor) -> Result<Tensor> {
        let m = self.value(a);
        if m.data.is_empty() {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let mean = m.data.iter().sum::<f64>() / m.data.len() as f64;
        self.push_op("mean_all", Matrix::filled(1, 1, mean), Op::MeanAll(a), &[a])
    }

    /// Sum of each row, as an `rows x 1` tensor.
    pub fn sum_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let m = self.value(a);
        let data: Vec<f64> = if m.cols == 0 {
            vec![0.0; m.rows]
        } else {
            m.data.chunks(m.cols).map(|r| r.iter().sum()).collect()
        };
        let v = Matrix::new(m.rows, 1, data)?;
        self.push_op("sum_rows", v, Op::SumRows(a), &[a])
    }

    /// Rows of `a` picked by `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        let m = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m.rows) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", m.rows)));
        }
        let mut data = Vec::with_capacity(indices.len() * m.cols);
        for &i in indices {
            data.extend_from_slice(m.row(i));
        }
        let v = Matrix::new(indices.len(), m.cols, data)?;
        self.push_op("gather_rows", v, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    /// Mean over consecutive groups of `group` rows: `(n*group) x c -> n x c`.
    pub fn group_mean(&mut self, a: Tensor, group: usize) -> Result<Tensor> {
        let m = self.value(a);
        if group == 0 || m.rows % group != 0 {
            return Err(shape_err("group_mean", format!("{} rows in groups of {group}", m.rows)));
        }
        let n = m.rows / group;
        let inv = 1.0 / group as f64;
        let mut v = Matrix::zeros(n, m.cols);
        for i in 0..n {
            let dst = &mut v.data[i * m.cols..(i + 1) * m.cols];
            for r in i * group..(i + 1) * group {
                for (d, s) in dst.iter_mut().zip(m.row(r)) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        self.push_op("group_mean", v, Op::GroupMean(a, group), &[a])
    }

    /// Row `i` of the result is the mean of the rows of `a` listed in
    /// `table[i*k..(i+1)*k]`. Same values as `gather_rows` followed by
    /// `group_mean`, without the `k`-fold intermediate.
    pub fn neighbor_mean(&mut self, a: Tensor, table: &[usize], k: usize) -> Result<Tensor> {
        let m = self.value(a);
        if k == 0 || table.len() % k != 0 {
            return Err(shape_err("neighbor_mean", format!("table of {} in groups of {k}", table.len())));
        }
        if let Some(&bad) = table.iter().find(|&&i| i >= m.rows) {
            return Err(shape_err("neighbor_mean", format!("row {bad} of {}", m.rows)));
        }
        let n = table.len() / k;
        let inv = 1.0 / k as f64;
        let mut v = Matrix::zeros(n, m.cols);
        for (i, group) in table.chunks(k).enumerate() {
            let dst = &mut v.data[i * m.cols..(i + 1) * m.cols];
            for &j in group {
                for (d, s) in dst.iter_mut().zip(m.row(j)) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        self.push_op("neighbor_mean", v, Op::NeighborMean(a, table.to_vec(), k), &[a])
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows != mb.rows {
            return Err(shape_err("concat_cols", format!("{:?} | {:?}", ma.shape(), mb.shape())));
        }
        let mut data = Vec::with_capacity(ma.data.len() + mb.data.len());
        for r in 0..ma.rows {
            data.extend_from_slice(ma.row(r));
            data.extend_from_slice(mb.row(r));
        }
        let v = Matrix::new(ma.rows, ma.cols + mb.cols, data)?;
        self.push_op("concat_cols", v, Op::ConcatCols(a, b), &[a, b])
    }

    /// Accumulates `d loss / d t` into every node that requires grad.
    /// Calling it again without [`Graph::zero_grad`] adds to the stored
    /// gradients.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut local: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = local[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut local);
            match &mut self.nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Matrix, local: &mut [Option<Matrix>]) {
        let node = &self.nodes[id];
        let mut send = |t: Tensor, contrib: Matrix| {
            if !self.nodes[t.0].requires_grad {
                return;
            }
            match &mut local[t.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |t: Tensor| &self.nodes[t.0].value;
        let rg = |t: Tensor| self.nodes[t.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                let mut db = Matrix::zeros(1, g.cols);
                for row in g.data.chunks(g.cols) {
                    for (d, s) in db.data.iter_mut().zip(row) {
                        *d += s;
                    }
                }
                send(*b, db);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip(val(*b), |x, y| x * y));
                send(*b, g.zip(val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::MatMul(a, b) => {
                if rg(*a) {
                    send(*a, g.matmul_nt(val(*b)));
                }
                if rg(*b) {
                    send(*b, val(*a).matmul_tn(g));
                }
            }
            Op::Relu(a) => send(*a, g.zip(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        d.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*a, d);
            }
            Op::Log(a) => send(*a, g.zip(val(*a), |x, y| x / y)),
            Op::Clamp(a, lo, hi) => send(
                *a,
                g.zip(val(*a), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 }),
            ),
            Op::MeanAll(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Matrix::filled(r, c, g.data[0] / (r * c) as f64));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = g.data[i]);
                }
                send(*a, d);
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (dst, s) in d.data[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *dst += s;
                    }
                }
                send(*a, d);
            }
            Op::GroupMean(a, group) => {
                let (r, c) = val(*a).shape();
                let inv = 1.0 / *group as f64;
                let mut d = Matrix::zeros(r, c);
                for k in 0..r {
                    let src = g.row(k / group);
                    for (dst, s) in d.data[k * c..(k + 1) * c].iter_mut().zip(src) {
                        *dst = s * inv;
                    }
                }
                send(*a, d);
            }
            Op::NeighborMean(a, table, k) => {
                let (r, c) = val(*a).shape();
                let inv = 1.0 / *k as f64;
                let mut d = Matrix::zeros(r, c);
                for (i, group) in table.chunks(*k).enumerate() {
                    let src = g.row(i);
                    for &j in group {
                        for (dst, s) in d.data[j * c..(j + 1) * c].iter_mut().zip(src) {
                            *dst += s * inv;
                        }
                    }
                }
                send(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols;
                let cb = val(*b).cols;
                let mut da = Matrix::zeros(g.rows, ca);
                let mut db = Matrix::zeros(g.rows, cb);
                for r in 0..g.rows {
                    let row = g.row(r);
                    da.data[r * ca..(r + 1) * ca].copy_from_slice(&row[..ca]);
                    db.data[r * cb..(r + 1) * cb].copy_from_slice(&row[ca..]);
                }
                send(*a, da);
                send(*b, db);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seed::rng(seed);
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .unwrap()
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::filled(1, 4, 3.7));
        let y = g.row_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn identity_matmul_passes_gradient_through() {
        let mut g = Graph::new();
        let a = random(3, 3, 1);
        let i = g.constant(Matrix::identity(3));
        let x = g.param(a.clone());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &a);
        let w = random(3, 3, 2);
        let wt = g.constant(w.clone());
        let prod = g.mul(y, wt).unwrap();
        let s = g.sum_rows(prod).unwrap();
        let total = g.mean_all(s).unwrap();
        g.backward(total).unwrap();
        // upstream grad of y is w / 3 (mean over 3 row sums)
        let expected: Vec<f64> = w.data().iter().map(|v| v / 3.0).collect();
        for (a, b) in g.grad(x).unwrap().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_grad_is_uniform() {
        let mut g = Graph::new();
        let t = g.param(random(2, 5, 3));
        let l = g.mean_all(t).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(t).unwrap().data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn relu_blocks_negative_preactivations() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[[1.0, 2.0]]));
        let w = g.param(Matrix::from_rows(&[[-1.0], [-1.0]]));
        let h = g.matmul(x, w).unwrap();
        let r = g.relu(h).unwrap();
        let l = g.mean_all(r).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.param(random(2, 3, 4));
        let b = g.param(random(2, 3, 5));
        let da = g.detach(a);
        let dda = g.detach(da);
        assert_eq!(g.value(da), g.value(dda));
        assert!(!g.requires_grad(da));
        let p = g.mul(da, b).unwrap();
        let l = g.mean_all(p).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).is_none());
        let expected: Vec<f64> = g.value(a).data().iter().map(|v| v / 6.0).collect();
        assert_eq!(g.grad(b).unwrap().data(), &expected[..]);
    }

    #[test]
    fn backward_on_constant_is_an_error() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::filled(1, 1, 2.0));
        assert!(matches!(g.backward(c), Err(Error::Detached)));
        let p = g.param(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(p), Err(Error::Shape { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let t = g.param(random(2, 2, 6));
        let l = g.mean_all(t).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(t).unwrap().data().iter().all(|&v| v == 0.5));
        g.zero_grad();
        assert!(g.grad(t).is_none());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.param(Matrix::zeros(2, 3));
        let b = g.param(Matrix::zeros(2, 2));
        match g.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        let c = g.constant(Matrix::zeros(3, 1));
        assert!(g.concat_cols(a, c).is_err());
        assert!(g.gather_rows(a, &[2]).is_err());
        assert!(g.group_mean(a, 3).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let a = g.param(Matrix::from_rows(&[[0.0, 1.0]]));
        assert!(matches!(g.log(a), Err(Error::Numeric { op: "log" })));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut g = Graph::new();
        let x = g.constant(random(20, 6, 7).map(|v| v * 30.0));
        let y = g.row_softmax(x).unwrap();
        for r in 0..20 {
            let row = g.value(y).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(random(5, 3, 8));
            let w = g.param(random(3, 4, 9));
            let h = g.matmul(x, w).unwrap();
            let s = g.row_softmax(h).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn neighbor_mean_matches_gather_then_group_mean() {
        let table = [0, 2, 1, 1, 3, 0, 2, 2, 3, 3, 0, 1];
        let run = |fused: bool| {
            let mut g = Graph::new();
            let x = g.param(random(4, 3, 10));
            let y = if fused {
                g.neighbor_mean(x, &table, 3).unwrap()
            } else {
                let t = g.gather_rows(x, &table).unwrap();
                g.group_mean(t, 3).unwrap()
            };
            let w = g.constant(random(4, 3, 11));
            let p = g.mul(y, w).unwrap();
            let l = g.mean_all(p).unwrap();
            g.backward(l).unwrap();
            (g.value(y).clone(), g.grad(x).unwrap().clone())
        };
        let (a, b) = (run(true), run(false));
        for (x, y) in a.0.data().iter().zip(b.0.data()).chain(a.1.data().iter().zip(b.1.data())) {
            assert!((x - y).abs() < 1e-15);
        }
        let mut g = Graph::new();
        let x = g.param(random(2, 2, 12));
        assert!(g.neighbor_mean(x, &[0, 5], 2).is_err());
        assert!(g.neighbor_mean(x, &[0, 1, 1], 2).is_err());
    }
}
