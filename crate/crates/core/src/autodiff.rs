//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes are
//! added, and [`Graph::backward`] walks the tape in reverse to accumulate
//! gradients. Leaves are either parameters (gradients tracked) or constants.
//! The op set is the minimum needed by the attention layers, the classifier
//! heads, and the adapter objective.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Transpose(Var),
    /// Row softmax; `allowed` (row-major, same shape) marks unmasked entries.
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    MeanRows(Var),
    MulConst(Var, Matrix<T>),
    CrossEntropy(Var, Vec<usize>),
    DotConst(Var, Matrix<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the variable does not influence the output or is a constant.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// The single element of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    /// Sums several same-shaped nodes.
    pub fn sum(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or(Error::Empty("sum of no terms"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Adds a `1 x m` row to every row of an `n x m` node.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Shape(format!(
                "row broadcast of {:?} onto {:?}",
                rv.shape(),
                av.shape()
            )));
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        let t = self.tracked(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), t))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.tanh());
        let t = self.tracked(&[a]);
        self.push(value, Op::Tanh(a), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = masked_softmax_rows(self.value(a), None);
        let t = self.tracked(&[a]);
        self.push(value, Op::Softmax(a), t)
    }

    /// Row softmax of `a + M`, where `M` is `0` on allowed entries and a large
    /// negative constant elsewhere. Rows without any allowed entry yield zeros.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "mask of {} entries for scores {:?}",
                allowed.len(),
                self.value(a).shape()
            )));
        }
        let value = masked_softmax_rows(self.value(a), Some(allowed));
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::Softmax(a), t))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let rows = vars
            .first()
            .map(|v| self.value(*v).rows())
            .ok_or(Error::Empty("concat of no matrices"))?;
        if vars.iter().any(|v| self.value(*v).rows() != rows) {
            return Err(Error::Shape("concat_cols with differing row counts".into()));
        }
        let cols: usize = vars.iter().map(|v| self.value(*v).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for v in vars {
                let part = self.value(*v).row(i);
                value.row_mut(i)[offset..offset + part.len()].copy_from_slice(part);
                offset += part.len();
            }
        }
        let t = self.tracked(vars);
        Ok(self.push(value, Op::ConcatCols(vars.to_vec()), t))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let cols = vars
            .first()
            .map(|v| self.value(*v).cols())
            .ok_or(Error::Empty("concat of no matrices"))?;
        if vars.iter().any(|v| self.value(*v).cols() != cols) {
            return Err(Error::Shape("concat_rows with differing column counts".into()));
        }
        let mut data = Vec::new();
        for v in vars {
            data.extend_from_slice(self.value(*v).as_slice());
        }
        let value = Matrix::from_vec(data.len() / cols.max(1), cols, data)?;
        let t = self.tracked(vars);
        Ok(self.push(value, Op::ConcatRows(vars.to_vec()), t))
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange { index: bad, len: rows });
        }
        let value = self.value(a).select_rows(indices);
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), t))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rows() == 0 {
            return Err(Error::Empty("mean over zero rows"));
        }
        let value = self.value(a).mean_rows();
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::MeanRows(a), t))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix<T>) -> Result<Var> {
        let value = self.value(a).zip_map(&c, |x, y| x * y)?;
        let t = self.tracked(&[a]);
        Ok(self.push(value, Op::MulConst(a, c), t))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        if lv.rows() == 0 {
            return Err(Error::Empty("cross entropy over zero rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: lv.cols(),
            });
        }
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let value = Matrix::filled(1, 1, total / T::of(targets.len() as f64));
        let t = self.tracked(&[logits]);
        Ok(self.push(value, Op::CrossEntropy(logits, targets.to_vec()), t))
    }

    /// `sum(a * c)` as a 1x1 node.
    pub fn dot_const(&mut self, a: Var, c: Matrix<T>) -> Result<Var> {
        let s = self.value(a).zip_map(&c, |x, y| x * y)?.as_slice().iter().copied().sum();
        let t = self.tracked(&[a]);
        Ok(self.push(Matrix::filled(1, 1, s), Op::DotConst(a, c), t))
    }

    /// Reverse sweep from a 1x1 output node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let acc = |v: Var, delta: Matrix<T>, grads: &mut Vec<Option<Matrix<T>>>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.matmul(&bv.transpose())?, &mut grads);
                    acc(*b, av.transpose().matmul(&g)?, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::AddRow(a, row) => {
                    let mut rg = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in rg.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*a, g.clone(), &mut grads);
                    acc(*row, rg, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s), &mut grads),
                Op::Tanh(a) => {
                    let d = node.value.zip_map(&g, |y, gy| gy * (T::one() - y * y))?;
                    acc(*a, d, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let inner: T = y.row(i).iter().zip(g.row(i)).map(|(&p, &q)| p * q).sum();
                        for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                            *o = y[(i, j)] * (g[(i, j)] - inner);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut d = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        acc(*p, d, &mut grads);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        let idx: Vec<usize> = (offset..offset + h).collect();
                        offset += h;
                        acc(*p, g.select_rows(&idx), &mut grads);
                    }
                }
                Op::SelectRows(a, indices) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let n = T::of(src.rows() as f64);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = v / n;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)?, &mut grads),
                Op::CrossEntropy(logits, targets) => {
                    let lv = self.value(*logits);
                    let scale = g[(0, 0)] / T::of(targets.len() as f64);
                    let mut d = masked_softmax_rows(lv, None);
                    for (i, &t) in targets.iter().enumerate() {
                        d[(i, t)] -= T::one();
                    }
                    acc(*logits, d.scale(scale), &mut grads);
                }
                Op::DotConst(a, c) => {
                    let s = g[(0, 0)];
                    acc(*a, c.scale(s), &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Row softmax with optional allowed-entry mask; fully masked rows are zero.
pub(crate) fn masked_softmax_rows<T: Scalar>(x: &Matrix<T>, allowed: Option<&[bool]>) -> Matrix<T> {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mask_row = allowed.map(|m| &m[i * cols..(i + 1) * cols]);
        if mask_row.is_some_and(|m| !m.iter().any(|&a| a)) {
            continue;
        }
        let shifted: Vec<T> = x
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, &v)| match mask_row {
                Some(m) if !m[j] => v + T::mask_value(),
                _ => v,
            })
            .collect();
        let max = shifted.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = shifted.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (o, e) in out.row_mut(i).iter_mut().zip(exps) {
            *o = e / total;
        }
    }
    out
}
