//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape order is already a topological order and
//! [`Graph::backward`] simply walks it in reverse.
//!
//! Parameters enter the tape through [`Graph::param`], which binds each
//! `(family, index)` at most once per graph so that repeated uses of a weight
//! (recurrent cells, shared encoders) accumulate into a single gradient.

use std::collections::HashMap;

use crate::nn::{Family, ParamSet};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(Family, usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    CrossEntropy(Var, Vec<usize>, Tensor),
    LogDetSpd(Var, Tensor),
    Submatrix(Var, Vec<usize>),
    AddDiag(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(Family, usize, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node; `None` if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Gradients of the parameters of one family, aligned with its [`ParamSet`].
    /// Unused parameters get zero tensors.
    pub fn for_family(&self, set: &ParamSet) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = set
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for &(family, idx, var) in &self.params {
            if family == set.family() {
                if let Some(g) = &self.by_node[var.0] {
                    out[idx].add_assign(g);
                }
            }
        }
        out
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(Family, usize), Var>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Constant (or differentiable input) leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of `v`'s value as a new leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn param(&mut self, set: &ParamSet, idx: usize) -> Var {
        let key = (set.family(), idx);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(set.tensors()[idx].clone(), Op::Param(key.0, key.1));
        self.bound.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + b` with the row vector `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), bv.cols(), "add_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// `s * a` where `s` is a 1x1 node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::ScaleBy(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of several 1x1 (or same-shape) nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Vertical concatenation of nodes with equal column counts.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "stack_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let value = Tensor::row_vector(self.value(a).row(i).to_vec());
        self.push(value, Op::Row(a, i))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let mut value = Tensor::zeros(idx.len(), tv.cols());
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(value, Op::Gather(table, idx.to_vec()))
    }

    /// Softmax over the single row of a 1xn node.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = Tensor::row_vector(softmax(self.value(a).data()));
        self.push(value, Op::Softmax(a))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`
    /// for a 1xV logits row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        assert!(!targets.is_empty(), "cross_entropy needs at least one target");
        let lv = self.value(logits);
        assert_eq!(lv.rows(), 1, "cross_entropy expects a logits row");
        let probs = softmax(lv.data());
        let lse = log_sum_exp(lv.data());
        let nll = targets.iter().map(|&t| lse - lv.data()[t]).sum::<f64>() / targets.len() as f64;
        self.push(
            Tensor::scalar(nll),
            Op::CrossEntropy(logits, targets.to_vec(), Tensor::row_vector(probs)),
        )
    }

    /// `log det(a)` for symmetric positive-definite `a` (0 for the empty matrix).
    pub fn logdet_spd(&mut self, a: Var) -> crate::Result<Var> {
        let av = self.value(a);
        let (value, inverse) = if av.rows() == 0 {
            (0.0, Tensor::zeros(0, 0))
        } else {
            (tensor::logdet_spd(av)?, tensor::inverse_spd(av)?)
        };
        Ok(self.push(Tensor::scalar(value), Op::LogDetSpd(a, inverse)))
    }

    pub fn submatrix(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).principal_submatrix(idx);
        self.push(value, Op::Submatrix(a, idx.to_vec()))
    }

    /// `a + c·I` for square `a`.
    pub fn add_diag(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let v = value.get(i, i);
            value.set(i, i, v + c);
        }
        self.push(value, Op::AddDiag(a))
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(family, idx) => {
                    params.push((*family, *idx, Var(i)));
                    continue;
                }
                _ => match grads[i].clone() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(..) => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::ScaleBy(a, s) => {
                    let c = self.scalar(*s);
                    let gs = tensor::dot(g.data(), self.value(*a).data());
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                    accumulate(&mut grads, *s, Tensor::scalar(gs));
                }
                Op::Sigmoid(a) => accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
                Op::Exp(a) => accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * y)),
                Op::Log(a) => accumulate(&mut grads, *a, g.zip_map(self.value(*a), |g, x| g / x)),
                Op::Square(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |g, x| 2.0 * g * x))
                }
                Op::Abs(a) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_map(self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Clamp(a, lo, hi) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_map(self.value(*a), |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
                ),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let mut gp = Tensor::zeros(r, c);
                        for row in 0..r {
                            gp.row_mut(row).copy_from_slice(&g.row(row)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let gp = Tensor::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec());
                        offset += r;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Row(a, idx) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    ga.row_mut(*idx).copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Gather(table, idx) => {
                    let (r, c) = self.value(*table).shape();
                    let mut gt = Tensor::zeros(r, c);
                    for (row, &t) in idx.iter().enumerate() {
                        for (o, x) in gt.row_mut(t).iter_mut().zip(g.row(row)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Softmax(a) => {
                    let gy = tensor::dot(g.data(), y.data());
                    accumulate(&mut grads, *a, g.zip_map(y, |g, y| y * (g - gy)));
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let scale = g.item();
                    let mut gl = probs.clone();
                    let w = 1.0 / targets.len() as f64;
                    for &t in targets {
                        gl.data_mut()[t] -= w;
                    }
                    gl.scale_assign(scale);
                    accumulate(&mut grads, *logits, gl);
                }
                Op::LogDetSpd(a, inverse) => {
                    let scale = g.item();
                    accumulate(&mut grads, *a, inverse.map(|x| x * scale));
                }
                Op::Submatrix(a, idx) => {
                    let n = self.value(*a).rows();
                    let mut ga = Tensor::zeros(n, n);
                    for (p, &i) in idx.iter().enumerate() {
                        for (q, &j) in idx.iter().enumerate() {
                            let v = ga.get(i, j) + g.get(p, q);
                            ga.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::AddDiag(a) => accumulate(&mut grads, *a, g),
            }
        }

        Gradients {
            by_node: grads,
            params,
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_diff_check, max_rel_error};

    fn leaf_grad_check(
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Graph, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.input(t)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
            let numeric = finite_diff_check(input, |perturbed| {
                let mut g = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.input(if j == k { perturbed.clone() } else { t.clone() }))
                    .collect();
                let out = f(&mut g, &vs);
                g.scalar(out)
            });
            worst = worst.max(max_rel_error(analytic.data(), numeric.data()));
        }
        worst
    }

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec())
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let a = t(2, 3, &[0.3, -0.7, 1.1, 0.5, 0.2, -0.4]);
        let b = t(3, 2, &[0.9, -0.1, 0.4, 0.8, -0.6, 0.3]);
        let err = leaf_grad_check(vec![a, b], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let s = g.sigmoid(m);
            let th = g.tanh(s);
            let sq = g.square(th);
            let e = g.exp(sq);
            let l = g.log(e);
            let tr = g.transpose(l);
            let ab = g.abs(tr);
            g.sum(ab)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn structural_op_gradients() {
        let a = t(1, 3, &[0.3, -0.7, 1.1]);
        let b = t(1, 2, &[0.5, 0.2]);
        let table = t(4, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]);
        let err = leaf_grad_check(vec![a, b, table], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]]);
            let sl = g.slice_cols(c, 1, 3);
            let rows = g.gather(v[2], &[2, 0, 2]);
            let st = g.stack_rows(&[sl, sl]);
            let r = g.row(st, 1);
            let sm = g.softmax(r);
            let bias = b_row(g, v[1]);
            let rb = g.add_row(rows, bias);
            let s1 = g.sum(rb);
            let s2 = g.dot(sm, sl);
            let sc = g.scale_by(s1, s2);
            let m = g.mul(sc, s2);
            let ce = g.cross_entropy(c, &[1, 4, 4]);
            g.add_all(&[m, ce])
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    fn b_row(g: &mut Graph, v: Var) -> Var {
        g.scale(v, 0.5)
    }

    #[test]
    fn logdet_submatrix_gradients() {
        let a = t(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.2]);
        // symmetrize first: a one-sided perturbation of an SPD input is not SPD-shaped
        let err = leaf_grad_check(vec![a], |g, v| {
            let at = g.transpose(v[0]);
            let both = g.add(v[0], at);
            let sym = g.scale(both, 0.5);
            let sub = g.submatrix(sym, &[0, 2]);
            let sub = g.add_diag(sub, 0.1);
            let l1 = g.logdet_spd(sub).unwrap();
            let l2 = g.logdet_spd(sym).unwrap();
            g.sub(l2, l1)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![-1.0, 0.5, 2.0]));
        let c = g.clamp(x, 0.0, 1.0);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn detach_stops_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.square(x);
        let d = g.detach(y);
        let z = g.mul(d, x);
        let grads = g.backward(z);
        assert_eq!(grads.wrt(x).unwrap().item(), 9.0);
    }
}
