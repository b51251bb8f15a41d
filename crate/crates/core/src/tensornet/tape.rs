//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in evaluation order; [`Tape::backward`] replays them
//! in reverse. Gradients flow only into nodes that depend on a leaf marked
//! `requires_grad`, so differentiating with respect to a single input (e.g. an
//! embedding) skips the weight-gradient products entirely.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · w + b` with `b` broadcast over rows.
    Affine(Var, Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Silu(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, keyed by leaf handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// `x · w + b`; shared by the plain and taped forward passes so both are
/// bitwise identical.
pub(crate) fn affine_kernel(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != k {
        return Err(Error::dim(format!(
            "input width {k} does not match weight shape {:?}",
            w.shape()
        )));
    }
    let m = w.shape()[1];
    if b.len() != m {
        return Err(Error::dim(format!("bias length {} != {m}", b.len())));
    }
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(
        n,
        k,
        m,
        x.data(),
        (k as isize, 1),
        w.data(),
        (m as isize, 1),
        1.0,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a
    /// gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (m as isize, 1),
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), needs))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = affine_kernel(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Affine(x, w, b), needs))
    }

    /// Adds a row vector `b` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        if bv.len() != c {
            return Err(Error::dim(format!(
                "row vector of length {} added to width {c}",
                bv.len()
            )));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, y) in row.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddRow(a, b), needs))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * x).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(out, Op::Square(a), needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| silu(x)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let needs = self.needs(a);
        self.push(out, Op::Silu(a), needs)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if parts.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(Error::dim("concat_cols with differing row counts"));
        }
        let total: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&v| self.value(v).cols())
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if parts.iter().any(|&v| self.value(v).cols() != cols) {
            return Err(Error::dim("concat_rows with differing column counts"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let needs = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Row lookup: output row `i` is row `idx[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::dim(format!(
                "row index {bad} out of range for {} rows",
                tv.rows()
            )));
        }
        let out = tv.select_rows(idx);
        let needs = self.needs(table);
        Ok(self.push(out, Op::GatherRows(table, idx.to_vec()), needs))
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// tracked leaf reachable from it. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let nodes = std::mem::take(&mut self.nodes);
        let grads = nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match (node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Affine(x, w, b) => {
                self.matmul_backward(*x, *w, g, grads);
                self.row_sum_into(*b, g, node.value.cols(), grads);
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
                self.row_sum_into(*b, g, node.value.cols(), grads);
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (x, gy) in ga.iter_mut().zip(g) {
                        *x += gy * s;
                    }
                }
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, gy), aa) in ga.iter_mut().zip(g).zip(av) {
                        *x += 2.0 * aa * gy;
                    }
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, gy), aa) in ga.iter_mut().zip(g).zip(av) {
                        *x += gy * silu_grad(*aa);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.accumulate(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (x, y) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.accumulate(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(table, idx) => {
                let c = node.value.cols();
                if let Some(gt) = self.accumulate(grads, *table) {
                    for (r, &src) in idx.iter().enumerate() {
                        for (x, y) in gt[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        let m = bv.shape()[1];
        if let Some(ga) = self.accumulate(grads, a) {
            // dA = dC · Bᵀ
            gemm(
                n,
                m,
                k,
                g,
                (m as isize, 1),
                bv.data(),
                (1, m as isize),
                1.0,
                ga,
            );
        }
        if let Some(gb) = self.accumulate(grads, b) {
            // dB = Aᵀ · dC
            gemm(
                k,
                n,
                m,
                av.data(),
                (1, k as isize),
                g,
                (m as isize, 1),
                1.0,
                gb,
            );
        }
    }

    fn row_sum_into(&self, b: Var, g: &[f64], cols: usize, grads: &mut [Option<Vec<f64>>]) {
        if let Some(gb) = self.accumulate(grads, b) {
            for row in g.chunks(cols.max(1)) {
                add_into(gb, row);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().tracked())
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.5, -1.0, 2.0]);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_tape_is_rejected() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        let v = other.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let w = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(w).is_none());
    }

    #[test]
    fn gather_scatters_back() {
        let mut tape = Tape::new();
        let t = leaf(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = tape.gather_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(picked);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(t).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_cols_splits_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 1], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let sq = tape.square(c);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[6.0, 8.0, 10.0, 12.0]);
    }
}
