use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable operations.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    RowNorm(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    Reshape(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one reverse pass. Build a fresh tape per
/// training step; nodes are appended in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let out = Tensor::new(src.rows(), src.cols(), src.data().iter().map(|&x| f(x)).collect());
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(k, kb, "matmul: inner dimensions differ ({m}x{k} * {kb}x{n})");
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            (kb, n),
            false,
            0.0,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(m, n, out), Op::MatMul(a, b), ng)
    }

    /// Product of a constant sparse matrix with a dense value.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, x: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(
            s.cols(),
            r,
            "spmm: sparse matrix is {}x{}, dense operand has {r} rows",
            s.rows(),
            s.cols()
        );
        let out = s.mul_dense(self.value(x).data(), c);
        let ng = self.needs(x);
        self.push(Tensor::new(s.rows(), c, out), Op::SpMM(Arc::clone(s), x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: empty interval [{lo}, {hi}]");
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert!(!v.is_empty(), "mean of an empty tensor");
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Euclidean norm of each row, as an `n x 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows())
            .map(|r| v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::column(data);
        let ng = self.needs(a);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// Selects rows by constant indices (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            assert!(i < v.rows(), "gather_rows: index {i} out of {} rows", v.rows());
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::new(idx.len(), c, data);
        let ng = self.needs(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Places equal-height matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols: row counts differ");
                self.shape(p).1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(rows, total, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient buffer for `v`, zero-initialised on first use. The second
    /// value is the gemm `beta` to use: 0 for a fresh buffer, 1 otherwise.
    fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> (&mut [f64], f64) {
        let beta = if grads[v.0].is_some() { 1.0 } else { 0.0 };
        let t = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
        (t.data_mut(), beta)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Accumulates `f(g_k, k)` into `v` elementwise without an intermediate
    /// allocation when a gradient already exists.
    fn accumulate_map(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, f: impl Fn(f64, usize) -> f64) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (k, (a, gk)) in acc.data_mut().iter_mut().zip(g.data()).enumerate() {
                    *a += f(*gk, k);
                }
            }
            slot @ None => {
                let data = g.data().iter().enumerate().map(|(k, gk)| f(*gk, k)).collect();
                *slot = Some(Tensor::new(g.rows(), g.cols(), data));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let (acc, beta) = Self::slot(grads, *a, va.shape());
                    gemm(1.0, g.data(), g.shape(), false, vb.data(), vb.shape(), true, beta, acc);
                }
                if self.needs(*b) {
                    let (acc, beta) = Self::slot(grads, *b, vb.shape());
                    gemm(1.0, va.data(), va.shape(), true, g.data(), g.shape(), false, beta, acc);
                }
            }
            Op::SpMM(s, x) => {
                if self.needs(*x) {
                    let vx = self.value(*x);
                    let (acc, _) = Self::slot(grads, *x, vx.shape());
                    s.mul_transpose_dense_acc(g.data(), vx.cols(), acc);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_map(grads, *a, g, |gk, _| gk);
                self.accumulate_map(grads, *b, g, |gk, _| gk);
            }
            Op::Sub(a, b) => {
                self.accumulate_map(grads, *a, g, |gk, _| gk);
                self.accumulate_map(grads, *b, g, |gk, _| -gk);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_map(grads, *a, g, |gk, k| gk * vb[k]);
                self.accumulate_map(grads, *b, g, |gk, k| gk * va[k]);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate_map(grads, *a, g, |gk, _| s * gk);
            }
            Op::Elu(a) => {
                let x = self.value(*a).data();
                self.accumulate_map(grads, *a, g, |gk, k| if x[k] > 0.0 { gk } else { gk * x[k].exp() });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate_map(grads, *a, g, |gk, k| gk * y[k]);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate_map(grads, *a, g, |gk, k| gk / x[k]);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate_map(grads, *a, g, |gk, k| 2.0 * x[k] * gk);
            }
            Op::Abs(a) => {
                // d|x|/dx at 0 is taken as 0
                let x = self.value(*a).data();
                self.accumulate_map(grads, *a, g, |gk, k| {
                    if x[k] > 0.0 {
                        gk
                    } else if x[k] < 0.0 {
                        -gk
                    } else {
                        0.0
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let x = self.value(*a).data();
                self.accumulate_map(grads, *a, g, |gk, k| if x[k] >= lo && x[k] <= hi { gk } else { 0.0 });
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let y = node.value.data();
                let c = x.cols();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, xk)| {
                        let r = k / c;
                        if y[r] > 0.0 {
                            g.data()[r] * xk / y[r]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.rows(), c, data));
            }
            Op::GatherRows(a, idx) => {
                if self.needs(*a) {
                    let (r, c) = self.shape(*a);
                    let (acc, _) = Self::slot(grads, *a, (r, c));
                    for (k, &i) in idx.iter().enumerate() {
                        let dst = &mut acc[i * c..(i + 1) * c];
                        for (d, s) in dst.iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.needs(p) {
                        let (acc, _) = Self::slot(grads, p, (r, c));
                        for row in 0..r {
                            let src = &g.data()[row * total + offset..row * total + offset + c];
                            for (d, s) in acc[row * c..(row + 1) * c].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, g.clone().reshaped(r, c));
            }
        }
    }
}

/// Conveniences composed only from the primitive operations above.
impl Tape {
    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// `a + c` for a constant `c`, elementwise.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let (r, cols) = self.shape(a);
        let k = self.constant(Tensor::filled(r, cols, c));
        self.add(a, k)
    }

    /// Sum of each row, as an `n x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        let ones = self.constant(Tensor::filled(c, 1, 1.0));
        self.matmul(a, ones)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: bias must be 1x{c}");
        let ones = self.constant(Tensor::filled(r, 1, 1.0));
        let b = self.matmul(ones, row);
        self.add(a, b)
    }

    /// `1 / a` elementwise, for strictly positive `a`.
    pub fn recip_positive(&mut self, a: Var) -> Var {
        let l = self.log(a);
        let n = self.scale(l, -1.0);
        self.exp(n)
    }
}
