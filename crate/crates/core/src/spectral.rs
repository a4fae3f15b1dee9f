//! Normalized graph Laplacians and Chebyshev spectral convolution.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// `L = I - D^{+1/2} A D^{+1/2}`. Vertices of degree zero get an identity row
/// (pseudo-inverse convention).
pub fn normalized_laplacian(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    if !adjacency.is_symmetric(0.0) {
        return Err(Error::contract("adjacency matrix is not symmetric"));
    }
    let n = adjacency.rows();
    let inv_sqrt: Vec<f64> = adjacency
        .row_sums()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let off = adjacency
        .entries()
        .map(|(i, j, a)| (i, j, -a * inv_sqrt[i] * inv_sqrt[j]));
    SparseMatrix::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).chain(off))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaMax {
    pub value: f64,
    /// False when the iteration limit was hit; `value` is then the safe
    /// bound 2.0.
    pub converged: bool,
    pub iterations: usize,
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration on the Rayleigh quotient, stopping when the relative change
/// between iterations drops below `tol`.
pub fn estimate_lambda_max(l: &SparseMatrix, tol: f64, max_iter: usize) -> LambdaMax {
    let n = l.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a5_2a11);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut prev = f64::NAN;
    for it in 1..=max_iter {
        let w = l.mul_dense(&v, 1);
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return LambdaMax {
                value: 0.0,
                converged: true,
                iterations: it,
            };
        }
        if (lambda - prev).abs() <= tol * lambda.abs() {
            return LambdaMax {
                value: lambda,
                converged: true,
                iterations: it,
            };
        }
        prev = lambda;
        v = w.into_iter().map(|x| x / wn).collect();
    }
    log::warn!("power iteration did not converge in {max_iter} steps; using lambda_max = 2");
    LambdaMax {
        value: 2.0,
        converged: false,
        iterations: max_iter,
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `2 L / lambda_max - I`.
pub fn scale_laplacian(l: &SparseMatrix, lambda_max: f64) -> Result<SparseMatrix> {
    if !(lambda_max > 0.0) {
        return Err(Error::contract(format!(
            "lambda_max must be positive, got {lambda_max}"
        )));
    }
    let n = l.rows();
    let s = 2.0 / lambda_max;
    SparseMatrix::from_triplets(
        n,
        l.cols(),
        l.entries()
            .map(|(i, j, v)| (i, j, s * v))
            .chain((0..n).map(|i| (i, i, -1.0))),
    )
}

/// Chebyshev filter bank applied to an `N x F_in` signal:
/// `sum_k T_k(L) X theta_k (+ bias)`, where `theta` stacks the `K` blocks of
/// `F_in x F_out` coefficients vertically and `T_k` follows
/// `T_k = 2 L T_{k-1} - T_{k-2}` with `T_0 = X`, `T_1 = L X`.
pub fn cheb_forward(
    tape: &mut Tape,
    scaled_laplacian: &Arc<SparseMatrix>,
    theta: Var,
    bias: Option<Var>,
    signal: Var,
) -> Result<Var> {
    let (n, f_in) = tape.shape(signal);
    let (rows, f_out) = tape.shape(theta);
    if f_in == 0 || rows % f_in != 0 {
        return Err(Error::contract(format!(
            "theta has {rows} rows, not a multiple of the signal width {f_in}"
        )));
    }
    if scaled_laplacian.rows() != n || scaled_laplacian.cols() != n {
        return Err(Error::contract(format!(
            "signal has {n} vertices but the Laplacian is {}x{}",
            scaled_laplacian.rows(),
            scaled_laplacian.cols()
        )));
    }
    if let Some(b) = bias {
        if tape.shape(b) != (1, f_out) {
            return Err(Error::contract(format!("bias must be 1x{f_out}")));
        }
    }
    let order = rows / f_in;
    let mut basis = Vec::with_capacity(order);
    basis.push(signal);
    for k in 1..order {
        let next = if k == 1 {
            tape.spmm(scaled_laplacian, signal)
        } else {
            let lt = tape.spmm(scaled_laplacian, basis[k - 1]);
            let two = tape.scale(lt, 2.0);
            tape.sub(two, basis[k - 2])
        };
        basis.push(next);
    }
    let stacked = if order == 1 { signal } else { tape.concat_cols(&basis) };
    let mut out = tape.matmul(stacked, theta);
    if let Some(b) = bias {
        out = tape.add_row(out, b);
    }
    Ok(out)
}

/// One spectral convolution layer with its own parameters.
#[derive(Clone, Debug)]
pub struct ChebLayer {
    pub order: usize,
    pub f_in: usize,
    pub f_out: usize,
    /// `(order * f_in) x f_out`, block `k` holds the `T_k` coefficients.
    pub theta: Tensor,
    pub bias: Option<Tensor>,
    pub scaled_laplacian: Arc<SparseMatrix>,
}

impl ChebLayer {
    /// Glorot-uniform coefficients, zero bias.
    pub fn new(
        scaled_laplacian: Arc<SparseMatrix>,
        order: usize,
        f_in: usize,
        f_out: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::contract("Chebyshev order must be at least 1"));
        }
        let theta = glorot(order * f_in, f_out, rng);
        Ok(ChebLayer {
            order,
            f_in,
            f_out,
            theta,
            bias: with_bias.then(|| Tensor::zeros(1, f_out)),
            scaled_laplacian,
        })
    }

    /// Registers the parameters on `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape) -> (Var, Option<Var>) {
        let theta = tape.leaf(self.theta.clone());
        let bias = self.bias.as_ref().map(|b| tape.leaf(b.clone()));
        (theta, bias)
    }

    pub fn forward(&self, tape: &mut Tape, signal: Var) -> Result<(Var, Var, Option<Var>)> {
        let (_, w) = tape.shape(signal);
        if w != self.f_in {
            return Err(Error::contract(format!(
                "signal width {w} does not match layer input width {}",
                self.f_in
            )));
        }
        let (theta, bias) = self.bind(tape);
        let out = cheb_forward(tape, &self.scaled_laplacian, theta, bias, signal)?;
        Ok((out, theta, bias))
    }
}

pub(crate) fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect(),
    )
}
