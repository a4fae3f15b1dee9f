//! Reconstruction metrics, latent statistics, the PCA baseline and greedy
//! latent-mode ranking.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::util::write_text;

fn same_len(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "vertex counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn sq_dist(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// `(1 - ||M - M*|| / ||M*||) * 100` over the flattened coordinates.
pub fn metric_e(m: &[Vec3], m_star: &[Vec3]) -> Result<f64> {
    same_len(m, m_star)?;
    let den: f64 = m_star.iter().map(|p| sq_dist(p, &[0.0; 3])).sum::<f64>().sqrt();
    if !(den > 0.0) {
        return Err(Error::contract("ground-truth mesh has zero norm"));
    }
    let num: f64 = m.iter().zip(m_star).map(|(a, b)| sq_dist(a, b)).sum::<f64>().sqrt();
    Ok((1.0 - num / den) * 100.0)
}

/// Squared distance from each point of `a` to its nearest point of `b`.
fn nearest_sq(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    a.iter()
        .map(|p| b.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Symmetric Chamfer distance: summed squared nearest-neighbour distances in
/// both directions.
pub fn metric_chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("Chamfer distance of an empty point set"));
    }
    Ok(nearest_sq(a, b).iter().sum::<f64>() + nearest_sq(b, a).iter().sum::<f64>())
}

/// Square root of [`metric_chamfer`].
pub fn metric_rcd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    metric_chamfer(a, b).map(f64::sqrt)
}

/// Distance from each vertex of `m` to the nearest vertex of `m_star`.
pub fn per_vertex_rcd(m: &[Vec3], m_star: &[Vec3]) -> Vec<f64> {
    nearest_sq(m, m_star).into_iter().map(f64::sqrt).collect()
}

/// Root-mean-square per-vertex Euclidean distance (cm).
pub fn rms_vertex_error(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::contract("empty vertex set"));
    }
    Ok((a.iter().zip(b).map(|(p, q)| sq_dist(p, q)).sum::<f64>() / a.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub e_percent: f64,
    pub chamfer: f64,
    pub rcd: f64,
    pub kl: f64,
    pub per_vertex_rcd: Vec<f64>,
}

pub fn metrics_report(m: &[Vec3], m_star: &[Vec3], kl: f64) -> Result<MetricsReport> {
    let chamfer = metric_chamfer(m, m_star)?;
    Ok(MetricsReport {
        e_percent: metric_e(m, m_star)?,
        chamfer,
        rcd: chamfer.sqrt(),
        kl,
        per_vertex_rcd: per_vertex_rcd(m, m_star),
    })
}

/// Observations in rows, latent variables in columns.
pub type LatentMatrix = Tensor;

/// Determinant by LU decomposition with partial pivoting (row-major `n x n`).
pub fn determinant(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut det = 1.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs()).then(j.cmp(&i)))
            .unwrap();
        if m[p * n + k] == 0.0 {
            return 0.0;
        }
        if p != k {
            for c in 0..n {
                m.swap(k * n + c, p * n + c);
            }
            det = -det;
        }
        let piv = m[k * n + k];
        det *= piv;
        for i in k + 1..n {
            let f = m[i * n + k] / piv;
            if f != 0.0 {
                for c in k..n {
                    m[i * n + c] -= f * m[k * n + c];
                }
            }
        }
    }
    det
}

/// Sample covariance (denominator `n - 1`) of the columns of `x`.
pub fn covariance(x: &Tensor) -> Tensor {
    let (n, d) = x.shape();
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let mut c = Tensor::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let s: f64 = (0..n)
                .map(|i| (x.get(i, a) - mean[a]) * (x.get(i, b) - mean[b]))
                .sum::<f64>()
                / (n as f64 - 1.0);
            c.set(a, b, s);
            c.set(b, a, s);
        }
    }
    c
}

/// Correlation matrix of the columns of `x` and `100 * det(R)`.
pub fn correlation_det(x: &LatentMatrix) -> Result<(Tensor, f64)> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::contract("correlation needs at least two observations"));
    }
    let c = covariance(x);
    for j in 0..d {
        if !(c.get(j, j) > 1e-15) {
            return Err(Error::Validation(format!("latent dimension {j} has zero variance")));
        }
    }
    let mut r = Tensor::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let v = if a == b {
                1.0
            } else {
                (c.get(a, b) / (c.get(a, a) * c.get(b, b)).sqrt()).clamp(-1.0, 1.0)
            };
            r.set(a, b, v);
        }
    }
    let det = determinant(r.data(), d);
    Ok((r, det * 100.0))
}

/// Eigen-decomposition of a symmetric `n x n` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching unit
/// eigenvectors as rows.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order.iter().map(|&j| (0..n).map(|k| v[k * n + j]).collect()).collect();
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d` orthonormal rows of length `3N`.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing.
    pub variances: Vec<f64>,
}

/// Flips `v` so its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let k = (0..v.len()).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
    if v.get(k).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn orthonormalize_against(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-8).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Top-`d` principal directions of the rows of `train` (`n x 3N`).
///
/// With fewer samples than dimensions the eigenproblem is solved on the
/// `n x n` Gram matrix of the centred data and mapped back; otherwise on the
/// covariance matrix directly.
pub fn pca_fit(train: &[Vec<f64>], d: usize) -> Result<PcaModel> {
    let n = train.len();
    if n < 2 {
        return Err(Error::contract("PCA needs at least two samples"));
    }
    let dim = train[0].len();
    if train.iter().any(|r| r.len() != dim) {
        return Err(Error::contract("PCA rows have different lengths"));
    }
    if d > (n - 1).min(dim) {
        return Err(Error::contract(format!(
            "{d} components requested, at most {} available",
            (n - 1).min(dim)
        )));
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = train
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let denom = (n - 1) as f64;

    let (values, mut components): (Vec<f64>, Vec<Vec<f64>>) = if n < dim {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let s: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum::<f64>() / denom;
                g[i * n + j] = s;
                g[j * n + i] = s;
            }
        }
        let (vals, vecs) = symmetric_eigen(&g, n);
        let mut comps: Vec<Vec<f64>> = Vec::with_capacity(d);
        for (k, u) in vecs.iter().take(d).enumerate() {
            let mut c = vec![0.0; dim];
            for (i, ui) in u.iter().enumerate() {
                for (cj, xj) in c.iter_mut().zip(&centred[i]) {
                    *cj += ui * xj;
                }
            }
            let c = orthonormalize_against(c, &comps)
                .or_else(|| {
                    (0..dim).find_map(|e| {
                        let mut unit = vec![0.0; dim];
                        unit[e] = 1.0;
                        orthonormalize_against(unit, &comps)
                    })
                })
                .ok_or_else(|| Error::contract(format!("cannot complete component {k}")))?;
            comps.push(c);
        }
        (vals.into_iter().take(d).map(|v| v.max(0.0)).collect(), comps)
    } else {
        let mut cov = vec![0.0; dim * dim];
        for r in &centred {
            for a in 0..dim {
                for b in a..dim {
                    cov[a * dim + b] += r[a] * r[b] / denom;
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                cov[a * dim + b] = cov[b * dim + a];
            }
        }
        let (vals, vecs) = symmetric_eigen(&cov, dim);
        (
            vals.into_iter().take(d).map(|v| v.max(0.0)).collect(),
            vecs.into_iter().take(d).collect(),
        )
    };
    for c in components.iter_mut() {
        canonical_sign(c);
    }
    Ok(PcaModel {
        mean,
        components,
        variances: values,
    })
}

impl PcaModel {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(ci, (xi, mi))| ci * (xi - mi))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct_coeffs(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coeffs) {
            out.iter_mut().zip(c).for_each(|(o, ci)| *o += a * ci);
        }
        out
    }
}

/// `mean + C^T C (x - mean)`.
pub fn pca_reconstruct(model: &PcaModel, mesh: &Mesh) -> Result<Mesh> {
    let x = mesh.flat();
    if x.len() != model.mean.len() {
        return Err(Error::contract("mesh size does not match the PCA model"));
    }
    mesh.with_flat(&model.reconstruct_coeffs(&model.project(&x)))
}

/// Something that maps meshes to latent means and latent codes back to
/// vertex positions.
pub trait LatentModel {
    fn latent_dim(&self) -> usize;
    fn encode_mean(&self, mesh: &Mesh) -> Result<Vec<f64>>;
    fn decode_vertices(&self, z: &[f64]) -> Result<Vec<Vec3>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeRanking {
    /// Latent dimensions in selection order.
    pub order: Vec<usize>,
    /// Mean E after including the first `k + 1` modes.
    pub cumulative_e: Vec<f64>,
    /// Mean Chamfer distance after including the first `k + 1` modes.
    pub cumulative_chamfer: Vec<f64>,
}

/// Greedy ordering of latent dimensions. At each step every unused dimension
/// is tried together with those already selected (all other entries of the
/// mean code set to zero); the one with the highest corpus-mean E is kept,
/// ties to the lowest index.
pub fn rank_modes(model: &dyn LatentModel, corpus: &[Mesh]) -> Result<ModeRanking> {
    if corpus.is_empty() {
        return Err(Error::contract("mode ranking needs a non-empty corpus"));
    }
    let d = model.latent_dim();
    let mus: Vec<Vec<f64>> = corpus.iter().map(|m| model.encode_mean(m)).collect::<Result<_>>()?;
    let mut selected: Vec<usize> = Vec::with_capacity(d);
    let mut mask = vec![false; d];
    let mut cumulative_e = Vec::with_capacity(d);
    let mut cumulative_chamfer = Vec::with_capacity(d);

    let masked = |mu: &[f64], mask: &[bool]| -> Vec<f64> {
        mu.iter().zip(mask).map(|(&v, &k)| if k { v } else { 0.0 }).collect()
    };
    for _ in 0..d {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..d {
            if mask[c] {
                continue;
            }
            mask[c] = true;
            let mut e = 0.0;
            for (mu, mesh) in mus.iter().zip(corpus) {
                let rec = model.decode_vertices(&masked(mu, &mask))?;
                e += metric_e(&rec, mesh.vertices())?;
            }
            mask[c] = false;
            let e = e / corpus.len() as f64;
            if best.is_none_or(|(_, be)| e > be) {
                best = Some((c, e));
            }
        }
        let (c, e) = best.expect("at least one candidate remains");
        mask[c] = true;
        selected.push(c);
        let mut ch = 0.0;
        for (mu, mesh) in mus.iter().zip(corpus) {
            let rec = model.decode_vertices(&masked(mu, &mask))?;
            ch += metric_chamfer(&rec, mesh.vertices())?;
        }
        cumulative_e.push(e);
        cumulative_chamfer.push(ch / corpus.len() as f64);
    }
    Ok(ModeRanking {
        order: selected,
        cumulative_e,
        cumulative_chamfer,
    })
}

pub fn write_mode_curve_csv(r: &ModeRanking, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("mode_rank,mode,E,chamfer\n");
    for (k, ((m, e), c)) in r
        .order
        .iter()
        .zip(&r.cumulative_e)
        .zip(&r.cumulative_chamfer)
        .enumerate()
    {
        let _ = writeln!(s, "{},{m},{e},{c}", k + 1);
    }
    write_text(path, &s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_left: Vec<f64>,
    pub bin_width: f64,
    /// Normalized so that `sum(density) * bin_width == 1`.
    pub density: Vec<f64>,
    /// Standard-normal density at each bin centre.
    pub normal_pdf: Vec<f64>,
}

/// Density histogram of every column of `x` over its own range. A constant
/// column is binned over `[v - 1/2, v + 1/2]`.
pub fn latent_histograms(x: &LatentMatrix, bins: usize) -> Result<Vec<Histogram>> {
    let (n, d) = x.shape();
    if bins == 0 || n < bins {
        return Err(Error::contract(format!("{n} observations cannot fill {bins} bins")));
    }
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    Ok((0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
            let mut lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let mut hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                lo -= 0.5;
                hi += 0.5;
            }
            let w = (hi - lo) / bins as f64;
            let mut counts = vec![0usize; bins];
            for v in &col {
                let k = (((v - lo) / w).floor() as usize).min(bins - 1);
                counts[k] += 1;
            }
            let bin_left: Vec<f64> = (0..bins).map(|k| lo + k as f64 * w).collect();
            Histogram {
                normal_pdf: bin_left.iter().map(|l| pdf(l + w / 2.0)).collect(),
                density: counts.iter().map(|&c| c as f64 / (n as f64 * w)).collect(),
                bin_left,
                bin_width: w,
            }
        })
        .collect())
}

pub fn write_histograms_csv(h: &[Histogram], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("dim,bin_left,density,normal_pdf\n");
    for (j, hist) in h.iter().enumerate() {
        for k in 0..hist.density.len() {
            let _ = writeln!(s, "{j},{},{},{}", hist.bin_left[k], hist.density[k], hist.normal_pdf[k]);
        }
    }
    write_text(path, &s)
}

pub fn write_matrix_csv(m: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_text(path, &s)
}

/// One value per line, in vertex order.
pub fn write_per_vertex(values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::with_capacity(values.len() * 20);
    for v in values {
        let _ = writeln!(s, "{v}");
    }
    write_text(path, &s)
}
