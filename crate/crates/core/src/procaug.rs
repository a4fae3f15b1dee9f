//! Procrustes alignment, rotation/scale range fitting and the three-branch
//! (identity / scale / rotation) online augmentation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{metric_chamfer, rms_vertex_error};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Closest the `[2][0]` entry may get to ±1 before the ZYX decomposition is
/// treated as gimbal locked.
const GIMBAL_GUARD: f64 = 1e-9;

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn frobenius_distance(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s.sqrt()
}

/// `v -> R v` applied to every row, i.e. `M R^T`.
pub fn rotate_points(points: &[Vec3], r: &Mat3) -> Vec<Vec3> {
    points
        .iter()
        .map(|p| {
            [
                r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
                r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
                r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
            ]
        })
        .collect()
}

/// `M R` (row vectors multiplied on the right).
fn right_multiply(points: &[Vec3], r: &Mat3) -> Vec<Vec3> {
    rotate_points(points, &transpose(r))
}

pub fn frobenius_norm(points: &[Vec3]) -> f64 {
    points
        .iter()
        .map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
        .sum::<f64>()
        .sqrt()
}

/// Scales `points` to unit Frobenius norm; returns the original norm.
pub fn frobenius_normalize(points: &[Vec3]) -> Result<(Vec<Vec3>, f64)> {
    let n = frobenius_norm(points);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::contract(format!("cannot normalize a matrix with norm {n}")));
    }
    Ok((points.iter().map(|p| [p[0] / n, p[1] / n, p[2] / n]).collect(), n))
}

/// Singular value decomposition of a 3x3 matrix by one-sided Jacobi:
/// returns `(U, sigma, V)` with `A = U diag(sigma) V^T`, `sigma` descending
/// and `U`, `V` orthogonal.
pub fn svd3(a: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    // Work on columns: w[j] is column j of A V.
    let mut w = [[0.0; 3]; 3];
    for j in 0..3 {
        for i in 0..3 {
            w[j][i] = a[i][j];
        }
    }
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]; // v[j] = column j of V
    for _sweep in 0..60 {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha: f64 = w[p].iter().map(|x| x * x).sum();
            let beta: f64 = w[q].iter().map(|x| x * x).sum();
            let gamma: f64 = (0..3).map(|i| w[p][i] * w[q][i]).sum();
            if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for i in 0..3 {
                let (wp, wq) = (w[p][i], w[q][i]);
                w[p][i] = c * wp - s * wq;
                w[q][i] = s * wp + c * wq;
                let (vp, vq) = (v[p][i], v[q][i]);
                v[p][i] = c * vp - s * vq;
                v[q][i] = s * vp + c * vq;
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order = [0usize, 1, 2];
    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let sigma = [norms[order[0]], norms[order[1]], norms[order[2]]];
    let mut ucols: [Vec3; 3] = [[0.0; 3]; 3];
    let mut vcols: [Vec3; 3] = [[0.0; 3]; 3];
    let scale = sigma[0].max(f64::MIN_POSITIVE);
    for (k, &j) in order.iter().enumerate() {
        vcols[k] = v[j];
        if norms[j] > 1e-13 * scale {
            ucols[k] = [w[j][0] / norms[j], w[j][1] / norms[j], w[j][2] / norms[j]];
        }
    }
    // Complete U for rank-deficient inputs.
    if sigma[0] <= 1e-13 * scale || sigma[0] == 0.0 {
        ucols[0] = [1.0, 0.0, 0.0];
    }
    if sigma[1] <= 1e-13 * scale {
        ucols[1] = any_orthogonal(ucols[0]);
    }
    if sigma[2] <= 1e-13 * scale {
        ucols[2] = crate::mesh::cross(ucols[0], ucols[1]);
    }
    let to_mat = |cols: &[Vec3; 3]| {
        let mut m = [[0.0; 3]; 3];
        for j in 0..3 {
            for i in 0..3 {
                m[i][j] = cols[j][i];
            }
        }
        m
    };
    (to_mat(&ucols), sigma, to_mat(&vcols))
}

fn any_orthogonal(u: Vec3) -> Vec3 {
    let e = if u[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let c = crate::mesh::cross(u, e);
    let n = crate::mesh::norm(c);
    [c[0] / n, c[1] / n, c[2] / n]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcrustesOptions {
    /// Flip the least significant singular direction when `U V^T` is a
    /// reflection, so the result is always a proper rotation.
    pub proper_rotation: bool,
    /// Subtract the centroid before normalizing.
    pub center: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcrustesResult {
    /// Orthogonal `Omega` minimizing `||M Omega - M_ref||_F`.
    pub rotation: Mat3,
    /// `||M Omega - M_ref||_F` on the normalized inputs.
    pub residual: f64,
    /// Frobenius norm of `M` before normalization.
    pub scale_in: f64,
}

fn centered(points: &[Vec3]) -> Vec<Vec3> {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    points.iter().map(|p| crate::mesh::sub(*p, c)).collect()
}

fn prepare(points: &[Vec3], opts: &ProcrustesOptions) -> Result<(Vec<Vec3>, f64)> {
    if opts.center {
        frobenius_normalize(&centered(points))
    } else {
        frobenius_normalize(points)
    }
}

/// Orthogonal Procrustes: `Omega = U V^T` from the SVD of `M^T M_ref`. Both
/// inputs are brought to unit Frobenius norm first (a no-op for inputs that
/// already are).
pub fn procrustes_rotation(m: &[Vec3], m_ref: &[Vec3], opts: &ProcrustesOptions) -> Result<ProcrustesResult> {
    if m.len() != m_ref.len() {
        return Err(Error::contract(format!(
            "vertex counts differ: {} vs {}",
            m.len(),
            m_ref.len()
        )));
    }
    let (a, scale_in) = prepare(m, opts)?;
    let (b, _) = prepare(m_ref, opts)?;
    let mut cross = [[0.0; 3]; 3];
    for (p, q) in a.iter().zip(&b) {
        for i in 0..3 {
            for j in 0..3 {
                cross[i][j] += p[i] * q[j];
            }
        }
    }
    let (mut u, _, v) = svd3(&cross);
    let mut omega = mat_mul(&u, &transpose(&v));
    if opts.proper_rotation && det(&omega) < 0.0 {
        for row in u.iter_mut() {
            row[2] = -row[2];
        }
        omega = mat_mul(&u, &transpose(&v));
    }
    let aligned = right_multiply(&a, &omega);
    let residual = aligned
        .iter()
        .zip(&b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    Ok(ProcrustesResult {
        rotation: omega,
        residual,
        scale_in,
    })
}

/// `Rz(gamma) Ry(xi) Rx(psi)`.
pub fn euler_zyx_to_rotation(psi: f64, xi: f64, gamma: f64) -> Mat3 {
    let (sp, cp) = psi.sin_cos();
    let (sx, cx) = xi.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    [
        [cg * cx, cg * sx * sp - sg * cp, cg * sx * cp + sg * sp],
        [sg * cx, sg * sx * sp + cg * cp, sg * sx * cp - cg * sp],
        [-sx, cx * sp, cx * cp],
    ]
}

/// Inverse of [`euler_zyx_to_rotation`] on the principal range
/// `psi, gamma in (-pi, pi]`, `xi in (-pi/2, pi/2)`.
pub fn rotation_to_euler_zyx(r: &Mat3) -> Result<(f64, f64, f64)> {
    check_proper(r)?;
    if r[2][0].abs() >= 1.0 - GIMBAL_GUARD {
        return Err(Error::GimbalLock(r[2][0].abs()));
    }
    let xi = -r[2][0].asin();
    let psi = r[2][1].atan2(r[2][2]);
    let gamma = r[1][0].atan2(r[0][0]);
    Ok((psi, xi, gamma))
}

/// Decomposition used when [`rotation_to_euler_zyx`] reports gimbal lock:
/// `psi = 0`, `xi = -/+ pi/2`, the remaining rotation about the shared axis
/// goes into `gamma`.
pub fn gimbal_fallback(r: &Mat3) -> (f64, f64, f64) {
    let xi = if r[2][0] < 0.0 {
        std::f64::consts::FRAC_PI_2
    } else {
        -std::f64::consts::FRAC_PI_2
    };
    let gamma = (-r[0][1]).atan2(r[1][1]);
    (0.0, xi, gamma)
}

fn check_proper(r: &Mat3) -> Result<()> {
    let rtr = mat_mul(&transpose(r), r);
    let orth = frobenius_distance(&rtr, &IDENTITY3);
    let d = det(r);
    if orth > 1e-6 || (d - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "not a proper rotation (det {d}, orthogonality error {orth})"
        )));
    }
    Ok(())
}

/// Which transforms an augmentation policy may draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    /// Identity, scale and rotation, each with probability 1/3.
    Procaug,
    /// Identity or scale, 1/2 each.
    ScaleOnly,
    /// Identity or rotation, 1/2 each.
    RotationOnly,
    /// Always identity.
    None,
}

impl AugmentMode {
    pub const ALL: [AugmentMode; 4] = [
        AugmentMode::Procaug,
        AugmentMode::ScaleOnly,
        AugmentMode::RotationOnly,
        AugmentMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentMode::Procaug => "procaug",
            AugmentMode::ScaleOnly => "scale-only",
            AugmentMode::RotationOnly => "rotation-only",
            AugmentMode::None => "none",
        }
    }

    pub fn branches(self) -> &'static [Branch] {
        match self {
            AugmentMode::Procaug => &[Branch::Identity, Branch::Scale, Branch::Rotation],
            AugmentMode::ScaleOnly => &[Branch::Identity, Branch::Scale],
            AugmentMode::RotationOnly => &[Branch::Identity, Branch::Rotation],
            AugmentMode::None => &[Branch::Identity],
        }
    }
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AugmentMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Identity,
    Scale,
    Rotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub psi: (f64, f64),
    pub xi: (f64, f64),
    pub gamma: (f64, f64),
    /// Target Frobenius norms.
    pub scale: (f64, f64),
    pub mode: AugmentMode,
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("psi", self.psi),
            ("xi", self.xi),
            ("gamma", self.gamma),
            ("scale", self.scale),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::contract(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if !(self.scale.0 > 0.0) {
            return Err(Error::contract("scale range must be positive"));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: AugmentMode) -> Self {
        self.mode = mode;
        self
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a branch uniformly from the policy's mode and applies it.
pub fn augment(mesh: &Mesh, policy: &AugmentPolicy, rng: &mut impl Rng) -> Mesh {
    let branches = policy.mode.branches();
    let b = branches[rng.random_range(0..branches.len())];
    augment_with(mesh, policy, b, rng)
}

/// Applies one specific branch; the rng drives only the transform parameters.
pub fn augment_with(mesh: &Mesh, policy: &AugmentPolicy, branch: Branch, rng: &mut impl Rng) -> Mesh {
    match branch {
        Branch::Identity => mesh.clone(),
        Branch::Scale => {
            let s = sample(rng, policy.scale);
            let n = mesh.frobenius_norm();
            let k = s / n;
            let v = mesh.vertices().iter().map(|p| [p[0] * k, p[1] * k, p[2] * k]).collect();
            mesh.with_vertices(v).expect("same vertex count")
        }
        Branch::Rotation => {
            let psi = sample(rng, policy.psi);
            let xi = sample(rng, policy.xi);
            let gamma = sample(rng, policy.gamma);
            let r = euler_zyx_to_rotation(psi, xi, gamma);
            mesh.with_vertices(rotate_points(mesh.vertices(), &r))
                .expect("same vertex count")
        }
    }
}

/// Index of the corpus member with the median Frobenius norm (lower median
/// for even sizes, ties by index).
pub fn median_reference(corpus: &[Mesh]) -> Result<usize> {
    if corpus.is_empty() {
        return Err(Error::contract("corpus is empty"));
    }
    let mut idx: Vec<(f64, usize)> = corpus.iter().map(|m| m.frobenius_norm()).zip(0..).collect();
    idx.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(idx[(idx.len() - 1) / 2].1)
}

/// Angle ranges from the Procrustes rotations aligning each member to
/// `reference`, scale range from the members' Frobenius norms. The returned
/// policy uses [`AugmentMode::Procaug`].
pub fn fit_policy(corpus: &[Mesh], reference: &Mesh, opts: &ProcrustesOptions) -> Result<AugmentPolicy> {
    if corpus.is_empty() {
        return Err(Error::contract("corpus is empty"));
    }
    let mut psi: Vec<f64> = Vec::new();
    let mut xi: Vec<f64> = Vec::new();
    let mut gamma: Vec<f64> = Vec::new();
    for (i, m) in corpus.iter().enumerate() {
        let r = procrustes_rotation(m.vertices(), reference.vertices(), opts)?;
        match rotation_to_euler_zyx(&r.rotation) {
            Ok((p, x, g)) => {
                psi.push(p);
                xi.push(x);
                gamma.push(g);
            }
            Err(Error::GimbalLock(_)) => {
                log::warn!("mesh {i}: gimbal lock, psi excluded from the fitted range");
                let (_, x, g) = gimbal_fallback(&r.rotation);
                xi.push(x);
                gamma.push(g);
            }
            Err(e) => {
                log::warn!("mesh {i}: excluded from angle ranges ({e})");
            }
        }
    }
    let range = |v: &[f64], name: &str| -> Result<(f64, f64)> {
        if v.is_empty() {
            return Err(Error::Validation(format!(
                "no corpus member contributed to the {name} range"
            )));
        }
        Ok((
            v.iter().copied().fold(f64::INFINITY, f64::min),
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ))
    };
    let norms: Vec<f64> = corpus.iter().map(|m| m.frobenius_norm()).collect();
    let policy = AugmentPolicy {
        psi: range(&psi, "psi")?,
        xi: range(&xi, "xi")?,
        gamma: range(&gamma, "gamma")?,
        scale: range(&norms, "scale")?,
        mode: AugmentMode::Procaug,
    };
    policy.validate()?;
    Ok(policy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentRow {
    pub mesh_id: usize,
    /// RMS per-vertex distance to the reference, raw coordinates.
    pub l2_before: f64,
    /// Same, after unit normalization and Procrustes rotation of both.
    pub l2_after: f64,
    pub chamfer_before: f64,
    pub chamfer_after: f64,
}

pub fn alignment_report(corpus: &[Mesh], reference: &Mesh, opts: &ProcrustesOptions) -> Result<Vec<AlignmentRow>> {
    crate::mesh::validate_shared_topology(corpus)?;
    let (ref_unit, _) = prepare(reference.vertices(), opts)?;
    corpus
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let r = procrustes_rotation(m.vertices(), reference.vertices(), opts)?;
            let (unit, _) = prepare(m.vertices(), opts)?;
            let aligned = right_multiply(&unit, &r.rotation);
            Ok(AlignmentRow {
                mesh_id: i,
                l2_before: rms_vertex_error(m.vertices(), reference.vertices())?,
                l2_after: rms_vertex_error(&aligned, &ref_unit)?,
                chamfer_before: metric_chamfer(m.vertices(), reference.vertices())?,
                chamfer_after: metric_chamfer(&aligned, &ref_unit)?,
            })
        })
        .collect()
}

pub fn write_alignment_csv(rows: &[AlignmentRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("mesh_id,l2_before,l2_after,chamfer_before,chamfer_after\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mesh_id, r.l2_before, r.l2_after, r.chamfer_before, r.chamfer_after
        ));
    }
    crate::util::write_text(path, &s)
}
