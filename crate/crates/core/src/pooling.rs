//! Quadric-error edge contraction and the down/up-sampling matrices built
//! from it.
//!
//! Down-sampling keeps a subset of the fine vertices (`Q_d` is a 0/1
//! selection). Up-sampling places every discarded fine vertex at the
//! barycentric coordinates of its projection onto the nearest coarse
//! triangle.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::{build_adjacency, cross, dot, face_area_vector, norm, sub, Face, Mesh, Vec3};
use crate::sparse::SparseMatrix;
use crate::spectral::{estimate_lambda_max, normalized_laplacian, scale_laplacian, LambdaMax};

/// Quadric systems whose 1-norm condition estimate exceeds this fall back to
/// the edge midpoint.
const MAX_CONDITION: f64 = 1e12;

type Quadric = [[f64; 4]; 4];

fn face_quadric(p: &[Vec3], f: &Face) -> Option<Quadric> {
    let n = face_area_vector(p, f);
    let len = norm(n);
    if len == 0.0 {
        return None;
    }
    let n = [n[0] / len, n[1] / len, n[2] / len];
    let plane = [n[0], n[1], n[2], -dot(n, p[f[0]])];
    let mut q = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            q[i][j] = plane[i] * plane[j];
        }
    }
    Some(q)
}

fn add_quadric(a: &Quadric, b: &Quadric) -> Quadric {
    let mut c = *a;
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] += b[i][j];
        }
    }
    c
}

/// `[x 1] Q [x 1]^T`, clamped at zero against roundoff.
pub fn quadric_error(q: &[[f64; 4]; 4], x: Vec3) -> f64 {
    let h = [x[0], x[1], x[2], 1.0];
    let mut e = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            e += h[i] * q[i][j] * h[j];
        }
    }
    e.max(0.0)
}

fn inverse3(a: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let d = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
        }
    }
    Some(inv)
}

fn norm1(a: &[[f64; 3]; 3]) -> f64 {
    (0..3)
        .map(|j| (0..3).map(|i| a[i][j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Quadric-optimal contraction point for the pair `(a, b)`, or the midpoint
/// when the 3x3 system is ill-conditioned.
pub fn optimal_position(q: &[[f64; 4]; 4], a: Vec3, b: Vec3) -> Vec3 {
    let m = [
        [q[0][0], q[0][1], q[0][2]],
        [q[1][0], q[1][1], q[1][2]],
        [q[2][0], q[2][1], q[2][2]],
    ];
    let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
    let Some(inv) = inverse3(&m) else {
        return mid;
    };
    if norm1(&m) * norm1(&inv) > MAX_CONDITION {
        return mid;
    }
    let rhs = [-q[0][3], -q[1][3], -q[2][3]];
    let x = [0, 1, 2].map(|i| (0..3).map(|k| inv[i][k] * rhs[k]).sum::<f64>());
    if x.iter().all(|v| v.is_finite()) {
        x
    } else {
        mid
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    cost: f64,
    lo: usize,
    hi: usize,
    stamp: (u64, u64),
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Reversed so that `BinaryHeap` pops the smallest (cost, lo, hi).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.lo.cmp(&self.lo))
            .then(other.hi.cmp(&self.hi))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One accepted pair contraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contraction {
    pub survivor: usize,
    pub removed: usize,
    pub cost: f64,
    pub position: Vec3,
}

/// Output of [`qem_simplify_traced`].
#[derive(Clone, Debug)]
pub struct Simplified {
    pub mesh: Mesh,
    /// `n x N` 0/1 selection matrix.
    pub down: SparseMatrix,
    /// Fine index of each coarse vertex, ascending.
    pub retained: Vec<usize>,
    pub contractions: Vec<Contraction>,
}

struct Simplifier {
    pos: Vec<Vec3>,
    quadric: Vec<Quadric>,
    alive: Vec<bool>,
    version: Vec<u64>,
    faces: Vec<Face>,
    face_alive: Vec<bool>,
    incident: Vec<BTreeSet<usize>>,
}

enum Verdict {
    Accept,
    /// Would break manifoldness or leave a vertex without faces.
    Invalid,
    Flips,
}

impl Simplifier {
    fn new(mesh: &Mesh) -> Self {
        let n = mesh.num_vertices();
        let pos = mesh.vertices().to_vec();
        let mut quadric = vec![[[0.0; 4]; 4]; n];
        let mut incident = vec![BTreeSet::new(); n];
        for (fi, f) in mesh.faces().iter().enumerate() {
            if let Some(q) = face_quadric(&pos, f) {
                for &v in f {
                    quadric[v] = add_quadric(&quadric[v], &q);
                }
            }
            for &v in f {
                incident[v].insert(fi);
            }
        }
        Simplifier {
            pos,
            quadric,
            alive: vec![true; n],
            version: vec![0; n],
            faces: mesh.faces().to_vec(),
            face_alive: vec![true; mesh.num_faces()],
            incident,
        }
    }

    fn neighbours(&self, v: usize) -> BTreeSet<usize> {
        self.incident[v]
            .iter()
            .flat_map(|&f| self.faces[f])
            .filter(|&u| u != v)
            .collect()
    }

    fn candidate(&self, a: usize, b: usize) -> Candidate {
        let (lo, hi) = (a.min(b), a.max(b));
        let q = add_quadric(&self.quadric[lo], &self.quadric[hi]);
        let x = optimal_position(&q, self.pos[lo], self.pos[hi]);
        Candidate {
            cost: quadric_error(&q, x),
            lo,
            hi,
            stamp: (self.version[lo], self.version[hi]),
        }
    }

    fn check(&self, a: usize, b: usize, target: Vec3) -> Verdict {
        let shared: Vec<usize> = self.incident[a].intersection(&self.incident[b]).copied().collect();
        let na = self.neighbours(a);
        let nb = self.neighbours(b);
        if na.intersection(&nb).count() != shared.len() {
            return Verdict::Invalid;
        }
        // Vertices opposite the collapsing edge must keep at least one face.
        for &f in &shared {
            for &w in &self.faces[f] {
                if w != a && w != b {
                    let remaining = self.incident[w].iter().filter(|g| !shared.contains(g)).count();
                    if remaining == 0 {
                        return Verdict::Invalid;
                    }
                }
            }
        }
        if self.alive.iter().filter(|&&x| x).count() <= 4 {
            return Verdict::Invalid;
        }
        for &v in &[a, b] {
            for &f in &self.incident[v] {
                if shared.contains(&f) {
                    continue;
                }
                let face = self.faces[f];
                let before = face_area_vector(&self.pos, &face);
                let moved: [Vec3; 3] = face.map(|u| if u == a || u == b { target } else { self.pos[u] });
                let after = cross(sub(moved[1], moved[0]), sub(moved[2], moved[0]));
                let scale = dot(before, before).max(f64::MIN_POSITIVE);
                if dot(before, after) <= 1e-12 * scale {
                    return Verdict::Flips;
                }
            }
        }
        Verdict::Accept
    }

    fn contract(&mut self, c: &Candidate, target: Vec3) -> Contraction {
        let (a, b) = (c.lo, c.hi);
        let da = norm(sub(self.pos[a], target));
        let db = norm(sub(self.pos[b], target));
        let (s, r) = if db < da { (b, a) } else { (a, b) };
        let shared: Vec<usize> = self.incident[a].intersection(&self.incident[b]).copied().collect();
        for f in shared {
            self.face_alive[f] = false;
            for &w in &self.faces[f] {
                self.incident[w].remove(&f);
            }
        }
        let moved: Vec<usize> = self.incident[r].iter().copied().collect();
        for f in moved {
            for w in self.faces[f].iter_mut() {
                if *w == r {
                    *w = s;
                }
            }
            self.incident[s].insert(f);
        }
        self.incident[r].clear();
        self.alive[r] = false;
        self.quadric[s] = add_quadric(&self.quadric[a], &self.quadric[b]);
        self.pos[s] = target;
        self.version[s] += 1;
        self.version[r] += 1;
        Contraction {
            survivor: s,
            removed: r,
            cost: c.cost,
            position: target,
        }
    }
}

/// Contracts edges in order of increasing quadric cost (ties by lower, then
/// higher vertex index) until `target` vertices remain. Contractions that
/// would flip a face are deferred with infinite cost and only taken once no
/// finite-cost edge is left.
pub fn qem_simplify_traced(mesh: &Mesh, target: usize) -> Result<Simplified> {
    let n = mesh.num_vertices();
    if target < 4 {
        return Err(Error::contract(format!("target vertex count {target} is below 4")));
    }
    if target > n {
        return Err(Error::contract(format!(
            "target vertex count {target} exceeds the mesh's {n} vertices"
        )));
    }
    let mut st = Simplifier::new(mesh);
    let mut heap = BinaryHeap::new();
    for (i, j) in crate::mesh::edge_set(mesh) {
        heap.push(st.candidate(i, j));
    }
    let mut remaining = n;
    let mut contractions = Vec::new();
    while remaining > target {
        let Some(c) = heap.pop() else {
            return Err(Error::Simplification {
                achieved: remaining,
                target,
            });
        };
        if !st.alive[c.lo] || !st.alive[c.hi] || c.stamp != (st.version[c.lo], st.version[c.hi]) {
            continue;
        }
        if !st.incident[c.lo].iter().any(|&f| st.faces[f].contains(&c.hi)) {
            continue;
        }
        let q = add_quadric(&st.quadric[c.lo], &st.quadric[c.hi]);
        let x = optimal_position(&q, st.pos[c.lo], st.pos[c.hi]);
        match st.check(c.lo, c.hi, x) {
            Verdict::Invalid => continue,
            Verdict::Flips if c.cost.is_finite() => {
                heap.push(Candidate {
                    cost: f64::INFINITY,
                    ..c
                });
                continue;
            }
            Verdict::Flips => {
                log::debug!("accepting face-flipping contraction ({}, {})", c.lo, c.hi);
            }
            Verdict::Accept => {}
        }
        let done = st.contract(&c, x);
        contractions.push(done);
        remaining -= 1;
        let s = done.survivor;
        for u in st.neighbours(s) {
            heap.push(st.candidate(s, u));
        }
    }

    let retained: Vec<usize> = (0..n).filter(|&v| st.alive[v]).collect();
    let mut new_index = vec![usize::MAX; n];
    for (k, &v) in retained.iter().enumerate() {
        new_index[v] = k;
    }
    let faces: Vec<Face> = st
        .faces
        .iter()
        .zip(&st.face_alive)
        .filter(|(_, &a)| a)
        .map(|(f, _)| f.map(|v| new_index[v]))
        .collect();
    let vertices: Vec<Vec3> = retained.iter().map(|&v| mesh.vertices()[v]).collect();
    let coarse = Mesh::new(vertices, faces)?;
    let down = SparseMatrix::from_triplets(
        retained.len(),
        n,
        retained.iter().enumerate().map(|(k, &v)| (k, v, 1.0)),
    )?;
    Ok(Simplified {
        mesh: coarse,
        down,
        retained,
        contractions,
    })
}

/// Simplified mesh and its down-sampling matrix.
pub fn qem_simplify(mesh: &Mesh, target: usize) -> Result<(Mesh, SparseMatrix)> {
    let s = qem_simplify_traced(mesh, target)?;
    Ok((s.mesh, s.down))
}

/// Closest point of triangle `(a, b, c)` to `p` as barycentric weights.
pub fn closest_point_barycentric(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> [f64; 3] {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = va + vb + vc;
    if !(denom.abs() > 0.0) {
        // Degenerate triangle: fall back to the nearest vertex.
        let d = [a, b, c].map(|q| norm(sub(p, q)));
        let k = (0..3).fold(0, |best, i| if d[i] < d[best] { i } else { best });
        let mut w = [0.0; 3];
        w[k] = 1.0;
        return w;
    }
    let v = vb / denom;
    let w = vc / denom;
    [1.0 - v - w, v, w]
}

/// Nearest coarse triangle (lowest index on ties) and the barycentric weights
/// of the projection onto it.
pub fn project_onto_surface(p: Vec3, coarse: &Mesh) -> (usize, [f64; 3]) {
    let v = coarse.vertices();
    let mut best = (f64::INFINITY, 0usize, [1.0, 0.0, 0.0]);
    for (fi, f) in coarse.faces().iter().enumerate() {
        let w = closest_point_barycentric(p, v[f[0]], v[f[1]], v[f[2]]);
        let q = [0, 1, 2].map(|k| w[0] * v[f[0]][k] + w[1] * v[f[1]][k] + w[2] * v[f[2]][k]);
        let d = dot(sub(p, q), sub(p, q));
        if d < best.0 {
            best = (d, fi, w);
        }
    }
    (best.1, best.2)
}

/// `N x n` up-sampling matrix: retained vertices copy their coarse vertex,
/// discarded ones interpolate the nearest coarse triangle.
pub fn build_upsampling(fine: &Mesh, coarse: &Mesh, down: &SparseMatrix) -> Result<SparseMatrix> {
    if coarse.num_faces() == 0 {
        return Err(Error::contract("coarse mesh has no faces"));
    }
    let (n, big_n) = (coarse.num_vertices(), fine.num_vertices());
    if down.rows() != n || down.cols() != big_n {
        return Err(Error::contract(format!(
            "Q_d is {}x{}, expected {n}x{big_n}",
            down.rows(),
            down.cols()
        )));
    }
    let mut coarse_of = vec![None; big_n];
    for (k, f, v) in down.entries() {
        if v != 1.0 || coarse_of[f].is_some() {
            return Err(Error::contract("Q_d is not a vertex selection matrix"));
        }
        coarse_of[f] = Some(k);
    }
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    for q in 0..big_n {
        match coarse_of[q] {
            Some(k) => trip.push((q, k, 1.0)),
            None => {
                let (fi, w) = project_onto_surface(fine.vertices()[q], coarse);
                let f = coarse.faces()[fi];
                for i in 0..3 {
                    trip.push((q, f[i], w[i]));
                }
            }
        }
    }
    SparseMatrix::from_triplets(big_n, n, trip)
}

/// One fine-to-coarse step.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingLevel {
    pub mesh_fine: Mesh,
    pub mesh_coarse: Mesh,
    pub down: Arc<SparseMatrix>,
    pub up: Arc<SparseMatrix>,
}

impl PoolingLevel {
    pub fn fine_count(&self) -> usize {
        self.mesh_fine.num_vertices()
    }

    pub fn coarse_count(&self) -> usize {
        self.mesh_coarse.num_vertices()
    }
}

/// `Q_d` times an `N x F` signal.
pub fn apply_down(level: &PoolingLevel, tape: &mut Tape, signal: Var) -> Result<Var> {
    apply(&level.down, tape, signal)
}

/// `Q_u` times an `n x F` signal.
pub fn apply_up(level: &PoolingLevel, tape: &mut Tape, signal: Var) -> Result<Var> {
    apply(&level.up, tape, signal)
}

fn apply(m: &Arc<SparseMatrix>, tape: &mut Tape, signal: Var) -> Result<Var> {
    let (r, _) = tape.shape(signal);
    if r != m.cols() {
        return Err(Error::contract(format!(
            "signal has {r} rows, pooling matrix expects {}",
            m.cols()
        )));
    }
    Ok(tape.spmm(m, signal))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingHierarchy {
    pub levels: Vec<PoolingLevel>,
    pub factor: f64,
    /// Scaled Laplacians `2L/lambda_max - I`, one per mesh from finest to
    /// coarsest (`levels.len() + 1` entries).
    pub laplacians: Vec<Arc<SparseMatrix>>,
    pub lambda_max: Vec<LambdaMax>,
}

/// Vertex counts `c_{l+1} = max(floor(c_l / factor), 4)`.
pub fn level_counts(n: usize, num_levels: usize, factor: f64) -> Vec<usize> {
    let mut c = vec![n];
    for _ in 0..num_levels {
        let last = *c.last().unwrap();
        c.push(((last as f64 / factor).floor() as usize).max(4));
    }
    c
}

fn strictly_reducing(n: usize, num_levels: usize, factor: f64) -> bool {
    level_counts(n, num_levels, factor).windows(2).all(|w| w[1] < w[0])
}

pub fn scaled_laplacian_of(mesh: &Mesh) -> Result<(SparseMatrix, LambdaMax)> {
    let l = normalized_laplacian(&build_adjacency(mesh))?;
    let lm = estimate_lambda_max(&l, 1e-6, 10_000);
    Ok((scale_laplacian(&l, lm.value)?, lm))
}

impl PoolingHierarchy {
    /// Reassembles a hierarchy from stored levels, recomputing Laplacians.
    pub fn from_levels(levels: Vec<PoolingLevel>, factor: f64, root: &Mesh) -> Result<Self> {
        let mut laplacians = Vec::new();
        let mut lambda_max = Vec::new();
        let meshes = std::iter::once(root).chain(levels.iter().map(|l| &l.mesh_coarse));
        for m in meshes {
            let (s, lm) = scaled_laplacian_of(m)?;
            laplacians.push(Arc::new(s));
            lambda_max.push(lm);
        }
        Ok(PoolingHierarchy {
            levels,
            factor,
            laplacians,
            lambda_max,
        })
    }

    pub fn vertex_counts(&self) -> Vec<usize> {
        match self.levels.first() {
            None => vec![],
            Some(l) => std::iter::once(l.fine_count())
                .chain(self.levels.iter().map(|l| l.coarse_count()))
                .collect(),
        }
    }
}

/// `num_levels` successive simplifications by `factor`. Every level must
/// strictly reduce the vertex count after the floor-at-4 clamp.
pub fn build_hierarchy(mesh: &Mesh, num_levels: usize, factor: f64) -> Result<PoolingHierarchy> {
    if !(factor > 1.0) {
        return Err(Error::contract(format!("pooling factor {factor} must exceed 1")));
    }
    let n = mesh.num_vertices();
    if num_levels > 0 && !strictly_reducing(n, num_levels, factor) {
        let min_n = (5..).find(|&m| strictly_reducing(m, num_levels, factor)).unwrap();
        return Err(Error::contract(format!(
            "{n} vertices cannot be pooled {num_levels} times by {factor}; need at least {min_n}"
        )));
    }
    let counts = level_counts(n, num_levels, factor);
    let mut levels = Vec::with_capacity(num_levels);
    let mut fine = mesh.clone();
    for &target in &counts[1..] {
        let (coarse, down) = qem_simplify(&fine, target)?;
        let up = build_upsampling(&fine, &coarse, &down)?;
        levels.push(PoolingLevel {
            mesh_fine: fine,
            mesh_coarse: coarse.clone(),
            down: Arc::new(down),
            up: Arc::new(up),
        });
        fine = coarse;
    }
    PoolingHierarchy::from_levels(levels, factor, mesh)
}

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix3, Vector3};

    use super::*;
    use crate::autodiff::Tensor;
    use crate::harness::synthetic::{tube_faces, tube_mesh, TubeParams};
    use crate::mesh::fixtures::two_triangles;

    fn tube(n_theta: usize, n_len: usize) -> Mesh {
        tube_mesh(
            n_theta,
            n_len,
            &TubeParams {
                neck_radius: 1.0,
                sac_radius: 1.8,
                sac_center: 0.4,
                sac_width: 0.15,
                bend_amplitude: 0.6,
                bend_direction: 0.3,
                length: 8.0,
                tilt: (0.0, 0.0, 0.0),
            },
        )
        .unwrap()
    }

    #[test]
    fn at_target_is_identity() {
        let m = tube(8, 10);
        let (c, d) = qem_simplify(&m, 82).unwrap();
        assert_eq!(c, m);
        assert_eq!(d, SparseMatrix::identity(82));
    }

    /// Independent cost evaluation: quadrics summed per vertex from unit face
    /// planes, optimum from a dense solve, midpoint when singular.
    fn oracle_cost(mesh: &Mesh, a: usize, b: usize) -> f64 {
        let p = mesh.vertices();
        let mut q = [nalgebra::Matrix4::<f64>::zeros(), nalgebra::Matrix4::zeros()];
        for f in mesh.faces() {
            let n = Vector3::from(face_area_vector(p, f)).normalize();
            let d = -n.dot(&Vector3::from(p[f[0]]));
            let h = nalgebra::Vector4::new(n.x, n.y, n.z, d);
            for (k, v) in [a, b].iter().enumerate() {
                if f.contains(v) {
                    q[k] += h * h.transpose();
                }
            }
        }
        let qs = q[0] + q[1];
        let m3: Matrix3<f64> = qs.fixed_view::<3, 3>(0, 0).into();
        let svd = m3.svd(false, false);
        let cond = svd.singular_values.max() / svd.singular_values.min();
        let x = if cond.is_finite() && cond < 1e11 {
            m3.try_inverse().unwrap() * (-qs.fixed_view::<3, 1>(0, 3))
        } else {
            (Vector3::from(p[a]) + Vector3::from(p[b])) / 2.0
        };
        let h = nalgebra::Vector4::new(x.x, x.y, x.z, 1.0);
        (h.transpose() * qs * h)[0].max(0.0)
    }

    #[test]
    fn octahedron_contracts_cheapest_edge() {
        // Every octahedron edge passes the link condition, so the first
        // contraction must be the globally cheapest edge.
        let v = vec![
            [1.0, 0.05, 0.0],
            [-1.0, 0.0, 0.1],
            [0.0, 1.2, 0.0],
            [0.1, -1.0, 0.0],
            [0.0, 0.0, 0.8],
            [0.0, 0.1, -1.1],
        ];
        let f = vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        let m = Mesh::new(v, f).unwrap();
        let s = qem_simplify_traced(&m, 5).unwrap();
        assert_eq!(s.contractions.len(), 1);
        assert_eq!(s.mesh.num_faces(), 6);
        let mut best = (f64::INFINITY, (0, 0));
        for a in 0..6 {
            for b in a + 1..6 {
                if a / 2 == b / 2 {
                    continue; // antipodal, not an edge
                }
                let c = oracle_cost(&m, a, b);
                if c < best.0 - 1e-12 {
                    best = (c, (a, b));
                }
            }
        }
        let c = s.contractions[0];
        let chosen = (c.survivor.min(c.removed), c.survivor.max(c.removed));
        assert_eq!(chosen, best.1);
        assert!((c.cost - best.0).abs() < 1e-9);
    }

    #[test]
    fn tube_simplification_keeps_genus() {
        let m = tube(8, 10);
        let (c, d) = qem_simplify(&m, 20).unwrap();
        assert_eq!(c.num_vertices(), 20);
        assert!(c.is_watertight());
        assert_eq!(c.euler_characteristic(), 2);
        assert_eq!((d.rows(), d.cols()), (20, 82));
    }

    #[test]
    fn simplification_is_deterministic() {
        let m = tube(10, 12);
        let a = qem_simplify_traced(&m, 30).unwrap();
        let b = qem_simplify_traced(&m, 30).unwrap();
        assert_eq!(a.mesh, b.mesh);
        assert_eq!(a.contractions, b.contractions);
    }

    #[test]
    fn selection_matrix_invariants() {
        let m = tube(8, 10);
        let (_, d) = qem_simplify(&m, 20).unwrap();
        let mut col_hits = vec![0; d.cols()];
        for r in 0..d.rows() {
            let row: Vec<_> = d.row(r).collect();
            assert_eq!(row.len(), 1);
            assert_eq!(row[0].1, 1.0);
            col_hits[row[0].0] += 1;
        }
        assert!(col_hits.iter().all(|&h| h <= 1));
    }

    #[test]
    fn projection_examples() {
        let tri = Mesh::new(vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let (_, w) = project_onto_surface([1.0, 1.0, 0.0], &tri);
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-9);
        }
        let (_, w) = project_onto_surface([3.0, 0.0, 0.0], &tri);
        assert_eq!(w, [0.0, 1.0, 0.0]);

        let fan = two_triangles();
        // vertex 1 is a corner of both faces: lowest face index wins
        let (f, w) = project_onto_surface(fan.vertices()[1], &fan);
        assert_eq!(f, 0);
        assert_eq!(w, [0.0, 1.0, 0.0]);
    }

    fn point_triangle_distance_bruteforce(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
        // dense sampling of the triangle plus exact vertex/edge candidates
        let mut best = f64::INFINITY;
        let steps = 400;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let (u, v) = (i as f64 / steps as f64, j as f64 / steps as f64);
                let q = [0, 1, 2].map(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]));
                best = best.min(norm(sub(p, q)));
            }
        }
        best
    }

    #[test]
    fn projection_residual_matches_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        let coarse = qem_simplify(&tube(8, 6), 12).unwrap().0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let p = [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-4.0..4.0),
            ];
            let (fi, w) = project_onto_surface(p, &coarse);
            let f = coarse.faces()[fi];
            let v = coarse.vertices();
            let q = [0, 1, 2].map(|k| w[0] * v[f[0]][k] + w[1] * v[f[1]][k] + w[2] * v[f[2]][k]);
            let got = norm(sub(p, q));
            let brute = coarse
                .faces()
                .iter()
                .map(|g| point_triangle_distance_bruteforce(p, v[g[0]], v[g[1]], v[g[2]]))
                .fold(f64::INFINITY, f64::min);
            assert!(got <= brute + 1e-12);
            assert!(brute - got < 0.05, "{got} vs {brute}");
        }
    }

    #[test]
    fn upsampling_invariants() {
        let m = tube(8, 10);
        let (c, d) = qem_simplify(&m, 20).unwrap();
        let u = build_upsampling(&m, &c, &d).unwrap();
        for s in u.row_sums() {
            assert!((s - 1.0).abs() < 1e-9);
        }
        for (_, _, v) in u.entries() {
            assert!(v >= -1e-9);
        }
        let du = d.matmul(&u).unwrap();
        assert_eq!(du, SparseMatrix::identity(20));
    }

    #[test]
    fn planar_reconstruction_is_exact() {
        // Square grid in z = 0 whose discarded vertices lie on the coarse
        // surface.
        let k = 5;
        let mut verts = Vec::new();
        for j in 0..k {
            for i in 0..k {
                verts.push([i as f64, j as f64, 0.0]);
            }
        }
        let mut faces = Vec::new();
        for j in 0..k - 1 {
            for i in 0..k - 1 {
                let a = j * k + i;
                faces.push([a, a + 1, a + k + 1]);
                faces.push([a, a + k + 1, a + k]);
            }
        }
        let fine = Mesh::new(verts, faces).unwrap();
        let corners = [0, k - 1, k * k - 1, k * (k - 1)];
        let coarse = Mesh::new(
            corners.iter().map(|&v| fine.vertices()[v]).collect(),
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let mut sorted = corners;
        sorted.sort();
        let d = SparseMatrix::from_triplets(4, k * k, corners.iter().enumerate().map(|(r, &c)| (r, c, 1.0))).unwrap();
        let u = build_upsampling(&fine, &coarse, &d).unwrap();
        let x: Vec<f64> = fine.flat();
        let back = u.mul_dense(&d.mul_dense(&x, 3), 3);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn level_counts_follow_floor_and_clamp() {
        assert_eq!(level_counts(640, 4, 4.0), vec![640, 160, 40, 10, 4]);
        assert_eq!(level_counts(642, 4, 4.0), vec![642, 160, 40, 10, 4]);
    }

    #[test]
    fn hierarchy_on_tube() {
        let m = tube(16, 40);
        let h = build_hierarchy(&m, 4, 4.0).unwrap();
        assert_eq!(h.vertex_counts(), vec![642, 160, 40, 10, 4]);
        assert_eq!(h.laplacians.len(), 5);
        for (i, l) in h.levels.iter().enumerate() {
            if i + 1 < h.levels.len() {
                assert_eq!(l.mesh_coarse, h.levels[i + 1].mesh_fine);
            }
            assert!(build_adjacency(&l.mesh_coarse).is_symmetric(0.0));
            let du = l.down.matmul(&l.up).unwrap();
            assert_eq!(du, SparseMatrix::identity(l.coarse_count()));
        }
        assert_eq!(build_hierarchy(&m, 4, 4.0).unwrap(), h);
    }

    #[test]
    fn zero_levels_and_too_small_mesh() {
        let m = tube(8, 10);
        assert!(build_hierarchy(&m, 0, 4.0).unwrap().levels.is_empty());
        match build_hierarchy(&m, 4, 4.0) {
            Err(Error::Contract(msg)) => assert!(msg.contains("need at least")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn apply_down_up_on_ones() {
        let m = tube(8, 10);
        let h = build_hierarchy(&m, 1, 4.0).unwrap();
        let l = &h.levels[0];
        let mut t = Tape::new();
        let ones = t.constant(Tensor::filled(l.coarse_count(), 2, 1.0));
        let up = apply_up(l, &mut t, ones).unwrap();
        assert!(t.value(up).data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let bad = t.constant(Tensor::zeros(3, 2));
        assert!(apply_down(l, &mut t, bad).is_err());
        let _ = tube_faces(3, 2);
    }
}
