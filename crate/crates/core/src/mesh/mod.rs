//! Fixed-topology triangle meshes and the topology/geometry helpers shared by
//! every other module.

mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub use io::{load_mesh, save_mesh};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

pub type Vec3 = [f64; 3];
pub type Face = [usize; 3];

/// A triangle surface. Coordinates are in centimetres.
///
/// Faces are stored behind an `Arc` so that a corpus of meshes sharing one
/// connectivity does not duplicate the face list.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Arc<Vec<Face>>,
}

impl Mesh {
    /// Builds a mesh and checks every structural invariant: indices in
    /// range, no repeated index within a face, no isolated vertex, at least
    /// one face.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<Face>) -> Result<Self> {
        let mesh = Mesh {
            vertices,
            faces: Arc::new(faces),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Builds a mesh without validation. `validate` can be called later.
    pub fn new_unchecked(vertices: Vec<Vec3>, faces: Vec<Face>) -> Self {
        Mesh {
            vertices,
            faces: Arc::new(faces),
        }
    }

    /// Same connectivity, new coordinates.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::contract(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Mesh {
            vertices,
            faces: Arc::clone(&self.faces),
        })
    }

    /// Same connectivity, coordinates from a flat row-major `N*3` slice.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != 3 * self.vertices.len() {
            return Err(Error::contract(format!(
                "expected {} coordinates, got {}",
                3 * self.vertices.len(),
                flat.len()
            )));
        }
        self.with_vertices(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.faces.is_empty() {
            return Err(Error::Validation("mesh has no faces".into()));
        }
        let mut used = vec![false; n];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::Validation(format!(
                        "face {fi} references vertex {v} but mesh has {n} vertices"
                    )));
                }
                used[v] = true;
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Validation(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        if let Some(v) = used.iter().position(|u| !u) {
            return Err(Error::Validation(format!("vertex {v} is not used by any face")));
        }
        if let Some(v) = self.vertices.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Validation(format!("vertex {v} has a non-finite coordinate")));
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Row-major `N*3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    pub fn shares_faces_with(&self, other: &Mesh) -> bool {
        Arc::ptr_eq(&self.faces, &other.faces) || self.faces == other.faces
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices() as i64 - edge_set(self).len() as i64 + self.num_faces() as i64
    }

    /// True when every undirected edge borders exactly two faces.
    pub fn is_watertight(&self) -> bool {
        edge_face_counts(self).values().all(|&c| c == 2)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.vertices.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn edge_face_counts(mesh: &Mesh) -> BTreeMap<(usize, usize), usize> {
    let mut counts = BTreeMap::new();
    for f in mesh.faces() {
        for (a, b) in face_pairs(f) {
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}

/// The three vertex pairs of a face, in winding order.
pub fn face_pairs(f: &Face) -> [(usize, usize); 3] {
    [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
}

/// Symmetric binary adjacency: `(i, j) = 1` iff `i` and `j` share a face edge.
pub fn build_adjacency(mesh: &Mesh) -> SparseMatrix {
    let n = mesh.num_vertices();
    let trip = edge_set(mesh).into_iter().flat_map(|(i, j)| [(i, j, 1.0), (j, i, 1.0)]);
    SparseMatrix::from_triplets(n, n, trip).expect("edge indices are in range")
}

/// Every undirected edge once as `(i, j)` with `i < j`, sorted.
pub fn edge_set(mesh: &Mesh) -> Vec<(usize, usize)> {
    let set: BTreeSet<(usize, usize)> = mesh
        .faces()
        .iter()
        .flat_map(face_pairs)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    set.into_iter().collect()
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unnormalized face normal (twice the area vector) for the given winding.
pub(crate) fn face_area_vector(p: &[Vec3], f: &Face) -> Vec3 {
    cross(sub(p[f[1]], p[f[0]]), sub(p[f[2]], p[f[0]]))
}

/// Unit normal per face, oriented by the right-hand rule on the stored winding.
pub fn face_unit_normals(mesh: &Mesh) -> Result<Vec<Vec3>> {
    let p = mesh.vertices();
    mesh.faces()
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let n = face_area_vector(p, f);
            let len = norm(n);
            if len <= f64::MIN_POSITIVE || !len.is_finite() {
                return Err(Error::DegenerateGeometry(format!("face {fi} has zero area")));
            }
            Ok([n[0] / len, n[1] / len, n[2] / len])
        })
        .collect()
}

/// Succeeds iff every mesh has the same vertex count and face list as the
/// first one.
pub fn validate_shared_topology(corpus: &[Mesh]) -> Result<()> {
    let first = corpus.first().ok_or_else(|| Error::contract("corpus is empty"))?;
    for (i, m) in corpus.iter().enumerate().skip(1) {
        if m.num_vertices() != first.num_vertices() {
            return Err(Error::TopologyMismatch {
                index: i,
                message: format!("{} vertices, expected {}", m.num_vertices(), first.num_vertices()),
            });
        }
        if !m.shares_faces_with(first) {
            return Err(Error::TopologyMismatch {
                index: i,
                message: "face list differs from mesh 0".into(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn triangle() -> Mesh {
        Mesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap()
    }

    pub fn two_triangles() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap()
    }

    pub fn tetrahedron() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap()
    }
}
