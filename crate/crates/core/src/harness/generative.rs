//! Sampling around an encoded mesh and walking between two encodings.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::analysis::per_vertex_rcd;
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct Extrapolation {
    pub meshes: Vec<Mesh>,
    /// Per-vertex distance to the nearest input vertex, one map per sample.
    pub rcd_maps: Vec<Vec<f64>>,
}

impl Extrapolation {
    /// Mean over samples of each map's mean.
    pub fn mean_rcd(&self) -> f64 {
        let per: Vec<f64> = self
            .rcd_maps
            .iter()
            .map(|m| m.iter().sum::<f64>() / m.len() as f64)
            .collect();
        per.iter().sum::<f64>() / per.len().max(1) as f64
    }
}

/// Decodes `count` perturbations `mu + s * eps` of the mesh's encoding,
/// with fresh standard-normal `eps` per sample.
pub fn extrapolate(model: &Model, mesh: &Mesh, s: f64, count: usize, rng: &mut impl Rng) -> Result<Extrapolation> {
    if !(s >= 0.0) {
        return Err(Error::contract(format!("noise scale {s} must be non-negative")));
    }
    let (mu, _) = model.encode(mesh.vertices())?;
    let mut meshes = Vec::with_capacity(count);
    let mut rcd_maps = Vec::with_capacity(count);
    for _ in 0..count {
        let z: Vec<f64> = mu
            .iter()
            .map(|m| {
                let e: f64 = rng.sample(StandardNormal);
                m + s * e
            })
            .collect();
        let out = mesh.with_vertices(model.decode(&z)?)?;
        rcd_maps.push(per_vertex_rcd(out.vertices(), mesh.vertices()));
        meshes.push(out);
    }
    Ok(Extrapolation { meshes, rcd_maps })
}

/// `steps + 1` decodes of `mu_a + (i / steps)(mu_b - mu_a)`.
pub fn interpolate(model: &Model, a: &Mesh, b: &Mesh, steps: usize) -> Result<Vec<Mesh>> {
    if steps == 0 {
        return Err(Error::contract("interpolation needs at least one step"));
    }
    let (mu_a, _) = model.encode(a.vertices())?;
    let (mu_b, _) = model.encode(b.vertices())?;
    (0..=steps)
        .map(|i| {
            // p + (q - p) need not round to q, so the far endpoint is taken as is
            let z: Vec<f64> = if i == steps {
                mu_b.clone()
            } else {
                let t = i as f64 / steps as f64;
                mu_a.iter().zip(&mu_b).map(|(p, q)| p + t * (q - p)).collect()
            };
            a.with_vertices(model.decode(&z)?)
        })
        .collect()
}
