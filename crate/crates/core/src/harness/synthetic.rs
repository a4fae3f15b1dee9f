//! Parametric capped-tube meshes standing in for aneurysm surfaces: a
//! circular cross-section swept along a planar bent centreline, with a
//! Gaussian bulge in the radius profile.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::seeds::stream_rng;
use crate::error::{Error, Result};
use crate::mesh::{Face, Mesh, Vec3};
use crate::procaug::{euler_zyx_to_rotation, rotate_points};

/// Closed interval sampled uniformly; `min == max` gives a constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uniform {
    pub min: f64,
    pub max: f64,
}

impl Uniform {
    pub const fn new(min: f64, max: f64) -> Self {
        Uniform { min, max }
    }

    pub const fn constant(v: f64) -> Self {
        Uniform { min: v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_theta: usize,
    pub n_len: usize,
    pub corpus_size: usize,
    pub seed: u64,
    /// cm
    pub neck_radius: Uniform,
    /// cm
    pub sac_radius: Uniform,
    /// Position of the bulge along the tube, in (0, 1).
    pub sac_center: Uniform,
    /// Standard deviation of the bulge in the same parameter.
    pub sac_width: Uniform,
    /// Peak lateral offset of the centreline, cm.
    pub bend_amplitude: Uniform,
    /// Direction of the bend in the xy-plane, radians.
    pub bend_direction: Uniform,
    /// Centreline extent along z, cm.
    pub length: Uniform,
    /// Each of the three ZYX Euler angles of a whole-mesh rotation, radians.
    pub tilt: Uniform,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_theta: 16,
            n_len: 40,
            corpus_size: 64,
            seed: 0,
            neck_radius: Uniform::new(0.9, 1.2),
            sac_radius: Uniform::new(2.0, 3.5),
            sac_center: Uniform::new(0.35, 0.65),
            sac_width: Uniform::new(0.08, 0.18),
            bend_amplitude: Uniform::new(0.0, 1.5),
            bend_direction: Uniform::new(0.0, 2.0 * PI),
            length: Uniform::new(9.0, 13.0),
            tilt: Uniform::new(-0.3, 0.3),
        }
    }
}

/// Parameters of one generated member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TubeParams {
    pub neck_radius: f64,
    pub sac_radius: f64,
    pub sac_center: f64,
    pub sac_width: f64,
    pub bend_amplitude: f64,
    pub bend_direction: f64,
    pub length: f64,
    /// (psi, xi, gamma)
    pub tilt: (f64, f64, f64),
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_theta < 3 || self.n_len < 2 {
            return Err(Error::Config(format!(
                "grid {}x{} is too small (need n_theta >= 3, n_len >= 2)",
                self.n_theta, self.n_len
            )));
        }
        let ranges = [
            ("neck_radius", self.neck_radius),
            ("sac_radius", self.sac_radius),
            ("sac_center", self.sac_center),
            ("sac_width", self.sac_width),
            ("bend_amplitude", self.bend_amplitude),
            ("bend_direction", self.bend_direction),
            ("length", self.length),
            ("tilt", self.tilt),
        ];
        for (name, u) in ranges {
            if !(u.min <= u.max) || !u.min.is_finite() || !u.max.is_finite() {
                return Err(Error::Config(format!("{name}: invalid range [{}, {}]", u.min, u.max)));
            }
        }
        if !(self.neck_radius.min > 0.0) {
            return Err(Error::Config("neck_radius must be positive".into()));
        }
        if self.sac_radius.min < self.neck_radius.max {
            return Err(Error::Config("sac_radius must not be smaller than neck_radius".into()));
        }
        if !(self.sac_center.min > 0.0 && self.sac_center.max < 1.0) {
            return Err(Error::Config("sac_center must lie in (0, 1)".into()));
        }
        if !(self.sac_width.min > 0.0) || !(self.length.min > 0.0) || self.bend_amplitude.min < 0.0 {
            return Err(Error::Config(
                "sac_width and length must be positive, bend_amplitude non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.n_theta * self.n_len + 2
    }

    pub fn sample_params(&self, rng: &mut impl Rng) -> TubeParams {
        TubeParams {
            neck_radius: self.neck_radius.sample(rng),
            sac_radius: self.sac_radius.sample(rng),
            sac_center: self.sac_center.sample(rng),
            sac_width: self.sac_width.sample(rng),
            bend_amplitude: self.bend_amplitude.sample(rng),
            bend_direction: self.bend_direction.sample(rng),
            length: self.length.sample(rng),
            tilt: (self.tilt.sample(rng), self.tilt.sample(rng), self.tilt.sample(rng)),
        }
    }
}

/// Face list of the capped tube grid. Ring `j` occupies vertices
/// `j*n_theta .. (j+1)*n_theta`; the two cap centres are the last two
/// vertices. Faces wind counter-clockwise seen from outside.
pub fn tube_faces(n_theta: usize, n_len: usize) -> Vec<Face> {
    let ring = |j: usize, i: usize| j * n_theta + i % n_theta;
    let c0 = n_theta * n_len;
    let c1 = c0 + 1;
    let mut faces = Vec::with_capacity(2 * n_theta * (n_len - 1) + 2 * n_theta);
    for j in 0..n_len - 1 {
        for i in 0..n_theta {
            let (a, b) = (ring(j, i), ring(j, i + 1));
            let (c, d) = (ring(j + 1, i), ring(j + 1, i + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    for i in 0..n_theta {
        faces.push([c0, ring(0, i + 1), ring(0, i)]);
    }
    for i in 0..n_theta {
        faces.push([c1, ring(n_len - 1, i), ring(n_len - 1, i + 1)]);
    }
    faces
}

fn radius(p: &TubeParams, t: f64) -> f64 {
    let u = (t - p.sac_center) / p.sac_width;
    p.neck_radius + (p.sac_radius - p.neck_radius) * (-0.5 * u * u).exp()
}

/// Builds one member. Errors when the swept circle would fold over itself
/// (radius times centreline curvature reaching 1 anywhere).
pub fn tube_mesh(n_theta: usize, n_len: usize, p: &TubeParams) -> Result<Mesh> {
    let (sphi, cphi) = p.bend_direction.sin_cos();
    let bend = [cphi, sphi, 0.0];
    let w = [-sphi, cphi, 0.0];
    let l = p.length;
    let a = p.bend_amplitude;

    let centre = |t: f64| -> Vec3 {
        let off = a * (PI * t).sin();
        [off * bend[0], off * bend[1], (t - 0.5) * l]
    };
    let mut vertices: Vec<Vec3> = Vec::with_capacity(n_theta * n_len + 2);
    for j in 0..n_len {
        let t = j as f64 / (n_len - 1) as f64;
        // x(z) = a sin(pi t), with z = (t - 1/2) l
        let dx = a * PI / l * (PI * t).cos();
        let ddx = -a * PI * PI / (l * l) * (PI * t).sin();
        let kappa = ddx.abs() / (1.0 + dx * dx).powf(1.5);
        let r = radius(p, t);
        if kappa * r >= 1.0 {
            return Err(Error::Generation(format!(
                "radius {r:.3} cm exceeds the bend clearance {:.3} cm at t = {t:.3}",
                1.0 / kappa
            )));
        }
        let tn = (1.0 + dx * dx).sqrt();
        let tangent = [dx * bend[0] / tn, dx * bend[1] / tn, 1.0 / tn];
        let u = crate::mesh::cross(w, tangent);
        let c = centre(t);
        for i in 0..n_theta {
            let th = 2.0 * PI * i as f64 / n_theta as f64;
            let (s, co) = th.sin_cos();
            vertices.push([
                c[0] + r * (co * u[0] + s * w[0]),
                c[1] + r * (co * u[1] + s * w[1]),
                c[2] + r * (co * u[2] + s * w[2]),
            ]);
        }
    }
    vertices.push(centre(0.0));
    vertices.push(centre(1.0));
    let rot = euler_zyx_to_rotation(p.tilt.0, p.tilt.1, p.tilt.2);
    let vertices = rotate_points(&vertices, &rot);
    Mesh::new(vertices, tube_faces(n_theta, n_len))
}

/// The whole corpus. Member `i` draws its parameters from its own random
/// stream, so members do not depend on the corpus size.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Vec<Mesh>> {
    spec.validate()?;
    let faces = tube_faces(spec.n_theta, spec.n_len);
    let mut out: Vec<Mesh> = Vec::with_capacity(spec.corpus_size);
    for i in 0..spec.corpus_size {
        let mut rng = stream_rng(spec.seed, "corpus", i as u64);
        let params = spec.sample_params(&mut rng);
        let m =
            tube_mesh(spec.n_theta, spec.n_len, &params).map_err(|e| Error::Generation(format!("member {i}: {e}")))?;
        // Share one face allocation across the corpus.
        let m = match out.first() {
            Some(first) => first.with_vertices(m.vertices().to_vec())?,
            None => {
                debug_assert_eq!(m.faces(), faces.as_slice());
                m
            }
        };
        out.push(m);
    }
    Ok(out)
}
