//! The graph-convolutional beta-VAE: parameters, encoder/decoder, the
//! reconstruction and KL losses, and the Adam training loop.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{metric_e, metric_rcd, LatentModel};
use crate::autodiff::{nearest_assignments, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::{face_pairs, face_unit_normals, Face, Mesh, Vec3};
use crate::pooling::{apply_down, apply_up, PoolingHierarchy};
use crate::procaug::{augment, AugmentPolicy};
use crate::spectral::{cheb_forward, glorot};
use crate::util::write_text;

/// Guard added to edge lengths in the normal loss.
const EDGE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub cheb_order: usize,
    /// Encoder widths, input first. One pooling level per step.
    pub channels: Vec<usize>,
    pub pooling_factor: f64,
    pub hidden_dense_width: usize,
    pub cheb_bias: bool,
    pub alpha_vertex: f64,
    pub alpha_chamfer: f64,
    pub alpha_edge: f64,
    pub alpha_normal: f64,
    /// Sum signed edge/normal inner products instead of their magnitudes.
    pub signed_normal_loss: bool,
    /// `log sigma^2` is clamped to `[-logvar_clamp, logvar_clamp]`.
    pub logvar_clamp: f64,
    /// Encode offsets from the hierarchy's root mesh and add it back to the
    /// decoder output. Off: the network sees raw coordinates.
    pub template_offset: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 8,
            beta: 1e-3,
            cheb_order: 6,
            channels: vec![3, 32, 32, 32, 64],
            pooling_factor: 4.0,
            hidden_dense_width: 64,
            cheb_bias: true,
            alpha_vertex: 1.0,
            alpha_chamfer: 1.0,
            alpha_edge: 0.1,
            alpha_normal: 0.1,
            signed_normal_loss: false,
            logvar_clamp: 10.0,
            template_offset: false,
        }
    }
}

impl ModelConfig {
    pub fn num_levels(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.first() != Some(&3) {
            return Err(Error::contract("channels must start at 3 (xyz input)"));
        }
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::contract("need at least one convolution with non-zero widths"));
        }
        if self.latent_dim == 0 || self.cheb_order == 0 || self.hidden_dense_width == 0 {
            return Err(Error::contract(
                "latent_dim, cheb_order and hidden_dense_width must be positive",
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::contract("beta must be non-negative"));
        }
        for a in [
            self.alpha_vertex,
            self.alpha_chamfer,
            self.alpha_edge,
            self.alpha_normal,
        ] {
            if !(a >= 0.0) {
                return Err(Error::contract("loss weights must be non-negative"));
            }
        }
        if !(self.logvar_clamp > 0.0) {
            return Err(Error::contract("logvar_clamp must be positive"));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

type Dense = (usize, usize);
type Conv = (usize, Option<usize>);

/// Indices of each layer's tensors inside [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc: Vec<Conv>,
    enc_dense: Dense,
    mu: Dense,
    logvar: Dense,
    dec_dense: Dense,
    dec_features: Dense,
    dec: Vec<Conv>,
    proj: Dense,
    shapes: Vec<(String, usize, usize)>,
}

impl Layout {
    fn new(cfg: &ModelConfig, coarsest: usize) -> Layout {
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let mut push = |name: String, r: usize, c: usize| {
            shapes.push((name, r, c));
            shapes.len() - 1
        };
        let k = cfg.cheb_order;
        let ch = &cfg.channels;
        let levels = cfg.num_levels();
        let mut enc = Vec::new();
        for l in 0..levels {
            let t = push(format!("enc{l}.theta"), k * ch[l], ch[l + 1]);
            let b = cfg.cheb_bias.then(|| push(format!("enc{l}.bias"), 1, ch[l + 1]));
            enc.push((t, b));
        }
        let h = cfg.hidden_dense_width;
        let d = cfg.latent_dim;
        let flat = coarsest * ch[levels];
        let enc_dense = (push("enc_dense.w".into(), flat, h), push("enc_dense.b".into(), 1, h));
        let mu = (push("mu.w".into(), h, d), push("mu.b".into(), 1, d));
        let logvar = (push("logvar.w".into(), h, d), push("logvar.b".into(), 1, d));
        let dec_dense = (push("dec_dense.w".into(), d, h), push("dec_dense.b".into(), 1, h));
        let dec_features = (
            push("dec_features.w".into(), h, flat),
            push("dec_features.b".into(), 1, flat),
        );
        // Mirror of the encoder widths; the last convolution keeps the
        // width of the first hidden layer and a linear map gives xyz.
        let mut widths: Vec<usize> = ch[1..].iter().rev().copied().collect();
        widths.push(ch[1]);
        let mut dec = Vec::new();
        for j in 0..levels {
            let t = push(format!("dec{j}.theta"), k * widths[j], widths[j + 1]);
            let b = cfg.cheb_bias.then(|| push(format!("dec{j}.bias"), 1, widths[j + 1]));
            dec.push((t, b));
        }
        let proj = (push("proj.w".into(), ch[1], 3), push("proj.b".into(), 1, 3));
        Layout {
            enc,
            enc_dense,
            mu,
            logvar,
            dec_dense,
            dec_features,
            dec,
            proj,
            shapes,
        }
    }
}

/// Face-edge incidences used by the edge and normal losses: row `3f + k` is
/// the `k`-th vertex pair of face `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossContext {
    pub faces: Arc<Vec<Face>>,
    pub pair_i: Arc<Vec<usize>>,
    pub pair_j: Arc<Vec<usize>>,
}

impl LossContext {
    pub fn new(faces: &[Face]) -> Self {
        let (i, j): (Vec<usize>, Vec<usize>) = faces.iter().flat_map(face_pairs).unzip();
        LossContext {
            faces: Arc::new(faces.to_vec()),
            pair_i: Arc::new(i),
            pair_j: Arc::new(j),
        }
    }
}

/// Ground truth for one reconstruction: vertices and unit face normals.
#[derive(Clone, Debug)]
pub struct LossTarget {
    pub vertices: Tensor,
    pub normals: Vec<Vec3>,
}

impl LossTarget {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        Ok(LossTarget {
            vertices: Tensor::from_rows(mesh.vertices()),
            normals: face_unit_normals(mesh)?,
        })
    }
}

fn check_same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// `sum |M - M*|`.
pub fn loss_vertex(tape: &mut Tape, m: Var, m_star: Var) -> Result<Var> {
    check_same_shape(tape, m, m_star, "loss_vertex")?;
    let d = tape.sub(m, m_star);
    let a = tape.abs(d);
    Ok(tape.sum(a))
}

/// Symmetric squared-distance Chamfer loss between the rows of `m` and
/// `m_star`. Nearest-neighbour assignments are held constant.
pub fn loss_chamfer(tape: &mut Tape, m: Var, m_star: Var) -> Result<Var> {
    let (ra, ca) = tape.shape(m);
    let (rb, cb) = tape.shape(m_star);
    if ra == 0 || rb == 0 {
        return Err(Error::contract("loss_chamfer: empty point set"));
    }
    if ca != cb {
        return Err(Error::contract("loss_chamfer: point dimensions differ"));
    }
    let (a_to_b, b_to_a) = nearest_assignments(tape.value(m), tape.value(m_star));
    let nb = tape.gather_rows(m_star, Arc::new(a_to_b));
    let d1 = tape.sub(m, nb);
    let s1 = tape.square(d1);
    let t1 = tape.sum(s1);
    let na = tape.gather_rows(m, Arc::new(b_to_a));
    let d2 = tape.sub(na, m_star);
    let s2 = tape.square(d2);
    let t2 = tape.sum(s2);
    Ok(tape.add(t1, t2))
}

fn edge_vectors(tape: &mut Tape, m: Var, ctx: &LossContext) -> Var {
    let xi = tape.gather_rows(m, Arc::clone(&ctx.pair_i));
    let xj = tape.gather_rows(m, Arc::clone(&ctx.pair_j));
    tape.sub(xi, xj)
}

/// `sum_f sum_{(i,j) in f} |<(x_i - x_j)/||x_i - x_j||, n*_f>|`, or the
/// signed sum when `signed` is set.
pub fn loss_normal(tape: &mut Tape, m: Var, ctx: &LossContext, gt_normals: &[Vec3], signed: bool) -> Result<Var> {
    if gt_normals.len() != ctx.faces.len() {
        return Err(Error::contract(format!(
            "{} normals for {} faces",
            gt_normals.len(),
            ctx.faces.len()
        )));
    }
    let expanded = Tensor::new(
        3 * gt_normals.len(),
        3,
        gt_normals.iter().flat_map(|n| [*n, *n, *n]).flatten().collect(),
    );
    let normals = tape.constant(expanded);
    let e = edge_vectors(tape, m, ctx);
    let len = tape.row_norm(e);
    let len = tape.add_const(len, EDGE_EPS);
    let inv = tape.recip_positive(len);
    let en = tape.mul(e, normals);
    let dots = tape.row_sum(en);
    let cos = tape.mul(dots, inv);
    let terms = if signed { cos } else { tape.abs(cos) };
    Ok(tape.sum(terms))
}

/// `sum_f sum_{(i,j) in f} | ||x_i - x_j|| - ||x*_i - x*_j|| |`.
pub fn loss_edge(tape: &mut Tape, m: Var, m_star: Var, ctx: &LossContext) -> Result<Var> {
    check_same_shape(tape, m, m_star, "loss_edge")?;
    let target: Vec<f64> = {
        let t = tape.value(m_star);
        ctx.pair_i
            .iter()
            .zip(ctx.pair_j.iter())
            .map(|(&i, &j)| {
                let (a, b) = (t.row(i), t.row(j));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .collect()
    };
    let target = tape.constant(Tensor::column(target));
    let e = edge_vectors(tape, m, ctx);
    let len = tape.row_norm(e);
    let d = tape.sub(len, target);
    let a = tape.abs(d);
    Ok(tape.sum(a))
}

/// `-(beta/2) sum(1 + log sigma^2 - mu^2 - sigma^2)`.
pub fn loss_kl(tape: &mut Tape, mu: Var, log_var: Var, beta: f64) -> Result<Var> {
    check_same_shape(tape, mu, log_var, "loss_kl")?;
    let m2 = tape.square(mu);
    let s2 = tape.exp(log_var);
    let a = tape.add_const(log_var, 1.0);
    let b = tape.sub(a, m2);
    let c = tape.sub(b, s2);
    let s = tape.sum(c);
    Ok(tape.scale(s, -beta / 2.0))
}

/// Individual loss terms (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub vertex: Var,
    pub chamfer: Var,
    pub edge: Var,
    pub normal: Var,
    pub kl: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub vertex: f64,
    pub chamfer: f64,
    pub edge: f64,
    pub normal: f64,
    pub kl: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.value(self.total).item(),
            vertex: tape.value(self.vertex).item(),
            chamfer: tape.value(self.chamfer).item(),
            edge: tape.value(self.edge).item(),
            normal: tape.value(self.normal).item(),
            kl: tape.value(self.kl).item(),
        }
    }

    /// First non-finite term, by name.
    pub fn check_finite(&self, tape: &Tape) -> Result<()> {
        for (name, v) in [
            ("vertex", self.vertex),
            ("chamfer", self.chamfer),
            ("edge", self.edge),
            ("normal", self.normal),
            ("kl", self.kl),
            ("total", self.total),
        ] {
            if !tape.value(v).item().is_finite() {
                return Err(Error::NonFinite { term: name.into() });
            }
        }
        Ok(())
    }
}

/// `KL + a_v L_vertex + a_c L_chamfer + a_e L_edge + a_n L_normal`.
pub fn total_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    ctx: &LossContext,
    output: Var,
    target: &LossTarget,
    mu: Var,
    log_var: Var,
) -> Result<LossTerms> {
    let m_star = tape.constant(target.vertices.clone());
    let vertex = loss_vertex(tape, output, m_star)?;
    let chamfer = loss_chamfer(tape, output, m_star)?;
    let edge = loss_edge(tape, output, m_star, ctx)?;
    let normal = loss_normal(tape, output, ctx, &target.normals, cfg.signed_normal_loss)?;
    let kl = loss_kl(tape, mu, log_var, cfg.beta)?;
    let mut total = kl;
    for (w, t) in [
        (cfg.alpha_vertex, vertex),
        (cfg.alpha_chamfer, chamfer),
        (cfg.alpha_edge, edge),
        (cfg.alpha_normal, normal),
    ] {
        let s = tape.scale(t, w);
        total = tape.add(total, s);
    }
    Ok(LossTerms {
        total,
        vertex,
        chamfer,
        edge,
        normal,
        kl,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// `z = mu` when `deterministic`, else `z = mu + exp(log_var / 2) * eps`
/// with standard-normal `eps` drawn from `rng`.
pub fn reparameterize(mu: &[f64], log_var: &[f64], rng: &mut impl Rng, deterministic: bool) -> Result<LatentCode> {
    if mu.len() != log_var.len() {
        return Err(Error::contract("mu and log_var lengths differ"));
    }
    let z = if deterministic {
        mu.to_vec()
    } else {
        mu.iter()
            .zip(log_var)
            .map(|(m, lv)| {
                let e: f64 = rng.sample(StandardNormal);
                m + (lv / 2.0).exp() * e
            })
            .collect()
    };
    Ok(LatentCode {
        z,
        mu: mu.to_vec(),
        log_var: log_var.to_vec(),
    })
}

/// A configured network bound to its pooling hierarchy.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub hierarchy: Arc<PoolingHierarchy>,
    pub params: ModelParams,
    layout: Layout,
    loss_ctx: Arc<LossContext>,
}

fn check_hierarchy(cfg: &ModelConfig, h: &PoolingHierarchy) -> Result<usize> {
    cfg.validate()?;
    if h.levels.len() != cfg.num_levels() {
        return Err(Error::contract(format!(
            "hierarchy has {} levels, the model needs {}",
            h.levels.len(),
            cfg.num_levels()
        )));
    }
    Ok(h.levels.last().expect("at least one level").coarse_count())
}

/// Glorot-uniform weights and zero biases, drawn from `seed`.
pub fn build_model(config: &ModelConfig, hierarchy: Arc<PoolingHierarchy>, seed: u64) -> Result<Model> {
    let coarsest = check_hierarchy(config, &hierarchy)?;
    let layout = Layout::new(config, coarsest);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, r, c) in &layout.shapes {
        names.push(name.clone());
        tensors.push(if *r == 1 && (name.ends_with(".b") || name.ends_with(".bias")) {
            Tensor::zeros(1, *c)
        } else {
            glorot(*r, *c, &mut rng)
        });
    }
    Model::from_params(config.clone(), hierarchy, ModelParams { names, tensors })
}

impl Model {
    /// Wraps existing parameters, checking names and shapes against the
    /// layout implied by `config` and `hierarchy`.
    pub fn from_params(config: ModelConfig, hierarchy: Arc<PoolingHierarchy>, params: ModelParams) -> Result<Model> {
        let coarsest = check_hierarchy(&config, &hierarchy)?;
        let layout = Layout::new(&config, coarsest);
        if params.names.len() != layout.shapes.len() || params.tensors.len() != layout.shapes.len() {
            return Err(Error::contract("parameter count does not match the model layout"));
        }
        for ((name, r, c), (n, t)) in layout.shapes.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != n || t.shape() != (*r, *c) {
                return Err(Error::contract(format!(
                    "parameter {n} {:?} does not match expected {name} ({r}, {c})",
                    t.shape()
                )));
            }
        }
        let root = &hierarchy.levels[0].mesh_fine;
        let loss_ctx = Arc::new(LossContext::new(root.faces()));
        Ok(Model {
            config,
            hierarchy,
            params,
            layout,
            loss_ctx,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.hierarchy.levels[0].fine_count()
    }

    pub fn loss_context(&self) -> &Arc<LossContext> {
        &self.loss_ctx
    }

    /// Puts every parameter on `tape`, as leaves if `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn dense(tape: &mut Tape, p: &[Var], (w, b): Dense, x: Var) -> Var {
        let y = tape.matmul(x, p[w]);
        tape.add(y, p[b])
    }

    /// `N x 3` vertices to `(mu, clamped log_var)`, each `1 x d`.
    pub fn encode_on(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let (n, c) = tape.shape(x);
        if (n, c) != (self.num_vertices(), 3) {
            return Err(Error::contract(format!(
                "input is {n}x{c}, the model expects {}x3",
                self.num_vertices()
            )));
        }
        let mut h = x;
        if self.config.template_offset {
            let t = tape.constant(self.template());
            h = tape.sub(h, t);
        }
        for (l, &(theta, bias)) in self.layout.enc.iter().enumerate() {
            h = cheb_forward(tape, &self.hierarchy.laplacians[l], p[theta], bias.map(|b| p[b]), h)?;
            h = tape.elu(h);
            h = apply_down(&self.hierarchy.levels[l], tape, h)?;
        }
        let (r, c) = tape.shape(h);
        h = tape.reshape(h, 1, r * c);
        h = Self::dense(tape, p, self.layout.enc_dense, h);
        h = tape.elu(h);
        let mu = Self::dense(tape, p, self.layout.mu, h);
        let lv = Self::dense(tape, p, self.layout.logvar, h);
        let k = self.config.logvar_clamp;
        let lv = tape.clamp(lv, -k, k);
        Ok((mu, lv))
    }

    /// `1 x d` latent code to `N x 3` vertices.
    pub fn decode_on(&self, tape: &mut Tape, p: &[Var], z: Var) -> Result<Var> {
        if tape.shape(z) != (1, self.config.latent_dim) {
            return Err(Error::contract(format!(
                "latent code is {:?}, expected 1x{}",
                tape.shape(z),
                self.config.latent_dim
            )));
        }
        let mut h = Self::dense(tape, p, self.layout.dec_dense, z);
        h = tape.elu(h);
        h = Self::dense(tape, p, self.layout.dec_features, h);
        let levels = self.hierarchy.levels.len();
        let coarsest = self.hierarchy.levels[levels - 1].coarse_count();
        let width = self.config.channels[levels];
        h = tape.reshape(h, coarsest, width);
        for (j, &(theta, bias)) in self.layout.dec.iter().enumerate() {
            let l = levels - 1 - j;
            h = apply_up(&self.hierarchy.levels[l], tape, h)?;
            h = cheb_forward(tape, &self.hierarchy.laplacians[l], p[theta], bias.map(|b| p[b]), h)?;
            h = tape.elu(h);
        }
        let y = tape.matmul(h, p[self.layout.proj.0]);
        let y = tape.add_row(y, p[self.layout.proj.1]);
        if self.config.template_offset {
            let t = tape.constant(self.template());
            return Ok(tape.add(y, t));
        }
        Ok(y)
    }

    /// Root mesh of the hierarchy as an `N x 3` tensor.
    pub fn template(&self) -> Tensor {
        Tensor::from_rows(self.hierarchy.levels[0].mesh_fine.vertices())
    }

    /// `(mu, log_var)` of a mesh.
    pub fn encode(&self, vertices: &[Vec3]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(vertices));
        let (mu, lv) = self.encode_on(&mut tape, &p, x)?;
        Ok((tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec()))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<Vec3>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::contract(format!(
                "latent code has {} entries, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zv = tape.constant(Tensor::row_vector(z.to_vec()));
        let out = self.decode_on(&mut tape, &p, zv)?;
        Ok(tape
            .value(out)
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    /// `decode(mu(mesh))`.
    pub fn reconstruct(&self, vertices: &[Vec3]) -> Result<Vec<Vec3>> {
        let (mu, _) = self.encode(vertices)?;
        self.decode(&mu)
    }

    /// Loss of one sample with `eps` as the reparameterization noise, or
    /// `z = mu` when `eps` is `None`. Returns the tape, the loss terms and
    /// the parameter handles.
    pub fn sample_loss(
        &self,
        mesh: &Mesh,
        eps: Option<&[f64]>,
        trainable: bool,
    ) -> Result<(Tape, LossTerms, Vec<Var>)> {
        let target = LossTarget::new(mesh)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, trainable);
        let x = tape.constant(target.vertices.clone());
        let (mu, lv) = self.encode_on(&mut tape, &p, x)?;
        let z = match eps {
            None => mu,
            Some(e) => {
                let e = tape.constant(Tensor::row_vector(e.to_vec()));
                let half = tape.scale(lv, 0.5);
                let sd = tape.exp(half);
                let noise = tape.mul(sd, e);
                tape.add(mu, noise)
            }
        };
        let out = self.decode_on(&mut tape, &p, z)?;
        let terms = total_loss(&mut tape, &self.config, &self.loss_ctx, out, &target, mu, lv)?;
        Ok((tape, terms, p))
    }
}

impl LatentModel for Model {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn encode_mean(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        Ok(self.encode(mesh.vertices())?.0)
    }

    fn decode_vertices(&self, z: &[f64]) -> Result<Vec<Vec3>> {
        self.decode(z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, p) in params.tensors.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            optimizer: AdamConfig::default(),
        }
    }
}

/// Per-epoch averages over training samples, plus held-out metrics with
/// `z = mu` (absent when there is no validation set).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: LossValues,
    pub val_e: Option<f64>,
    pub val_rcd: Option<f64>,
}

/// Mean E and mean RCD of deterministic reconstructions.
pub fn evaluate(model: &Model, meshes: &[Mesh]) -> Result<(f64, f64)> {
    let mut e = 0.0;
    let mut r = 0.0;
    for m in meshes {
        let rec = model.reconstruct(m.vertices())?;
        e += metric_e(&rec, m.vertices())?;
        r += metric_rcd(&rec, m.vertices())?;
    }
    let n = meshes.len() as f64;
    Ok((e / n, r / n))
}

/// Mini-batch Adam on `train_set`. Each sample is optionally augmented, then
/// encoded with a reparameterized draw; per-sample losses are averaged over
/// the batch. All randomness (shuffling, augmentation, noise) comes from
/// `rng`, so a fixed seed gives a bitwise-identical run.
pub fn train(
    model: &mut Model,
    train_set: &[Mesh],
    val_set: &[Mesh],
    policy: Option<&AugmentPolicy>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train_set.is_empty() || cfg.batch_size == 0 {
        return Err(Error::contract("training needs samples and a positive batch size"));
    }
    crate::mesh::validate_shared_topology(train_set)?;
    if let Some(p) = policy {
        p.validate()?;
    }
    let d = model.config.latent_dim;
    let mut adam = Adam::new(cfg.optimizer, &model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut sums = LossValues::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = model
                .params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mesh = match policy {
                    Some(p) => augment(&train_set[i], p, rng),
                    None => train_set[i].clone(),
                };
                let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let (mut tape, terms, p) = model.sample_loss(&mesh, Some(&eps), true)?;
                terms.check_finite(&tape)?;
                let v = terms.values(&tape);
                sums.total += v.total;
                sums.vertex += v.vertex;
                sums.chamfer += v.chamfer;
                sums.edge += v.edge;
                sums.normal += v.normal;
                sums.kl += v.kl;
                let root = tape.scale(terms.total, scale);
                let mut g = tape.backward(root)?;
                for (acc, var) in grads.iter_mut().zip(&p) {
                    if let Some(gv) = g.take(*var) {
                        for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a += b;
                        }
                    }
                }
            }
            adam.update(&mut model.params, &grads);
        }
        let n = train_set.len() as f64;
        let train = LossValues {
            total: sums.total / n,
            vertex: sums.vertex / n,
            chamfer: sums.chamfer / n,
            edge: sums.edge / n,
            normal: sums.normal / n,
            kl: sums.kl / n,
        };
        let (val_e, val_rcd) = if val_set.is_empty() {
            (None, None)
        } else {
            let (e, r) = evaluate(model, val_set)?;
            (Some(e), Some(r))
        };
        let m = EpochMetrics {
            epoch,
            train,
            val_e,
            val_rcd,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

pub fn write_epoch_csv(history: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("epoch,train_loss,vertex,chamfer,edge,normal,kl,val_E,val_RCD\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in history {
        let t = m.train;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            m.epoch,
            t.total,
            t.vertex,
            t.chamfer,
            t.edge,
            t.normal,
            t.kl,
            opt(m.val_e),
            opt(m.val_rcd)
        );
    }
    write_text(path, &s)
}
