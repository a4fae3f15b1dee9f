//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout and the
//! criteria execute one after another on a single core. The training
//! criteria (4, 5, 7) take tens of minutes in total.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use meshvae_core::analysis::{correlation_det, metric_chamfer, metric_e, metric_rcd, pca_fit, rank_modes, LatentModel};
use meshvae_core::autodiff::{check_gradient, Tape, Tensor};
use meshvae_core::harness::experiment::{arm_policy, corpus_hierarchy, pca_fold_metrics, split_fold};
use meshvae_core::harness::seeds::{stream_rng, stream_seed};
use meshvae_core::harness::synthetic::{generate_corpus, tube_mesh, SyntheticSpec, TubeParams};
use meshvae_core::harness::{extrapolate, interpolate, kfold_split, run_experiment, ExperimentConfig};
use meshvae_core::model::{
    build_model, loss_chamfer, total_loss, train, LossContext, LossTarget, Model, ModelConfig, TrainConfig,
};
use meshvae_core::pooling::build_hierarchy;
use meshvae_core::procaug::{
    alignment_report, euler_zyx_to_rotation, frobenius_distance, frobenius_norm, procrustes_rotation, rotate_points,
    AugmentMode, ProcrustesOptions,
};
use meshvae_core::spectral::{cheb_forward, estimate_lambda_max, normalized_laplacian, scale_laplacian};
use meshvae_core::{Mesh, Result, SparseMatrix, Vec3};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

// Tolerances and budgets.
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const CHAMFER_TOL: f64 = 1e-12;
const CHEB_TOL: f64 = 1e-10;
const PCA_TOL: f64 = 1e-8;
const UP_ROW_TOL: f64 = 1e-9;
const DOWN_UP_TOL: f64 = 1e-12;
const ROTATION_TOL: f64 = 1e-8;
const SCALE_TOL: f64 = 1e-9;
const ALIGNED_TOL: f64 = 1e-6;
const ABLATION_RATIO: f64 = 0.98;
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);

// Desk protocol shared by the training criteria.
const DESK_FOLDS: usize = 5;
const DESK_EPOCHS: usize = 150;
const DESK_LATENT: usize = 8;
const SEEDS: [u64; 3] = [0, 1, 2];
const BETAS: [f64; 2] = [1e-3, 8.5e-3];
const SCALES: [f64; 3] = [0.25, 0.5, 0.75];
const SAMPLES: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn desk_corpus() -> Vec<Mesh> {
    generate_corpus(&SyntheticSpec::default()).expect("desk corpus")
}

fn desk_experiment(seed: u64, arms: Vec<AugmentMode>) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            latent_dim: DESK_LATENT,
            ..Default::default()
        },
        training: TrainConfig {
            epochs: DESK_EPOCHS,
            ..Default::default()
        },
        folds: DESK_FOLDS,
        arms,
        latent_dims: vec![DESK_LATENT],
        betas: vec![ModelConfig::default().beta],
        seed,
        epoch_logs: false,
        ..Default::default()
    }
}

fn small_params() -> TubeParams {
    TubeParams {
        neck_radius: 1.0,
        sac_radius: 1.6,
        sac_center: 0.5,
        sac_width: 0.3,
        bend_amplitude: 0.4,
        bend_direction: 0.7,
        length: 4.0,
        tilt: (0.1, -0.2, 0.3),
    }
}

fn uniform_points(rng: &mut impl Rng, n: usize, spread: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ]
        })
        .collect()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    // five columns by two rings plus two cap centres: 12 vertices
    let target = tube_mesh(5, 2, &small_params()).unwrap();
    assert_eq!(target.num_vertices(), 12);
    let cfg = ModelConfig {
        latent_dim: 4,
        ..Default::default()
    };
    let ctx = LossContext::new(target.faces());
    let lt = LossTarget::new(&target).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = stream_rng(seed, "gradient", 0);
        let out: Vec<Vec3> = target
            .vertices()
            .iter()
            .map(|p| [0, 1, 2].map(|k| p[k] + rng.random_range(-0.3..0.3)))
            .collect();
        let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_gradient(
            |t, v| total_loss(t, &cfg, &ctx, v[0], &lt, v[1], v[2]).unwrap().total,
            &[Tensor::from_rows(&out), Tensor::row_vector(mu), Tensor::row_vector(lv)],
            GRAD_EPS,
        );
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    outcome(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("max relative error {worst:.3e} (< {GRAD_TOL:e}), {elapsed:.2?} (< {GRAD_BUDGET:?})"),
    )
}

// ---------------------------------------------------------------- 2

fn chamfer_oracle(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for (from, to) in [(a, b), (b, a)] {
        for p in from {
            let mut best = f64::INFINITY;
            for q in to {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
    }
    total
}

fn chamfer_check() -> (bool, String) {
    let mut rng = stream_rng(0, "chamfer-oracle", 0);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let n = 1 + trial % 17;
        let m = 1 + (trial * 7) % 23;
        let a = uniform_points(&mut rng, n, 2.0);
        let b = uniform_points(&mut rng, m, 2.0);
        let expect = chamfer_oracle(&a, &b);
        worst = worst.max((metric_chamfer(&a, &b).unwrap() - expect).abs());
        worst = worst.max((metric_rcd(&a, &b).unwrap() - expect.sqrt()).abs());
        let mut t = Tape::new();
        let va = t.constant(Tensor::from_rows(&a));
        let vb = t.constant(Tensor::from_rows(&b));
        let l = loss_chamfer(&mut t, va, vb).unwrap();
        worst = worst.max((t.value(l).item() - expect).abs());
    }
    (worst <= CHAMFER_TOL, format!("chamfer {worst:.1e}"))
}

/// Random connected graph: a path through all vertices plus a few chords.
fn random_graph(rng: &mut impl Rng, n: usize) -> SparseMatrix {
    let mut edges = std::collections::BTreeSet::new();
    for i in 1..n {
        edges.insert((i - 1, i));
    }
    for _ in 0..n {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let trip: Vec<(usize, usize, f64)> = edges.iter().flat_map(|&(a, b)| [(a, b, 1.0), (b, a, 1.0)]).collect();
    SparseMatrix::from_triplets(n, n, trip).unwrap()
}

fn cheb_check() -> (bool, String) {
    let mut rng = stream_rng(0, "cheb-oracle", 0);
    let mut worst = 0.0f64;
    for n in 2..=10 {
        for order in 1..=6 {
            let adj = random_graph(&mut rng, n);
            let lambda = estimate_lambda_max(&normalized_laplacian(&adj).unwrap(), 1e-6, 10_000).value;
            let scaled = Arc::new(scale_laplacian(&normalized_laplacian(&adj).unwrap(), lambda).unwrap());
            let (f_in, f_out) = (1 + n % 3, 1 + order % 4);
            let x = DMatrix::from_fn(n, f_in, |_, _| rng.random_range(-1.0..1.0));
            let theta = DMatrix::from_fn(order * f_in, f_out, |_, _| rng.random_range(-1.0..1.0));

            // oracle: dense L = I - D^-1/2 A D^-1/2, rescaled with the same
            // lambda_max, then T_k evaluated on its eigenvalues
            let mut a = DMatrix::<f64>::zeros(n, n);
            for (i, j, v) in adj.entries() {
                a[(i, j)] = v;
            }
            let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
            let l = DMatrix::from_fn(n, n, |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                id - a[(i, j)] / (deg[i] * deg[j]).sqrt()
            });
            let ls = l * (2.0 / lambda) - DMatrix::identity(n, n);
            let eig = SymmetricEigen::new(ls);
            let mut expect = DMatrix::<f64>::zeros(n, f_out);
            for k in 0..order {
                let tk: Vec<f64> = eig
                    .eigenvalues
                    .iter()
                    .map(|&lam| {
                        let (mut t0, mut t1) = (1.0, lam);
                        match k {
                            0 => t0,
                            _ => {
                                for _ in 1..k {
                                    let t2 = 2.0 * lam * t1 - t0;
                                    t0 = t1;
                                    t1 = t2;
                                }
                                t1
                            }
                        }
                    })
                    .collect();
                let poly = &eig.eigenvectors
                    * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(tk))
                    * eig.eigenvectors.transpose();
                let block = theta.rows(k * f_in, f_in).into_owned();
                expect += poly * &x * block;
            }

            let mut t = Tape::new();
            let to_tensor = |m: &DMatrix<f64>| {
                Tensor::new(
                    m.nrows(),
                    m.ncols(),
                    (0..m.nrows())
                        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
                        .collect(),
                )
            };
            let xv = t.constant(to_tensor(&x));
            let th = t.constant(to_tensor(&theta));
            let y = cheb_forward(&mut t, &scaled, th, None, xv).unwrap();
            let got = t.value(y);
            for i in 0..n {
                for j in 0..f_out {
                    worst = worst.max((got.get(i, j) - expect[(i, j)]).abs());
                }
            }
        }
    }
    (worst <= CHEB_TOL, format!("chebyshev {worst:.1e}"))
}

fn pca_check() -> (bool, String) {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let spec = SyntheticSpec {
            n_theta: 8,
            n_len: 10,
            corpus_size: 6,
            seed,
            ..Default::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let (train_set, held) = corpus.split_at(5);
        let rows: Vec<Vec<f64>> = train_set.iter().map(Mesh::flat).collect();
        let d = 4;
        let model = pca_fit(&rows, d).unwrap();

        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let x = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j] - mean[j]);
        let cov = x.transpose() * &x / (n - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

        for (k, &o) in order.iter().take(d).enumerate() {
            worst = worst.max((model.variances[k] - eig.eigenvalues[o]).abs());
            let dot: f64 = (0..dim)
                .map(|j| model.components[k][j] * eig.eigenvectors[(j, o)])
                .sum();
            worst = worst.max((dot.abs() - 1.0).abs());
        }
        // reconstruction of an unseen mesh through the oracle subspace
        let y = held[0].flat();
        let mut expect = mean.clone();
        for &o in order.iter().take(d) {
            let c: f64 = (0..dim).map(|j| eig.eigenvectors[(j, o)] * (y[j] - mean[j])).sum();
            for j in 0..dim {
                expect[j] += c * eig.eigenvectors[(j, o)];
            }
        }
        let got = model.reconstruct_coeffs(&model.project(&y));
        for j in 0..dim {
            worst = worst.max((got[j] - expect[j]).abs());
        }
    }
    (worst <= PCA_TOL, format!("pca {worst:.1e}"))
}

fn pooling_check() -> (bool, String) {
    let mut meshes = vec![desk_corpus().swap_remove(0)];
    for (n_theta, n_len, seed) in [(8, 10, 1), (12, 20, 2), (6, 6, 3)] {
        let spec = SyntheticSpec {
            n_theta,
            n_len,
            corpus_size: 2,
            seed,
            ..Default::default()
        };
        meshes.extend(generate_corpus(&spec).unwrap());
    }
    let (mut row_err, mut id_err) = (0.0f64, 0.0f64);
    let mut count = 0;
    for mesh in &meshes {
        let levels = if mesh.num_vertices() >= 320 { 4 } else { 2 };
        let h = build_hierarchy(mesh, levels, 4.0).unwrap();
        for level in &h.levels {
            count += 1;
            for s in level.up.row_sums() {
                row_err = row_err.max((s - 1.0).abs());
            }
            let prod = level.down.matmul(&level.up).unwrap();
            for i in 0..prod.rows() {
                for j in 0..prod.cols() {
                    let e = if i == j { 1.0 } else { 0.0 };
                    id_err = id_err.max((prod.get(i, j) - e).abs());
                }
            }
        }
    }
    (
        row_err <= UP_ROW_TOL && id_err <= DOWN_UP_TOL,
        format!("Q_u rows {row_err:.1e}, Q_d Q_u - I {id_err:.1e} over {count} levels"),
    )
}

fn criterion_2() -> Outcome {
    let parts = [chamfer_check(), cheb_check(), pca_check(), pooling_check()];
    let pass = parts.iter().all(|p| p.0);
    let detail = parts.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join("; ");
    outcome(pass, detail)
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let reference = desk_corpus().swap_remove(0);
    let ref_norm = frobenius_norm(reference.vertices());
    let opts = ProcrustesOptions::default();
    let mut rng = stream_rng(0, "procrustes-recovery", 0);
    let (mut rot_err, mut scale_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let r = euler_zyx_to_rotation(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.4..1.4),
            rng.random_range(-3.0..3.0),
        );
        let s = rng.random_range(0.5..2.0);
        let corrupted: Vec<Vec3> = rotate_points(reference.vertices(), &r)
            .iter()
            .map(|p| p.map(|c| c * s))
            .collect();
        let res = procrustes_rotation(&corrupted, reference.vertices(), &opts).unwrap();
        // the corrupted mesh is s M R^T, so M R^T R recovers the reference
        rot_err = rot_err.max(frobenius_distance(&res.rotation, &r));
        scale_err = scale_err.max((res.scale_in / ref_norm - s).abs());
    }

    // rigidly moved copies align to within round-off
    let mut corpus = Vec::new();
    for _ in 0..20 {
        let r = euler_zyx_to_rotation(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.4..1.4),
            rng.random_range(-3.0..3.0),
        );
        let shift: Vec3 = [0, 1, 2].map(|_| rng.random_range(-5.0..5.0));
        let moved: Vec<Vec3> = rotate_points(reference.vertices(), &r)
            .iter()
            .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
            .collect();
        corpus.push(reference.with_vertices(moved).unwrap());
    }
    let centred = ProcrustesOptions { center: true, ..opts };
    let rows = alignment_report(&corpus, &reference, &centred).unwrap();
    let after = rows
        .iter()
        .map(|r| r.l2_after.max(r.chamfer_after))
        .fold(0.0f64, f64::max);
    let before = rows.iter().map(|r| r.l2_before).fold(0.0f64, f64::max);
    outcome(
        rot_err <= ROTATION_TOL && scale_err <= SCALE_TOL && after < ALIGNED_TOL,
        format!("rotation {rot_err:.1e}, scale {scale_err:.1e}, aligned after {after:.1e} (before up to {before:.2})"),
    )
}

// ---------------------------------------------------------------- 4 and 5

struct Ablation {
    rcd: BTreeMap<&'static str, f64>,
    procaug_chamfer: f64,
    elapsed: Duration,
}

fn run_ablation(corpus: &[Mesh]) -> Result<Ablation> {
    let start = Instant::now();
    let cfg = desk_experiment(0, AugmentMode::ALL.to_vec());
    let report = run_experiment(&cfg, corpus, None)?;
    let elapsed = start.elapsed();
    let beta = cfg.betas[0];
    let mut rcd = BTreeMap::new();
    for arm in AugmentMode::ALL {
        rcd.insert(arm.name(), report.cell(DESK_LATENT, beta, arm).unwrap().mean.rcd);
    }
    let procaug_chamfer = report
        .cell(DESK_LATENT, beta, AugmentMode::Procaug)
        .unwrap()
        .mean
        .chamfer;
    Ok(Ablation {
        rcd,
        procaug_chamfer,
        elapsed,
    })
}

fn criterion_4(ab: &Ablation) -> Outcome {
    let none = ab.rcd[AugmentMode::None.name()];
    let proc = ab.rcd[AugmentMode::Procaug.name()];
    let scale = ab.rcd[AugmentMode::ScaleOnly.name()];
    let rot = ab.rcd[AugmentMode::RotationOnly.name()];
    // a single-transform arm passes when it sits between procaug and none,
    // or anywhere above procaug
    let single_ok = |v: f64| v >= proc;
    let pass = proc <= ABLATION_RATIO * none && single_ok(scale) && single_ok(rot) && ab.elapsed < ABLATION_BUDGET;
    outcome(
        pass,
        format!(
            "RCD procaug {proc:.4}, scale-only {scale:.4}, rotation-only {rot:.4}, none {none:.4} \
             (need procaug <= {ABLATION_RATIO} x none = {:.4}, single arms >= procaug); {:.1?} (< {ABLATION_BUDGET:?})",
            ABLATION_RATIO * none,
            ab.elapsed
        ),
    )
}

fn pca_chamfer(corpus: &[Mesh], seed: u64) -> f64 {
    let folds = kfold_split(corpus.len(), DESK_FOLDS, seed).unwrap();
    let mut total = 0.0;
    for idx in &folds {
        let (train_set, test) = split_fold(corpus, idx);
        total += pca_fold_metrics(&train_set, &test, DESK_LATENT).unwrap().chamfer;
    }
    total / folds.len() as f64
}

fn vae_chamfer(corpus: &[Mesh], seed: u64) -> f64 {
    let cfg = desk_experiment(seed, vec![AugmentMode::Procaug]);
    let report = run_experiment(&cfg, corpus, None).unwrap();
    report
        .cell(DESK_LATENT, cfg.betas[0], AugmentMode::Procaug)
        .unwrap()
        .mean
        .chamfer
}

fn criterion_5(corpus: &[Mesh], ab: &Ablation) -> Outcome {
    let mut lines = Vec::new();
    let mut passed = 0;
    for (i, &seed) in SEEDS.iter().enumerate() {
        let vae = if seed == 0 {
            ab.procaug_chamfer
        } else {
            vae_chamfer(corpus, seed)
        };
        let pca = pca_chamfer(corpus, seed);
        let ok = vae <= pca;
        passed += ok as usize;
        lines.push(format!("seed {seed}: VAE {vae:.3} vs PCA {pca:.3}"));
        // the first seed decides unless it fails
        if i == 0 && ok {
            break;
        }
    }
    let pass = if lines.len() == 1 { passed == 1 } else { passed >= 2 };
    outcome(pass, lines.join("; "))
}

// ---------------------------------------------------------------- 6, 7, 8

struct FullRun {
    model: Model,
    det_r: f64,
}

/// Trains on the whole desk corpus with procaug and reports det(R) x 100
/// of the corpus latent means.
fn full_run(corpus: &[Mesh], seed: u64, beta: f64) -> Result<FullRun> {
    let exp = desk_experiment(seed, vec![AugmentMode::Procaug]);
    let cfg = exp.cell_model(DESK_LATENT, beta);
    let hierarchy = Arc::new(corpus_hierarchy(corpus, &cfg)?);
    let mut model = build_model(&cfg, hierarchy, stream_seed(seed, "init", 0))?;
    let policy = arm_policy(AugmentMode::Procaug, corpus, &exp.procrustes)?;
    let mut rng = stream_rng(seed, "train", 0);
    train(
        &mut model,
        corpus,
        &[],
        policy.as_ref(),
        &exp.training,
        &mut rng,
        |_| {},
    )?;
    let mut lat = Vec::new();
    for m in corpus {
        lat.extend(model.encode(m.vertices())?.0);
    }
    let (_, det_r) = correlation_det(&Tensor::new(corpus.len(), DESK_LATENT, lat))?;
    Ok(FullRun { model, det_r })
}

struct LinearFixture {
    base: Vec<Vec3>,
    dirs: Vec<Vec<Vec3>>,
    codes: Vec<Vec<f64>>,
}

impl LinearFixture {
    fn decode(&self, z: &[f64]) -> Vec<Vec3> {
        let mut out = self.base.clone();
        for (zk, dir) in z.iter().zip(&self.dirs) {
            for (o, u) in out.iter_mut().zip(dir) {
                for c in 0..3 {
                    o[c] += zk * u[c];
                }
            }
        }
        out
    }
}

impl LatentModel for LinearFixture {
    fn latent_dim(&self) -> usize {
        self.dirs.len()
    }
    fn encode_mean(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        let i = self
            .codes
            .iter()
            .position(|z| self.decode(z) == mesh.vertices())
            .unwrap();
        Ok(self.codes[i].clone())
    }
    fn decode_vertices(&self, z: &[f64]) -> Result<Vec<Vec3>> {
        Ok(self.decode(z))
    }
}

fn criterion_6(corpus: &[Mesh], model: &Model) -> Outcome {
    let r = rank_modes(model, corpus).unwrap();
    let monotone = r.cumulative_e.windows(2).all(|w| w[1] >= w[0]);

    // orthogonal unit directions along x, y, z with gains 3, 2, 1
    let template = tube_mesh(6, 4, &small_params()).unwrap();
    let n = template.num_vertices();
    let dirs: Vec<Vec<Vec3>> = (0..3)
        .map(|k| {
            let mut u = [0.0; 3];
            u[k] = 1.0 / (n as f64).sqrt();
            vec![u; n]
        })
        .collect();
    let codes: Vec<Vec<f64>> = [[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]]
        .iter()
        .map(|s| vec![3.0 * s[0], 2.0 * s[1], s[2]])
        .collect();
    let fx = LinearFixture {
        base: template.vertices().to_vec(),
        dirs,
        codes,
    };
    let fcorpus: Vec<Mesh> = fx
        .codes
        .iter()
        .map(|z| template.with_vertices(fx.decode(z)).unwrap())
        .collect();
    let greedy = rank_modes(&fx, &fcorpus).unwrap();

    // exhaustive oracle: best subset of each size, and the order it implies
    let subset_e = |mask: u32| -> f64 {
        fcorpus
            .iter()
            .zip(&fx.codes)
            .map(|(m, z)| {
                let zz: Vec<f64> = (0..3).map(|k| if mask >> k & 1 == 1 { z[k] } else { 0.0 }).collect();
                metric_e(&fx.decode(&zz), m.vertices()).unwrap()
            })
            .sum::<f64>()
            / fcorpus.len() as f64
    };
    let mut best_masks = Vec::new();
    for size in 1..=3u32 {
        let best = (1u32..8)
            .filter(|m| m.count_ones() == size)
            .max_by(|a, b| subset_e(*a).partial_cmp(&subset_e(*b)).unwrap())
            .unwrap();
        best_masks.push(best);
    }
    let mut oracle_order = Vec::new();
    let mut prev = 0u32;
    for m in &best_masks {
        let added = m & !prev;
        oracle_order.push(added.trailing_zeros() as usize);
        prev = *m;
    }
    let nested = best_masks.windows(2).all(|w| w[0] & w[1] == w[0]);
    let matches = nested && greedy.order == oracle_order;
    outcome(
        monotone && matches,
        format!(
            "trained-model cumulative E {:?} non-decreasing: {monotone}; fixture greedy {:?} vs oracle {:?}",
            r.cumulative_e.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>(),
            greedy.order,
            oracle_order
        ),
    )
}

fn criterion_7(dets: &[(u64, f64, f64)]) -> Outcome {
    let wins = dets.iter().filter(|(_, lo, hi)| hi > lo).count();
    let detail = dets
        .iter()
        .map(|(s, lo, hi)| format!("seed {s}: {lo:.3} -> {hi:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        wins >= 2,
        format!("det(R)x100 at beta {} -> {}: {detail}", BETAS[0], BETAS[1]),
    )
}

fn criterion_8(corpus: &[Mesh], model: &Model) -> Outcome {
    let mesh = &corpus[0];
    let (mu, _) = model.encode(mesh.vertices()).unwrap();
    let reference = model.decode(&mu).unwrap();
    let mut rng = stream_rng(0, "sampling", 0);
    let zero = extrapolate(model, mesh, 0.0, 3, &mut rng).unwrap();
    let s0 = zero.meshes.iter().all(|m| m.vertices() == reference.as_slice());

    let other = &corpus[1];
    let (mu_b, _) = model.encode(other.vertices()).unwrap();
    let path = interpolate(model, mesh, other, 8).unwrap();
    let ends = path[0].vertices() == reference.as_slice()
        && path.last().unwrap().vertices() == model.decode(&mu_b).unwrap().as_slice();

    let means: Vec<f64> = SCALES
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let mut rng = stream_rng(0, "sampling", k as u64 + 1);
            extrapolate(model, mesh, s, SAMPLES, &mut rng).unwrap().mean_rcd()
        })
        .collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        s0 && ends && monotone,
        format!(
            "S=0 bitwise: {s0}; endpoints bitwise: {ends}; mean RCD over S {SCALES:?}: {:?}",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 9

const TINY_CONFIG: &str = r#"
[corpus]
n_theta = 8
n_len = 10
corpus_size = 8

[experiment]
folds = 2
arms = ["procaug"]
latent_dims = [3]
betas = [0.001]

[experiment.model]
latent_dim = 3
channels = [3, 4, 4]
cheb_order = 3
hidden_dense_width = 8

[experiment.training]
epochs = 2
batch_size = 4
"#;

fn csv_files(dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>, root: &Path) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            csv_files(&p, acc, root);
        } else if p.extension().is_some_and(|e| e == "csv") {
            acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
        }
    }
}

fn cli_run(config: &Path, out: &Path) -> std::result::Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let bin = env!("CARGO_BIN_EXE_meshvae");
    let ckpt = out.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let runs: [&[&str]; 10] = [
        &["gen-data"],
        &["align-report"],
        &["train", "--holdout", "2"],
        &["eval", "--checkpoint", ckpt],
        &["rank-modes", "--checkpoint", ckpt],
        &["extrapolate", "--checkpoint", ckpt, "--count", "4"],
        &["interpolate", "--checkpoint", ckpt, "--steps", "3"],
        &["pca-baseline"],
        &["sweep"],
        &["ablate"],
    ];
    for args in runs {
        let status = Command::new(bin)
            .arg("--config")
            .arg(config)
            .args(["--seed", "7", "--out"])
            .arg(out)
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&status.stderr)));
        }
    }
    let mut files = BTreeMap::new();
    csv_files(out, &mut files, out);
    Ok(files)
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let a = cli_run(&config, &dir.path().join("a"));
    let b = cli_run(&config, &dir.path().join("b"));
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<_> = a
                .keys()
                .chain(b.keys())
                .filter(|k| a.get(*k) != b.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            outcome(
                differing.is_empty() && !a.is_empty(),
                format!("{} CSV files compared, differing: {differing:?}", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("CLI failed: {e}")),
    }
}

fn report(id: usize, o: &Outcome, elapsed: Duration) -> bool {
    println!(
        "criterion {id}: {} | {} [{elapsed:.1?}]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn main() -> ExitCode {
    // `cargo test -- --list` and name filters come through here too
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let want = |id: usize| only.is_empty() || only.contains(&id);

    let mut all = true;
    let mut run = |id: usize, f: &mut dyn FnMut() -> Outcome| {
        if want(id) {
            let t = Instant::now();
            let o = f();
            all &= report(id, &o, t.elapsed());
        }
    };
    run(1, &mut criterion_1);
    run(2, &mut criterion_2);
    run(3, &mut criterion_3);

    let corpus = desk_corpus();
    if want(4) || want(5) {
        let ab = run_ablation(&corpus).expect("ablation run");
        run(4, &mut || criterion_4(&ab));
        run(5, &mut || criterion_5(&corpus, &ab));
    }
    if want(6) || want(7) || want(8) {
        let t = Instant::now();
        let mut dets = Vec::new();
        let mut first = None;
        for &seed in &SEEDS {
            let lo = full_run(&corpus, seed, BETAS[0]).expect("training run");
            let det_lo = lo.det_r;
            if first.is_none() {
                first = Some(lo.model);
            }
            let det_hi = if want(7) {
                full_run(&corpus, seed, BETAS[1]).expect("training run").det_r
            } else {
                f64::NAN
            };
            dets.push((seed, det_lo, det_hi));
            if !want(7) {
                break;
            }
        }
        println!("(full-corpus training runs: {:.1?})", t.elapsed());
        let model = first.unwrap();
        run(6, &mut || criterion_6(&corpus, &model));
        run(7, &mut || criterion_7(&dets));
        run(8, &mut || criterion_8(&corpus, &model));
    }
    run(9, &mut criterion_9);

    if all {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: at least one criterion failed");
        ExitCode::FAILURE
    }
}
