//! k-fold cross-validated training runs over (latent size, beta, augmentation
//! arm) cells.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::seeds::{stream_rng, stream_seed};
use crate::analysis::{correlation_det, metric_chamfer, metric_e, pca_fit, pca_reconstruct, rms_vertex_error};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mesh::{validate_shared_topology, Mesh, Vec3};
use crate::model::{build_model, train, write_epoch_csv, Model, ModelConfig, TrainConfig};
use crate::pooling::{build_hierarchy, PoolingHierarchy};
use crate::procaug::{fit_policy, median_reference, AugmentMode, AugmentPolicy, ProcrustesOptions};
use crate::util::write_text;

/// Splits `0..n` into `k` shuffled folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::contract(format!("cannot split {n} items into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, "folds", 0));
    let mut folds = vec![Vec::new(); k];
    for (p, i) in idx.into_iter().enumerate() {
        folds[p % k].push(i);
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub folds: usize,
    pub arms: Vec<AugmentMode>,
    pub latent_dims: Vec<usize>,
    pub betas: Vec<f64>,
    pub seed: u64,
    pub procrustes: ProcrustesOptions,
    /// Write per-epoch training curves for every fold.
    pub epoch_logs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        ExperimentConfig {
            latent_dims: vec![model.latent_dim],
            betas: vec![model.beta],
            model,
            training: TrainConfig::default(),
            folds: 10,
            arms: vec![AugmentMode::Procaug],
            seed: 0,
            procrustes: ProcrustesOptions::default(),
            epoch_logs: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.arms.is_empty() || self.latent_dims.is_empty() || self.betas.is_empty() {
            return Err(Error::Config("arms, latent_dims and betas must be non-empty".into()));
        }
        for &d in &self.latent_dims {
            self.cell_model(d, self.model.beta).validate()?;
        }
        for &b in &self.betas {
            self.cell_model(self.model.latent_dim, b).validate()?;
        }
        Ok(())
    }

    pub fn cell_model(&self, latent_dim: usize, beta: f64) -> ModelConfig {
        ModelConfig {
            latent_dim,
            beta,
            ..self.model.clone()
        }
    }
}

/// Held-out metrics of one fold: means over the test meshes, plus
/// `det(R) x 100` of their latent means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldMetrics {
    pub l2: f64,
    pub rcd: f64,
    pub chamfer: f64,
    pub e: f64,
    pub det_r: f64,
}

impl FoldMetrics {
    fn fields(&self) -> [f64; 5] {
        [self.l2, self.rcd, self.chamfer, self.e, self.det_r]
    }

    fn from_fields(f: [f64; 5]) -> Self {
        FoldMetrics {
            l2: f[0],
            rcd: f[1],
            chamfer: f[2],
            e: f[3],
            det_r: f[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellReport {
    pub latent_dim: usize,
    pub beta: f64,
    pub arm: AugmentMode,
    pub folds: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    /// Sample standard deviation over folds.
    pub std: FoldMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, latent_dim: usize, beta: f64, arm: AugmentMode) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.latent_dim == latent_dim && c.beta == beta && c.arm == arm)
    }
}

fn mean_std(rows: &[FoldMetrics]) -> (FoldMetrics, FoldMetrics) {
    let n = rows.len() as f64;
    let mut mean = [0.0; 5];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.fields()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 5];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.fields()).zip(mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.map(|s| if rows.len() > 1 { (s / (n - 1.0)).sqrt() } else { 0.0 });
    (FoldMetrics::from_fields(mean), FoldMetrics::from_fields(std))
}

/// Vertex-wise mean of the corpus; pooling hierarchies are built on it.
pub fn mean_mesh(corpus: &[Mesh]) -> Result<Mesh> {
    let first = corpus.first().ok_or_else(|| Error::contract("corpus is empty"))?;
    let n = corpus.len() as f64;
    let mut v = vec![[0.0; 3]; first.num_vertices()];
    for m in corpus {
        for (acc, p) in v.iter_mut().zip(m.vertices()) {
            for k in 0..3 {
                acc[k] += p[k] / n;
            }
        }
    }
    first.with_vertices(v)
}

/// Hierarchy for a model config, built on the corpus mean shape.
pub fn corpus_hierarchy(corpus: &[Mesh], cfg: &ModelConfig) -> Result<PoolingHierarchy> {
    build_hierarchy(&mean_mesh(corpus)?, cfg.num_levels(), cfg.pooling_factor)
}

/// Augmentation policy for one arm fitted on the training meshes, or `None`
/// for the no-augmentation arm.
pub fn arm_policy(arm: AugmentMode, train_set: &[Mesh], opts: &ProcrustesOptions) -> Result<Option<AugmentPolicy>> {
    if arm == AugmentMode::None {
        return Ok(None);
    }
    let r = median_reference(train_set)?;
    Ok(Some(fit_policy(train_set, &train_set[r], opts)?.with_mode(arm)))
}

/// Held-out metrics of a trained model.
pub fn evaluate_fold(model: &Model, test: &[Mesh]) -> Result<FoldMetrics> {
    let mut latents = Vec::with_capacity(test.len() * model.config.latent_dim);
    let mut recs = Vec::with_capacity(test.len());
    for m in test {
        let (mu, _) = model.encode(m.vertices())?;
        recs.push(model.decode(&mu)?);
        latents.extend_from_slice(&mu);
    }
    let (_, det_r) = correlation_det(&Tensor::new(test.len(), model.config.latent_dim, latents))?;
    reconstruction_metrics(&recs, test, det_r)
}

/// Mean reconstruction metrics of `recs` against `truth`.
pub fn reconstruction_metrics(recs: &[Vec<Vec3>], truth: &[Mesh], det_r: f64) -> Result<FoldMetrics> {
    let mut sums = [0.0; 4];
    for (rec, m) in recs.iter().zip(truth) {
        let chamfer = metric_chamfer(rec, m.vertices())?;
        sums[0] += rms_vertex_error(rec, m.vertices())?;
        sums[1] += chamfer.sqrt();
        sums[2] += chamfer;
        sums[3] += metric_e(rec, m.vertices())?;
    }
    let n = truth.len() as f64;
    Ok(FoldMetrics {
        l2: sums[0] / n,
        rcd: sums[1] / n,
        chamfer: sums[2] / n,
        e: sums[3] / n,
        det_r,
    })
}

/// PCA with `d` components fitted on `train` and evaluated on `test`;
/// `det_r` is taken over the test projections.
pub fn pca_fold_metrics(train_set: &[Mesh], test: &[Mesh], d: usize) -> Result<FoldMetrics> {
    let flat: Vec<Vec<f64>> = train_set.iter().map(Mesh::flat).collect();
    let pca = pca_fit(&flat, d)?;
    let mut coeffs = Vec::with_capacity(test.len() * d);
    let mut recs = Vec::with_capacity(test.len());
    for m in test {
        coeffs.extend(pca.project(&m.flat()));
        recs.push(pca_reconstruct(&pca, m)?.vertices().to_vec());
    }
    let det_r = match correlation_det(&Tensor::new(test.len(), pca.components.len(), coeffs)) {
        Ok((_, det)) => det,
        Err(e) => {
            log::warn!("PCA correlation undefined: {e}");
            f64::NAN
        }
    };
    reconstruction_metrics(&recs, test, det_r)
}

/// Train/test split of fold `f`.
pub fn split_fold(corpus: &[Mesh], test_idx: &[usize]) -> (Vec<Mesh>, Vec<Mesh>) {
    let test = test_idx.iter().map(|&i| corpus[i].clone()).collect();
    let train_set = (0..corpus.len())
        .filter(|i| !test_idx.contains(i))
        .map(|i| corpus[i].clone())
        .collect();
    (train_set, test)
}

/// File stem of a cell's outputs, e.g. `d8_b0.001_procaug`.
pub fn cell_stem(latent_dim: usize, beta: f64, arm: AugmentMode) -> String {
    format!("d{latent_dim}_b{beta}_{}", arm.name())
}

/// Trains and evaluates every cell on every fold. Within a fold all arms
/// share the initial weights and training stream, so arms differ only in
/// augmentation. With `out` set, writes `<stem>.csv` per cell (one row per
/// fold and a `mean` row), `summary.csv`, and per-fold epoch curves.
pub fn run_experiment(cfg: &ExperimentConfig, corpus: &[Mesh], out: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    validate_shared_topology(corpus)?;
    let folds = kfold_split(corpus.len(), cfg.folds, cfg.seed)?;
    let mut cells = Vec::new();
    for &d in &cfg.latent_dims {
        for &beta in &cfg.betas {
            let model_cfg = cfg.cell_model(d, beta);
            let mut per_arm: Vec<Vec<FoldMetrics>> = vec![Vec::new(); cfg.arms.len()];
            for (f, test_idx) in folds.iter().enumerate() {
                let run = || -> Result<Vec<FoldMetrics>> {
                    let (train_set, test) = split_fold(corpus, test_idx);
                    // built from training meshes only, so nothing about the
                    // held-out fold reaches the model
                    let hierarchy = Arc::new(corpus_hierarchy(&train_set, &model_cfg)?);
                    let init_seed = stream_seed(cfg.seed, "init", f as u64);
                    let mut rows = Vec::new();
                    for &arm in &cfg.arms {
                        let policy = arm_policy(arm, &train_set, &cfg.procrustes)?;
                        let mut model = build_model(&model_cfg, Arc::clone(&hierarchy), init_seed)?;
                        let mut rng = stream_rng(cfg.seed, "train", f as u64);
                        let history = train(
                            &mut model,
                            &train_set,
                            &test,
                            policy.as_ref(),
                            &cfg.training,
                            &mut rng,
                            |m| {
                                log::debug!(
                                    "d={d} beta={beta} {} fold {f} epoch {}: {:?}",
                                    arm.name(),
                                    m.epoch,
                                    m.train
                                )
                            },
                        )?;
                        if let (Some(dir), true) = (out, cfg.epoch_logs) {
                            let stem = cell_stem(d, beta, arm);
                            write_epoch_csv(&history, dir.join(format!("{stem}_fold{f}_epochs.csv")))?;
                        }
                        let m = evaluate_fold(&model, &test)?;
                        log::info!("d={d} beta={beta} {} fold {f}: {m:?}", arm.name());
                        rows.push(m);
                    }
                    Ok(rows)
                };
                let rows = run().map_err(|e| Error::Fold {
                    fold: f,
                    source: Box::new(e),
                })?;
                for (a, r) in rows.into_iter().enumerate() {
                    per_arm[a].push(r);
                }
            }
            for (a, rows) in per_arm.into_iter().enumerate() {
                let (mean, std) = mean_std(&rows);
                cells.push(CellReport {
                    latent_dim: d,
                    beta,
                    arm: cfg.arms[a],
                    folds: rows,
                    mean,
                    std,
                });
            }
        }
    }
    let report = ExperimentReport { cells };
    if let Some(dir) = out {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Comma-joined metric fields in CSV column order.
pub fn join(m: &FoldMetrics) -> String {
    m.fields().map(|x| x.to_string()).join(",")
}

/// Writes per-cell fold logs and `summary.csv`; returns the written paths.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let mut summary = String::from(
        "latent_dim,beta,arm,l2_mean,l2_std,rcd_mean,rcd_std,chamfer_mean,chamfer_std,e_mean,e_std,det_r_mean,det_r_std\n",
    );
    for c in &report.cells {
        let mut s = String::from("fold,l2,rcd,chamfer,e,det_r\n");
        for (f, r) in c.folds.iter().enumerate() {
            let _ = writeln!(s, "{f},{}", join(r));
        }
        let m = c.mean;
        let _ = writeln!(s, "mean,{}", join(&m));
        let p = dir.join(format!("{}.csv", cell_stem(c.latent_dim, c.beta, c.arm)));
        write_text(&p, &s)?;
        paths.push(p);
        let sd = c.std;
        let pairs: Vec<String> = m
            .fields()
            .iter()
            .zip(sd.fields())
            .map(|(a, b)| format!("{a},{b}"))
            .collect();
        let _ = writeln!(
            summary,
            "{},{},{},{}",
            c.latent_dim,
            c.beta,
            c.arm.name(),
            pairs.join(",")
        );
    }
    let p = dir.join("summary.csv");
    write_text(&p, &summary)?;
    paths.push(p);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic::{generate_corpus, SyntheticSpec};

    #[test]
    fn folds_partition_the_index_set() {
        let f = kfold_split(60, 10, 3).unwrap();
        assert!(f.iter().all(|x| x.len() == 6));
        let loo = kfold_split(10, 10, 0).unwrap();
        assert!(loo.iter().all(|x| x.len() == 1));
        let mut all: Vec<usize> = kfold_split(23, 4, 1).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let sizes: Vec<usize> = kfold_split(23, 4, 1).unwrap().iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(kfold_split(3, 4, 0).is_err());
        assert_eq!(kfold_split(20, 4, 5).unwrap(), kfold_split(20, 4, 5).unwrap());
    }

    #[test]
    fn config_rejects_bad_sweeps() {
        let mut c = ExperimentConfig {
            folds: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.folds = 2;
        assert!(c.validate().is_ok());
        c.betas.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn mean_std_examples() {
        let r = |x| FoldMetrics {
            l2: x,
            rcd: 2.0 * x,
            chamfer: x,
            e: 0.0,
            det_r: 1.0,
        };
        let (m, s) = mean_std(&[r(1.0), r(3.0)]);
        assert_eq!((m.l2, m.rcd, m.e, m.det_r), (2.0, 4.0, 0.0, 1.0));
        assert!((s.l2 - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.det_r, 0.0);
    }

    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                latent_dim: 2,
                channels: vec![3, 4, 4],
                cheb_order: 2,
                hidden_dense_width: 4,
                ..Default::default()
            },
            latent_dims: vec![2],
            training: TrainConfig {
                epochs: 1,
                batch_size: 4,
                ..Default::default()
            },
            folds: 2,
            arms: vec![AugmentMode::Procaug, AugmentMode::None],
            ..Default::default()
        }
    }

    fn smoke_corpus() -> Vec<Mesh> {
        generate_corpus(&SyntheticSpec {
            n_theta: 6,
            n_len: 6,
            corpus_size: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn smoke_run_writes_logs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config();
        let corpus = smoke_corpus();
        let r1 = run_experiment(&cfg, &corpus, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("d2_b0.001_procaug.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4, "header, 2 folds, mean");
        assert!(lines[3].starts_with("mean,"));

        // the mean row is the arithmetic mean of the fold rows
        let parse = |l: &str| -> Vec<f64> { l.split(',').skip(1).map(|x| x.parse().unwrap()).collect() };
        let (a, b, m) = (parse(lines[1]), parse(lines[2]), parse(lines[3]));
        for k in 0..5 {
            assert!((m[k] - (a[k] + b[k]) / 2.0).abs() <= 1e-12 * m[k].abs().max(1.0));
        }
        let summary = std::fs::read(dir.path().join("summary.csv")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let r2 = run_experiment(&cfg, &corpus, Some(dir2.path())).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(summary, std::fs::read(dir2.path().join("summary.csv")).unwrap());
    }

    #[test]
    fn fold_failure_names_the_fold() {
        let cfg = ExperimentConfig {
            model: ModelConfig {
                alpha_vertex: f64::INFINITY,
                ..smoke_config().model
            },
            ..smoke_config()
        };
        match run_experiment(&cfg, &smoke_corpus(), None) {
            Err(Error::Fold { fold: 0, source }) => assert!(matches!(*source, Error::NonFinite { .. })),
            other => panic!("expected a fold error, got {other:?}"),
        }
    }
}
