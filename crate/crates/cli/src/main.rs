//! `meshvae`: synthetic data generation, training, evaluation and latent
//! analysis from the command line.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use meshvae_core::analysis::{
    correlation_det, latent_histograms, metric_chamfer, metric_e, metric_rcd, per_vertex_rcd, rank_modes,
    rms_vertex_error, write_histograms_csv, write_matrix_csv, write_mode_curve_csv, write_per_vertex,
};
use meshvae_core::autodiff::Tensor;
use meshvae_core::harness::experiment::{arm_policy, corpus_hierarchy, join, pca_fold_metrics, split_fold};
use meshvae_core::harness::seeds::{stream_rng, stream_seed};
use meshvae_core::harness::{
    extrapolate, interpolate, kfold_split, load_checkpoint, run_experiment, save_checkpoint, Checkpoint,
};
use meshvae_core::mesh::save_mesh;
use meshvae_core::model::{build_model, train, write_epoch_csv, Model};
use meshvae_core::procaug::{alignment_report, median_reference, write_alignment_csv, AugmentMode};
use meshvae_core::{Error, Mesh, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "meshvae",
    version,
    about = "Graph-convolutional beta-VAE for fixed-topology meshes"
)]
struct Cli {
    /// TOML configuration with optional [corpus] and [experiment] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the seeds in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as OFF files.
    GenData,
    /// Per-mesh error before and after Procrustes alignment to the median mesh.
    AlignReport,
    /// Train one model on the corpus and save a checkpoint.
    Train {
        /// Hold out the first of this many folds for validation.
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// Reconstruction metrics, latent statistics and per-vertex error maps.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// k-fold comparison of the four augmentation arms.
    Ablate,
    /// k-fold runs over the configured latent sizes and betas.
    Sweep,
    /// Greedy latent-mode ranking with cumulative error curves.
    RankModes {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode Gaussian perturbations around one mesh's encoding.
    Extrapolate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus index of the mesh to perturb.
        #[arg(long, default_value_t = 0)]
        mesh: usize,
        /// Noise scales, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 0.75])]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 32)]
        count: usize,
    },
    /// Decode a straight line between two encodings.
    Interpolate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        from: usize,
        #[arg(long, default_value_t = 1)]
        to: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// k-fold PCA reconstruction at each configured latent size.
    PcaBaseline,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let ckpt = |p: Option<PathBuf>| p.unwrap_or_else(|| out.join("model.ckpt"));
    match cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::AlignReport => align(&cfg, out),
        Command::Train { holdout } => train_cmd(&cfg, out, holdout),
        Command::Eval { checkpoint } => eval(&cfg, out, &ckpt(checkpoint)),
        Command::Ablate => {
            let mut exp = cfg.experiment.clone();
            exp.arms = AugmentMode::ALL.to_vec();
            run_experiment(&exp, &cfg.corpus()?, Some(out)).map(drop)
        }
        Command::Sweep => run_experiment(&cfg.experiment, &cfg.corpus()?, Some(out)).map(drop),
        Command::RankModes { checkpoint } => {
            let model = load_model(&ckpt(checkpoint))?;
            let ranking = rank_modes(&model, &cfg.corpus()?)?;
            write_mode_curve_csv(&ranking, out.join("mode_ranking.csv"))
        }
        Command::Extrapolate {
            checkpoint,
            mesh,
            scales,
            count,
        } => extrapolate_cmd(&cfg, out, &ckpt(checkpoint), mesh, &scales, count),
        Command::Interpolate {
            checkpoint,
            from,
            to,
            steps,
        } => interpolate_cmd(&cfg, out, &ckpt(checkpoint), from, to, steps),
        Command::PcaBaseline => pca_baseline(&cfg, out),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pick<'a>(corpus: &'a [Mesh], i: usize) -> Result<&'a Mesh> {
    corpus
        .get(i)
        .ok_or_else(|| Error::Config(format!("mesh index {i} out of range (corpus has {})", corpus.len())))
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path)?.into_model()
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = out.join("corpus");
    mkdir(&dir)?;
    let corpus = cfg.corpus()?;
    for (i, m) in corpus.iter().enumerate() {
        save_mesh(m, dir.join(format!("mesh_{i:03}.off")))?;
    }
    log::info!("wrote {} meshes to {}", corpus.len(), dir.display());
    Ok(())
}

fn align(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = cfg.corpus()?;
    let r = median_reference(&corpus)?;
    log::info!("reference mesh {r}");
    let rows = alignment_report(&corpus, &corpus[r], &cfg.experiment.procrustes)?;
    write_alignment_csv(&rows, out.join("alignment.csv"))
}

fn train_cmd(cfg: &RunConfig, out: &Path, holdout: Option<usize>) -> Result<()> {
    let exp = &cfg.experiment;
    exp.model.validate()?;
    let corpus = cfg.corpus()?;
    let (train_set, val) = match holdout {
        Some(k) => split_fold(&corpus, &kfold_split(corpus.len(), k, exp.seed)?[0]),
        None => (corpus.clone(), Vec::new()),
    };
    let hierarchy = Arc::new(corpus_hierarchy(&train_set, &exp.model)?);
    let init = stream_seed(exp.seed, "init", 0);
    let mut model = build_model(&exp.model, hierarchy, init)?;
    let arm = exp.arms.first().copied().unwrap_or(AugmentMode::None);
    let policy = arm_policy(arm, &train_set, &exp.procrustes)?;
    let mut rng = stream_rng(exp.seed, "train", 0);
    let history = train(
        &mut model,
        &train_set,
        &val,
        policy.as_ref(),
        &exp.training,
        &mut rng,
        |m| {
            log::info!(
                "epoch {} loss {:.4} val E {:?} val RCD {:?}",
                m.epoch,
                m.train.total,
                m.val_e,
                m.val_rcd
            )
        },
    )?;
    write_epoch_csv(&history, out.join("epochs.csv"))?;
    save_checkpoint(
        &Checkpoint::from_model(&model, exp.seed, exp.training.epochs as u64),
        out.join("model.ckpt"),
    )
}

fn eval(cfg: &RunConfig, out: &Path, ckpt: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let corpus = cfg.corpus()?;
    let maps = out.join("rcd_maps");
    mkdir(&maps)?;
    let d = model.config.latent_dim;
    let mut rows = String::from("mesh,l2,rcd,chamfer,e\n");
    let mut latents = Vec::with_capacity(corpus.len() * d);
    for (i, m) in corpus.iter().enumerate() {
        let (mu, _) = model.encode(m.vertices())?;
        let rec = model.decode(&mu)?;
        latents.extend_from_slice(&mu);
        let _ = writeln!(
            rows,
            "{i},{},{},{},{}",
            rms_vertex_error(&rec, m.vertices())?,
            metric_rcd(&rec, m.vertices())?,
            metric_chamfer(&rec, m.vertices())?,
            metric_e(&rec, m.vertices())?
        );
        write_per_vertex(
            &per_vertex_rcd(&rec, m.vertices()),
            maps.join(format!("mesh_{i:03}.txt")),
        )?;
    }
    write_file(&out.join("eval.csv"), &rows)?;
    let lat = Tensor::new(corpus.len(), d, latents);
    write_matrix_csv(&lat, out.join("latents.csv"))?;
    let (r, det) = correlation_det(&lat)?;
    write_matrix_csv(&r, out.join("correlation.csv"))?;
    write_file(&out.join("det_r.txt"), &format!("{det}\n"))?;
    let bins = (corpus.len() / 4).clamp(1, 20);
    write_histograms_csv(&latent_histograms(&lat, bins)?, out.join("histograms.csv"))?;
    log::info!("det(R) x 100 = {det}");
    Ok(())
}

fn extrapolate_cmd(cfg: &RunConfig, out: &Path, ckpt: &Path, mesh: usize, scales: &[f64], count: usize) -> Result<()> {
    let model = load_model(ckpt)?;
    let corpus = cfg.corpus()?;
    let base = pick(&corpus, mesh)?;
    let mut summary = String::from("scale,sample,mean_rcd\n");
    for (k, &s) in scales.iter().enumerate() {
        let mut rng = stream_rng(cfg.experiment.seed, "sampling", k as u64);
        let x = extrapolate(&model, base, s, count, &mut rng)?;
        let dir = out.join(format!("extrapolate_s{s}"));
        mkdir(&dir)?;
        for (j, (m, map)) in x.meshes.iter().zip(&x.rcd_maps).enumerate() {
            save_mesh(m, dir.join(format!("sample_{j:03}.off")))?;
            write_per_vertex(map, dir.join(format!("sample_{j:03}_rcd.txt")))?;
            let mean = map.iter().sum::<f64>() / map.len() as f64;
            let _ = writeln!(summary, "{s},{j},{mean}");
        }
        log::info!("S = {s}: mean RCD {}", x.mean_rcd());
    }
    write_file(&out.join("extrapolation.csv"), &summary)
}

fn interpolate_cmd(cfg: &RunConfig, out: &Path, ckpt: &Path, from: usize, to: usize, steps: usize) -> Result<()> {
    let model = load_model(ckpt)?;
    let corpus = cfg.corpus()?;
    let path = interpolate(&model, pick(&corpus, from)?, pick(&corpus, to)?, steps)?;
    let dir = out.join(format!("interpolate_{from}_{to}"));
    mkdir(&dir)?;
    for (i, m) in path.iter().enumerate() {
        save_mesh(m, dir.join(format!("step_{i:03}.off")))?;
    }
    Ok(())
}

fn pca_baseline(cfg: &RunConfig, out: &Path) -> Result<()> {
    let exp = &cfg.experiment;
    let corpus = cfg.corpus()?;
    let folds = kfold_split(corpus.len(), exp.folds, exp.seed)?;
    let mut s = String::from("latent_dim,fold,l2,rcd,chamfer,e,det_r\n");
    for &d in &exp.latent_dims {
        for (f, idx) in folds.iter().enumerate() {
            let (train_set, test) = split_fold(&corpus, idx);
            let m = pca_fold_metrics(&train_set, &test, d).map_err(|e| Error::Fold {
                fold: f,
                source: Box::new(e),
            })?;
            let _ = writeln!(s, "{d},{f},{}", join(&m));
        }
    }
    write_file(&out.join("pca_baseline.csv"), &s)
}
