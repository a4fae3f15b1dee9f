use std::path::{Path, PathBuf};

use meshvae_core::harness::synthetic::{generate_corpus, SyntheticSpec};
use meshvae_core::harness::ExperimentConfig;
use meshvae_core::mesh::{load_mesh, validate_shared_topology};
use meshvae_core::{Error, Mesh, Result};
use serde::{Deserialize, Serialize};

/// Top-level TOML file: a `[corpus]` table with the synthetic generator
/// settings and an `[experiment]` table (with nested `model`, `training`
/// and `procrustes` tables). Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: SyntheticSpec,
    /// Read `.off`/`.obj` meshes from this directory (sorted by file name)
    /// instead of generating them.
    pub corpus_dir: Option<PathBuf>,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The master seed drives both corpus generation and the experiment.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.corpus.seed = s;
            self.experiment.seed = s;
        }
        self
    }

    pub fn corpus(&self) -> Result<Vec<Mesh>> {
        let meshes = match &self.corpus_dir {
            None => generate_corpus(&self.corpus)?,
            Some(dir) => load_dir(dir)?,
        };
        validate_shared_topology(&meshes)?;
        Ok(meshes)
    }
}

fn load_dir(dir: &Path) -> Result<Vec<Mesh>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("off" | "obj")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .off or .obj meshes in {}", dir.display())));
    }
    paths.iter().map(load_mesh).collect()
}
