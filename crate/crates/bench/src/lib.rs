//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use meshvae_core::harness::experiment::corpus_hierarchy;
use meshvae_core::harness::synthetic::{generate_corpus, SyntheticSpec};
use meshvae_core::model::{build_model, Model, ModelConfig};
use meshvae_core::Mesh;

/// The default synthetic corpus (642-vertex tubes) truncated to `n` meshes.
pub fn desk_corpus(n: usize) -> Vec<Mesh> {
    generate_corpus(&SyntheticSpec {
        corpus_size: n,
        ..Default::default()
    })
    .expect("default synthetic spec is valid")
}

/// A freshly initialised default model over `corpus`.
pub fn desk_model(corpus: &[Mesh]) -> Model {
    let cfg = ModelConfig::default();
    let h = corpus_hierarchy(corpus, &cfg).expect("hierarchy");
    build_model(&cfg, Arc::new(h), 0).expect("model")
}
