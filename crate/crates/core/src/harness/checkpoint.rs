//! Binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8     magic "MVAECKPT"
//! bytes 8..16    header length H, u64 little-endian
//! bytes 16..16+H JSON header (see `Header`)
//! rest           little-endian f64 payload, in order:
//!                  parameters (row-major, in header order)
//!                  root mesh vertices (N x 3)
//!                  per level: coarse vertices, then Q_d and Q_u as
//!                  (row, col, value) triplets
//! ```
//!
//! Triplet indices are stored as f64, which is exact below 2^53.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mesh::{Face, Mesh, Vec3};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::pooling::{PoolingHierarchy, PoolingLevel};
use crate::sparse::SparseMatrix;

pub const MAGIC: &[u8; 8] = b"MVAECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub hierarchy: PoolingHierarchy,
    pub params: ModelParams,
    pub seed: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, epoch: u64) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            config: model.config.clone(),
            hierarchy: (*model.hierarchy).clone(),
            params: model.params.clone(),
            seed,
            epoch,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_params(self.config, Arc::new(self.hierarchy), self.params)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct LevelEntry {
    coarse_vertices: usize,
    coarse_faces: Vec<Face>,
    down_nnz: usize,
    up_nnz: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    seed: u64,
    epoch: u64,
    factor: f64,
    root_vertices: usize,
    root_faces: Vec<Face>,
    params: Vec<ParamEntry>,
    levels: Vec<LevelEntry>,
}

fn push_vertices(out: &mut Vec<f64>, v: &[Vec3]) {
    out.extend(v.iter().flatten());
}

fn push_triplets(out: &mut Vec<f64>, s: &SparseMatrix) {
    for (r, c, v) in s.entries() {
        out.extend([r as f64, c as f64, v]);
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let h = &ck.hierarchy;
    let root = &h
        .levels
        .first()
        .ok_or_else(|| Error::contract("checkpoint needs a hierarchy with at least one level"))?
        .mesh_fine;
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for (name, t) in ck.params.names.iter().zip(&ck.params.tensors) {
        params.push(ParamEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset: payload.len(),
        });
        payload.extend_from_slice(t.data());
    }
    push_vertices(&mut payload, root.vertices());
    let mut levels = Vec::new();
    for l in &h.levels {
        push_vertices(&mut payload, l.mesh_coarse.vertices());
        push_triplets(&mut payload, &l.down);
        push_triplets(&mut payload, &l.up);
        levels.push(LevelEntry {
            coarse_vertices: l.coarse_count(),
            coarse_faces: l.mesh_coarse.faces().to_vec(),
            down_nnz: l.down.nnz(),
            up_nnz: l.up.nnz(),
        });
    }
    let header = Header {
        version: ck.version,
        config: ck.config.clone(),
        seed: ck.seed,
        epoch: ck.epoch,
        factor: h.factor,
        root_vertices: root.num_vertices(),
        root_faces: root.faces().to_vec(),
        params,
        levels,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::contract(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corrupt(offset: usize, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset,
        message: message.into(),
    }
}

/// Sequential reader over the f64 payload that reports byte offsets.
struct Payload<'a> {
    bytes: &'a [u8],
    base: usize,
    pos: usize,
}

impl Payload<'_> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let need = n
            .checked_mul(8)
            .ok_or_else(|| corrupt(self.offset(), "length overflow"))?;
        if self.bytes.len() - self.pos < need {
            return Err(corrupt(
                self.base + self.bytes.len(),
                format!("file ends inside {what} ({need} bytes expected at {})", self.offset()),
            ));
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.pos += need;
        Ok(out)
    }

    fn vertices(&mut self, n: usize, what: &str) -> Result<Vec<Vec3>> {
        Ok(self
            .take(3 * n, what)?
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    fn sparse(&mut self, rows: usize, cols: usize, nnz: usize, what: &str) -> Result<SparseMatrix> {
        let at = self.offset();
        let raw = self.take(3 * nnz, what)?;
        let index = |x: f64| -> Option<usize> { (x >= 0.0 && x.fract() == 0.0 && x < 9.0e15).then_some(x as usize) };
        let mut trip = Vec::with_capacity(nnz);
        for (k, c) in raw.chunks_exact(3).enumerate() {
            match (index(c[0]), index(c[1])) {
                (Some(r), Some(cc)) => trip.push((r, cc, c[2])),
                _ => return Err(corrupt(at + 24 * k, format!("{what}: bad triplet index"))),
            }
        }
        SparseMatrix::from_triplets(rows, cols, trip).map_err(|e| corrupt(at, format!("{what}: {e}")))
    }
}

fn json_offset(json: &[u8], e: &serde_json::Error) -> usize {
    // serde_json reports 1-based line and column; convert to a byte offset
    let mut line = 1;
    let mut start = 0;
    for (i, b) in json.iter().enumerate() {
        if line == e.line() {
            break;
        }
        if *b == b'\n' {
            line += 1;
            start = i + 1;
        }
    }
    (start + e.column().saturating_sub(1)).min(json.len())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(corrupt(0, "missing checkpoint magic"));
    }
    if bytes.len() < 16 {
        return Err(corrupt(bytes.len(), "file ends inside the header length"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| corrupt(8, "header length overflows"))?;
    if bytes.len() - 16 < hlen {
        return Err(corrupt(bytes.len(), format!("file ends inside the {hlen}-byte header")));
    }
    let json = &bytes[16..16 + hlen];
    // Read the version first so a newer layout reports a mismatch rather
    // than a parse error.
    #[derive(Deserialize)]
    struct VersionOnly {
        version: u32,
    }
    let v: VersionOnly =
        serde_json::from_slice(json).map_err(|e| corrupt(16 + json_offset(json, &e), e.to_string()))?;
    if v.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: v.version,
            expected: FORMAT_VERSION,
        });
    }
    let h: Header = serde_json::from_slice(json).map_err(|e| corrupt(16 + json_offset(json, &e), e.to_string()))?;

    let base = 16 + hlen;
    let rest = &bytes[base..];
    if rest.len() % 8 != 0 {
        return Err(corrupt(
            base + rest.len() - rest.len() % 8,
            "payload is not a whole number of f64 values",
        ));
    }
    let mut p = Payload {
        bytes: rest,
        base,
        pos: 0,
    };
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for e in &h.params {
        if e.offset * 8 != p.pos {
            return Err(corrupt(
                p.offset(),
                format!("parameter {} offset {} out of sequence", e.name, e.offset),
            ));
        }
        let data = p.take(e.rows * e.cols, &e.name)?;
        names.push(e.name.clone());
        tensors.push(Tensor::new(e.rows, e.cols, data));
    }
    let at = p.offset();
    let root_v = p.vertices(h.root_vertices, "root vertices")?;
    let mut fine = Mesh::new(root_v, h.root_faces).map_err(|e| corrupt(at, format!("root mesh: {e}")))?;
    let root = fine.clone();
    let mut levels = Vec::new();
    for (k, l) in h.levels.iter().enumerate() {
        let at = p.offset();
        let cv = p.vertices(l.coarse_vertices, "coarse vertices")?;
        let coarse = Mesh::new(cv, l.coarse_faces.clone()).map_err(|e| corrupt(at, format!("level {k} mesh: {e}")))?;
        let down = p.sparse(coarse.num_vertices(), fine.num_vertices(), l.down_nnz, "Q_d")?;
        let up = p.sparse(fine.num_vertices(), coarse.num_vertices(), l.up_nnz, "Q_u")?;
        levels.push(PoolingLevel {
            mesh_fine: fine,
            mesh_coarse: coarse.clone(),
            down: Arc::new(down),
            up: Arc::new(up),
        });
        fine = coarse;
    }
    if p.pos != rest.len() {
        return Err(corrupt(p.offset(), "trailing bytes after the payload"));
    }
    let hierarchy = PoolingHierarchy::from_levels(levels, h.factor, &root)?;
    Ok(Checkpoint {
        version: h.version,
        config: h.config,
        hierarchy,
        params: ModelParams { names, tensors },
        seed: h.seed,
        epoch: h.epoch,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiment::corpus_hierarchy;
    use crate::harness::synthetic::{generate_corpus, SyntheticSpec};
    use crate::model::{build_model, evaluate};

    fn sample() -> (Checkpoint, Vec<Mesh>) {
        let corpus = generate_corpus(&SyntheticSpec {
            n_theta: 6,
            n_len: 8,
            corpus_size: 3,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            latent_dim: 3,
            beta: 8.5e-3,
            channels: vec![3, 4, 4],
            cheb_order: 3,
            hidden_dense_width: 5,
            ..Default::default()
        };
        let h = Arc::new(corpus_hierarchy(&corpus, &cfg).unwrap());
        let m = build_model(&cfg, h, 11).unwrap();
        (Checkpoint::from_model(&m, 11, 7), corpus)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ck, corpus) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| c.params.flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ck));
        let before = evaluate(&ck.clone().into_model().unwrap(), &corpus).unwrap();
        let after = evaluate(&back.into_model().unwrap(), &corpus).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn truncation_and_corruption_report_offsets() {
        let (ck, _) = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        for cut in [4, 12, 40, bytes.len() - 8] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut, "offset {offset} > {cut}"),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[16] = b'!';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Checkpoint { offset: 16, .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Checkpoint { offset: 0, .. })
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (mut ck, _) = sample();
        ck.version = FORMAT_VERSION + 1;
        let bytes = encode_checkpoint(&ck).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::VersionMismatch { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
        ));
    }
}
