//! Window embeddings and the `AEMB1` matrix exchange format.
//!
//! `AEMB1` layout, all integers little-endian:
//!
//! ```text
//! "AEMB1\n"          6 bytes magic
//! dim                u32
//! count              u64
//! values             count * dim f32, row-major
//! ```
//!
//! Row order is given by a sidecar JSONL manifest (`<file>.manifest.jsonl`)
//! with one `{"window_id": ..., "row": k}` object per row.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autoenc::Autoencoder;
use crate::dsp::{MelSpectrogram, SPEC_PIXELS};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, jsonl_bytes, read_jsonl};

pub const AEMB_MAGIC: &[u8; 6] = b"AEMB1\n";
const HEADER_LEN: usize = 6 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendTag {
    BaselineFlatten,
    Autoencoder,
    External,
}

impl BackendTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendTag::BaselineFlatten => "baseline-flatten",
            BackendTag::Autoencoder => "autoencoder",
            BackendTag::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub window_id: String,
    pub values: Vec<f32>,
}

/// `N x dim` embeddings, row-aligned with `window_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub window_ids: Vec<String>,
    pub dim: usize,
    pub data: Vec<f32>,
    pub backend: BackendTag,
}

impl EmbeddingMatrix {
    pub fn new(window_ids: Vec<String>, dim: usize, data: Vec<f32>, backend: BackendTag) -> Result<Self> {
        if data.len() != window_ids.len() * dim {
            return Err(Error::shape(format!("{} x {dim} values", window_ids.len()), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite embedding value in row {}",
                i / dim.max(1)
            )));
        }
        Ok(Self {
            window_ids,
            dim,
            data,
            backend,
        })
    }

    pub fn from_embeddings(rows: Vec<Embedding>, dim: usize, backend: BackendTag) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.values.len() != dim {
                return Err(Error::shape(dim, row.values.len()));
            }
            ids.push(row.window_id);
            data.extend(row.values);
        }
        Self::new(ids, dim, data, backend)
    }

    pub fn rows(&self) -> usize {
        self.window_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows widened to `f64`, the precision used by clustering and projection.
    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| self.row(i).iter().map(|&v| f64::from(v)).collect())
            .collect()
    }

    /// Keeps the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            window_ids: rows.iter().map(|&i| self.window_ids[i].clone()).collect(),
            dim: self.dim,
            data: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            backend: self.backend,
        }
    }
}

/// Row-major flattening of the spectrogram image.
pub fn embed_baseline(spec: &MelSpectrogram) -> Embedding {
    Embedding {
        window_id: spec.window_id.clone(),
        values: spec.values.clone(),
    }
}

/// Serialisable description of an embedding backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    BaselineFlatten,
    Autoencoder { checkpoint: PathBuf },
    External { path: PathBuf },
}

impl BackendSpec {
    pub fn tag(&self) -> BackendTag {
        match self {
            BackendSpec::BaselineFlatten => BackendTag::BaselineFlatten,
            BackendSpec::Autoencoder { .. } => BackendTag::Autoencoder,
            BackendSpec::External { .. } => BackendTag::External,
        }
    }

    /// Loads whatever the backend refers to.
    pub fn resolve(&self) -> Result<Backend> {
        match self {
            BackendSpec::BaselineFlatten => Ok(Backend::BaselineFlatten),
            BackendSpec::Autoencoder { checkpoint } => {
                let bytes = fs::read(checkpoint)
                    .map_err(|e| Error::NotFound(format!("checkpoint {}: {e}", checkpoint.display())))?;
                Ok(Backend::Autoencoder(Arc::new(Autoencoder::from_checkpoint(&bytes)?)))
            }
            BackendSpec::External { path } => {
                if !path.exists() {
                    return Err(Error::NotFound(format!("embedding file {}", path.display())));
                }
                Ok(Backend::External(Arc::new(import_embeddings(path)?)))
            }
        }
    }
}

/// A ready-to-run backend.
#[derive(Debug, Clone)]
pub enum Backend {
    BaselineFlatten,
    Autoencoder(Arc<Autoencoder<f32>>),
    External(Arc<EmbeddingMatrix>),
}

impl Backend {
    pub fn tag(&self) -> BackendTag {
        match self {
            Backend::BaselineFlatten => BackendTag::BaselineFlatten,
            Backend::Autoencoder(_) => BackendTag::Autoencoder,
            Backend::External(_) => BackendTag::External,
        }
    }
}

/// Embeds `specs` in order. External backends join by window id.
pub fn embed_batch(backend: &Backend, specs: &[MelSpectrogram]) -> Result<EmbeddingMatrix> {
    let ids: Vec<String> = specs.iter().map(|s| s.window_id.clone()).collect();
    match backend {
        Backend::BaselineFlatten => {
            let rows = crate::par::map(specs, |s| embed_baseline(s).values);
            EmbeddingMatrix::new(ids, SPEC_PIXELS, rows.concat(), BackendTag::BaselineFlatten)
        }
        Backend::Autoencoder(net) => {
            let images: Vec<&[f32]> = specs.iter().map(|s| s.values.as_slice()).collect();
            let codes = net.encode_batch(&images)?;
            let dim = net.arch().bottleneck();
            EmbeddingMatrix::new(ids, dim, codes, BackendTag::Autoencoder)
        }
        Backend::External(table) => join_external(table, &ids),
    }
}

/// Pulls rows for `ids` out of an imported matrix.
pub fn join_external(table: &EmbeddingMatrix, ids: &[String]) -> Result<EmbeddingMatrix> {
    let index: HashMap<&str, usize> = table
        .window_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let missing: Vec<String> = ids
        .iter()
        .filter(|id| !index.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let rows: Vec<usize> = ids.iter().map(|id| index[id.as_str()]).collect();
    let mut out = table.select(&rows);
    out.backend = BackendTag::External;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub window_id: String,
    pub row: usize,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.jsonl");
    PathBuf::from(name)
}

/// Encodes the numeric payload of an `AEMB1` file.
pub fn encode_aemb(dim: usize, count: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != dim * count {
        return Err(Error::shape(format!("{count} x {dim}"), data.len()));
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(AEMB_MAGIC);
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes an `AEMB1` payload into `(dim, count, values)`.
pub fn decode_aemb(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < AEMB_MAGIC.len() || &bytes[..6] != AEMB_MAGIC {
        return Err(Error::format(0, "missing AEMB1 magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let expected = (count as u128) * (dim as u128) * 4 + HEADER_LEN as u128;
    if (bytes.len() as u128) < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload truncated: header promises {count} rows of dim {dim} ({expected} bytes)"),
        ));
    }
    if (bytes.len() as u128) > expected {
        return Err(Error::format(expected as u64, "trailing bytes after payload"));
    }
    let count = count as usize;
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dim, count, data))
}

/// Writes `<path>` and its manifest sidecar atomically.
pub fn export_embeddings(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    if matrix.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot export non-finite embeddings"));
    }
    let payload = encode_aemb(matrix.dim, matrix.rows(), &matrix.data)?;
    let manifest = jsonl_bytes(matrix.window_ids.iter().enumerate().map(|(row, id)| ManifestRow {
        window_id: id.clone(),
        row,
    }))?;
    atomic_write(&manifest_path(path), &manifest)?;
    atomic_write(path, &payload)
}

/// Reads an `AEMB1` file and its manifest. The result is tagged `external`;
/// callers that know better may re-tag it.
pub fn import_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path)?;
    let (dim, count, data) = decode_aemb(&bytes)?;
    let manifest: Vec<ManifestRow> = read_jsonl(&manifest_path(path))?;
    if manifest.len() != count {
        return Err(Error::format(
            0,
            format!("manifest lists {} rows but matrix has {count}", manifest.len()),
        ));
    }
    let mut ids = vec![String::new(); count];
    for m in manifest {
        if m.row >= count || !ids[m.row].is_empty() {
            return Err(Error::format(
                0,
                format!("bad manifest row {} for `{}`", m.row, m.window_id),
            ));
        }
        ids[m.row] = m.window_id;
    }
    EmbeddingMatrix::new(ids, dim, data, BackendTag::External)
}
