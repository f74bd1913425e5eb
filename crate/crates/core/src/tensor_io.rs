//! Manifest-plus-blob checkpoint format.
//!
//! A checkpoint directory holds a `manifest.json` describing every layer and
//! one or more raw blob files. Blobs are headerless, row-major, little-endian
//! IEEE-754 arrays. Conv2d tensors are stored in `(C1, C2, kH, kW)` order,
//! outermost to innermost.
//!
//! Values are always widened to `f64` on load.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File name of the manifest inside a checkpoint directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Default upper bound on the number of elements of a single tensor (2^28).
pub const DEFAULT_ELEMENT_BUDGET: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("schema violation in layer `{layer}`: {reason}")]
    Schema { layer: String, reason: String },
    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),
    #[error("short read for layer `{layer}`: need {needed} bytes from offset {offset}, blob has {available}")]
    ShortRead {
        layer: String,
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("non-finite value in layer `{layer}` at flat index {index}")]
    NonFinite { layer: String, index: usize },
    #[error("layer `{layer}` has {elements} elements, exceeding the budget of {budget}")]
    TooLarge {
        layer: String,
        elements: usize,
        budget: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorIoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    Conv2d,
}

impl LayerKind {
    pub fn rank(self) -> usize {
        match self {
            LayerKind::Linear => 2,
            LayerKind::Conv2d => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// One tensor record of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
    /// `[m, n]` for linear layers, `[C1, C2, kH, kW]` for conv2d.
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Blob path relative to the manifest directory.
    pub blob: String,
    #[serde(default)]
    pub offset: u64,
}

impl LayerEntry {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.element_count() as u64 * self.dtype.size() as u64
    }

    fn validate(&self) -> Result<()> {
        let schema = |reason: String| TensorIoError::Schema {
            layer: if self.name.is_empty() {
                "<unnamed>".to_string()
            } else {
                self.name.clone()
            },
            reason,
        };
        if self.name.is_empty() {
            return Err(schema("layer name is empty".into()));
        }
        if self.shape.len() != self.kind.rank() {
            return Err(schema(format!(
                "{:?} layer needs a shape of length {}, got {}",
                self.kind,
                self.kind.rank(),
                self.shape.len()
            )));
        }
        if let Some(pos) = self.shape.iter().position(|&d| d == 0) {
            return Err(schema(format!("shape entry {pos} is zero")));
        }
        if self.blob.is_empty() {
            return Err(schema("blob path is empty".into()));
        }
        Ok(())
    }
}

/// Ordered list of layers of one model. Layer index equals position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub model_name: String,
    pub layers: Vec<LayerEntry>,
}

impl ModelManifest {
    /// Parses and validates a manifest from JSON text.
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let manifest: ModelManifest =
            serde_json::from_str(text).map_err(|source| TensorIoError::Json {
                path: origin.to_path_buf(),
                source,
            })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.layers.len());
        for entry in &self.layers {
            entry.validate()?;
            if !seen.insert(entry.name.as_str()) {
                return Err(TensorIoError::DuplicateName(entry.name.clone()));
            }
        }
        Ok(())
    }
}

/// Reads `manifest.json` (or the given file) and validates every entry.
///
/// `path` may point either at the manifest file or at the directory that
/// contains it.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ModelManifest> {
    let path = manifest_path(path.as_ref());
    let text = fs::read_to_string(&path).map_err(|source| TensorIoError::Io {
        path: path.clone(),
        source,
    })?;
    ModelManifest::from_json_str(&text, &path)
}

/// Resolves a user-supplied path to the manifest file itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Directory that blob paths of a manifest are relative to.
pub fn manifest_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

/// A loaded weight tensor, data in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub entry: LayerEntry,
    pub data: Vec<f64>,
}

impl WeightTensor {
    /// Builds a tensor from in-memory data, checking shape and finiteness.
    pub fn new(entry: LayerEntry, data: Vec<f64>) -> Result<Self> {
        entry.validate()?;
        if data.len() != entry.element_count() {
            return Err(TensorIoError::Schema {
                layer: entry.name.clone(),
                reason: format!(
                    "data has {} elements, shape {:?} needs {}",
                    data.len(),
                    entry.shape,
                    entry.element_count()
                ),
            });
        }
        check_finite(&entry.name, &data)?;
        Ok(Self { entry, data })
    }

    pub fn name(&self) -> &str {
        &self.entry.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.entry.shape
    }

    /// Row-major view of a linear layer as an `m x n` matrix.
    pub fn as_matrix(&self) -> Option<faer::MatRef<'_, f64>> {
        match self.entry.kind {
            LayerKind::Linear => Some(faer::MatRef::from_row_major_slice(
                &self.data,
                self.entry.shape[0],
                self.entry.shape[1],
            )),
            LayerKind::Conv2d => None,
        }
    }
}

/// Load options; currently only the element budget.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub max_elements: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            max_elements: DEFAULT_ELEMENT_BUDGET,
        }
    }
}

/// Loads one tensor with the default element budget.
pub fn load_tensor(manifest_dir: impl AsRef<Path>, entry: &LayerEntry) -> Result<WeightTensor> {
    load_tensor_with(manifest_dir, entry, LoadOptions::default())
}

pub fn load_tensor_with(
    manifest_dir: impl AsRef<Path>,
    entry: &LayerEntry,
    opts: LoadOptions,
) -> Result<WeightTensor> {
    entry.validate()?;
    let elements = entry.element_count();
    if elements > opts.max_elements {
        return Err(TensorIoError::TooLarge {
            layer: entry.name.clone(),
            elements,
            budget: opts.max_elements,
        });
    }

    let path = manifest_dir.as_ref().join(&entry.blob);
    let io_err = |source| TensorIoError::Io {
        path: path.clone(),
        source,
    };
    let mut file = File::open(&path).map_err(io_err)?;
    let available = file.metadata().map_err(io_err)?.len();
    let needed = entry.byte_len();
    if available < entry.offset.saturating_add(needed) {
        return Err(TensorIoError::ShortRead {
            layer: entry.name.clone(),
            offset: entry.offset,
            needed,
            available,
        });
    }
    file.seek(SeekFrom::Start(entry.offset)).map_err(io_err)?;
    let mut bytes = vec![0u8; needed as usize];
    file.read_exact(&mut bytes).map_err(io_err)?;

    let data = decode_le(&bytes, entry.dtype);
    check_finite(&entry.name, &data)?;
    Ok(WeightTensor {
        entry: entry.clone(),
        data,
    })
}

fn decode_le(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    }
}

fn check_finite(layer: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorIoError::NonFinite {
            layer: layer.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

/// Writes checkpoints in the same format [`load_manifest`] reads.
///
/// Every layer is appended to a single blob file (`weights.bin` unless
/// configured otherwise) and the manifest is written on [`finish`].
///
/// [`finish`]: CheckpointWriter::finish
pub struct CheckpointWriter {
    dir: PathBuf,
    blob_name: String,
    blob: File,
    offset: u64,
    manifest: ModelManifest,
}

impl CheckpointWriter {
    pub fn create(dir: impl AsRef<Path>, model_name: impl Into<String>) -> Result<Self> {
        Self::create_with_blob(dir, model_name, "weights.bin")
    }

    pub fn create_with_blob(
        dir: impl AsRef<Path>,
        model_name: impl Into<String>,
        blob_name: &str,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| TensorIoError::Io {
            path: dir.clone(),
            source,
        })?;
        let blob_path = dir.join(blob_name);
        let blob = File::create(&blob_path).map_err(|source| TensorIoError::Io {
            path: blob_path,
            source,
        })?;
        Ok(Self {
            dir,
            blob_name: blob_name.to_string(),
            blob,
            offset: 0,
            manifest: ModelManifest {
                model_name: model_name.into(),
                layers: Vec::new(),
            },
        })
    }

    /// Appends one layer. `data` is row-major and must match `shape`.
    pub fn add_layer(
        &mut self,
        name: &str,
        kind: LayerKind,
        shape: &[usize],
        dtype: DType,
        data: &[f64],
    ) -> Result<&LayerEntry> {
        let entry = LayerEntry {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            dtype,
            blob: self.blob_name.clone(),
            offset: self.offset,
        };
        entry.validate()?;
        if self.manifest.layers.iter().any(|l| l.name == name) {
            return Err(TensorIoError::DuplicateName(name.to_string()));
        }
        if data.len() != entry.element_count() {
            return Err(TensorIoError::Schema {
                layer: name.to_string(),
                reason: format!(
                    "data has {} elements, shape needs {}",
                    data.len(),
                    entry.element_count()
                ),
            });
        }
        check_finite(name, data)?;

        let mut bytes = Vec::with_capacity(entry.byte_len() as usize);
        match dtype {
            DType::F32 => data
                .iter()
                .for_each(|&v| bytes.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => data
                .iter()
                .for_each(|&v| bytes.extend_from_slice(&v.to_le_bytes())),
        }
        let path = self.dir.join(&self.blob_name);
        self.blob
            .write_all(&bytes)
            .map_err(|source| TensorIoError::Io { path, source })?;
        self.offset += bytes.len() as u64;
        self.manifest.layers.push(entry);
        Ok(self.manifest.layers.last().expect("just pushed"))
    }

    /// Flushes the blob and writes `manifest.json`; returns the manifest.
    pub fn finish(mut self) -> Result<ModelManifest> {
        let blob_path = self.dir.join(&self.blob_name);
        self.blob.flush().map_err(|source| TensorIoError::Io {
            path: blob_path,
            source,
        })?;
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|source| {
            TensorIoError::Json {
                path: path.clone(),
                source,
            }
        })?;
        fs::write(&path, text).map_err(|source| TensorIoError::Io { path, source })?;
        Ok(self.manifest)
    }
}
