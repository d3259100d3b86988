//! On-disk activation store.
//!
//! A store is a directory:
//!
//! ```text
//! manifest.json    model metadata, per-stimulus row offsets, per-layer CRC32
//! alignment.jsonl  one record per stimulus: key + word -> subword spans
//! layer_<k>.f32    little-endian float32, row-major [all stimulus tokens × d]
//! ```
//!
//! Rows of a layer file are the concatenated token streams of the stimuli in
//! manifest order. Words are recovered by mean-pooling their subword rows.
//! Layer 0 is the embedding layer.

mod pool;
mod standardize;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

pub use pool::{pool_words, validate_spans, WordSpan};
pub use standardize::{apply_standardizer, fit_standardizer, CorpusStats, STD_FLOOR};

pub const FORMAT_NAME: &str = "whprobe-activations";
pub const FORMAT_VERSION: u32 = 1;
pub const PIPELINE_VERSION: &str = concat!("whprobe-", env!("CARGO_PKG_VERSION"));
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStimulus {
    pub key: String,
    pub row_offset: u32,
    pub n_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub layer: u32,
    pub file: String,
    pub rows: u32,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub pipeline_version: String,
    pub model_id: String,
    pub d: u32,
    pub n_layers: u32,
    pub dtype: String,
    pub endianness: String,
    pub stimulus_count: u32,
    pub total_rows: u32,
    pub stimuli: Vec<ManifestStimulus>,
    pub layers: Vec<ManifestLayer>,
    /// Free-form producer details (framework, precision, parser, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Alignment record for one stimulus, as stored in `alignment.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub key: String,
    pub words: Vec<WordSpan>,
}

/// Word-to-subword spans for every stimulus, by key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentMap {
    spans: HashMap<String, Vec<WordSpan>>,
}

impl AlignmentMap {
    pub fn get(&self, key: &str) -> Option<&[WordSpan]> {
        self.spans.get(key).map(Vec::as_slice)
    }

    pub fn insert(&mut self, key: impl Into<String>, words: Vec<WordSpan>) {
        self.spans.insert(key.into(), words);
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Pooled word vectors of one stimulus at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub model_id: String,
    pub layer: usize,
    pub stimulus_key: String,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    key: String,
    row_offset: usize,
    n_tokens: usize,
    words: Vec<WordSpan>,
}

/// In-memory activation store.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    model_id: String,
    d: usize,
    metadata: BTreeMap<String, String>,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    layers: Vec<Vec<f32>>,
}

impl ActivationStore {
    pub fn new(model_id: impl Into<String>, d: usize, n_layers: usize) -> Self {
        Self {
            model_id: model_id.into(),
            d,
            metadata: BTreeMap::new(),
            entries: Vec::new(),
            index: HashMap::new(),
            layers: vec![Vec::new(); n_layers],
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.key.as_str())
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Appends one stimulus. `layer_tokens[k]` holds layer `k` as row-major
    /// `[n_tokens × d]`.
    pub fn push(&mut self, key: impl Into<String>, words: Vec<WordSpan>, layer_tokens: Vec<Vec<f32>>) -> Result<()> {
        let key = key.into();
        if self.index.contains_key(&key) {
            return Err(Error::Store(format!("duplicate stimulus key `{key}`")));
        }
        if layer_tokens.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "`{key}` has {} layers, store has {}",
                layer_tokens.len(),
                self.layers.len()
            )));
        }
        let n_values = layer_tokens.first().map_or(0, Vec::len);
        if self.d == 0 || !n_values.is_multiple_of(self.d) {
            return Err(Error::Dimension(format!(
                "`{key}`: {n_values} values are not rows of width {}",
                self.d
            )));
        }
        let n_tokens = n_values / self.d;
        for (k, rows) in layer_tokens.iter().enumerate() {
            if rows.len() != n_values {
                return Err(Error::Dimension(format!(
                    "`{key}` layer {k} has {} values, layer 0 has {n_values}",
                    rows.len()
                )));
            }
            if rows.iter().any(|x| !x.is_finite()) {
                return Err(Error::Store(format!("`{key}` layer {k} has non-finite values")));
            }
        }
        validate_spans(&words, n_tokens)?;
        let row_offset = self.layers.first().map_or(0, |l| l.len() / self.d);
        for (dst, src) in self.layers.iter_mut().zip(layer_tokens) {
            dst.extend(src);
        }
        self.index.insert(key.clone(), self.entries.len());
        self.entries.push(Entry {
            key,
            row_offset,
            n_tokens,
            words,
        });
        Ok(())
    }

    fn entry(&self, key: &str) -> Result<&Entry> {
        self.position(key)
            .map(|i| &self.entries[i])
            .ok_or_else(|| Error::Store(format!("store `{}` has no stimulus `{key}`", self.model_id)))
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Store(format!(
                "store `{}` has {} layers, asked for layer {layer}",
                self.model_id,
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Row-major `[n_tokens × d]` subword vectors of one stimulus.
    pub fn token_rows(&self, layer: usize, key: &str) -> Result<&[f32]> {
        self.check_layer(layer)?;
        let e = self.entry(key)?;
        Ok(&self.layers[layer][e.row_offset * self.d..(e.row_offset + e.n_tokens) * self.d])
    }

    pub fn n_tokens(&self, key: &str) -> Result<usize> {
        Ok(self.entry(key)?.n_tokens)
    }

    pub fn word_spans(&self, key: &str) -> Result<&[WordSpan]> {
        Ok(&self.entry(key)?.words)
    }

    pub fn alignment(&self) -> AlignmentMap {
        let mut map = AlignmentMap::default();
        for e in &self.entries {
            map.insert(e.key.clone(), e.words.clone());
        }
        map
    }

    /// Mean-pooled vector of word `word` (0-based).
    pub fn word_vector(&self, layer: usize, key: &str, word: usize) -> Result<Vec<f64>> {
        let rows = self.token_rows(layer, key)?;
        let span = *self
            .entry(key)?
            .words
            .get(word)
            .ok_or_else(|| Error::Alignment(format!("`{key}` has no word {word} in its alignment")))?;
        Ok(pool::pool_span(rows, self.d, span))
    }

    pub fn layer_activations(&self, layer: usize, key: &str) -> Result<LayerActivations> {
        let rows = self.token_rows(layer, key)?;
        Ok(LayerActivations {
            model_id: self.model_id.clone(),
            layer,
            stimulus_key: key.to_string(),
            vectors: pool_words(rows, self.d, &self.entry(key)?.words)?,
        })
    }

    /// True when every stored float of `layer` for `key` has the same bit
    /// pattern in both stores.
    pub fn rows_bit_identical(&self, other: &ActivationStore, layer: usize, key: &str) -> Result<bool> {
        let a = self.token_rows(layer, key)?;
        let b = other.token_rows(layer, key)?;
        Ok(a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Bitwise equality of all contents, metadata included.
    pub fn bit_identical(&self, other: &ActivationStore) -> bool {
        self.model_id == other.model_id
            && self.d == other.d
            && self.metadata == other.metadata
            && self.entries == other.entries
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    fn manifest(&self, layer_info: Vec<ManifestLayer>) -> Manifest {
        Manifest {
            format: FORMAT_NAME.into(),
            format_version: FORMAT_VERSION,
            pipeline_version: PIPELINE_VERSION.into(),
            model_id: self.model_id.clone(),
            d: self.d as u32,
            n_layers: self.layers.len() as u32,
            dtype: "float32".into(),
            endianness: "little".into(),
            stimulus_count: self.entries.len() as u32,
            total_rows: self.entries.iter().map(|e| e.n_tokens as u32).sum(),
            stimuli: self
                .entries
                .iter()
                .map(|e| ManifestStimulus {
                    key: e.key.clone(),
                    row_offset: e.row_offset as u32,
                    n_tokens: e.n_tokens as u32,
                })
                .collect(),
            layers: layer_info,
            metadata: self.metadata.clone(),
        }
    }
}

pub fn layer_file_name(layer: usize) -> String {
    format!("layer_{layer}.f32")
}

struct WriteLock {
    path: PathBuf,
}

impl WriteLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Store(format!("{} is locked by another writer", dir.display()))
                } else {
                    Error::Io {
                        path: path.clone(),
                        source: e,
                    }
                }
            })?;
        Ok(Self { path })
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes `store` into `dir`, replacing any previous store there. Only one
/// writer may hold a directory at a time.
pub fn write_store(dir: &Path, store: &ActivationStore) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let _lock = WriteLock::acquire(dir)?;
    let mut layer_info = Vec::with_capacity(store.layers.len());
    for (k, values) in store.layers.iter().enumerate() {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for x in values {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let file = layer_file_name(k);
        write_bytes_atomic(&dir.join(&file), &bytes)?;
        layer_info.push(ManifestLayer {
            layer: k as u32,
            file,
            rows: (values.len() / store.d.max(1)) as u32,
            bytes: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
    }
    let mut align = Vec::new();
    for e in &store.entries {
        serde_json::to_writer(
            &mut align,
            &AlignmentRecord {
                key: e.key.clone(),
                words: e.words.clone(),
            },
        )?;
        align.push(b'\n');
    }
    write_bytes_atomic(&dir.join("alignment.jsonl"), &align)?;
    let manifest = store.manifest(layer_info);
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    write_bytes_atomic(&dir.join("manifest.json"), &text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::Store(format!(
            "{}: unknown format `{}`",
            path.display(),
            manifest.format
        )));
    }
    if manifest.dtype != "float32" || manifest.endianness != "little" {
        return Err(Error::Store(format!(
            "{}: unsupported dtype/endianness {}/{}",
            path.display(),
            manifest.dtype,
            manifest.endianness
        )));
    }
    Ok(manifest)
}

fn read_alignment(dir: &Path) -> Result<Vec<AlignmentRecord>> {
    let path = dir.join("alignment.jsonl");
    let file = File::open(&path).map_err(io_at(&path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_at(&path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads and verifies a store written by [`write_store`] or any conforming
/// producer.
pub fn read_store(dir: &Path) -> Result<ActivationStore> {
    let manifest = read_manifest(dir)?;
    let d = manifest.d as usize;
    if d == 0 {
        return Err(Error::Dimension("manifest declares d = 0".into()));
    }
    if manifest.layers.len() != manifest.n_layers as usize {
        return Err(Error::Store(format!(
            "manifest lists {} layer files for n_layers = {}",
            manifest.layers.len(),
            manifest.n_layers
        )));
    }
    if manifest.stimuli.len() != manifest.stimulus_count as usize {
        return Err(Error::Store(format!(
            "manifest lists {} stimuli for stimulus_count = {}",
            manifest.stimuli.len(),
            manifest.stimulus_count
        )));
    }
    let alignment = read_alignment(dir)?;
    if alignment.len() != manifest.stimuli.len() {
        return Err(Error::Store(format!(
            "alignment.jsonl has {} records, manifest has {} stimuli",
            alignment.len(),
            manifest.stimuli.len()
        )));
    }
    let mut expected_offset = 0u32;
    for (m, a) in manifest.stimuli.iter().zip(&alignment) {
        if m.key != a.key {
            return Err(Error::Store(format!(
                "alignment record `{}` does not match manifest stimulus `{}`",
                a.key, m.key
            )));
        }
        if m.row_offset != expected_offset {
            return Err(Error::Store(format!(
                "stimulus `{}` row_offset {} should be {expected_offset}",
                m.key, m.row_offset
            )));
        }
        expected_offset += m.n_tokens;
    }
    if expected_offset != manifest.total_rows {
        return Err(Error::Dimension(format!(
            "stimuli cover {expected_offset} rows, manifest total_rows is {}",
            manifest.total_rows
        )));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (k, info) in manifest.layers.iter().enumerate() {
        if info.layer as usize != k {
            return Err(Error::Store(format!("layer entry {k} is labelled {}", info.layer)));
        }
        let path = dir.join(&info.file);
        let bytes = fs::read(&path).map_err(io_at(&path))?;
        let actual = crc32fast::hash(&bytes);
        if actual != info.crc32 {
            return Err(Error::Checksum {
                file: path,
                expected: info.crc32,
                actual,
            });
        }
        let want = manifest.total_rows as u64 * d as u64 * 4;
        if bytes.len() as u64 != want || info.bytes != want || info.rows != manifest.total_rows {
            return Err(Error::Dimension(format!(
                "{}: {} bytes / {} rows, manifest implies {want} bytes / {} rows of d = {d}",
                path.display(),
                bytes.len(),
                info.rows,
                manifest.total_rows
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Store(format!("{}: non-finite values", path.display())));
        }
        layers.push(values);
    }
    let mut store = ActivationStore::new(manifest.model_id.clone(), d, manifest.n_layers as usize);
    store.metadata = manifest.metadata.clone();
    for (m, a) in manifest.stimuli.iter().zip(alignment) {
        validate_spans(&a.words, m.n_tokens as usize)
            .map_err(|e| Error::Store(format!("stimulus `{}`: {e}", m.key)))?;
        if store.index.insert(m.key.clone(), store.entries.len()).is_some() {
            return Err(Error::Store(format!("duplicate stimulus key `{}`", m.key)));
        }
        store.entries.push(Entry {
            key: m.key.clone(),
            row_offset: m.row_offset as usize,
            n_tokens: m.n_tokens as usize,
            words: a.words,
        });
    }
    store.layers = layers;
    Ok(store)
}

/// Writes `bytes` to `path` through a temporary sibling and a rename,
/// creating parent directories as needed.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_at(parent))?;
        }
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = File::create(&tmp).map_err(io_at(&tmp))?;
    f.write_all(bytes).map_err(io_at(&tmp))?;
    f.sync_all().map_err(io_at(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_at(path))
}
