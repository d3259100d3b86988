//! Content-hash stamps that let a stage skip work when neither its inputs
//! nor its previous outputs have changed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Stamp {
    inputs: String,
    outputs: BTreeMap<PathBuf, String>,
}

/// Accumulates everything a stage's result depends on.
#[derive(Default)]
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new(stage: &str) -> Self {
        let mut f = Self::default();
        f.bytes(stage.as_bytes());
        f
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn json<T: Serialize>(&mut self, value: &T) -> Result<&mut Self> {
        let v = serde_json::to_vec(value)?;
        Ok(self.bytes(&v))
    }

    /// A file's content. Activation-store directories hash their manifest
    /// and alignment, which pin the layer files through checksums.
    pub fn path(&mut self, path: &Path) -> Result<&mut Self> {
        self.bytes(path.to_string_lossy().as_bytes());
        if path.join("manifest.json").is_file() {
            for name in ["manifest.json", "alignment.jsonl"] {
                let p = path.join(name);
                if p.is_file() {
                    self.bytes(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
                }
            }
            return Ok(self);
        }
        self.bytes(&fs::read(path).with_context(|| format!("reading {}", path.display()))?);
        Ok(self)
    }

    pub fn finish(&self) -> String {
        hex(&self.0.clone().finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| hex(&Sha256::digest(&b)))
}

fn stamp_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(".stamps").join(format!("{name}.json"))
}

/// True when the stamp records the same input hash and every recorded
/// output still has its recorded content.
pub fn up_to_date(out_dir: &Path, name: &str, inputs: &str) -> bool {
    let Ok(text) = fs::read_to_string(stamp_path(out_dir, name)) else {
        return false;
    };
    let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
        return false;
    };
    stamp.inputs == inputs
        && stamp
            .outputs
            .iter()
            .all(|(p, h)| digest_file(&out_dir.join(p)).as_deref() == Some(h.as_str()))
}

pub fn record(out_dir: &Path, name: &str, inputs: &str, outputs: &[PathBuf]) -> Result<()> {
    let mut map = BTreeMap::new();
    for p in outputs {
        let rel = p.strip_prefix(out_dir).unwrap_or(p).to_path_buf();
        let h = digest_file(p).with_context(|| format!("hashing output {}", p.display()))?;
        map.insert(rel, h);
    }
    let stamp = Stamp {
        inputs: inputs.to_string(),
        outputs: map,
    };
    let bytes = serde_json::to_vec_pretty(&stamp)?;
    whprobe::store::write_bytes_atomic(&stamp_path(out_dir, name), &bytes)?;
    Ok(())
}

/// Files directly under `dir`, sorted.
pub fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}
