//! Per-command stamps under `<out>/.stamps/`. A stamp records a fingerprint of the
//! command's inputs and the hashes of the files it wrote; a rerun with the same
//! fingerprint whose outputs are untouched is skipped.

use modfactory_core::hashing::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct Stamp {
    inputs: String,
    /// Output path relative to the output directory, and its SHA-256.
    outputs: BTreeMap<String, String>,
}

/// Accumulates the inputs of one command.
pub struct Fingerprint(Vec<String>);

impl Fingerprint {
    pub fn new(command: &str) -> Self {
        Fingerprint(vec![
            command.to_string(),
            modfactory_core::GENERATOR_VERSION.to_string(),
        ])
    }

    pub fn value(mut self, name: &str, v: &impl Serialize) -> Self {
        let json = serde_json::to_string(v).expect("fingerprint input serializes");
        self.0.push(format!("{name}={json}"));
        self
    }

    pub fn file(mut self, name: &str, path: &Path) -> std::io::Result<Self> {
        let hash = sha256_hex(&std::fs::read(path)?);
        self.0.push(format!("{name}@{hash}"));
        Ok(self)
    }

    fn digest(&self) -> String {
        sha256_hex(self.0.join("\n").as_bytes())
    }
}

pub struct Stamps {
    out: PathBuf,
    pub force: bool,
}

impl Stamps {
    pub fn new(out: &Path, force: bool) -> Self {
        Stamps {
            out: out.to_path_buf(),
            force,
        }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.out.join(".stamps").join(format!("{key}.json"))
    }

    /// True when `key` last ran with these inputs and its outputs are unchanged.
    pub fn is_fresh(&self, key: &str, fp: &Fingerprint) -> bool {
        if self.force {
            return false;
        }
        let Ok(text) = std::fs::read_to_string(self.path(key)) else {
            return false;
        };
        let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
            return false;
        };
        stamp.inputs == fp.digest()
            && stamp
                .outputs
                .iter()
                .all(|(rel, hash)| std::fs::read(self.out.join(rel)).is_ok_and(|bytes| sha256_hex(&bytes) == *hash))
    }

    pub fn record(&self, key: &str, fp: &Fingerprint, outputs: &[PathBuf]) -> std::io::Result<()> {
        let mut hashes = BTreeMap::new();
        for p in outputs {
            let rel = p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().into_owned();
            hashes.insert(rel, sha256_hex(&std::fs::read(p)?));
        }
        let stamp = Stamp {
            inputs: fp.digest(),
            outputs: hashes,
        };
        let path = self.path(key);
        std::fs::create_dir_all(path.parent().expect("stamp has a parent"))?;
        std::fs::write(
            path,
            serde_json::to_string_pretty(&stamp).expect("stamp serializes") + "\n",
        )
    }

    /// Drops a stamp so the next run redoes the work.
    pub fn clear(&self, key: &str) {
        let _ = std::fs::remove_file(self.path(key));
    }
}
