use anyhow::{Context, Result};
use cotrain::corpus::Corpus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Written first by every command that produces files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub corpus_hash: Option<String>,
    /// Output name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: None,
            config: serde_json::Value::Null,
            corpus_hash: None,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn artifact(mut self, name: &str, path: &str) -> Self {
        self.artifacts.insert(name.to_string(), path.to_string());
        self
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_json(&out.join(MANIFEST_FILE), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn put_str(h: &mut Sha256, s: &str) {
    h.update((s.len() as u64).to_le_bytes());
    h.update(s.as_bytes());
}

/// SHA-256 over the corpus contents: ids, frame bits, labels, speakers and
/// the window stride. Independent of file names and manifest formatting.
pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    h.update((corpus.window_stride as u64).to_le_bytes());
    h.update((corpus.len() as u64).to_le_bytes());
    for u in &corpus.utterances {
        put_str(&mut h, &u.id);
        h.update((u.frames.rows() as u64).to_le_bytes());
        h.update((u.frames.cols() as u64).to_le_bytes());
        for v in u.frames.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        match &u.gold_labels {
            Some(labels) => {
                h.update([1]);
                labels.iter().for_each(|l| put_str(&mut h, l));
            }
            None => h.update([0]),
        }
        match &u.speaker {
            Some(s) => {
                h.update([1]);
                put_str(&mut h, s);
            }
            None => h.update([0]),
        }
    }
    format!("{:x}", h.finalize())
}
