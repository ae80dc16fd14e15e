//! On-disk corpus layout.
//!
//! A corpus directory holds a UTF-8 TSV manifest with one row per utterance:
//! `id`, feature file path, optional label file path, optional speaker id
//! (paths relative to the manifest). Lines starting with `#` are comments,
//! except `#window_stride=N`, which sets the training placement stride.
//!
//! Feature files are little-endian: `b"ITCF"`, `u32` version (1), `u32` frame
//! count, `u32` dimension, then the frames as row-major `f32`. Label files
//! carry one label per line.

use super::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use std::fs;
use std::path::{Path, PathBuf};

pub const FEATURE_MAGIC: &[u8; 4] = b"ITCF";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.tsv";
const STRIDE_DIRECTIVE: &str = "#window_stride=";

/// Writes a feature file. Values are stored as `f32`.
pub fn write_features(path: &Path, frames: &Matrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + frames.as_slice().len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for v in frames.as_slice() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Reads a feature file; `id` only labels error messages.
pub fn read_features(path: &Path, id: &str) -> Result<Matrix<f64>> {
    let bytes =
        fs::read(path).map_err(|e| Error::utterance(id, format!("{}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::utterance(
            id,
            format!("{}: not an ITCF feature file", path.display()),
        ));
    }
    let version = read_u32(&bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::utterance(
            id,
            format!("{}: unsupported feature version {version}", path.display()),
        ));
    }
    let rows = read_u32(&bytes, 8) as usize;
    let cols = read_u32(&bytes, 12) as usize;
    let payload = &bytes[16..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::utterance(
            id,
            format!(
                "{}: header says {rows}x{cols} ({} bytes) but payload has {} bytes",
                path.display(),
                rows * cols * 4,
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn read_labels(path: &Path, id: &str) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::utterance(id, format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect())
}

fn optional(field: Option<&str>) -> Option<&str> {
    field.map(str::trim).filter(|f| !f.is_empty())
}

/// Loads every utterance listed in a manifest. `manifest_path` may be the
/// manifest file itself or a directory containing `manifest.tsv`.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_NAME)
    } else {
        manifest_path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let base = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut stride = 1;
    let mut utterances: Vec<Utterance> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(v) = line.strip_prefix(STRIDE_DIRECTIVE) {
            stride = v
                .trim()
                .parse()
                .ok()
                .filter(|s| *s >= 1)
                .ok_or_else(|| Error::Manifest {
                    path: manifest.clone(),
                    line: lineno + 1,
                    message: format!("bad window stride {v:?}"),
                })?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or("").trim().to_string();
        let feats = optional(fields.next()).ok_or_else(|| Error::Manifest {
            path: manifest.clone(),
            line: lineno + 1,
            message: "row needs at least an id and a feature path".into(),
        })?;
        if id.is_empty() {
            return Err(Error::Manifest {
                path: manifest.clone(),
                line: lineno + 1,
                message: "empty utterance id".into(),
            });
        }
        let labels_path = optional(fields.next());
        let speaker = optional(fields.next()).map(str::to_string);

        let frames = read_features(&base.join(feats), &id)?;
        let labels = labels_path
            .map(|p| read_labels(&base.join(p), &id))
            .transpose()?;
        let utt = Utterance::new(id, frames, labels, speaker)?;
        if let Some(first) = utterances.first() {
            if first.dim() != utt.dim() {
                return Err(Error::utterance(
                    &utt.id,
                    format!(
                        "feature dimension {} differs from {} used by {}",
                        utt.dim(),
                        first.dim(),
                        first.id
                    ),
                ));
            }
        }
        utterances.push(utt);
    }
    Ok(Corpus::with_stride(utterances, stride))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `corpus` under `dir` as `manifest.tsv`, `feats/*.itcf` and
/// `labels/*.txt`. Frames are rounded to `f32`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("feats")).map_err(|e| Error::io(dir, e))?;
    let has_labels = corpus.utterances.iter().any(|u| u.gold_labels.is_some());
    if has_labels {
        fs::create_dir_all(dir.join("labels")).map_err(|e| Error::io(dir, e))?;
    }
    let mut manifest = String::new();
    if corpus.window_stride != 1 {
        manifest.push_str(&format!("{STRIDE_DIRECTIVE}{}\n", corpus.window_stride));
    }
    for (i, u) in corpus.utterances.iter().enumerate() {
        // index prefix keeps file names unique after sanitizing
        let stem = format!("{i:06}-{}", file_stem(&u.id));
        let feats = format!("feats/{stem}.itcf");
        write_features(&dir.join(&feats), &u.frames)?;
        let labels = match &u.gold_labels {
            Some(l) => {
                let rel = format!("labels/{stem}.txt");
                let mut text = l.join("\n");
                text.push('\n');
                fs::write(dir.join(&rel), text).map_err(|e| Error::io(dir.join(&rel), e))?;
                rel
            }
            None => String::new(),
        };
        manifest.push_str(&format!(
            "{}\t{feats}\t{labels}\t{}\n",
            u.id,
            u.speaker.as_deref().unwrap_or("")
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
