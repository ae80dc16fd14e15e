//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"ITCK"  u32 version
//! u32 header_len, header_len bytes of JSON (config, counters, RNG state, ...)
//! u32 array_count
//! per array: u32 name_len, name (UTF-8), u32 rows, u32 cols, rows*cols f32
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Arrays hold every model parameter under its store name plus the running
//! symbol statistics (`state.*`).

use super::{CloneEvent, EpochAccumulator, SymbolMaxima, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{Alphabet, EncoderParams, ModelDims};
use crate::numerics::ParamStore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ITCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const PSI_MAX: &str = "state.psi_max";
const PHI_MAX: &str = "state.phi_max";
const BUFFER: &str = "state.global_buffer";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    dims: ModelDims,
    epoch: usize,
    processed: u64,
    epoch_order: Vec<usize>,
    epoch_pos: usize,
    live_mask: Vec<bool>,
    rng: ChaCha8Rng,
    mass: Vec<f64>,
    last_epoch_mass: Option<Vec<f64>>,
    accum: EpochAccumulator,
    clone_history: Vec<CloneEvent>,
    cloned: bool,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("{v} does not fit in a u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_array(buf: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    put_u32(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, rows)?;
    put_u32(buf, cols)?;
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(config: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        dims: state.model.dims,
        epoch: state.epoch,
        processed: state.processed,
        epoch_order: state.epoch_order.clone(),
        epoch_pos: state.epoch_pos,
        live_mask: state.alphabet.live_mask.clone(),
        rng: state.rng.clone(),
        mass: state.mass.clone(),
        last_epoch_mass: state.last_epoch_mass.clone(),
        accum: state.accum.clone(),
        clone_history: state.clone_history.clone(),
        cloned: state.cloned,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, json.len())?;
    buf.extend_from_slice(&json);

    let entries = state.model.store.entries();
    put_u32(&mut buf, entries.len() + 3)?;
    for e in entries {
        put_array(&mut buf, &e.name, e.rows, e.cols, &e.value)?;
    }
    let z = state.alphabet.size;
    put_array(&mut buf, PSI_MAX, z, 1, &state.maxima.psi)?;
    put_array(&mut buf, PHI_MAX, z, 1, &state.maxima.phi)?;
    let flat: Vec<f32> = state.global_buffer.iter().flatten().copied().collect();
    put_array(&mut buf, BUFFER, state.global_buffer.len(), z, &flat)?;

    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.at))
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn array(&mut self) -> Result<(String, usize, usize, Vec<f32>)> {
        let len = self.u32()?;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint("array too large".into()))?;
        let data = self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, rows, cols, data))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainConfig, TrainState)> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, at: 4 };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    header.config.validate()?;

    let count = r.u32()?;
    let mut store = ParamStore::new();
    let (mut psi_max, mut phi_max, mut buffer) = (None, None, None);
    for _ in 0..count {
        let (name, rows, cols, data) = r.array()?;
        match name.as_str() {
            PSI_MAX => psi_max = Some(data),
            PHI_MAX => phi_max = Some(data),
            BUFFER => buffer = Some((rows, cols, data)),
            _ => {
                store.insert(&name, rows, cols, data)?;
            }
        }
    }
    if r.at != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes before the checksum",
            body.len() - r.at
        )));
    }
    let model = EncoderParams::from_store(store, header.dims)?;
    let z = header.dims.alphabet_size;
    let missing = |what: &str| Error::Checkpoint(format!("missing array {what}"));
    let psi = psi_max.ok_or_else(|| missing(PSI_MAX))?;
    let phi = phi_max.ok_or_else(|| missing(PHI_MAX))?;
    let (brows, bcols, bdata) = buffer.ok_or_else(|| missing(BUFFER))?;
    if psi.len() != z
        || phi.len() != z
        || (brows > 0 && bcols != z)
        || header.live_mask.len() != z
        || header.mass.len() != z
    {
        return Err(Error::Checkpoint(format!(
            "symbol statistics do not match alphabet size {z}"
        )));
    }
    let global_buffer: VecDeque<Vec<f32>> = bdata.chunks(z).map(<[f32]>::to_vec).collect();

    let state = TrainState {
        model,
        alphabet: Alphabet {
            size: z,
            live_mask: header.live_mask,
        },
        rng: header.rng,
        epoch: header.epoch,
        processed: header.processed,
        epoch_order: header.epoch_order,
        epoch_pos: header.epoch_pos,
        maxima: SymbolMaxima { psi, phi },
        mass: header.mass,
        last_epoch_mass: header.last_epoch_mass,
        accum: header.accum,
        clone_history: header.clone_history,
        cloned: header.cloned,
        global_buffer,
    };
    Ok((header.config, state))
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(config, state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WindowGeometry;
    use crate::corpus::{synth_corpus, SyntheticSpec};
    use crate::trainer::{EntropyMode, LrSegment, NullSink, Trainer};

    fn trained_state() -> (TrainConfig, TrainState) {
        let mut spec = SyntheticSpec::identity(3, 2, 1);
        spec.num_utterances = 3;
        spec.windows_per_utterance = 3;
        let corpus = synth_corpus(&spec).unwrap().0;
        let cfg = TrainConfig {
            geometry: WindowGeometry::new(2, 1, 2).unwrap(),
            alphabet_size: 5,
            hidden_dim: 3,
            lr_schedule: vec![LrSegment {
                start: 0.0,
                end: 0.1,
                lr: 0.3,
            }],
            clone_at: Some(0.04),
            entropy_mode: EntropyMode::Global,
            global_buffer_windows: 5,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg.clone(), corpus).unwrap();
        t.run_until(5, &mut NullSink).unwrap();
        (cfg, t.into_state())
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, state) = trained_state();
        let bytes = encode_checkpoint(&cfg, &state).unwrap();
        let (cfg2, state2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(state, state2);
        assert_eq!(encode_checkpoint(&cfg2, &state2).unwrap(), bytes);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let (cfg, state) = trained_state();
        let mut bytes = encode_checkpoint(&cfg, &state).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn truncation_and_bad_magic() {
        let (cfg, state) = trained_state();
        let bytes = encode_checkpoint(&cfg, &state).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad)
            .unwrap_err()
            .to_string()
            .contains("not a checkpoint"));
    }

    #[test]
    fn file_round_trip() {
        let (cfg, state) = trained_state();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.ckpt");
        save_checkpoint(&p, &cfg, &state).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..4], CHECKPOINT_MAGIC);
        let (_, back) = load_checkpoint(&p).unwrap();
        assert_eq!(back, state);
    }
}
