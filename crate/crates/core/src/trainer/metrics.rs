//! Training metrics as JSON records, one per line.

use super::symbols::ClonePair;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricsRecord {
    Minibatch {
        epoch: usize,
        /// Utterances processed before this minibatch.
        step: u64,
        utterance_id: String,
        windows: usize,
        lr: f64,
        cross_entropy_bits: f64,
        marginal_entropy_bits: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        adversarial_marginal_bits: Option<f64>,
        mi_bound_bits: f64,
        loss: f64,
        saturation_count: usize,
    },
    Epoch {
        epoch: usize,
        /// Utterances processed at the end of the epoch.
        step: u64,
        minibatches: u64,
        windows: u64,
        mean_cross_entropy_bits: f64,
        mean_marginal_entropy_bits: f64,
        mean_mi_bound_bits: f64,
        mean_loss: f64,
        saturation_count: u64,
        live_symbols: usize,
    },
    Clone {
        step: u64,
        pairs: Vec<ClonePair>,
        live_symbols: usize,
    },
}

pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes each record as one JSON line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::Io {
            path: "<metrics>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Parses a JSONL metrics stream.
pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
