use crate::corpus::WindowGeometry;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One constant-rate piece of the learning-rate schedule. Bounds are in
/// hundreds of utterances processed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSegment {
    pub start: f64,
    pub end: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Loss `H+(z|x) - H(z|u)`.
    #[default]
    Base,
    /// Learned marginal replaces the entropy term; updates alternate between
    /// the marginal and the two encoders.
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Entropy of the average confirmation output over the utterance.
    #[default]
    PerUtterance,
    /// Entropy of the average over the utterance pooled with a sliding buffer
    /// of earlier outputs from other utterances.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub geometry: WindowGeometry,
    pub alphabet_size: usize,
    pub hidden_dim: usize,
    pub lr_schedule: Vec<LrSegment>,
    /// Hundreds of utterances after which live symbols are cloned into dead
    /// slots; `None` disables cloning.
    pub clone_at: Option<f64>,
    pub dead_threshold: f64,
    pub clone_noise_sigma: f64,
    pub seed: u64,
    pub mode: Mode,
    pub entropy_mode: EntropyMode,
    /// Window count of the cross-utterance buffer in global entropy mode.
    pub global_buffer_windows: usize,
    /// Normalize each utterance to unit mean squared frame norm before use.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            geometry: WindowGeometry::default(),
            alphabet_size: 64,
            hidden_dim: 64,
            lr_schedule: vec![
                LrSegment {
                    start: 0.0,
                    end: 432.0,
                    lr: 0.4,
                },
                LrSegment {
                    start: 432.0,
                    end: 540.0,
                    lr: 0.2,
                },
                LrSegment {
                    start: 540.0,
                    end: 900.0,
                    lr: 0.1,
                },
                LrSegment {
                    start: 900.0,
                    end: 1080.0,
                    lr: 0.05,
                },
            ],
            clone_at: Some(216.0),
            dead_threshold: 1e-3,
            clone_noise_sigma: 0.01,
            seed: 0,
            mode: Mode::Base,
            entropy_mode: EntropyMode::PerUtterance,
            global_buffer_windows: 2048,
            normalize: true,
        }
    }
}

/// Converts a bound in hundreds of utterances to an utterance count.
pub fn hundreds_to_utterances(h: f64) -> u64 {
    (h * 100.0).round() as u64
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.alphabet_size < 2 {
            return Err(Error::Config("alphabet_size must be at least 2".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        let first = self
            .lr_schedule
            .first()
            .ok_or_else(|| Error::Config("empty learning-rate schedule".into()))?;
        if first.start != 0.0 {
            return Err(Error::Config(format!(
                "schedule must start at 0, starts at {}",
                first.start
            )));
        }
        for (i, seg) in self.lr_schedule.iter().enumerate() {
            if !(seg.lr > 0.0 && seg.lr.is_finite()) {
                return Err(Error::Config(format!(
                    "segment {i}: learning rate must be positive, got {}",
                    seg.lr
                )));
            }
            if !(seg.end > seg.start) {
                return Err(Error::Config(format!(
                    "segment {i}: end {} is not after start {}",
                    seg.end, seg.start
                )));
            }
            if i > 0 && self.lr_schedule[i - 1].end != seg.start {
                return Err(Error::Config(format!(
                    "segment {i} does not start where segment {} ends",
                    i - 1
                )));
            }
        }
        if let Some(c) = self.clone_at {
            if !(c >= 0.0 && c <= self.schedule_end()) {
                return Err(Error::Config(format!(
                    "clone_at {c} lies outside the schedule [0, {}]",
                    self.schedule_end()
                )));
            }
        }
        if !(self.dead_threshold > 0.0 && self.dead_threshold < 1.0) {
            return Err(Error::Config(format!(
                "dead_threshold must be in (0, 1), got {}",
                self.dead_threshold
            )));
        }
        if !(self.clone_noise_sigma >= 0.0 && self.clone_noise_sigma.is_finite()) {
            return Err(Error::Config(
                "clone_noise_sigma must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// End of the schedule in hundreds of utterances.
    pub fn schedule_end(&self) -> f64 {
        self.lr_schedule.last().map_or(0.0, |s| s.end)
    }

    pub fn total_utterances(&self) -> u64 {
        hundreds_to_utterances(self.schedule_end())
    }

    /// Learning rate for the minibatch that follows `processed` utterances.
    pub fn lr_at(&self, processed: u64) -> f64 {
        for seg in &self.lr_schedule {
            if processed < hundreds_to_utterances(seg.end) {
                return seg.lr;
            }
        }
        self.lr_schedule.last().map_or(0.0, |s| s.lr)
    }

    pub fn clone_step(&self) -> Option<u64> {
        self.clone_at.map(hundreds_to_utterances)
    }
}
