//! Synthetic corpora with a known joint distribution over (x, y) symbols.
//!
//! Each generated window draws a latent class `s` from the prior, then an
//! x-symbol and a y-symbol from per-class channels. The x half of the window
//! is the one-hot code of the x-symbol repeated `frames_per_side` times, the
//! y half likewise; `gap_frames` zero frames separate them. Windows are laid
//! back to back, so cutting with stride `window_len()` recovers exactly the
//! generated placements.

use super::{Corpus, Utterance, WindowGeometry};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};
use std::path::Path;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_latent: usize,
    /// `num_latent x A` row-stochastic matrix.
    pub x_channel: Vec<Vec<f64>>,
    /// `num_latent x A` row-stochastic matrix.
    pub y_channel: Vec<Vec<f64>>,
    pub latent_prior: Vec<f64>,
    pub frames_per_side: usize,
    #[serde(default)]
    pub gap_frames: usize,
    #[serde(default)]
    pub jitter_sigma: f64,
    pub num_utterances: usize,
    pub windows_per_utterance: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Noiseless channels: x and y both reveal the latent class.
    pub fn identity(k: usize, frames_per_side: usize, gap_frames: usize) -> Self {
        let eye: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            num_latent: k,
            x_channel: eye.clone(),
            y_channel: eye,
            latent_prior: vec![1.0 / k as f64; k],
            frames_per_side,
            gap_frames,
            jitter_sigma: 0.0,
            num_utterances: 100,
            windows_per_utterance: 32,
            seed: 0,
        }
    }

    /// Symmetric channels that keep the latent symbol with probability
    /// `1 - flip` and otherwise pick one of the other symbols uniformly.
    pub fn symmetric(k: usize, flip: f64, frames_per_side: usize, gap_frames: usize) -> Self {
        let off = if k > 1 { flip / (k - 1) as f64 } else { 0.0 };
        let ch: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { 1.0 - flip } else { off })
                    .collect()
            })
            .collect();
        Self {
            x_channel: ch.clone(),
            y_channel: ch,
            ..Self::identity(k, frames_per_side, gap_frames)
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_observations(&self) -> usize {
        self.x_channel.first().map_or(0, Vec::len)
    }

    pub fn window_len(&self) -> usize {
        2 * self.frames_per_side + self.gap_frames
    }

    /// Geometry whose placements line up with the generated windows.
    pub fn geometry(&self) -> Result<WindowGeometry> {
        WindowGeometry::new(self.frames_per_side, self.gap_frames, self.frames_per_side)
    }

    pub fn latent_name(s: usize) -> String {
        format!("c{s}")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_latent;
        if k == 0 {
            return Err(Error::Config("num_latent must be positive".into()));
        }
        let a = self.num_observations();
        if a == 0 {
            return Err(Error::Config(
                "channels need at least one observation symbol".into(),
            ));
        }
        for (name, ch) in [
            ("x_channel", &self.x_channel),
            ("y_channel", &self.y_channel),
        ] {
            if ch.len() != k {
                return Err(Error::Config(format!(
                    "{name} has {} rows, expected {k}",
                    ch.len()
                )));
            }
            for (i, row) in ch.iter().enumerate() {
                if row.len() != a {
                    return Err(Error::Config(format!(
                        "{name} row {i} has {} entries, expected {a}",
                        row.len()
                    )));
                }
                check_distribution(row, &format!("{name} row {i}"))?;
            }
        }
        if self.latent_prior.len() != k {
            return Err(Error::Config(format!(
                "latent_prior has {} entries, expected {k}",
                self.latent_prior.len()
            )));
        }
        check_distribution(&self.latent_prior, "latent_prior")?;
        if self.frames_per_side == 0 {
            return Err(Error::Config("frames_per_side must be positive".into()));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "jitter_sigma must be finite and >= 0, got {}",
                self.jitter_sigma
            )));
        }
        if self.num_utterances == 0 || self.windows_per_utterance == 0 {
            return Err(Error::Config(
                "need at least one utterance and one window per utterance".into(),
            ));
        }
        Ok(())
    }

    /// `joint[a][b] = sum_s prior[s] * x_channel[s][a] * y_channel[s][b]`.
    pub fn joint_table(&self) -> Matrix<f64> {
        let a = self.num_observations();
        let mut joint = Matrix::zeros(a, a);
        for s in 0..self.num_latent {
            for i in 0..a {
                let px = self.latent_prior[s] * self.x_channel[s][i];
                for j in 0..a {
                    joint.row_mut(i)[j] += px * self.y_channel[s][j];
                }
            }
        }
        joint
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Config(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Generates the corpus described by `spec` together with the exact joint
/// table of (x-symbol, y-symbol). The returned corpus uses the generated
/// window length as its placement stride.
pub fn synth_corpus(spec: &SyntheticSpec) -> Result<(Corpus, Matrix<f64>)> {
    spec.validate()?;
    let a = spec.num_observations();
    let fps = spec.frames_per_side;
    let wlen = spec.window_len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prior = WeightedIndex::new(&spec.latent_prior).map_err(|e| Error::Config(e.to_string()))?;
    let x_rows = spec
        .x_channel
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let y_rows = spec
        .y_channel
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let jitter = (spec.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;

    let mut utterances = Vec::with_capacity(spec.num_utterances);
    for u in 0..spec.num_utterances {
        let rows = wlen * spec.windows_per_utterance;
        let mut frames = Matrix::zeros(rows, a);
        let mut labels = Vec::with_capacity(rows);
        for w in 0..spec.windows_per_utterance {
            let s = prior.sample(&mut rng);
            let xs = x_rows[s].sample(&mut rng);
            let ys = y_rows[s].sample(&mut rng);
            let base = w * wlen;
            for f in 0..fps {
                frames.row_mut(base + f)[xs] = 1.0;
                frames.row_mut(base + fps + spec.gap_frames + f)[ys] = 1.0;
            }
            if let Some(noise) = &jitter {
                for f in (0..fps).chain(fps + spec.gap_frames..wlen) {
                    for v in frames.row_mut(base + f) {
                        // stored features are f32; keep in-memory and on-disk corpora identical
                        *v = (*v + noise.sample(&mut rng)) as f32 as f64;
                    }
                }
            }
            labels.extend(std::iter::repeat(SyntheticSpec::latent_name(s)).take(wlen));
        }
        utterances.push(Utterance::new(
            format!("synth-{u:05}"),
            frames,
            Some(labels),
            None,
        )?);
    }
    Ok((Corpus::with_stride(utterances, wlen), spec.joint_table()))
}

/// Mutual information of a joint probability table, in bits, with
/// `0 log 0 = 0`.
pub fn true_mi_oracle(joint: &Matrix<f64>) -> Result<f64> {
    if joint
        .as_slice()
        .iter()
        .any(|p| !(*p >= 0.0) || !p.is_finite())
    {
        return Err(Error::Probability(
            "entries must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = joint.as_slice().iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Probability(format!("entries sum to {total}, not 1")));
    }
    let rows: Vec<f64> = joint.row_iter().map(|r| r.iter().sum()).collect();
    let mut cols = vec![0.0; joint.cols()];
    for r in joint.row_iter() {
        for (c, v) in cols.iter_mut().zip(r) {
            *c += v;
        }
    }
    let mut mi = 0.0;
    for (i, r) in joint.row_iter().enumerate() {
        for (j, &p) in r.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (rows[i] * cols[j])).log2();
            }
        }
    }
    Ok(mi)
}
