//! Online training loop: one utterance per minibatch, plain SGD on a
//! piecewise-constant schedule, per-epoch symbol death detection and a
//! one-time cloning of live symbols into dead slots.

mod checkpoint;
mod config;
mod metrics;
mod symbols;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{hundreds_to_utterances, EntropyMode, LrSegment, Mode, TrainConfig};
pub use metrics::{parse_jsonl, JsonlSink, MetricsRecord, MetricsSink, NullSink};
pub use symbols::{clone_symbols, detect_dead_symbols, ClonePair, SymbolMaxima};

use crate::corpus::{window_starts, windows_with_stride, Corpus};
use crate::error::{Error, Result};
use crate::model::{Alphabet, EncoderParams, ModelDims, Side};
use crate::numerics::{sgd_apply, NodeId, Tape};
use crate::objective::{adversarial_loss, utterance_loss_pooled, ObjectiveTerms, PooledOutputs};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Sums over the minibatches of the current epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub minibatches: u64,
    pub windows: u64,
    pub sum_cross_entropy: f64,
    pub sum_marginal_entropy: f64,
    pub sum_mi_bound: f64,
    pub sum_loss: f64,
    pub saturations: u64,
}

impl EpochAccumulator {
    fn add(&mut self, windows: usize, t: &ObjectiveTerms) {
        self.minibatches += 1;
        self.windows += windows as u64;
        self.sum_cross_entropy += t.cross_entropy_bits;
        self.sum_marginal_entropy += t.marginal_entropy_bits;
        self.sum_mi_bound += t.mi_bound_bits;
        self.sum_loss += t.loss;
        self.saturations += t.saturation_count as u64;
    }

    fn mean(&self, sum: f64) -> f64 {
        if self.minibatches == 0 {
            0.0
        } else {
            sum / self.minibatches as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneEvent {
    pub step: u64,
    pub pairs: Vec<ClonePair>,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: EncoderParams<f32>,
    pub alphabet: Alphabet,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Utterances (minibatches) processed so far.
    pub processed: u64,
    /// Corpus indices visited in the current epoch, in order.
    pub epoch_order: Vec<usize>,
    pub epoch_pos: usize,
    pub maxima: SymbolMaxima,
    /// Sum of confirmation outputs over the current epoch.
    pub mass: Vec<f64>,
    /// `mass` as it stood at the end of the last completed epoch.
    pub last_epoch_mass: Option<Vec<f64>>,
    pub accum: EpochAccumulator,
    pub clone_history: Vec<CloneEvent>,
    pub cloned: bool,
    /// Detached confirmation outputs of recent windows (global entropy mode).
    pub global_buffer: VecDeque<Vec<f32>>,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        let dims = ModelDims {
            input_dim,
            hidden_dim: config.hidden_dim,
            alphabet_size: config.alphabet_size,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = EncoderParams::init(dims, &mut rng)?;
        Ok(Self {
            model,
            alphabet: Alphabet::new(config.alphabet_size)?,
            rng,
            epoch: 0,
            processed: 0,
            epoch_order: Vec::new(),
            epoch_pos: 0,
            maxima: SymbolMaxima::new(config.alphabet_size),
            mass: vec![0.0; config.alphabet_size],
            last_epoch_mass: None,
            accum: EpochAccumulator::default(),
            clone_history: Vec::new(),
            cloned: false,
            global_buffer: VecDeque::new(),
        })
    }
}

pub struct Trainer {
    config: TrainConfig,
    corpus: Corpus,
    usable: Vec<usize>,
    state: TrainState,
}

impl Trainer {
    /// Starts a fresh run. `corpus` is normalized here when the config asks
    /// for it.
    pub fn new(config: TrainConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let dim = corpus
            .dim()
            .ok_or_else(|| Error::NoData("corpus has no utterances".into()))?;
        let state = TrainState::fresh(&config, dim)?;
        Self::resume(config, corpus, state)
    }

    /// Continues from a saved state. The corpus must be the one the state
    /// was trained on.
    pub fn resume(config: TrainConfig, corpus: Corpus, state: TrainState) -> Result<Self> {
        config.validate()?;
        let corpus = if config.normalize {
            corpus.normalized()?
        } else {
            corpus
        };
        let dim = corpus
            .dim()
            .ok_or_else(|| Error::NoData("corpus has no utterances".into()))?;
        if dim != state.model.dims.input_dim {
            return Err(Error::Shape(format!(
                "corpus dimension {dim} but model expects {}",
                state.model.dims.input_dim
            )));
        }
        if state.model.dims.alphabet_size != config.alphabet_size
            || state.model.dims.hidden_dim != config.hidden_dim
        {
            return Err(Error::Config(format!(
                "state dimensions {:?} do not match the config",
                state.model.dims
            )));
        }
        let mut usable = Vec::with_capacity(corpus.len());
        for (i, u) in corpus.utterances.iter().enumerate() {
            if window_starts(u.len(), &config.geometry, corpus.window_stride)
                .next()
                .is_some()
            {
                usable.push(i);
            } else {
                log::warn!(
                    "skipping utterance {}: {} frames is shorter than one window",
                    u.id,
                    u.len()
                );
            }
        }
        if usable.is_empty() {
            return Err(Error::NoData(format!(
                "no utterance has at least {} frames",
                config.geometry.total
            )));
        }
        if state.epoch_order.iter().any(|i| *i >= corpus.len())
            || state.epoch_pos > state.epoch_order.len()
        {
            return Err(Error::Checkpoint(
                "epoch order does not fit this corpus".into(),
            ));
        }
        Ok(Self {
            config,
            corpus,
            usable,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// The training corpus after normalization.
    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn is_finished(&self) -> bool {
        self.state.processed >= self.config.total_utterances()
    }

    /// Trains until the schedule ends.
    pub fn run(&mut self, sink: &mut dyn MetricsSink) -> Result<()> {
        self.run_with(sink, |_| Ok(()))
    }

    /// Like [`Self::run`], calling `after_step` after every minibatch.
    pub fn run_with(
        &mut self,
        sink: &mut dyn MetricsSink,
        mut after_step: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            self.step(sink)?;
            after_step(self)?;
        }
        self.maybe_clone(sink)
    }

    /// Trains until `processed` reaches `utterances` or the schedule ends.
    pub fn run_until(&mut self, utterances: u64, sink: &mut dyn MetricsSink) -> Result<()> {
        while !self.is_finished() && self.state.processed < utterances {
            self.step(sink)?;
        }
        Ok(())
    }

    /// One minibatch: a single utterance, all its windows.
    pub fn step(&mut self, sink: &mut dyn MetricsSink) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        self.maybe_clone(sink)?;
        if self.state.epoch_pos == 0 {
            let mut order = self.usable.clone();
            order.shuffle(&mut self.state.rng);
            self.state.epoch_order = order;
        }
        let index = self.state.epoch_order[self.state.epoch_pos];
        let lr = self.config.lr_at(self.state.processed);
        let (terms, windows) = self.train_utterance(index, lr as f32)?;
        sink.record(&MetricsRecord::Minibatch {
            epoch: self.state.epoch,
            step: self.state.processed,
            utterance_id: self.corpus.utterances[index].id.clone(),
            windows,
            lr,
            cross_entropy_bits: terms.cross_entropy_bits,
            marginal_entropy_bits: terms.marginal_entropy_bits,
            adversarial_marginal_bits: terms.adversarial_marginal_bits,
            mi_bound_bits: terms.mi_bound_bits,
            loss: terms.loss,
            saturation_count: terms.saturation_count,
        })?;
        let st = &mut self.state;
        st.accum.add(windows, &terms);
        st.processed += 1;
        st.epoch_pos += 1;
        if st.epoch_pos == st.epoch_order.len() {
            self.finish_epoch(sink)?;
        }
        self.maybe_clone(sink)
    }

    fn finish_epoch(&mut self, sink: &mut dyn MetricsSink) -> Result<()> {
        let st = &mut self.state;
        st.alphabet.live_mask = st.maxima.live_mask(self.config.dead_threshold);
        let a = &st.accum;
        sink.record(&MetricsRecord::Epoch {
            epoch: st.epoch,
            step: st.processed,
            minibatches: a.minibatches,
            windows: a.windows,
            mean_cross_entropy_bits: a.mean(a.sum_cross_entropy),
            mean_marginal_entropy_bits: a.mean(a.sum_marginal_entropy),
            mean_mi_bound_bits: a.mean(a.sum_mi_bound),
            mean_loss: a.mean(a.sum_loss),
            saturation_count: a.saturations,
            live_symbols: st.alphabet.live_count(),
        })?;
        log::info!(
            "epoch {} done after {} utterances: mean bound {:.4} bits, {} live symbols",
            st.epoch,
            st.processed,
            a.mean(a.sum_mi_bound),
            st.alphabet.live_count()
        );
        st.last_epoch_mass = Some(std::mem::replace(
            &mut st.mass,
            vec![0.0; self.config.alphabet_size],
        ));
        st.maxima.reset();
        st.accum = EpochAccumulator::default();
        st.epoch += 1;
        st.epoch_pos = 0;
        st.epoch_order.clear();
        Ok(())
    }

    fn maybe_clone(&mut self, sink: &mut dyn MetricsSink) -> Result<()> {
        let due = matches!(self.config.clone_step(), Some(s) if self.state.processed >= s);
        if !due || self.state.cloned {
            return Ok(());
        }
        let st = &mut self.state;
        st.cloned = true;
        if st.epoch == 0 {
            // no completed epoch yet: judge from what has been seen so far
            st.alphabet.live_mask = st.maxima.live_mask(self.config.dead_threshold);
        }
        let marginal = st
            .last_epoch_mass
            .clone()
            .unwrap_or_else(|| st.mass.clone());
        let pairs = clone_symbols(
            &mut st.model,
            &mut st.alphabet,
            &marginal,
            self.config.clone_noise_sigma,
            &mut st.rng,
        )?;
        if pairs.is_empty() {
            log::warn!(
                "cloning found no dead symbols at utterance {}",
                st.processed
            );
        } else {
            log::info!(
                "cloned {} symbols at utterance {}",
                pairs.len(),
                st.processed
            );
        }
        sink.record(&MetricsRecord::Clone {
            step: st.processed,
            pairs: pairs.clone(),
            live_symbols: st.alphabet.live_count(),
        })?;
        st.clone_history.push(CloneEvent {
            step: st.processed,
            pairs,
        });
        Ok(())
    }

    fn pooled_sum(&self) -> Vec<f32> {
        let mut sum = vec![0.0f64; self.config.alphabet_size];
        for row in &self.state.global_buffer {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += *v as f64;
            }
        }
        sum.into_iter().map(|v| v as f32).collect()
    }

    fn train_utterance(&mut self, index: usize, lr: f32) -> Result<(ObjectiveTerms, usize)> {
        let utt = &self.corpus.utterances[index];
        let windows = windows_with_stride(utt, &self.config.geometry, self.corpus.window_stride);
        let wrap = |e: Error| match e {
            Error::NonFinite(m) | Error::Probability(m) => Error::utterance(&utt.id, m),
            other => other,
        };

        let model = &self.state.model;
        let mut tape = Tape::<f32>::new();
        let psi_enc = model.bind(&mut tape, Side::Confirmation);
        let phi_enc = model.bind(&mut tape, Side::Predictor);
        let mut psi = Vec::with_capacity(windows.len());
        let mut phi = Vec::with_capacity(windows.len());
        for w in &windows {
            psi.push(
                model
                    .encode(&mut tape, &psi_enc, &w.y.cast())
                    .map_err(wrap)?,
            );
            phi.push(
                model
                    .encode(&mut tape, &phi_enc, &w.x.cast())
                    .map_err(wrap)?,
            );
        }

        let terms = match self.config.mode {
            Mode::Base => {
                let pooled_sum;
                let pooled = if self.config.entropy_mode == EntropyMode::Global
                    && !self.state.global_buffer.is_empty()
                {
                    pooled_sum = self.pooled_sum();
                    Some(PooledOutputs {
                        sum: &pooled_sum,
                        count: self.state.global_buffer.len(),
                    })
                } else {
                    None
                };
                let (loss, terms) =
                    utterance_loss_pooled(&mut tape, &psi, &phi, pooled).map_err(wrap)?;
                check_finite(&terms, &utt.id)?;
                let grads = tape.backward(loss);
                let store = &mut self.state.model.store;
                grads.accumulate_into(store);
                sgd_apply(store, lr);
                terms
            }
            Mode::Adversarial => {
                let theta_id = model.theta;
                let theta = model.marginal_theta(&mut tape).map_err(wrap)?;
                let adv = adversarial_loss(&mut tape, &psi, &phi, theta).map_err(wrap)?;
                check_finite(&adv.terms, &utt.id)?;
                let grads = tape.backward(adv.theta_loss);
                grads.accumulate_filtered(&mut self.state.model.store, |id| id == theta_id);
                sgd_apply(&mut self.state.model.store, lr);
                // encoders then move against the updated marginal
                let theta = self.state.model.marginal_theta(&mut tape).map_err(wrap)?;
                let adv2 = adversarial_loss(&mut tape, &psi, &phi, theta).map_err(wrap)?;
                let grads = tape.backward(adv2.psi_phi_loss);
                grads.accumulate_filtered(&mut self.state.model.store, |id| id != theta_id);
                sgd_apply(&mut self.state.model.store, lr);
                adv.terms
            }
        };

        self.observe_outputs(&tape, &psi, &phi);
        Ok((terms, windows.len()))
    }

    fn observe_outputs(&mut self, tape: &Tape<f32>, psi: &[NodeId], phi: &[NodeId]) {
        let global =
            self.config.entropy_mode == EntropyMode::Global && self.config.mode == Mode::Base;
        let st = &mut self.state;
        for (p, q) in psi.iter().zip(phi) {
            let pv = tape.value(*p);
            st.maxima.observe(pv, tape.value(*q));
            for (m, v) in st.mass.iter_mut().zip(pv) {
                *m += *v as f64;
            }
            if global && self.config.global_buffer_windows > 0 {
                if st.global_buffer.len() == self.config.global_buffer_windows {
                    st.global_buffer.pop_front();
                }
                st.global_buffer.push_back(pv.to_vec());
            }
        }
    }
}

fn check_finite(t: &ObjectiveTerms, id: &str) -> Result<()> {
    if t.loss.is_finite() && t.cross_entropy_bits.is_finite() && t.marginal_entropy_bits.is_finite()
    {
        Ok(())
    } else {
        Err(Error::utterance(id, format!("non-finite loss {t:?}")))
    }
}

/// Trains a fresh model over `corpus` and returns the final state.
pub fn train(
    corpus: Corpus,
    config: TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    let mut trainer = Trainer::new(config, corpus)?;
    trainer.run(sink)?;
    Ok(trainer.into_state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SyntheticSpec};

    fn tiny_corpus(n: usize) -> Corpus {
        let mut spec = SyntheticSpec::identity(3, 2, 0);
        spec.num_utterances = n;
        spec.windows_per_utterance = 4;
        synth_corpus(&spec).unwrap().0
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            geometry: crate::corpus::WindowGeometry::new(2, 0, 2).unwrap(),
            alphabet_size: 4,
            hidden_dim: 3,
            lr_schedule: vec![
                LrSegment {
                    start: 0.0,
                    end: 0.05,
                    lr: 0.5,
                },
                LrSegment {
                    start: 0.05,
                    end: 0.1,
                    lr: 0.1,
                },
            ],
            clone_at: Some(0.07),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn metrics_follow_schedule_and_epochs() {
        let mut sink = Vec::new();
        let state = train(tiny_corpus(3), tiny_config(), &mut sink).unwrap();
        assert_eq!(state.processed, 10);
        let mb: Vec<_> = sink
            .iter()
            .filter_map(|r| match r {
                MetricsRecord::Minibatch {
                    step, lr, windows, ..
                } => Some((*step, *lr, *windows)),
                _ => None,
            })
            .collect();
        assert_eq!(mb.len(), 10);
        for (s, lr, w) in &mb {
            assert_eq!(*lr, if *s < 5 { 0.5 } else { 0.1 });
            assert_eq!(*w, 4);
        }
        let epochs = sink
            .iter()
            .filter(|r| matches!(r, MetricsRecord::Epoch { .. }))
            .count();
        assert_eq!(epochs, 3);
        let clones: Vec<_> = sink
            .iter()
            .filter(|r| matches!(r, MetricsRecord::Clone { .. }))
            .collect();
        assert_eq!(clones.len(), 1);
        assert!(matches!(clones[0], MetricsRecord::Clone { step: 7, .. }));
    }

    #[test]
    fn each_epoch_visits_every_utterance_once() {
        let mut sink = Vec::new();
        train(tiny_corpus(3), tiny_config(), &mut sink).unwrap();
        let ids: Vec<String> = sink
            .iter()
            .filter_map(|r| match r {
                MetricsRecord::Minibatch { utterance_id, .. } => Some(utterance_id.clone()),
                _ => None,
            })
            .collect();
        for chunk in ids[..9].chunks(3) {
            let mut c = chunk.to_vec();
            c.sort();
            assert_eq!(c, vec!["synth-00000", "synth-00001", "synth-00002"]);
        }
    }

    #[test]
    fn short_utterances_are_skipped() {
        let mut c = tiny_corpus(2);
        let short = crate::corpus::Utterance::new(
            "short",
            crate::numerics::Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap(),
            None,
            None,
        )
        .unwrap();
        c.utterances.push(short);
        let t = Trainer::new(tiny_config(), c).unwrap();
        assert_eq!(t.usable, vec![0, 1]);
    }

    #[test]
    fn all_short_is_an_error() {
        let short = crate::corpus::Utterance::new(
            "s",
            crate::numerics::Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap(),
            None,
            None,
        )
        .unwrap();
        let err = Trainer::new(tiny_config(), Corpus::new(vec![short]))
            .err()
            .unwrap();
        assert!(matches!(err, Error::NoData(_)));
    }

    #[test]
    fn adversarial_mode_reports_marginal_term() {
        let mut sink = Vec::new();
        let cfg = TrainConfig {
            mode: Mode::Adversarial,
            ..tiny_config()
        };
        let before = TrainState::fresh(&cfg, 3).unwrap();
        let state = train(tiny_corpus(2), cfg, &mut sink).unwrap();
        assert!(sink.iter().all(|r| !matches!(
            r,
            MetricsRecord::Minibatch {
                adversarial_marginal_bits: None,
                ..
            }
        )));
        let th = state.model.theta;
        assert_ne!(
            state.model.store.entry(th).value,
            before.model.store.entry(th).value
        );
    }

    #[test]
    fn base_mode_leaves_theta_alone() {
        let cfg = TrainConfig {
            clone_at: None,
            ..tiny_config()
        };
        let state = train(tiny_corpus(2), cfg, &mut NullSink).unwrap();
        assert!(state
            .model
            .store
            .entry(state.model.theta)
            .value
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn global_mode_fills_buffer() {
        let cfg = TrainConfig {
            entropy_mode: EntropyMode::Global,
            global_buffer_windows: 6,
            ..tiny_config()
        };
        let state = train(tiny_corpus(2), cfg, &mut NullSink).unwrap();
        assert_eq!(state.global_buffer.len(), 6);
    }

    #[test]
    fn split_runs_match_one_run() {
        let cfg = tiny_config();
        let mut a_sink = Vec::new();
        let a = train(tiny_corpus(3), cfg.clone(), &mut a_sink).unwrap();
        let mut t = Trainer::new(cfg.clone(), tiny_corpus(3)).unwrap();
        let mut b_sink = Vec::new();
        t.run_until(4, &mut b_sink).unwrap();
        let mid = t.into_state();
        let mut t = Trainer::resume(cfg, tiny_corpus(3), mid).unwrap();
        t.run(&mut b_sink).unwrap();
        assert_eq!(t.state(), &a);
        assert_eq!(a_sink, b_sink);
    }
}
