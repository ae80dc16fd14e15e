//! Symbol death and cloning.

use crate::corpus::WindowPair;
use crate::error::Result;
use crate::model::{Alphabet, EncoderParams, Side};
use crate::numerics::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Running per-symbol maxima of both encoders' outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolMaxima {
    pub psi: Vec<f32>,
    pub phi: Vec<f32>,
}

impl SymbolMaxima {
    pub fn new(size: usize) -> Self {
        Self {
            psi: vec![0.0; size],
            phi: vec![0.0; size],
        }
    }

    pub fn observe(&mut self, psi: &[f32], phi: &[f32]) {
        for (m, p) in self.psi.iter_mut().zip(psi) {
            *m = m.max(*p);
        }
        for (m, p) in self.phi.iter_mut().zip(phi) {
            *m = m.max(*p);
        }
    }

    pub fn reset(&mut self) {
        self.psi.iter_mut().for_each(|v| *v = 0.0);
        self.phi.iter_mut().for_each(|v| *v = 0.0);
    }

    /// A symbol is live if either encoder gave it probability of at least
    /// `threshold` somewhere.
    pub fn live_mask(&self, threshold: f64) -> Vec<bool> {
        self.psi
            .iter()
            .zip(&self.phi)
            .map(|(a, b)| (*a as f64) >= threshold || (*b as f64) >= threshold)
            .collect()
    }
}

/// Recomputes the live mask from scratch over `windows`.
pub fn detect_dead_symbols<T: Scalar>(
    model: &EncoderParams<T>,
    windows: &[WindowPair],
    threshold: f64,
) -> Result<Vec<bool>> {
    let z = model.dims.alphabet_size;
    let mut psi_max = vec![0.0f64; z];
    let mut phi_max = vec![0.0f64; z];
    for w in windows {
        let psi = model.encode_eval(Side::Confirmation, &w.y)?;
        let phi = model.encode_eval(Side::Predictor, &w.x)?;
        for k in 0..z {
            psi_max[k] = psi_max[k].max(psi[k].to_f64_lossy());
            phi_max[k] = phi_max[k].max(phi[k].to_f64_lossy());
        }
    }
    Ok(psi_max
        .iter()
        .zip(&phi_max)
        .map(|(a, b)| *a >= threshold || *b >= threshold)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClonePair {
    pub source: usize,
    pub target: usize,
}

/// Copies output rows of live symbols into dead slots and perturbs every
/// copied value with `N(0, sigma)` noise.
///
/// Live symbols are taken in descending order of `marginal` (ties by index)
/// and paired with dead slots in ascending index order. Both encoders'
/// output weights and biases and the marginal logit are copied. With
/// `sigma == 0` no random numbers are drawn.
pub fn clone_symbols<T: Scalar, R: Rng>(
    model: &mut EncoderParams<T>,
    alphabet: &mut Alphabet,
    marginal: &[f64],
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<ClonePair>> {
    let mut live: Vec<usize> = alphabet.live().collect();
    live.sort_by(|a, b| marginal[*b].total_cmp(&marginal[*a]).then(a.cmp(b)));
    let dead: Vec<usize> = alphabet.dead().collect();
    let pairs: Vec<ClonePair> = live
        .iter()
        .zip(&dead)
        .map(|(s, t)| ClonePair {
            source: *s,
            target: *t,
        })
        .collect();
    if pairs.is_empty() {
        return Ok(pairs);
    }
    let noise = (sigma > 0.0)
        .then(|| Normal::new(0.0, sigma).map_err(|e| crate::Error::Config(e.to_string())))
        .transpose()?;
    let jitter = |v: T, rng: &mut R| match &noise {
        Some(n) => v + T::of(n.sample(rng)),
        None => v,
    };
    let (psi, phi, theta) = (model.psi, model.phi, model.theta);
    for pair in &pairs {
        for ids in [psi, phi] {
            let w = model.store.entry_mut(ids.out_w);
            let src = w.row(pair.source).to_vec();
            for (dst, v) in w.row_mut(pair.target).iter_mut().zip(src) {
                *dst = jitter(v, rng);
            }
            let b = model.store.entry_mut(ids.out_b);
            b.value[pair.target] = jitter(b.value[pair.source], rng);
        }
        let th = model.store.entry_mut(theta);
        th.value[pair.target] = jitter(th.value[pair.source], rng);
        alphabet.live_mask[pair.target] = true;
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::model::SymbolDistribution;
    use crate::numerics::Matrix;
    use crate::objective::terms_from_distributions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 3,
            hidden_dim: 4,
            alphabet_size: 6,
        }
    }

    #[test]
    fn maxima_and_mask() {
        let mut m = SymbolMaxima::new(3);
        m.observe(&[0.5, 0.4999, 1e-4], &[0.2, 0.7999, 1e-5]);
        m.observe(&[0.9, 0.0, 5e-4], &[0.1, 0.0, 2e-4]);
        assert_eq!(m.psi, vec![0.9, 0.4999, 5e-4]);
        assert_eq!(m.live_mask(1e-3), vec![true, true, false]);
        m.reset();
        assert_eq!(m.live_mask(1e-3), vec![false; 3]);
    }

    #[test]
    fn death_requires_both_encoders_below_threshold() {
        let mut m = SymbolMaxima::new(2);
        m.observe(&[0.9995, 0.0005], &[0.998, 0.002]);
        assert_eq!(m.live_mask(1e-3), vec![true, true]);
    }

    fn sample_windows(n: usize) -> Vec<WindowPair> {
        (0..n)
            .map(|i| {
                let f = |s: f64| {
                    Matrix::from_vec(
                        2,
                        3,
                        (0..6).map(|j| ((i * 6 + j) as f64 * s).cos()).collect(),
                    )
                    .unwrap()
                };
                WindowPair {
                    x: f(0.53),
                    y: f(1.7),
                    utterance_id: "u".into(),
                    start: i,
                    center_frame: i,
                }
            })
            .collect()
    }

    #[test]
    fn very_negative_logit_row_is_dead() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = EncoderParams::<f32>::init(dims(), &mut rng).unwrap();
        for ids in [model.psi, model.phi] {
            model
                .store
                .entry_mut(ids.out_w)
                .row_mut(3)
                .iter_mut()
                .for_each(|v| *v = 0.0);
            model.store.entry_mut(ids.out_b).value[3] = -1000.0;
        }
        let live = detect_dead_symbols(&model, &sample_windows(10), 1e-3).unwrap();
        assert_eq!(live, vec![true, true, true, false, true, true]);
    }

    #[test]
    fn uniform_model_has_no_dead_symbols() {
        let model = EncoderParams::<f32>::zeros(dims()).unwrap();
        let live = detect_dead_symbols(&model, &sample_windows(3), 1e-3).unwrap();
        assert!(live.iter().all(|l| *l));
    }

    #[test]
    fn cloning_pairs_by_descending_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = EncoderParams::<f64>::init(dims(), &mut rng).unwrap();
        let mut alphabet = Alphabet::new(6).unwrap();
        alphabet.live_mask = vec![true, false, true, true, false, false];
        let marginal = [0.2, 0.0, 0.5, 0.3, 0.0, 0.0];
        let before = model.clone();
        let pairs = clone_symbols(&mut model, &mut alphabet, &marginal, 0.0, &mut rng).unwrap();
        assert_eq!(
            pairs,
            vec![
                ClonePair {
                    source: 2,
                    target: 1
                },
                ClonePair {
                    source: 3,
                    target: 4
                },
                ClonePair {
                    source: 0,
                    target: 5
                }
            ]
        );
        assert_eq!(alphabet.live_count(), 6);
        for p in &pairs {
            for ids in [model.psi, model.phi] {
                assert_eq!(
                    model.store.entry(ids.out_w).row(p.target),
                    before.store.entry(ids.out_w).row(p.source)
                );
            }
        }
        // hidden layers untouched
        assert_eq!(
            model.store.entry(model.psi.gru.w_r),
            before.store.entry(before.psi.gru.w_r)
        );
    }

    #[test]
    fn more_dead_than_live_fills_only_some_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = EncoderParams::<f64>::init(dims(), &mut rng).unwrap();
        let mut alphabet = Alphabet::new(6).unwrap();
        alphabet.live_mask = vec![false, false, true, false, false, false];
        let pairs = clone_symbols(
            &mut model,
            &mut alphabet,
            &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            0.01,
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            pairs,
            vec![ClonePair {
                source: 2,
                target: 0
            }]
        );
        assert_eq!(alphabet.live_count(), 2);
    }

    #[test]
    fn noise_perturbs_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = EncoderParams::<f64>::init(dims(), &mut rng).unwrap();
        let mut alphabet = Alphabet::new(6).unwrap();
        alphabet.live_mask[5] = false;
        clone_symbols(&mut model, &mut alphabet, &[1.0; 6], 0.01, &mut rng).unwrap();
        let w = model.store.entry(model.psi.out_w);
        let diffs: Vec<f64> = w.row(5).iter().zip(w.row(0)).map(|(a, b)| a - b).collect();
        assert!(diffs.iter().all(|d| d.abs() < 0.1));
        assert!(diffs.iter().any(|d| *d != 0.0));
    }

    /// With zero noise and dead slots at exactly zero probability, each clone
    /// splits a live symbol's mass evenly, which adds one bit to both the
    /// marginal entropy and the cross-entropy when every live symbol is
    /// cloned.
    #[test]
    fn exact_clone_adds_one_bit_to_both_terms() {
        let d = ModelDims {
            input_dim: 3,
            hidden_dim: 5,
            alphabet_size: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = EncoderParams::<f64>::init(d, &mut rng).unwrap();
        let mut alphabet = Alphabet::new(8).unwrap();
        for k in 4..8 {
            alphabet.live_mask[k] = false;
            for ids in [model.psi, model.phi] {
                model
                    .store
                    .entry_mut(ids.out_w)
                    .row_mut(k)
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
                model.store.entry_mut(ids.out_b).value[k] = -1e4;
            }
        }
        let windows: Vec<(Matrix<f64>, Matrix<f64>)> = (0..20)
            .map(|i| {
                let f = |s: f64| {
                    Matrix::from_vec(
                        2,
                        3,
                        (0..6).map(|j| ((i * 6 + j) as f64 * s).sin()).collect(),
                    )
                    .unwrap()
                };
                (f(0.37), f(0.91))
            })
            .collect();
        let terms = |m: &EncoderParams<f64>| {
            let psi: Vec<_> = windows
                .iter()
                .map(|(_, y)| {
                    SymbolDistribution::from_output(&m.encode_eval(Side::Confirmation, y).unwrap())
                })
                .collect();
            let phi: Vec<_> = windows
                .iter()
                .map(|(x, _)| {
                    SymbolDistribution::from_output(&m.encode_eval(Side::Predictor, x).unwrap())
                })
                .collect();
            terms_from_distributions(&psi, &phi).unwrap()
        };
        let before = terms(&model);
        let marginal = [0.4, 0.3, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0];
        clone_symbols(&mut model, &mut alphabet, &marginal, 0.0, &mut rng).unwrap();
        let after = terms(&model);
        assert!((after.marginal_entropy_bits - before.marginal_entropy_bits - 1.0).abs() < 1e-9);
        assert!((after.cross_entropy_bits - before.cross_entropy_bits - 1.0).abs() < 1e-9);
        assert!((after.mi_bound_bits - before.mi_bound_bits).abs() < 1e-9);
    }
}
