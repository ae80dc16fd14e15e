//! Gradient verification suite.
//!
//! Every tape primitive and every training loss is compared against central
//! finite differences in `f64` on small random instances. Non-scalar
//! primitives are reduced to a scalar with a random linear read-out.

use crate::error::Result;
use crate::model::{EncoderParams, ModelDims, Side};
use crate::numerics::{
    finite_diff_check_adjusted, FdReport, GruNodes, Matrix, NodeId, ParamId, ParamStore, Tape,
};
use crate::objective::{
    adversarial_loss, cross_entropy_term, entropy_of_pooled_mean, utterance_loss,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// One gradient check target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Affine,
    GruCell,
    GruSequence,
    Softmax,
    Mean,
    Mixture,
    Entropy,
    CrossEntropy,
    Add,
    Sub,
    Scale,
    DotConst,
    Inner,
    UtteranceLoss,
    /// Cross-entropy minus the entropy of the mean pooled with constant
    /// earlier outputs, without the gradient rescaling used in training.
    PooledLoss,
    AdversarialPsiPhi,
    AdversarialTheta,
}

impl Case {
    pub const PRIMITIVES: [Case; 13] = [
        Case::Affine,
        Case::GruCell,
        Case::GruSequence,
        Case::Softmax,
        Case::Mean,
        Case::Mixture,
        Case::Entropy,
        Case::CrossEntropy,
        Case::Add,
        Case::Sub,
        Case::Scale,
        Case::DotConst,
        Case::Inner,
    ];
    pub const LOSSES: [Case; 4] = [
        Case::UtteranceLoss,
        Case::PooledLoss,
        Case::AdversarialPsiPhi,
        Case::AdversarialTheta,
    ];

    pub fn all() -> impl Iterator<Item = Case> {
        Self::PRIMITIVES.into_iter().chain(Self::LOSSES)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: Case,
    pub seed: u64,
    pub max_rel_err: f64,
    pub worst: Option<String>,
    pub coordinates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub epsilon: f64,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub max_rel_err: f64,
    pub passed: bool,
    pub results: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.results
            .iter()
            .filter(move |r| !(r.max_rel_err < self.threshold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    pub threshold: f64,
    /// Number of GRU steps in [`Case::GruSequence`].
    pub sequence_len: usize,
    /// Adds this amount to the first analytic gradient coordinate of every
    /// case. Zero in normal use; non-zero only to demonstrate that the check
    /// catches a wrong gradient.
    pub corrupt: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            threshold: DEFAULT_THRESHOLD,
            sequence_len: 4,
            corrupt: 0.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random parameters plus a closure building the loss from them.
struct Instance {
    store: ParamStore<f64>,
    build: Box<dyn Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>>,
}

fn readout(t: &mut Tape<f64>, x: NodeId, c: &[f64]) -> Result<NodeId> {
    t.dot_const(x, c.to_vec())
}

fn gru_params(
    store: &mut ParamStore<f64>,
    rng: &mut ChaCha8Rng,
    hidden: usize,
    input: usize,
) -> Result<[ParamId; 9]> {
    let mut m =
        |name: &str, r: usize, c: usize| store.insert(name, r, c, uniform(rng, r * c, -0.8, 0.8));
    Ok([
        m("w_r", hidden, input)?,
        m("u_r", hidden, hidden)?,
        m("b_r", hidden, 1)?,
        m("w_u", hidden, input)?,
        m("u_u", hidden, hidden)?,
        m("b_u", hidden, 1)?,
        m("w_c", hidden, input)?,
        m("u_c", hidden, hidden)?,
        m("b_c", hidden, 1)?,
    ])
}

fn bind_gru(s: &ParamStore<f64>, t: &mut Tape<f64>, ids: &[ParamId; 9]) -> GruNodes {
    let mut n = ids.iter().map(|id| t.param(s, *id));
    let mut next = || n.next().expect("nine GRU parameters");
    GruNodes {
        w_r: next(),
        u_r: next(),
        b_r: next(),
        w_u: next(),
        u_u: next(),
        b_u: next(),
        w_c: next(),
        u_c: next(),
        b_c: next(),
    }
}

const TOY_DIMS: ModelDims = ModelDims {
    input_dim: 2,
    hidden_dim: 3,
    alphabet_size: 4,
};

fn toy_model(rng: &mut ChaCha8Rng) -> Result<EncoderParams<f64>> {
    let mut m = EncoderParams::<f64>::init(TOY_DIMS, rng)?;
    // Non-zero biases, initial states and marginal logits so every
    // parameter has a generic gradient.
    let ids: Vec<ParamId> = (0..m.store.len()).map(ParamId).collect();
    for id in ids {
        for v in m.store.entry_mut(id).value.iter_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    Ok(m)
}

fn toy_windows(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<(Matrix<f64>, Matrix<f64>)>> {
    let d = TOY_DIMS.input_dim;
    (0..n)
        .map(|_| {
            let x = Matrix::from_vec(3, d, uniform(rng, 3 * d, -1.5, 1.5))?;
            let y = Matrix::from_vec(2, d, uniform(rng, 2 * d, -1.5, 1.5))?;
            Ok((x, y))
        })
        .collect()
}

fn encode_all(
    m: &EncoderParams<f64>,
    s: &ParamStore<f64>,
    t: &mut Tape<f64>,
    windows: &[(Matrix<f64>, Matrix<f64>)],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    // The probe store replaces the model's own values.
    let model = EncoderParams {
        store: s.clone(),
        ..m.clone()
    };
    let pe = model.bind(t, Side::Confirmation);
    let fe = model.bind(t, Side::Predictor);
    let mut psi = Vec::new();
    let mut phi = Vec::new();
    for (x, y) in windows {
        psi.push(model.encode(t, &pe, y)?);
        phi.push(model.encode(t, &fe, x)?);
    }
    Ok((psi, phi))
}

fn instance(case: Case, seed: u64, opts: &GradcheckOptions) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let build: Box<dyn Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>> = match case {
        Case::Affine => {
            let w = store.insert("w", 3, 4, uniform(&mut rng, 12, -1.0, 1.0))?;
            let b = store.insert("b", 3, 1, uniform(&mut rng, 3, -1.0, 1.0))?;
            let v = store.insert("v", 4, 1, uniform(&mut rng, 4, -1.0, 1.0))?;
            let c = uniform(&mut rng, 3, -1.0, 1.0);
            Box::new(move |s, t| {
                let (w, b, v) = (t.param(s, w), t.param(s, b), t.param(s, v));
                let y = t.affine(w, b, v)?;
                readout(t, y, &c)
            })
        }
        Case::GruCell | Case::GruSequence => {
            let (hidden, input) = (3, 2);
            let cell = gru_params(&mut store, &mut rng, hidden, input)?;
            let h = store.insert("h", hidden, 1, uniform(&mut rng, hidden, -0.9, 0.9))?;
            let steps = if case == Case::GruCell {
                1
            } else {
                opts.sequence_len.max(1)
            };
            let frames =
                Matrix::from_vec(steps, input, uniform(&mut rng, steps * input, -1.5, 1.5))?;
            let c = uniform(&mut rng, hidden, -1.0, 1.0);
            if case == Case::GruCell {
                let v = store.insert("v", input, 1, frames.into_vec())?;
                Box::new(move |s, t| {
                    let nodes = bind_gru(s, t, &cell);
                    let (h, v) = (t.param(s, h), t.param(s, v));
                    let y = t.gru_cell(&nodes, h, v)?;
                    readout(t, y, &c)
                })
            } else {
                Box::new(move |s, t| {
                    let nodes = bind_gru(s, t, &cell);
                    let h = t.param(s, h);
                    let y = t.gru_sequence(&nodes, h, &frames)?;
                    readout(t, y, &c)
                })
            }
        }
        Case::Softmax => {
            let x = store.insert("x", 5, 1, uniform(&mut rng, 5, -2.0, 2.0))?;
            let c = uniform(&mut rng, 5, -1.0, 1.0);
            Box::new(move |s, t| {
                let x = t.param(s, x);
                let y = t.softmax(x)?;
                readout(t, y, &c)
            })
        }
        Case::Mean | Case::Mixture => {
            let ids = (0..3)
                .map(|i| store.insert(&format!("x{i}"), 4, 1, uniform(&mut rng, 4, -1.0, 1.0)))
                .collect::<Result<Vec<_>>>()?;
            let fixed = uniform(&mut rng, 4, 0.0, 3.0);
            let c = uniform(&mut rng, 4, -1.0, 1.0);
            let mixture = case == Case::Mixture;
            Box::new(move |s, t| {
                let xs: Vec<_> = ids.iter().map(|id| t.param(s, *id)).collect();
                let y = if mixture {
                    t.mixture(&xs, Some(&fixed), 5)?
                } else {
                    t.mean(&xs)?
                };
                readout(t, y, &c)
            })
        }
        Case::Entropy => {
            let p = store.insert("p", 5, 1, uniform(&mut rng, 5, 0.05, 1.0))?;
            Box::new(move |s, t| {
                let p = t.param(s, p);
                Ok(t.entropy_bits(p))
            })
        }
        Case::CrossEntropy => {
            let p = store.insert("p", 5, 1, uniform(&mut rng, 5, 0.05, 1.0))?;
            let q = store.insert("q", 5, 1, uniform(&mut rng, 5, 0.05, 1.0))?;
            Box::new(move |s, t| {
                let (p, q) = (t.param(s, p), t.param(s, q));
                t.cross_entropy_bits(p, q)
            })
        }
        Case::Add | Case::Sub | Case::Inner => {
            let a = store.insert("a", 2, 3, uniform(&mut rng, 6, -1.0, 1.0))?;
            let b = store.insert("b", 2, 3, uniform(&mut rng, 6, -1.0, 1.0))?;
            let c = uniform(&mut rng, 6, -1.0, 1.0);
            Box::new(move |s, t| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                match case {
                    Case::Add => {
                        let y = t.add(a, b)?;
                        readout(t, y, &c)
                    }
                    Case::Sub => {
                        let y = t.sub(a, b)?;
                        readout(t, y, &c)
                    }
                    _ => t.inner(a, b),
                }
            })
        }
        Case::Scale | Case::DotConst => {
            let x = store.insert("x", 4, 1, uniform(&mut rng, 4, -1.0, 1.0))?;
            let k = rng.gen_range(-2.0..2.0);
            let c = uniform(&mut rng, 4, -1.0, 1.0);
            let scale = case == Case::Scale;
            Box::new(move |s, t| {
                let mut y = t.param(s, x);
                if scale {
                    y = t.scale(y, k);
                }
                readout(t, y, &c)
            })
        }
        Case::UtteranceLoss | Case::PooledLoss | Case::AdversarialPsiPhi => {
            let model = toy_model(&mut rng)?;
            let windows = toy_windows(&mut rng, 3)?;
            store = model.store.clone();
            let z = TOY_DIMS.alphabet_size;
            let earlier = uniform(&mut rng, z, 0.0, 1.0);
            let total: f64 = earlier.iter().sum();
            // Six earlier outputs averaging to a random distribution.
            let earlier: Vec<f64> = earlier.iter().map(|v| 6.0 * v / total).collect();
            let theta = model.theta_distribution()?;
            Box::new(move |s, t| {
                let (psi, phi) = encode_all(&model, s, t, &windows)?;
                match case {
                    Case::UtteranceLoss => Ok(utterance_loss(t, &psi, &phi)?.0),
                    Case::PooledLoss => {
                        let ce = cross_entropy_term(t, &psi, &phi)?;
                        let h = entropy_of_pooled_mean(t, &psi, &earlier, 6)?;
                        t.sub(ce, h)
                    }
                    _ => {
                        // Marginal held fixed: the loss only depends on psi and phi.
                        let th = t.vector(theta.clone());
                        Ok(adversarial_loss(t, &psi, &phi, th)?.psi_phi_loss)
                    }
                }
            })
        }
        Case::AdversarialTheta => {
            let model = toy_model(&mut rng)?;
            let windows = toy_windows(&mut rng, 3)?;
            let psi_vals = windows
                .iter()
                .map(|(_, y)| model.encode_eval(Side::Confirmation, y))
                .collect::<Result<Vec<_>>>()?;
            let logits = store.insert(
                "theta.logits",
                TOY_DIMS.alphabet_size,
                1,
                uniform(&mut rng, TOY_DIMS.alphabet_size, -1.0, 1.0),
            )?;
            Box::new(move |s, t| {
                let psi: Vec<_> = psi_vals.iter().map(|v| t.vector(v.clone())).collect();
                let l = t.param(s, logits);
                let th = t.softmax(l)?;
                Ok(adversarial_loss(t, &psi, &psi, th)?.theta_loss)
            })
        }
    };
    Ok(Instance { store, build })
}

/// Runs one case at one seed.
pub fn check_case(case: Case, seed: u64, opts: &GradcheckOptions) -> Result<CaseResult> {
    let inst = instance(case, seed, opts)?;
    let corrupt = opts.corrupt;
    let rep: FdReport = finite_diff_check_adjusted(
        &inst.store,
        opts.epsilon,
        |s, t| (inst.build)(s, t),
        |store| {
            if corrupt != 0.0 {
                store.entry_mut(ParamId(0)).grad[0] += corrupt;
            }
        },
    )?;
    Ok(CaseResult {
        case,
        seed,
        max_rel_err: rep.max_rel_err,
        worst: rep.worst.map(|(name, k)| format!("{name}[{k}]")),
        coordinates: rep.coordinates,
    })
}

/// Every case at every seed.
pub fn run_gradcheck(seeds: &[u64], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for &seed in seeds {
        for case in Case::all() {
            results.push(check_case(case, seed, opts)?);
        }
    }
    let max_rel_err = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let passed = results.iter().all(|r| r.max_rel_err < opts.threshold);
    Ok(GradcheckReport {
        epsilon: opts.epsilon,
        threshold: opts.threshold,
        seeds: seeds.to_vec(),
        max_rel_err,
        passed,
        results,
    })
}

/// The `count` consecutive seeds starting at `base`.
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}
