//! Co-training objective for one minibatch of windows.
//!
//! With `psi_i = P_psi(z|y_i)` and `phi_i = P_phi(z|x_i)`:
//!
//! ```text
//! H+(z|x) = 1/N sum_i sum_z psi_i[z] * -log2 phi_i[z]
//! H(z|u)  = H(1/N sum_i psi_i)
//! loss    = H+(z|x) - H(z|u)
//! bound   = H(z|u) - H+(z|x)   (lower bound on I(x, y), in bits)
//! ```
//!
//! The expectation over `z ~ psi_i` is an exact sum over the alphabet. The
//! first term is an average over windows; the second is already the entropy
//! of an average and is not averaged again.
//!
//! The adversarial form replaces `H(z|u)` by the cross-entropy
//! `H+(z) = 1/N sum_i sum_z psi_i[z] * -log2 theta[z]` against a learned
//! marginal `theta`, which is trained to minimize it while `psi` maximizes it.

use crate::error::{Error, Result};
use crate::model::SymbolDistribution;
use crate::numerics::{kernels, NodeId, Scalar, Tape};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub cross_entropy_bits: f64,
    pub marginal_entropy_bits: f64,
    pub adversarial_marginal_bits: Option<f64>,
    pub loss: f64,
    pub mi_bound_bits: f64,
    /// Logarithm arguments that hit the clamp while computing the terms.
    pub saturation_count: usize,
}

/// `marginal_entropy_bits - cross_entropy_bits`; may be negative early in
/// training.
pub fn mi_lower_bound(terms: &ObjectiveTerms) -> f64 {
    terms.marginal_entropy_bits - terms.cross_entropy_bits
}

fn check_pairs(psi: usize, phi: usize) -> Result<()> {
    if psi != phi {
        return Err(Error::Shape(format!(
            "{psi} confirmation outputs but {phi} predictor outputs"
        )));
    }
    if psi == 0 {
        return Err(Error::Shape("objective over an empty minibatch".into()));
    }
    Ok(())
}

fn sum_saturations<T: Scalar>(tape: &Tape<T>, ids: &[NodeId]) -> usize {
    ids.iter().map(|id| tape.saturations(*id)).sum()
}

/// Mean over windows of the per-window cross-entropy of `phi` under `psi`.
pub fn cross_entropy_term<T: Scalar>(
    tape: &mut Tape<T>,
    psi: &[NodeId],
    phi: &[NodeId],
) -> Result<NodeId> {
    Ok(mean_cross_entropy(tape, psi, phi)?.0)
}

fn mean_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    psi: &[NodeId],
    phi: &[NodeId],
) -> Result<(NodeId, usize)> {
    check_pairs(psi.len(), phi.len())?;
    let per_window = psi
        .iter()
        .zip(phi)
        .map(|(p, q)| tape.cross_entropy_bits(*p, *q))
        .collect::<Result<Vec<_>>>()?;
    let sat = sum_saturations(tape, &per_window);
    Ok((tape.mean(&per_window)?, sat))
}

/// Entropy of the average of `psi`.
pub fn entropy_of_mean<T: Scalar>(tape: &mut Tape<T>, psi: &[NodeId]) -> Result<NodeId> {
    let q = tape.mean(psi)?;
    Ok(tape.entropy_bits(q))
}

/// Entropy of the average of `psi` pooled with `count` earlier outputs whose
/// sum is `sum`. The earlier outputs are constants.
pub fn entropy_of_pooled_mean<T: Scalar>(
    tape: &mut Tape<T>,
    psi: &[NodeId],
    sum: &[T],
    count: usize,
) -> Result<NodeId> {
    let q = tape.mixture(psi, Some(sum), count)?;
    Ok(tape.entropy_bits(q))
}

/// Earlier confirmation outputs pooled into the entropy term (global-marginal
/// mode).
#[derive(Debug, Clone, Copy)]
pub struct PooledOutputs<'a, T> {
    pub sum: &'a [T],
    pub count: usize,
}

/// Loss `H+(z|x) - H(z|u)` and its decomposition. Gradients reach `psi`
/// through both terms and `phi` through the first only.
pub fn utterance_loss<T: Scalar>(
    tape: &mut Tape<T>,
    psi: &[NodeId],
    phi: &[NodeId],
) -> Result<(NodeId, ObjectiveTerms)> {
    utterance_loss_pooled(tape, psi, phi, None)
}

pub fn utterance_loss_pooled<T: Scalar>(
    tape: &mut Tape<T>,
    psi: &[NodeId],
    phi: &[NodeId],
    pooled: Option<PooledOutputs<'_, T>>,
) -> Result<(NodeId, ObjectiveTerms)> {
    let (ce, ce_sat) = mean_cross_entropy(tape, psi, phi)?;
    let (ent, h) = match pooled {
        Some(p) if p.count > 0 => {
            let h = entropy_of_pooled_mean(tape, psi, p.sum, p.count)?;
            (rescale_pooled_gradient(tape, h, psi.len(), p.count)?, h)
        }
        _ => {
            let h = entropy_of_mean(tape, psi)?;
            (h, h)
        }
    };
    let loss = tape.sub(ce, ent)?;
    let mut terms = ObjectiveTerms {
        cross_entropy_bits: tape.scalar(ce).to_f64_lossy(),
        marginal_entropy_bits: tape.scalar(h).to_f64_lossy(),
        adversarial_marginal_bits: None,
        loss: tape.scalar(loss).to_f64_lossy(),
        mi_bound_bits: 0.0,
        saturation_count: ce_sat + tape.saturations(h),
    };
    terms.mi_bound_bits = mi_lower_bound(&terms);
    Ok((loss, terms))
}

/// Same value as `h`, gradient multiplied by `(n + count) / n`.
///
/// Through the pooled mean each current window carries weight
/// `1 / (n + count)`, so a long buffer would shrink the entropy gradient far
/// below the cross-entropy gradient (weight `1 / n`) and training collapses
/// onto a single symbol. Rescaling gives the current windows the weight they
/// have in the per-utterance form while the entropy is still evaluated at
/// the pooled mean.
fn rescale_pooled_gradient<T: Scalar>(
    tape: &mut Tape<T>,
    h: NodeId,
    n: usize,
    count: usize,
) -> Result<NodeId> {
    let s = T::of((n + count) as f64 / n as f64);
    let scaled = tape.scale(h, s);
    let fixed = tape.detach(h);
    let offset = tape.scale(fixed, T::one() - s);
    tape.add(scaled, offset)
}

/// Roots of the adversarial objective.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialLoss {
    /// `H+(z|x) - H+(z)` with `theta` detached; minimized over psi and phi.
    pub psi_phi_loss: NodeId,
    /// `H+(z)` with `psi` detached; minimized over theta.
    pub theta_loss: NodeId,
    pub terms: ObjectiveTerms,
}

pub fn adversarial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    psi: &[NodeId],
    phi: &[NodeId],
    theta: NodeId,
) -> Result<AdversarialLoss> {
    let (ce, ce_sat) = mean_cross_entropy(tape, psi, phi)?;

    let theta_fixed = tape.detach(theta);
    let marg = psi
        .iter()
        .map(|p| tape.cross_entropy_bits(*p, theta_fixed))
        .collect::<Result<Vec<_>>>()?;
    let marg_sat = sum_saturations(tape, &marg);
    let marg_for_psi = tape.mean(&marg)?;
    let psi_phi_loss = tape.sub(ce, marg_for_psi)?;

    let psi_fixed: Vec<NodeId> = psi.iter().map(|p| tape.detach(*p)).collect();
    let for_theta = psi_fixed
        .iter()
        .map(|p| tape.cross_entropy_bits(*p, theta))
        .collect::<Result<Vec<_>>>()?;
    let theta_loss = tape.mean(&for_theta)?;

    let ent = entropy_of_mean(tape, psi)?;
    let mut terms = ObjectiveTerms {
        cross_entropy_bits: tape.scalar(ce).to_f64_lossy(),
        marginal_entropy_bits: tape.scalar(ent).to_f64_lossy(),
        adversarial_marginal_bits: Some(tape.scalar(theta_loss).to_f64_lossy()),
        loss: tape.scalar(psi_phi_loss).to_f64_lossy(),
        mi_bound_bits: 0.0,
        saturation_count: ce_sat + marg_sat + tape.saturations(ent),
    };
    terms.mi_bound_bits = mi_lower_bound(&terms);
    Ok(AdversarialLoss {
        psi_phi_loss,
        theta_loss,
        terms,
    })
}

/// Plain-value cross-entropy term: returns bits and the saturation count.
pub fn cross_entropy_bits(
    psi: &[SymbolDistribution],
    phi: &[SymbolDistribution],
) -> Result<(f64, usize)> {
    check_pairs(psi.len(), phi.len())?;
    let mut total = 0.0;
    let mut sat = 0;
    for (p, q) in psi.iter().zip(phi) {
        if p.len() != q.len() {
            return Err(Error::Shape(format!(
                "distributions of length {} and {}",
                p.len(),
                q.len()
            )));
        }
        let (h, s) = kernels::cross_entropy_bits(p.probs(), q.probs());
        total += h;
        sat += s;
    }
    Ok((total / psi.len() as f64, sat))
}

/// Average of the distributions.
pub fn mean_distribution(psi: &[SymbolDistribution]) -> Result<Vec<f64>> {
    let first = psi
        .first()
        .ok_or_else(|| Error::Shape("mean of an empty list".into()))?;
    let mut q = vec![0.0; first.len()];
    for p in psi {
        if p.len() != q.len() {
            return Err(Error::Shape(format!(
                "distributions of length {} and {}",
                q.len(),
                p.len()
            )));
        }
        kernels::add_assign(&mut q, p.probs());
    }
    let n = psi.len() as f64;
    q.iter_mut().for_each(|v| *v /= n);
    Ok(q)
}

/// Plain-value entropy of the average distribution, in bits.
pub fn entropy_of_mean_bits(psi: &[SymbolDistribution]) -> Result<f64> {
    Ok(kernels::entropy_bits(&mean_distribution(psi)?).0)
}

/// Plain-value [`utterance_loss`] decomposition.
pub fn terms_from_distributions(
    psi: &[SymbolDistribution],
    phi: &[SymbolDistribution],
) -> Result<ObjectiveTerms> {
    let (ce, sat) = cross_entropy_bits(psi, phi)?;
    let (h, hsat) = kernels::entropy_bits(&mean_distribution(psi)?);
    Ok(ObjectiveTerms {
        cross_entropy_bits: ce,
        marginal_entropy_bits: h,
        adversarial_marginal_bits: None,
        loss: ce - h,
        mi_bound_bits: h - ce,
        saturation_count: sat + hsat,
    })
}
