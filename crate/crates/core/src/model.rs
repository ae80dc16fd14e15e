//! The three parametric models over the symbol alphabet:
//!
//! * confirmation model `P_psi(z|y)`: GRU over the future frames, linear head, softmax
//! * predictor model `P_phi(z|x)`: same architecture over the past frames
//! * marginal model `P_theta(z)`: a bare logit vector
//!
//! All parameters live in one [`ParamStore`]; the two encoders share nothing.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, GruWeights};
use crate::numerics::{GruNodes, Matrix, NodeId, ParamId, ParamStore, Scalar, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    /// `P_psi(z|y)`, reads the future half of the window.
    Confirmation,
    /// `P_phi(z|x)`, reads the past half of the window.
    Predictor,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Confirmation => "psi",
            Side::Predictor => "phi",
        }
    }
}

/// Symbol alphabet plus bookkeeping of which symbols are still in use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    pub size: usize,
    pub live_mask: Vec<bool>,
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "alphabet needs at least 2 symbols, got {size}"
            )));
        }
        Ok(Self {
            size,
            live_mask: vec![true; size],
        })
    }

    pub fn live_count(&self) -> usize {
        self.live_mask.iter().filter(|l| **l).count()
    }

    pub fn live(&self) -> impl Iterator<Item = usize> + '_ {
        self.live_mask
            .iter()
            .enumerate()
            .filter(|(_, l)| **l)
            .map(|(i, _)| i)
    }

    pub fn dead(&self) -> impl Iterator<Item = usize> + '_ {
        self.live_mask
            .iter()
            .enumerate()
            .filter(|(_, l)| !**l)
            .map(|(i, _)| i)
    }
}

/// A probability vector over the alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolDistribution(Vec<f64>);

impl SymbolDistribution {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Probability(
                "entries must be finite and nonnegative".into(),
            ));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Probability(format!("distribution sums to {s}")));
        }
        Ok(Self(probs))
    }

    /// Widens a model output. Outputs computed in `f32` can miss the sum
    /// tolerance by rounding, so they are renormalized in `f64`.
    pub fn from_output<T: Scalar>(p: &[T]) -> Self {
        let v: Vec<f64> = p.iter().map(|x| x.to_f64_lossy()).collect();
        let s: f64 = v.iter().sum();
        Self(v.into_iter().map(|x| x / s).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most likely symbol, smallest index on ties.
    pub fn argmax(&self) -> usize {
        kernels::argmax(&self.0)
    }

    pub fn entropy_bits(&self) -> f64 {
        kernels::entropy_bits(&self.0).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub alphabet_size: usize,
}

/// Store ids for one GRU plus its learned initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParamIds {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_u: ParamId,
    pub u_u: ParamId,
    pub b_u: ParamId,
    pub w_c: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
    pub h0: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderIds {
    pub gru: GruParamIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl EncoderIds {
    pub fn all(&self) -> [ParamId; 12] {
        let g = &self.gru;
        [
            g.w_r, g.u_r, g.b_r, g.w_u, g.u_u, g.b_u, g.w_c, g.u_c, g.b_c, g.h0, self.out_w,
            self.out_b,
        ]
    }
}

/// An encoder's parameters bound as leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundEncoder {
    pub cell: GruNodes,
    pub h0: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

/// All trainable parameters: both encoders and the marginal logits.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub store: ParamStore<T>,
    pub dims: ModelDims,
    pub psi: EncoderIds,
    pub phi: EncoderIds,
    pub theta: ParamId,
}

fn uniform_fill<T: Scalar, R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<T> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::of(rng.gen_range(-a..=a))).collect()
}

fn add_encoder<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    side: Side,
    d: &ModelDims,
    rng: Option<&mut R>,
) -> Result<EncoderIds> {
    let p = side.prefix();
    let (n, i, z) = (d.hidden_dim, d.input_dim, d.alphabet_size);
    let mut rng = rng;
    let mut mat =
        |store: &mut ParamStore<T>, name: &str, rows: usize, cols: usize| -> Result<ParamId> {
            let full = format!("{p}.{name}");
            match rng.as_mut() {
                Some(r) => store.insert(&full, rows, cols, uniform_fill(*r, rows * cols, cols)),
                None => store.zeros(&full, rows, cols),
            }
        };
    let w_r = mat(store, "gru.w_r", n, i)?;
    let u_r = mat(store, "gru.u_r", n, n)?;
    let b_r = store.zeros(&format!("{p}.gru.b_r"), n, 1)?;
    let w_u = mat(store, "gru.w_u", n, i)?;
    let u_u = mat(store, "gru.u_u", n, n)?;
    let b_u = store.zeros(&format!("{p}.gru.b_u"), n, 1)?;
    let w_c = mat(store, "gru.w_c", n, i)?;
    let u_c = mat(store, "gru.u_c", n, n)?;
    let b_c = store.zeros(&format!("{p}.gru.b_c"), n, 1)?;
    let h0 = store.zeros(&format!("{p}.gru.h0"), n, 1)?;
    let out_w = mat(store, "out.w", z, n)?;
    let out_b = store.zeros(&format!("{p}.out.b"), z, 1)?;
    Ok(EncoderIds {
        gru: GruParamIds {
            w_r,
            u_r,
            b_r,
            w_u,
            u_u,
            b_u,
            w_c,
            u_c,
            b_c,
            h0,
        },
        out_w,
        out_b,
    })
}

impl<T: Scalar> EncoderParams<T> {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; biases, initial
    /// states and marginal logits zero.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        Self::build(dims, Some(rng))
    }

    /// Every parameter zero.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(dims, None)
    }

    fn build<R: Rng>(dims: ModelDims, mut rng: Option<&mut R>) -> Result<Self> {
        if dims.input_dim == 0 || dims.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {dims:?}"
            )));
        }
        Alphabet::new(dims.alphabet_size)?;
        let mut store = ParamStore::new();
        let psi = add_encoder(&mut store, Side::Confirmation, &dims, rng.as_deref_mut())?;
        let phi = add_encoder(&mut store, Side::Predictor, &dims, rng.as_deref_mut())?;
        let theta = store.zeros("theta.logits", dims.alphabet_size, 1)?;
        Ok(Self {
            store,
            dims,
            psi,
            phi,
            theta,
        })
    }

    /// Rebuilds the id layout around an existing store (e.g. one read from a
    /// checkpoint), checking names and shapes.
    pub fn from_store(store: ParamStore<T>, dims: ModelDims) -> Result<Self> {
        let reference = Self::zeros(dims)?;
        if store.len() != reference.store.len() {
            return Err(Error::Shape(format!(
                "store has {} entries, model needs {}",
                store.len(),
                reference.store.len()
            )));
        }
        for (a, b) in store.entries().iter().zip(reference.store.entries()) {
            if a.name != b.name || a.rows != b.rows || a.cols != b.cols {
                return Err(Error::Shape(format!(
                    "parameter {} is {}x{}, expected {} {}x{}",
                    a.name, a.rows, a.cols, b.name, b.rows, b.cols
                )));
            }
        }
        Ok(Self { store, ..reference })
    }

    pub fn ids(&self, side: Side) -> &EncoderIds {
        match side {
            Side::Confirmation => &self.psi,
            Side::Predictor => &self.phi,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, side: Side) -> BoundEncoder {
        let ids = *self.ids(side);
        let g = ids.gru;
        let s = &self.store;
        let cell = GruNodes {
            w_r: tape.param(s, g.w_r),
            u_r: tape.param(s, g.u_r),
            b_r: tape.param(s, g.b_r),
            w_u: tape.param(s, g.w_u),
            u_u: tape.param(s, g.u_u),
            b_u: tape.param(s, g.b_u),
            w_c: tape.param(s, g.w_c),
            u_c: tape.param(s, g.u_c),
            b_c: tape.param(s, g.b_c),
        };
        BoundEncoder {
            cell,
            h0: tape.param(s, g.h0),
            out_w: tape.param(s, ids.out_w),
            out_b: tape.param(s, ids.out_b),
        }
    }

    fn check_frames(&self, frames_cols: usize, rows: usize) -> Result<()> {
        if frames_cols != self.dims.input_dim {
            return Err(Error::Shape(format!(
                "frames have dimension {frames_cols}, model expects {}",
                self.dims.input_dim
            )));
        }
        if rows == 0 {
            return Err(Error::Shape("cannot encode an empty window".into()));
        }
        Ok(())
    }

    /// `softmax(W_out * gru_sequence(frames) + b_out)` recorded on the tape.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        enc: &BoundEncoder,
        frames: &Matrix<T>,
    ) -> Result<NodeId> {
        self.check_frames(frames.cols(), frames.rows())?;
        let h = tape.gru_sequence(&enc.cell, enc.h0, frames)?;
        let logits = tape.affine(enc.out_w, enc.out_b, h)?;
        tape.softmax(logits)
    }

    /// Forward-only version of [`Self::encode`] reading `f64` frames.
    pub fn encode_eval(&self, side: Side, frames: &Matrix<f64>) -> Result<Vec<T>> {
        self.check_frames(frames.cols(), frames.rows())?;
        let ids = self.ids(side);
        let g = &ids.gru;
        let v = |id: ParamId| self.store.entry(id).value.as_slice();
        let w = GruWeights {
            w_r: v(g.w_r),
            u_r: v(g.u_r),
            b_r: v(g.b_r),
            w_u: v(g.w_u),
            u_u: v(g.u_u),
            b_u: v(g.b_u),
            w_c: v(g.w_c),
            u_c: v(g.u_c),
            b_c: v(g.b_c),
        };
        let mut h = v(g.h0).to_vec();
        let mut input = vec![T::zero(); frames.cols()];
        for row in frames.row_iter() {
            for (dst, src) in input.iter_mut().zip(row) {
                *dst = T::of(*src);
            }
            h = kernels::gru_cell_forward(&w, &h, &input).0;
        }
        let mut logits = v(ids.out_b).to_vec();
        kernels::matvec_acc(&mut logits, v(ids.out_w), &h);
        kernels::softmax(&logits)
            .ok_or_else(|| Error::NonFinite("encoder produced non-finite logits".into()))
    }

    /// `softmax(theta)` recorded on the tape.
    pub fn marginal_theta(&self, tape: &mut Tape<T>) -> Result<NodeId> {
        let logits = tape.param(&self.store, self.theta);
        tape.softmax(logits)
    }

    pub fn theta_distribution(&self) -> Result<Vec<T>> {
        kernels::softmax(&self.store.entry(self.theta).value)
            .ok_or_else(|| Error::NonFinite("marginal logits are not finite".into()))
    }

    /// Parameter ids belonging to the marginal model.
    pub fn is_theta(&self, id: ParamId) -> bool {
        id == self.theta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 3,
            hidden_dim: 5,
            alphabet_size: 64,
        }
    }

    fn frames(rows: usize, cols: usize, seed: f64) -> Matrix<f64> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64) * 0.91 + seed).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = EncoderParams::<f64>::zeros(dims()).unwrap();
        let p = m
            .encode_eval(Side::Confirmation, &frames(4, 3, 0.0))
            .unwrap();
        assert!(p.iter().all(|x| (*x - 1.0 / 64.0).abs() < 1e-15));
        let t = m.theta_distribution().unwrap();
        assert!(t.iter().all(|x| (*x - 1.0 / 64.0).abs() < 1e-15));
    }

    #[test]
    fn outputs_sum_to_one_and_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = EncoderParams::<f64>::init(dims(), &mut rng).unwrap();
        let f = frames(6, 3, 0.4);
        let a = m.encode_eval(Side::Predictor, &f).unwrap();
        let b = m.encode_eval(Side::Predictor, &f).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|p| *p > 0.0));
    }

    #[test]
    fn tape_and_eval_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = EncoderParams::<f64>::init(dims(), &mut rng).unwrap();
        let f = frames(5, 3, 1.3);
        let mut tape = Tape::new();
        let enc = m.bind(&mut tape, Side::Confirmation);
        let node = m.encode(&mut tape, &enc, &f).unwrap();
        assert_eq!(
            tape.value(node),
            m.encode_eval(Side::Confirmation, &f).unwrap().as_slice()
        );
    }

    #[test]
    fn encoders_share_no_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = EncoderParams::<f64>::init(dims(), &mut rng).unwrap();
        let f = frames(4, 3, 0.2);
        let before = m.encode_eval(Side::Confirmation, &f).unwrap();
        for id in m.phi.all() {
            m.store
                .entry_mut(id)
                .value
                .iter_mut()
                .for_each(|v| *v += 0.37);
        }
        let after = m.encode_eval(Side::Confirmation, &f).unwrap();
        assert_eq!(before, after);
        assert!(m.psi.all().iter().all(|id| !m.phi.all().contains(id)));
    }

    #[test]
    fn theta_logits_of_log_target_recover_target() {
        let mut m = EncoderParams::<f64>::zeros(ModelDims {
            alphabet_size: 4,
            ..dims()
        })
        .unwrap();
        let target = [0.1, 0.2, 0.3, 0.4];
        m.store.entry_mut(m.theta).value = target.iter().map(|p: &f64| p.ln()).collect();
        for (a, b) in m.theta_distribution().unwrap().iter().zip(target) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_frame_dimension_is_rejected() {
        let m = EncoderParams::<f64>::zeros(dims()).unwrap();
        assert!(matches!(
            m.encode_eval(Side::Confirmation, &frames(4, 2, 0.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn store_round_trip_through_from_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = EncoderParams::<f32>::init(dims(), &mut rng).unwrap();
        let again = EncoderParams::from_store(m.store.clone(), dims()).unwrap();
        assert_eq!(again, m);
        assert!(EncoderParams::from_store(
            m.store.clone(),
            ModelDims {
                hidden_dim: 4,
                ..dims()
            }
        )
        .is_err());
    }

    #[test]
    fn initialization_respects_fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = EncoderParams::<f64>::init(
            ModelDims {
                input_dim: 39,
                hidden_dim: 64,
                alphabet_size: 64,
            },
            &mut rng,
        )
        .unwrap();
        for e in m.store.entries() {
            let bound = 1.0 / (e.cols as f64).sqrt();
            if e.name.ends_with(".b")
                || e.name.contains(".b_")
                || e.name.ends_with("h0")
                || e.name.starts_with("theta")
            {
                assert!(e.value.iter().all(|v| *v == 0.0), "{}", e.name);
            } else {
                assert!(e.value.iter().all(|v| v.abs() <= bound), "{}", e.name);
            }
        }
    }
}
