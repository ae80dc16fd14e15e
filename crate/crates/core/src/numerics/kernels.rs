//! Forward and backward kernels on plain slices.
//!
//! The tape calls these to produce node values and to run its reverse sweep;
//! the evaluation path calls the forward halves directly without recording
//! anything.

use super::{Scalar, LOG_CLAMP};

/// `out += W v` for a row-major `rows x cols` matrix.
pub fn matvec_acc<T: Scalar>(out: &mut [T], w: &[T], v: &[T]) {
    let cols = v.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols.max(1))) {
        let mut s = T::zero();
        for (a, b) in row.iter().zip(v) {
            s = s + *a * *b;
        }
        *o = *o + s;
    }
}

/// `out += W^T g` for a row-major `g.len() x out.len()` matrix.
pub fn matvec_t_acc<T: Scalar>(out: &mut [T], w: &[T], g: &[T]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), g.len() * cols);
    for (gi, row) in g.iter().zip(w.chunks_exact(cols.max(1))) {
        if *gi == T::zero() {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o = *o + *gi * *a;
        }
    }
}

/// `dw += g v^T`.
pub fn outer_acc<T: Scalar>(dw: &mut [T], g: &[T], v: &[T]) {
    let cols = v.len();
    debug_assert_eq!(dw.len(), g.len() * cols);
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(cols.max(1))) {
        if *gi == T::zero() {
            continue;
        }
        for (d, b) in row.iter_mut().zip(v) {
            *d = *d + *gi * *b;
        }
    }
}

pub fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Borrowed weights of one GRU cell. Matrices are row-major with `hidden`
/// rows; `w_*` have `input` columns and `u_*` have `hidden` columns.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights<'a, T> {
    pub w_r: &'a [T],
    pub u_r: &'a [T],
    pub b_r: &'a [T],
    pub w_u: &'a [T],
    pub u_u: &'a [T],
    pub b_u: &'a [T],
    pub w_c: &'a [T],
    pub u_c: &'a [T],
    pub b_c: &'a [T],
}

impl<T> GruWeights<'_, T> {
    pub fn hidden(&self) -> usize {
        self.b_r.len()
    }

    pub fn input(&self) -> usize {
        if self.b_r.is_empty() {
            0
        } else {
            self.w_r.len() / self.b_r.len()
        }
    }
}

/// Mutable gradient slots matching [`GruWeights`].
#[derive(Debug)]
pub struct GruGrads<'a, T> {
    pub w_r: &'a mut [T],
    pub u_r: &'a mut [T],
    pub b_r: &'a mut [T],
    pub w_u: &'a mut [T],
    pub u_u: &'a mut [T],
    pub b_u: &'a mut [T],
    pub w_c: &'a mut [T],
    pub u_c: &'a mut [T],
    pub b_c: &'a mut [T],
}

/// Gate activations saved by the forward pass.
#[derive(Debug, Clone, Default)]
pub struct GruCache<T> {
    pub reset: Vec<T>,
    pub update: Vec<T>,
    pub candidate: Vec<T>,
    pub reset_hidden: Vec<T>,
}

/// One GRU step:
///
/// ```text
/// r  = sigmoid(W_r v + U_r h + b_r)
/// u  = sigmoid(W_u v + U_u h + b_u)
/// c  = tanh(W_c v + U_c (r * h) + b_c)
/// h' = u * h + (1 - u) * c
/// ```
pub fn gru_cell_forward<T: Scalar>(
    w: &GruWeights<'_, T>,
    h: &[T],
    v: &[T],
) -> (Vec<T>, GruCache<T>) {
    let n = w.hidden();
    let mut reset = w.b_r.to_vec();
    matvec_acc(&mut reset, w.w_r, v);
    matvec_acc(&mut reset, w.u_r, h);
    reset.iter_mut().for_each(|x| *x = sigmoid(*x));

    let mut update = w.b_u.to_vec();
    matvec_acc(&mut update, w.w_u, v);
    matvec_acc(&mut update, w.u_u, h);
    update.iter_mut().for_each(|x| *x = sigmoid(*x));

    let reset_hidden: Vec<T> = reset.iter().zip(h).map(|(r, h)| *r * *h).collect();
    let mut candidate = w.b_c.to_vec();
    matvec_acc(&mut candidate, w.w_c, v);
    matvec_acc(&mut candidate, w.u_c, &reset_hidden);
    candidate.iter_mut().for_each(|x| *x = x.tanh());

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(update[i] * h[i] + (T::one() - update[i]) * candidate[i]);
    }
    (
        out,
        GruCache {
            reset,
            update,
            candidate,
            reset_hidden,
        },
    )
}

/// Reverse of [`gru_cell_forward`]: accumulates into `grads`, `dh` and `dv`.
#[allow(clippy::too_many_arguments)]
pub fn gru_cell_backward<T: Scalar>(
    w: &GruWeights<'_, T>,
    h: &[T],
    v: &[T],
    cache: &GruCache<T>,
    d_out: &[T],
    grads: &mut GruGrads<'_, T>,
    dh: &mut [T],
    dv: &mut [T],
) {
    let n = w.hidden();
    let one = T::one();
    let mut da_c = vec![T::zero(); n];
    let mut da_u = vec![T::zero(); n];
    for i in 0..n {
        let (u, c) = (cache.update[i], cache.candidate[i]);
        dh[i] = dh[i] + d_out[i] * u;
        da_u[i] = d_out[i] * (h[i] - c) * u * (one - u);
        da_c[i] = d_out[i] * (one - u) * (one - c * c);
    }

    // candidate path
    outer_acc(grads.w_c, &da_c, v);
    outer_acc(grads.u_c, &da_c, &cache.reset_hidden);
    add_assign(grads.b_c, &da_c);
    matvec_t_acc(dv, w.w_c, &da_c);
    let mut d_rh = vec![T::zero(); n];
    matvec_t_acc(&mut d_rh, w.u_c, &da_c);
    let mut da_r = vec![T::zero(); n];
    for i in 0..n {
        let r = cache.reset[i];
        dh[i] = dh[i] + d_rh[i] * r;
        da_r[i] = d_rh[i] * h[i] * r * (one - r);
    }

    // update gate
    outer_acc(grads.w_u, &da_u, v);
    outer_acc(grads.u_u, &da_u, h);
    add_assign(grads.b_u, &da_u);
    matvec_t_acc(dv, w.w_u, &da_u);
    matvec_t_acc(dh, w.u_u, &da_u);

    // reset gate
    outer_acc(grads.w_r, &da_r, v);
    outer_acc(grads.u_r, &da_r, h);
    add_assign(grads.b_r, &da_r);
    matvec_t_acc(dv, w.w_r, &da_r);
    matvec_t_acc(dh, w.u_r, &da_r);
}

/// Max-shifted softmax. Returns `None` when any logit is not finite.
pub fn softmax<T: Scalar>(logits: &[T]) -> Option<Vec<T>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return None;
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|l| (*l - m).exp()).collect();
    let z: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p = *p / z);
    Some(out)
}

/// `dl = p * (dp - <p, dp>)`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T], dl: &mut [T]) {
    let dot: T = p.iter().zip(dp).map(|(a, b)| *a * *b).sum();
    for i in 0..p.len() {
        dl[i] = dl[i] + p[i] * (dp[i] - dot);
    }
}

fn clamp<T: Scalar>() -> T {
    T::of(LOG_CLAMP)
}

fn ln2<T: Scalar>() -> T {
    T::of(std::f64::consts::LN_2)
}

/// Shannon entropy in bits with `0 log 0 = 0`. Entries below the log clamp
/// use the clamp inside the logarithm; the second value counts them
/// (zero entries excluded).
pub fn entropy_bits<T: Scalar>(q: &[T]) -> (T, usize) {
    let c = clamp::<T>();
    let mut h = T::zero();
    let mut sat = 0;
    for &qi in q {
        if qi <= T::zero() {
            continue;
        }
        if qi < c {
            sat += 1;
            h = h - qi * c.ln();
        } else {
            h = h - qi * qi.ln();
        }
    }
    (h / ln2(), sat)
}

pub fn entropy_bits_backward<T: Scalar>(q: &[T], d_out: T, dq: &mut [T]) {
    let c = clamp::<T>();
    let l2 = ln2::<T>();
    for i in 0..q.len() {
        let g = if q[i] < c {
            -c.ln() / l2
        } else {
            -(q[i].ln() + T::one()) / l2
        };
        dq[i] = dq[i] + d_out * g;
    }
}

/// `sum_z p[z] * -log2 q[z]`, clamping `q` at the log clamp. The count is
/// the number of terms where `p > 0` but `q` fell below the clamp.
pub fn cross_entropy_bits<T: Scalar>(p: &[T], q: &[T]) -> (T, usize) {
    let c = clamp::<T>();
    let mut h = T::zero();
    let mut sat = 0;
    for (&pi, &qi) in p.iter().zip(q) {
        let arg = if qi < c {
            if pi > T::zero() {
                sat += 1;
            }
            c
        } else {
            qi
        };
        if pi != T::zero() {
            h = h - pi * arg.ln();
        }
    }
    (h / ln2(), sat)
}

pub fn cross_entropy_bits_backward<T: Scalar>(
    p: &[T],
    q: &[T],
    d_out: T,
    dp: &mut [T],
    dq: &mut [T],
) {
    let c = clamp::<T>();
    let l2 = ln2::<T>();
    for i in 0..p.len() {
        let arg = if q[i] < c { c } else { q[i] };
        dp[i] = dp[i] - d_out * arg.ln() / l2;
        if q[i] >= c {
            dq[i] = dq[i] - d_out * p[i] / (q[i] * l2);
        }
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
