//! Co-training of discrete symbol encoders.
//!
//! A confirmation model reads the future half `y` of a sliding window and a
//! predictor model reads the past half `x`; both emit a distribution over a
//! small alphabet of discrete symbols. Training maximizes
//! `H(z) - H+(z|x)`, a lower bound on the mutual information `I(x, y)`, where
//! `H(z)` is the entropy of the average confirmation distribution and
//! `H+(z|x)` is the cross-entropy of the predictor against the confirmation
//! model.
//!
//! Modules, bottom up: [`numerics`] (reverse-mode tape, GRU kernels, SGD),
//! [`corpus`] (data and the synthetic MI oracle), [`model`], [`objective`],
//! [`trainer`], [`evaluation`], and [`selfcheck`] (gradient verification
//! suite).

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
