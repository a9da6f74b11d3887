//! Toolkit for auditing rationale-supervised tweet classifiers.
//!
//! The crate covers the full loop: corpus handling and synthesis
//! ([`corpus`]), a small reverse-mode autodiff engine ([`numerics`]),
//! CNN and attention-LSTM classifiers ([`models`]), leave-one-out
//! influence and rationale-rank diagnostics ([`interpret`]), n-gram and
//! LSTM language models for fluency scoring ([`langmodel`]),
//! insertion-attack construction ([`adversary`]), evaluation metrics
//! ([`metrics`]), and the cross-validated experiment driver
//! ([`experiment`]).
//!
//! Everything is deterministic given the configured seeds: random
//! streams come from ChaCha8 generators derived with [`rng::derive_seed`],
//! collections with output-visible order are sorted, and floats in
//! rendered reports use fixed six-decimal formatting.

pub mod adversary;
pub mod corpus;
mod error;
pub mod experiment;
pub mod interpret;
pub mod langmodel;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
