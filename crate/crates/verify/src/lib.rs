//! Independent oracles for the engine: finite differences against a naive
//! re-statement of the objective, Monte-Carlo KL, brute-force geometry, the
//! joint-training baseline, a reference Adam, and domain-level oracles.

pub mod adam;
pub mod baseline;
pub mod dd;
pub mod domain;
pub mod geometry;
pub mod gradcheck;
pub mod kl;
pub mod naive;
pub mod real;
