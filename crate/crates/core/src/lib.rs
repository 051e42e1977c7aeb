//! Episodic few-shot learning with prototypical networks and variational
//! metric scaling.

pub mod amortized;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod episodic;
pub mod error;
pub mod linear;
pub mod metric;
pub mod objective;
pub mod optim;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
