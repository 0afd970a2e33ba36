//! Event-driven classification of power-system disturbances with spiking
//! neural networks.
//!
//! The crate covers the whole chain from measurement windows to energy
//! estimates:
//!
//! - [`synthdata`]: modal (damped-exponential) disturbance generator and window
//!   preprocessing.
//! - [`sigsel`]: pivoted-QR signal selection and least-squares evaluation.
//! - [`encode`]: Poisson rate coding of windows into spike trains.
//! - [`snn`]: unsupervised LIF network with STDP, lateral inhibition and
//!   homeostasis.
//! - [`annconv`]: ReLU networks (dense and 1-D conv), weight normalization and
//!   conversion to integrate-and-fire networks.
//! - [`energy`]: MAC/AC operation counting and energy/power projections.
//! - [`pipeline`]: cross-validation protocol and the on-disk artifact pipeline.

pub mod annconv;
pub mod encode;
pub mod energy;
mod error;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod sigsel;
pub mod snn;
pub mod synthdata;

pub use error::{Error, Result};
