//! Differentiable linear-dynamics building blocks for system identification.
//!
//! Rational transfer functions are first-class nodes of a reverse-mode
//! automatic-differentiation graph: the forward pass is recurrent IIR
//! filtering, the backward passes are closed-form auxiliary filterings, so
//! networks of dynamic and static blocks train end to end from input/output
//! records.
//!
//! The crate is organized as
//! - [`signal`]: sequence kernels (flip, convolution, cross-correlation,
//!   recurrent filtering, impulse response),
//! - [`lti`]: the differentiable dynamical block, SISO/MIMO/FIR,
//! - [`graph`]: the computation-graph engine and node zoo,
//! - [`stability`]: second-order stability region and reparametrizations,
//! - [`train`]: Adam, initialization, metrics and the training loop,
//! - [`gradcheck`]: finite-difference gradient verification,
//! - [`data`]: synthetic excitations, reference plants and CSV datasets.
//!
//! Channel-level loops run on the rayon pool when the `parallel` feature
//! (default) is active; disable it for strictly sequential execution. The
//! numerics are identical either way.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lti;
pub mod par;
pub mod signal;
pub mod stability;
pub mod train;

pub use error::{Error, Result};
pub use par::ExecMode;
pub use signal::{TimeSeries, TransferFunction};
