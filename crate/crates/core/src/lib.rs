//! Deep Boltzmann machines for classification.
//!
//! The crate provides two ways of training a two-hidden-layer DBM with a
//! one-of-k label unit:
//!
//! - joint training with the mean-field inpainting criterion ([`inpaint`]),
//!   minimised with nonlinear conjugate gradient ([`cg`]);
//! - the classical pipeline of layerwise RBM pretraining, assembly and
//!   variational PCD training ([`baseline`]).
//!
//! Both feed the same discriminative head ([`classifier`]). Every
//! approximate component can be checked against brute-force enumeration on
//! tiny models ([`oracle`]).
//!
//! All arithmetic is `f64`. Matrices are `ndarray` arrays in the orientation
//! used by the energy: `W1` is `[D x N1]`, `W2` is `[N1 x N2]`, `W3` is
//! `[N2 x k]`.

pub mod baseline;
pub mod cg;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod harness;
pub mod inpaint;
pub mod meanfield;
pub mod model;
pub mod oracle;

mod math;

pub use error::{DbmError, Result};
pub use meanfield::{ClampSpec, LabelClamp, MeanFieldState};
pub use model::{DbmParams, FullState, InitScheme, LayerId, ModelSpec, ParamGradient};
