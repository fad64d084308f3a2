//! Core engine for bi-level, task-driven infrared/visible image fusion.
//!
//! The crate is organized around a small dense-tensor autodiff kernel and the
//! numeric machinery built on top of it:
//!
//! - [`tensor`]: `f64` tensors and a Wengert-tape reverse-mode differentiator
//!   covering the closed op set needed by the networks and losses.
//! - [`saliency`]: visual saliency maps and the saliency-weighted pseudo
//!   fusion target.
//! - [`net`]: the fusion network, the Wasserstein critic, and a small
//!   per-pixel classification head, all expressed as tape programs over
//!   named parameter sets.
//! - [`loss`]: critic loss with gradient penalty, fusion visual loss, and
//!   per-pixel cross-entropy.
//! - [`bilevel`]: hypergradient assembly — exact implicit-function gradients
//!   on quadratic fixtures and the first-order Gauss-Newton approximation.
//! - [`agg`]: dynamic gradient aggregation (random loss weighting plus the
//!   classical baselines) and the plain SGD update rule.
//! - [`metrics`]: mutual information, feature mutual information, and
//!   entropy for fused-image quality reporting.
//!
//! Everything here is deterministic given a seed: the RNG is a counter-based
//! stream cipher and all float math goes through [`libm`], so repeated runs
//! produce bit-identical values. The crate is `no_std` (with `alloc`); IO,
//! file formats, and the experiment driver live in the companion `bifuse`
//! crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
// Indexed loops over strided tensor buffers read better than iterator
// chains in the numeric kernels.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod agg;
pub mod bilevel;
pub mod error;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, VarId};
