//! Symbol-level precoding (SLP) toolkit.
//!
//! The crate contains two families of solvers for constructive-interference
//! precoding in the MIMO downlink:
//!
//! * exact oracles built on a Lawson–Hanson NNLS solver ([`slp`], [`robust`]),
//! * tensor-equivariant networks that predict the perturbation factors of the
//!   closed-form solutions ([`te`], [`slpn`], [`robust`]), trained with a small
//!   reverse-mode engine ([`autodiff`]).
//!
//! Data-parallel loops (per-symbol oracle solves, Monte-Carlo trials) go
//! through [`par`], which uses rayon when the `parallel` feature is enabled and
//! falls back to plain iteration otherwise.

pub mod autodiff;
pub mod channel;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod modulation;
pub mod nnls;
pub mod par;
pub mod robust;
pub mod slp;
pub mod slpn;
pub mod te;

pub use error::{Error, Result};
pub use num_complex::Complex64;
