//! Noisy non-adaptive group testing.
//!
//! The crate covers the whole experiment pipeline:
//!
//! - [`model`]: items, tests, the Boolean OR measurement and the binary
//!   symmetric noise channel.
//! - [`design`]: Bernoulli measurement matrices and support sampling.
//! - [`bp`]: message state, the sum-product update kernels and flooding BP.
//! - [`schedule`]: sequential schedules, random (RSBP) and node-wise residual
//!   (NW-RBP).
//! - [`select`]: turning posterior LLRs into a declared defective set.
//! - [`oracle`]: exhaustive maximum-likelihood / MAP decoders and exact
//!   posterior marginals by enumeration.
//! - [`harness`]: the seeded, thread-count independent Monte Carlo runner.
//! - [`cli`]: the `gt` command-line front end.

pub mod bp;
pub mod cli;
pub mod design;
pub mod error;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod select;

pub use error::{Error, Result};
