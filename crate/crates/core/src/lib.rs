//! Numerical laboratory for gradient-flow training of one-hidden-layer ReLU
//! networks on finite datasets.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: datasets, network states, forward pass, loss and the
//!   p-accelerated gradient-flow velocity field.
//! - [`data`] and [`init`]: seeded dataset generators and network initializers.
//! - [`flow`]: Euler / RK4 integration with trajectory recording and audits.
//! - [`plmetrics`]: local and average Polyak–Łojasiewicz curvature and the
//!   bounds that sandwich it.
//! - [`oracle`]: closed-form solutions for group-initialized orthonormal data.
//! - [`experiment`]: sweeps, fits and reporting used by the `plflow` CLI.

pub mod data;
pub mod experiment;
pub mod flow;
pub mod init;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod plmetrics;
pub mod seed;

mod error;

pub use error::{Error, Result};
pub use model::{ActivationPattern, DataSet, NetworkState, Velocity};
