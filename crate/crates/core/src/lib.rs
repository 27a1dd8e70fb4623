//! Renormalization-group parameter flows for two-dimensional Ising systems.
//!
//! Conditional expectations of Hamiltonian derivatives are projected onto a
//! truncated, translation-invariant basis; the inner products are estimated by
//! Metropolis sampling of decimated configurations, and an exact-enumeration
//! oracle provides ground truth on small lattices.

pub mod analysis;
pub mod basis;
pub mod error;
pub mod flow;
pub mod lattice;
pub mod oracle;
pub mod projection;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};
