//! Second-order weight pruning for desk-scale networks.
//!
//! The crate estimates Kronecker-factored curvature of a model's loss from
//! captured activation/gradient tapes, turns it into closed-form removal
//! costs and compensating weight updates for unstructured, 2:4
//! semi-structured and structured (row/column) pruning, and drives the
//! whole thing through a multi-shot schedule with a global cost threshold
//! so sparsity lands where it hurts least. A dense brute-force oracle
//! validates every fast path.

pub mod costs;
pub mod curvature;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod selection;
pub mod surgeon;
pub mod updates;
pub mod verify;

pub use error::{CoreError, Result};
