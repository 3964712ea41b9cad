//! Photon-counting statistics of emitter networks from zero-photon generators.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod decomposition;
pub mod dynamics;
pub mod error;
pub mod liouville;
pub mod oracle;
pub mod zpg;

pub use error::{Result, ZpgError};
