//! PTM site prediction with crosstalk-aware prompting and enzyme-substrate
//! pair scoring.

pub mod blocks;
pub mod crosstalk;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod residues;

pub use error::{Error, Result};
pub use ptm_tensor as tensor;
