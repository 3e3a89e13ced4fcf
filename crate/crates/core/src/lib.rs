//! Region-based active learning with uncertainty, feature diversity and
//! spatial diversity combined in a single Max-Min objective.

pub mod diversity;
pub mod error;
pub mod features;
pub mod io;
pub mod region;
pub mod rng;
pub mod scoring;
pub mod selection;
pub mod sim;

pub use error::{Error, FormatError, Result};
