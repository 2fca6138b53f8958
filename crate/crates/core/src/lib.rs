//! Symmetric simple exclusion in dynamic random conductances on the discrete torus.

pub mod environment;
pub mod exclusion;
pub mod error;
pub mod graphical;
pub mod hydro;
pub mod lattice;
pub mod rng;
pub mod stats;
pub mod tightness;
pub mod walks;

pub use error::{Error, Result};
