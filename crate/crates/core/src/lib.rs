//! Streaming inference for an infinite hidden Markov model of binary
//! engagement events, with a variational Dirichlet-process population layer.

pub mod checkpoint;
pub mod conjugate;
pub mod engine;
pub mod error;
pub mod filter;
pub mod fsf;
pub mod hierarchy;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod simulate;
pub mod smoother;
pub mod special;
pub mod transition;
pub mod vb;

pub use error::{Error, ErrorClass, Result};
pub use nalgebra;
