//! Dynamic CT reconstruction with a learned causal prior.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod frames;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod stt;
pub mod train;
pub mod uar;
pub mod varsolve;

pub use error::{CoreError, Result};
