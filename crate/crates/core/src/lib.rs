//! Hyperbolic knowledge-graph guided model editing.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod edit;
pub mod error;
pub mod gnn;
pub mod hyperbolic;
pub mod io;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod request;

pub use error::{Error, Result};
