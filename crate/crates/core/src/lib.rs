pub mod diffmath;
pub mod error;
pub mod isa;

pub use error::{Error, Result};
pub mod autoencoder;
pub mod corpus;
pub mod ensemble;
pub mod explain;
pub mod gnn;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod synth;
