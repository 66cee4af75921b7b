//! PII leak detection over tabularised mobile network flows.

pub mod autoencoder;
pub mod classifier;
pub mod embed;
pub mod error;
pub mod flow;
pub mod ft;
pub mod ifcs;
pub mod pca;
pub mod pipeline;
pub mod prep;
pub mod rng;
pub mod synth;
pub mod table;
pub mod triplet;

pub use error::{Error, Result};
pub use flow::FlowRecord;
pub use table::TabularDataset;
