//! Interpretable molecular property prediction from Group-SELFIES n-gram
//! embeddings, with a variational bottleneck, sparse functional principal
//! components and residual calibration.

pub mod calibrate;
pub mod codec;
pub mod efpca;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod explain;
pub mod gselfies;
pub mod linear;
pub mod pipeline;
pub mod spline;
pub mod synth;
pub mod vib;

pub use error::{MolexError, Result};
pub use exec::Exec;
pub use pipeline::{Pipeline, PipelineBundle, PipelineConfig};
