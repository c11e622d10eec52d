mod binio;
pub mod cli;
pub mod codec;
pub mod config;
pub mod edit;
pub mod error;
pub mod flow;
pub mod imageio;
pub mod latent;
pub mod metrics;
pub mod net;
pub mod solvers;
pub mod synth;
pub mod tdm;

pub use error::{Error, Result};
pub use latent::{ConditionId, LatentGrid};
