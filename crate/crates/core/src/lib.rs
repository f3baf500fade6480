pub mod ablation;
pub mod cli;
pub mod clip;
pub mod corpus;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evalstats;
pub mod finetune;
pub mod labelx;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod train;
pub mod volpre;
pub mod zeroshot;

pub use error::{Error, Result};
