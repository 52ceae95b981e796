pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod critic;
pub mod dataset;
pub mod curator;
pub mod degrade;
pub mod error;
pub mod evalkit;
pub mod layers;
pub mod lookup;
pub mod optim;
pub mod params;
pub mod stcodec;
pub mod stquant;
pub mod synth;
pub mod training;
pub mod video;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/latents.md")]
    mod latents {}
    #[doc = include_str!("../../../book/src/codebooks.md")]
    mod codebooks {}
    #[doc = include_str!("../../../book/src/regularizer.md")]
    mod regularizer {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/degradation.md")]
    mod degradation {}
    #[doc = include_str!("../../../book/src/curation.md")]
    mod curation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
