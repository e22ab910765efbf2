pub mod augment;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod image;
pub mod loss;
pub mod metrics;
mod nn;
pub mod numerics;
pub mod pipeline;
pub mod prompt;
pub mod synth;
pub mod util;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/generators.md")]
    mod generators {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
