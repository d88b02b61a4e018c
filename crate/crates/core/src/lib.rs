//! Learn a joint embedding of images and spoken captions, ground spoken
//! segments in image crops, and cluster the groundings into a lexicon of
//! linked acoustic and visual units.

pub mod cluster;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod net;
pub mod pipeline;
pub mod ratio;
pub mod span;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wav;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frontend.md")]
    mod frontend {}
    #[doc = include_str!("../../../book/src/embedding.md")]
    mod embedding {}
    #[doc = include_str!("../../../book/src/grounding.md")]
    mod grounding {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
