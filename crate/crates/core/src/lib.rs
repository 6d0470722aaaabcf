//! Tooling for a three-scale YOLO-style detector: VOC datasets and splits,
//! anchor clustering, mixup and friends, learning-rate schedules, head
//! decoding with NMS, and VOC mAP evaluation.
//!
//! The guide in `book/` walks through each module; its listings run as
//! doctests of this crate.

pub mod anchors;
pub mod augment;
pub mod decode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod rng;
pub mod trainmath;
pub mod voc;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/anchors.md")]
    mod anchors {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
