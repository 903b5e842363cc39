//! Automatic leak detection in optical gas imaging video.
//!
//! The crate covers the whole pipeline: a lossless grayscale container and
//! dataset manifest ([`gvid`]), a synthetic plume generator ([`synth`]),
//! background subtraction ([`bg`]), a small CNN engine ([`nn`]) with the
//! GasNet architectures on top ([`gasnet`]), a dense optical-flow baseline
//! ([`flow`]) and the evaluation harness ([`harness`]).

pub mod bg;
pub mod corpus;
pub mod error;
pub mod flow;
pub mod gasnet;
pub mod gvid;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod synth;

pub use corpus::{Corpus, Video};
pub use error::{Error, Result};
pub use gvid::{DatasetManifest, Frame, LeakClass, VideoMeta, VideoSegment};
