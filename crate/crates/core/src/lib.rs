//! Watermarked token generation, randomization tests for watermark detection,
//! and change-point segmentation of partially watermarked texts.

pub mod attacks;
pub mod dependence;
pub mod error;
pub mod experiment;
pub mod rtest;
pub mod seed;
pub mod segmentation;
pub mod toy_lm;
pub mod watermark;

pub use dependence::{Measure, MeasureKind};
pub use error::{Error, Result};
pub use rtest::{PValueSequence, TestConfig};
pub use toy_lm::{NextTokenDistribution, Provenance, TokenId, TokenModel, TokenSequence};
pub use watermark::{EmsKey, ItsKey, KeySequence, Keys, Scheme};
pub use segmentation::{Interval, IntervalCandidate, Label, SegmentationConfig, SegmentationResult};
pub use attacks::{GroundTruth, SettingInstance};
pub use experiment::{rand_index, ExperimentConfig, ExperimentReport, SeedRecord};
