//! Marker-based visual prompting for driving-scene question answering.
//!
//! A synthetic scene generator stands in for camera images and a detection
//! oracle. Detections become indexed visual markers; a frozen patch encoder
//! plus a zero-initialized control branch fuse the marker image into scene
//! features; scene- and instance-level prompt tokens feed a small decoder
//! that answers spatial questions with marker tokens.

pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod marker;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod prompts;
pub mod scene;
pub mod tensor;
pub mod trainer;
pub mod vision;

pub use decoder::{DecoderConfig, GenerationResult, Vocab};
pub use error::{Error, Result};
pub use marker::{MarkerEntry, MarkerImage, MarkerIndexMap, MarkerSource};
pub use metrics::{GenerationRecord, MetricReport};
pub use params::{Ctx, Param, ParamStore};
pub use prompts::PromptBundle;
pub use scene::{Detection, Image, Mask, Point, QaKind, QaRecord, Scene, SceneConfig};
pub use tensor::{AttnMask, Scalar, Tape, Var};
pub use trainer::{LossRow, Model, TrainConfig, TrainState, Variant};
pub use vision::{EncoderConfig, FeatureMap};
