//! Two-stage image completion with bidirectional retention.
//!
//! Stage one quantizes a low-resolution image against a K-means palette,
//! then fills its masked pixels one at a time with a forward/backward
//! retention network whose forward tower keeps a fixed-size recurrent state.
//! Stage two upsamples the completed image with a small CNN guided by the
//! original.
//!
//! All arithmetic is `f64`. Trainable parameters and optimizer moments are
//! rounded to `f32` after every update so checkpoints store them exactly.

pub mod autodiff;
pub mod bench;
pub mod biretnet;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod image;
pub mod inferencer;
pub mod palette;
pub mod params;
pub mod retention;
pub mod rng;
pub mod sequencer;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod upsampler;

pub use bench::{BenchConfig, BenchRun};
pub use biretnet::{BiRetNet, ModelConfig};
pub use checkpoint::Checkpoint;
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use image::{ImageTensor, IndexGrid, MaskGrid};
pub use inferencer::{Completion, InferenceSession, SamplingPolicy};
pub use palette::Palette;
pub use retention::{Paradigm, RetentionState};
pub use sequencer::{MaskKind, MaskSpec, PixelSequence};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, Trainer};
pub use upsampler::{UpsamplerConfig, UpsamplerParams};
