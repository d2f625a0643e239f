//! Model architectures and checkpointing.

pub mod cae;
pub mod checkpoint;
pub mod classifier;
pub mod resnet;
pub mod spec;
pub mod unet;

pub use cae::Cae;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use classifier::Classifier;
pub use resnet::ResEncoder3d;
pub use spec::{spec_hash, spec_json, CaeSpec, ClassifierSpec, EncoderSpec, HeadSpec, UnetSpec};
pub use unet::UnetSsl;
