//! Minimal f64 neural-network substrate: layers with explicit forward and
//! backward passes, losses, optimizers, and the learning-rate schedule.
//!
//! Everything runs on the CPU over `ndarray` tensors. Layers cache what
//! they need during `forward(.., train = true)` and consume the cache in
//! `backward`, so one forward pairs with at most one backward. All
//! initialization is seeded; identical seeds give identical parameters.

pub mod act;
pub mod conv;
pub mod init;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pool;
pub mod schedule;
pub mod upsample;

pub use act::{sigmoid, LeakyRelu, LeakyRelu2d};
pub use conv::Conv3d;
pub use linear::Linear;
pub use loss::{softmax, softmax_cross_entropy, ReconLoss};
pub use norm::BatchNorm3d;
pub use optim::{AdamW, Lars};
pub use param::{count_params, param_names, zero_grads, Block, Param};
pub use pool::GlobalAvgPool;
pub use schedule::WarmupCosine;
pub use upsample::Upsample2x;
