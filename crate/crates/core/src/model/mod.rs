//! The conditional token model: embeddings, visual projection, a causal
//! transformer with one head per residual level, and its training loop.

pub mod checkpoint;
pub mod embed;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod train;
pub mod transformer;

pub use checkpoint::{params_hash, read_checkpoint, write_checkpoint};
pub use embed::{assemble, embed_audio, project_visual, SequenceInput, VisualSource};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{loss, LossValue};
pub use optim::{AdamW, OptState};
pub use params::{parameter_count, Conditioning, Family, Layout, ModelConfig, Params};
pub use train::{evaluate_loss, train_step, StepStats, TrainConfig, TrainExample, Trainer};
pub use transformer::{forward, forward_train, Decoder, Logits};
