//! Optimization, the training loop and checkpoints.

pub mod checkpoint;
pub mod fit;
pub mod optim;

pub use fit::{batch_gradients, fit, instance_gradients, mean_loss, EpochLog, FitOutcome, Split, TrainConfig};
pub use optim::{clip_gradients, Adam};
