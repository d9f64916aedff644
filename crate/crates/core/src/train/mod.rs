//! Loss, optimizer, evaluation metrics and the training loop.

pub mod adam;
pub mod bleu;
pub mod loss;
pub mod trainer;

pub use adam::{adam_step, AdamConfig};
pub use bleu::bleu;
pub use loss::nll_loss;
pub use trainer::{detokenize, evaluate, mean_sd, score, BestState, Dataset, Evaluation, MetricsRow, Progress, TrainConfig, TrainOutcome, Trainer};
