//! Convolutional motion predictor, losses, optimizer and the mean-teacher loop.

pub mod loss;
pub mod params;
pub mod predictor;
pub mod train;

pub use loss::{batch_loss, smooth_l1, student_loss, Example, LossValue, StudentLoss};
pub use params::{ema_update, Adam, AdamConfig, LayerSlot, ParamVector};
pub use predictor::{predict, PredictorConfig};
pub use train::{
    evaluate_params, pseudo_labels, train_ssl, train_teacher, EpochRecord, Phase, Sample, SslConfig,
    TrainConfig, TrainOutcome,
};
