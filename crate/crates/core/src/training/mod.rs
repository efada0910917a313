//! Objective, two-phase training procedure, data and evaluation.

mod config;
mod data;
mod eval;
mod loss;
mod procedure;

pub use config::{DataSpec, LrSchedule, Normalization, Precision, TrainConfig, LAMBDA_GUIDANCE};
pub use data::{
    augment, augment_batch, augment_with, load_cifar10_bin, make_synthetic, make_synthetic_with,
    parse_cifar10_records, prepare_data, write_cifar10_bin, AugmentParams, CifarRecord, Dataset, Split, CIFAR10_COARSE,
    CIFAR_PIXELS, CIFAR_RECORD, DEFAULT_NOISE,
};
pub use eval::{evaluate, evaluate_with, mean_cross_entropy, predictions, summarize, top1_error, EvalReport};
pub use loss::{deepmoe_loss, LossTerms};
pub use procedure::{
    train_procedure1, train_procedure1_with, EpochMetrics, FrozenChecksums, TrainReport, METRICS_HEADER,
};
