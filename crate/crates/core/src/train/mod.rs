//! Optimization loop, metrics, checkpoints and the fusion ablation.

mod ablation;
mod adam;
mod checkpoint;
mod metrics;
mod run;

pub use ablation::{ablate_fusion, ablation_csv, AblationRow, ABLATION_FILE, ABLATION_HEADER};
pub use adam::{clip_global_norm, AdamState, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{
    atomic_write, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC,
};
pub use metrics::{accuracy_f1, accuracy_macro_f1, metrics_csv, per_class_f1, MetricsRecord, METRICS_HEADER};
pub use run::{
    batches_csv, evaluate, evaluate_checkpoint, train, train_observed, BatchLog, EarlyStopState, SplitData, StepInfo,
    TrainOutcome, BATCHES_FILE, BATCHES_HEADER, BEST_CHECKPOINT, CONFIG_FILE, FINAL_CHECKPOINT, METRICS_FILE,
    VOCAB_FILE,
};
