//! Configuration, training, checkpoints, evaluation, prediction files and
//! ensembling.

mod checkpoint;
mod config;
mod data;
pub mod gradcheck;
mod predictions;
pub mod synthetic;
mod train;

pub use checkpoint::{Checkpoint, TensorEntry, TrainingMetadata, FORMAT_VERSION, MAGIC};
pub use config::{EncoderSettings, Paths, Profile, TrainConfig};
pub use data::{batched_logits, prepare, score, Prepared, TaskMetrics};
pub use predictions::{ensemble_files, predict_file, PredictionFile, PREDICTION_HEADER};
pub use train::{
    evaluate_checkpoint, evaluate_examples, train, write_run, EpochRecord, RunReport, TrainData, CHECKPOINT_FILE,
    REPORT_JSON, REPORT_TEXT,
};
