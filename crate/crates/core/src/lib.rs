//! Mouthing recognition with transfer from lipreading corpora: a small
//! autodiff engine, Conv3D + Bi-GRU models (single-task, domain-adversarial
//! and multi-task), clip preprocessing, augmentation, training and
//! evaluation.

pub mod augment;
pub mod datapipe;
pub mod eval;
pub mod models;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use augment::{AugError, AugOp, AugPolicy};
pub use datapipe::{Clip, CropBox, DataError, DatasetTag, Frames, Manifest, ManifestEntry, Split};
pub use eval::{Accuracy, EvalError, ResultsMatrix, RowKey};
pub use models::{BaselineSpec, Mode, ModelAssembly, ModelDescriptor, ModelError, ModelKind};
pub use tensor::{Element, Rng, RngState, Tensor, TensorError};
pub use trainer::{Checkpoint, CheckpointError, EpochRecord, RunKind, Sample, TaskData, TrainConfig, TrainError, TrainOutcome};
