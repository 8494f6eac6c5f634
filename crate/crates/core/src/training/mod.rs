//! Staged optimization: masked-LM pretraining, acoustic-attention
//! pretraining, text-only warm-up and full finetuning.

pub mod checkpoint;
pub mod optim;
pub mod plan;
pub mod stages;

pub use checkpoint::{load_checkpoint, load_checkpoint_into, read_manifest, save_checkpoint, CheckpointManifest};
pub use optim::{AdamW, AdamWConfig};
pub use plan::{PretrainTarget, Stage, StageConfig, TrainPlan, Variant};
pub use stages::{accuracy_of, run_stage, MetricRecord, StageData, TrainState};
