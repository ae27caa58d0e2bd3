//! Losses, point sampling, optimisation, the reference gallery and the
//! training loop.

pub mod ablation;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod index;
pub mod losses;
pub mod optim;
pub mod sampling;
pub mod trainer;

pub use ablation::{run_matrix, train_and_test, AblationPlan, RunResult};
pub use bank::ReferenceBank;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use index::GalleryIndex;
pub use config::{ReidConfig, RunConfig, TrainConfig};
pub use losses::LossWeights;
pub use optim::{AdamW, LrMultipliers, LrSchedule};
pub use trainer::{
    build_ontology, calibrate_presence, calibrate_threshold, evaluate, init_model, item_loss, train, train_reid, EpochMetrics,
    ItemLoss, TrainOutcome,
};
