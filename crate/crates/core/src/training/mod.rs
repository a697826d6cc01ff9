//! Teacher-student mutual learning with adversarial feature alignment.

pub mod config;
pub mod engine;
pub mod pseudo;

pub use config::{Recipe, TrainConfig, FULL_SCALE_EMA_ALPHA};
pub use engine::{
    adapt, duplicate, headline_model, model_from_archive, pretrain, supervised_archive, supervised_from_archive, supervised_train, total_loss, train_iteration, IterationMetrics, NoObserver, Phase, RunObserver,
    SupervisedState, TrainData, TrainerState,
};
pub use pseudo::{filter_pseudo_labels, generate_pseudo_labels, PseudoLabelSet};
