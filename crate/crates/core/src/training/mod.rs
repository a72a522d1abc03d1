//! Phased adversarial training, learning-rate schedule, checkpoints and bundles.

mod bundle;
mod config;
mod schedule;
mod step;

use std::path::PathBuf;

use thiserror::Error;

pub use bundle::{ArrayEntry, BundleError, Manifest, ModelBundle, BUNDLE_FORMAT};
pub use config::{standard_phases, LrSchedule, PhaseConfig, TrainConfig, TrainedNet};
pub use schedule::{read_log, run_schedule, LogRecord, RunOptions, RunOutput};
pub use step::{
    compute_gradients, discriminator_pass, generate_on_tape, generator_terms, prepare_batch, train_step, PhaseBatch, PoolRegions,
    StepGradients, StepPlan,
};

use crate::arch::ArchError;
use crate::data::{DataError, Dataset};
use crate::feature_encoder::{build_style_catalog, harvest_features, Harvest, StyleCatalog};
use crate::error::ModelError;
use crate::losses::LossReport;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint was written by config {found}, current config is {expected}; pass --force to resume anyway")]
    ResumeMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step}: {report:?} (snapshot: {snapshot:?})")]
    NonFinite { step: u64, report: Box<LossReport>, snapshot: Option<PathBuf> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Harvest per-instance features of `dataset` with the bundle's encoder and
/// cluster them into `k` styles per class.
pub fn build_catalog(bundle: &ModelBundle, dataset: &Dataset, k: usize, seed: u64) -> Result<(StyleCatalog, Harvest), TrainError> {
    let models = bundle.models()?;
    let encoder = models.encoder.as_ref().ok_or_else(|| TrainError::Config("model has no encoder".into()))?;
    let harvest = harvest_features(encoder, &bundle.params, dataset, 4)?;
    let catalog = build_style_catalog(&harvest.features, models.spec.num_classes, k, seed);
    Ok((catalog, harvest))
}

impl From<ArchError> for TrainError {
    fn from(e: ArchError) -> Self {
        TrainError::Model(e.into())
    }
}
