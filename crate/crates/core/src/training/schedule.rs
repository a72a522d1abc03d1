use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::bundle::{Manifest, ModelBundle, BUNDLE_FORMAT};
use super::config::{LrSchedule, TrainConfig, TrainedNet};
use super::step::{prepare_batch, train_step, StepPlan};
use super::TrainError;
use crate::data::{iterate_batches, Dataset};
use crate::generator::{GeneratorMode, SubNetwork};
use crate::losses::{FeatureNet, LossReport};
use crate::model::Models;
use crate::nn::{Adam, ParamStore};

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Checkpoints, log and final bundle go here; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Resume even when the checkpoint came from a different config.
    pub force: bool,
    pub feature_net: Option<&'a dyn FeatureNet<f32>>,
}

pub struct RunOutput {
    pub bundle: ModelBundle,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Shuffle seed of one epoch.
fn epoch_seed(seed: u64, phase: usize, epoch: usize) -> u64 {
    seed ^ ((phase as u64) << 48) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Progress {
    phase: usize,
    epoch: usize,
    step: u64,
}

#[allow(clippy::too_many_arguments)]
fn snapshot(
    config: &TrainConfig,
    models: &Models,
    dataset: &Dataset,
    resolution: (usize, usize),
    params: &ParamStore<f32>,
    adam: &Adam<f32>,
    at: &Progress,
) -> ModelBundle {
    let manifest = Manifest {
        format: BUNDLE_FORMAT,
        spec: models.spec.clone(),
        class_names: dataset.meta.class_names.clone(),
        resolution,
        config_hash: Some(config.hash()),
        phase: at.phase,
        epoch: at.epoch,
        step: at.step,
        adam: config.adam,
        metrics: Default::default(),
        arrays: Vec::new(),
    };
    ModelBundle::new(manifest, params.clone(), adam.export_state())
}

/// Train through every phase of `config`.
pub fn run_schedule(config: &TrainConfig, dataset: &Dataset, opts: &RunOptions<'_>) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let first = dataset.samples.first().ok_or_else(|| TrainError::Config("dataset is empty".into()))?;
    let resolution = first.label.dims();
    for p in &config.phases {
        let ok = (0..8).any(|j| resolution.0 >> j == p.height && resolution.1 >> j == p.width && resolution.0 % (1 << j) == 0);
        if !ok {
            return Err(TrainError::Config(format!(
                "phase `{}` resolution {}x{} is not the data resolution {}x{} halved",
                p.name, p.height, p.width, resolution.0, resolution.1
            )));
        }
    }
    let num_classes = first.label.num_classes();
    let spec = config.model_spec(num_classes)?;
    let mut models = Models::build(&spec)?;

    let (mut params, mut adam, mut at) = match &opts.resume {
        None => (models.init_params::<f32>(config.seed), Adam::new(config.adam), Progress { phase: 0, epoch: 0, step: 0 }),
        Some(path) => {
            let b = ModelBundle::load(path)?;
            let found = b.manifest.config_hash.clone().unwrap_or_default();
            if found != config.hash() && !opts.force {
                return Err(TrainError::ResumeMismatch { expected: config.hash(), found });
            }
            models.check_params(&b.params)?;
            let at = Progress { phase: b.manifest.phase, epoch: b.manifest.epoch, step: b.manifest.step };
            (b.params, Adam::import_state(config.adam, &b.optimizer), at)
        }
    };

    let log_path = opts.out_dir.as_ref().map(|d| d.join("train_log.jsonl"));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let save_checkpoint = |bundle: &ModelBundle, name: String, list: &mut Vec<PathBuf>| -> Result<(), TrainError> {
        if let Some(dir) = &opts.out_dir {
            let path = dir.join("checkpoints").join(name);
            bundle.save(&path)?;
            list.push(path);
        }
        Ok(())
    };

    let started = Instant::now();
    for (pi, phase) in config.phases.iter().enumerate().skip(at.phase) {
        for net in [TrainedNet::G1, TrainedNet::G2] {
            let sub = SubNetwork::from(net);
            if phase.train.contains(&net) {
                models.generator.unfreeze(sub);
            } else {
                models.generator.freeze(sub);
            }
        }
        let plan = StepPlan { generator: phase.generator, scales: phase.discriminators.iter().map(|k| k - 1).collect() };
        let composed = phase.generator == GeneratorMode::Composed;
        let g_sched = LrSchedule::halves(config.lr, phase.epochs);
        let d_sched = LrSchedule::halves(config.d_lr(), phase.epochs);
        let start_epoch = if pi == at.phase { at.epoch } else { 0 };
        log::info!("phase {} `{}`: epochs {}..{}", pi, phase.name, start_epoch, phase.epochs);
        for epoch in start_epoch..phase.epochs {
            let lr = (g_sched.at(epoch), d_sched.at(epoch));
            let seed = config.shuffle.then(|| epoch_seed(config.seed, pi, epoch));
            for idx in iterate_batches(dataset.len(), config.batch_size, seed) {
                let samples: Vec<_> = idx.iter().map(|&i| &dataset.samples[i]).collect();
                let batch = prepare_batch::<f32>(&samples, phase.height, phase.width, composed, config.use_instance_maps, config.use_encoder)?;
                let feature_net = if config.use_perceptual { opts.feature_net } else { None };
                let report = train_step(&models, &mut params, &mut adam, &plan, &batch, &config.losses, lr, feature_net);
                if !report.is_finite() {
                    let mut path = None;
                    if let Some(dir) = &opts.out_dir {
                        let p = dir.join("nonfinite.lsb");
                        snapshot(config, &models, dataset, resolution, &params, &adam, &at).save(&p)?;
                        path = Some(p);
                    }
                    return Err(TrainError::NonFinite { step: at.step, report: Box::new(report), snapshot: path });
                }
                let record = LogRecord { step: at.step, epoch, phase: phase.name.clone(), lr: lr.0, losses: report };
                if let Some(p) = &log_path {
                    let mut f = OpenOptions::new().create(true).append(true).open(p)?;
                    serde_json::to_writer(&mut f, &record)?;
                    f.write_all(b"\n")?;
                }
                log.push(record);
                at.step += 1;
            }
            at.epoch = epoch + 1;
            log::info!(
                "phase {} epoch {}/{} step {} g_total {:.4} d_total {:.4} ({:.0}s)",
                pi,
                epoch + 1,
                phase.epochs,
                at.step,
                log.last().map_or(f64::NAN, |r| r.losses.g_total),
                log.last().map_or(f64::NAN, |r| r.losses.d_total),
                started.elapsed().as_secs_f64()
            );
            let periodic = config.checkpoint_every > 0 && at.epoch % config.checkpoint_every == 0 && at.epoch < phase.epochs;
            if periodic {
                let b = snapshot(config, &models, dataset, resolution, &params, &adam, &at);
                save_checkpoint(&b, format!("phase{pi}-{}-epoch{:03}.lsb", phase.name, at.epoch), &mut checkpoints)?;
            }
        }
        at.phase = pi + 1;
        at.epoch = 0;
        let b = snapshot(config, &models, dataset, resolution, &params, &adam, &at);
        save_checkpoint(&b, format!("phase{pi}-{}-end.lsb", phase.name), &mut checkpoints)?;
    }

    let bundle = snapshot(config, &models, dataset, resolution, &params, &adam, &at).inference_only();
    if let Some(dir) = &opts.out_dir {
        bundle.save(&dir.join("model.lsb"))?;
    }
    Ok(RunOutput { bundle, log, checkpoints })
}

/// Read a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(TrainError::from)).collect()
}
