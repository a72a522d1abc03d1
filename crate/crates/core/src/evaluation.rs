//! Segmentation-based evaluation: a small fixed segmenter trained on real
//! images, confusion-matrix scores, scoring of synthesized images against the
//! label maps they came from, and side-by-side comparison of model variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{parse_arch, Activation, ArchError, LayerKind, LayerSpec, Norm, Padding, Stride};
use crate::autograd::{Tape, Var};
use crate::data::{iterate_batches, stack, DataError, Dataset, LabelMap, StyleVector};
use crate::error::ModelError;
use crate::feature_encoder::{sample_styles, StyleCatalog, StyleError};
use crate::losses::FeatureNet;
use crate::nn::{Adam, AdamConfig, Bindings, Network, ParamStore};
use crate::scalar::Scalar;
use crate::training::ModelBundle;

pub const ORACLE_PREFIX: &str = "oracle";
/// Body of the segmenter; a linear 1x1 head to `C` planes follows it.
pub const ORACLE_ARCH: &str = "c5s1-16,d32,R32,R32,u16";
const ORACLE_FORMAT: u32 = 1;
/// Body layers whose outputs serve as perceptual features.
const FEATURE_LAYERS: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predicted map is {pred:?} but the reference is {truth:?}")]
    Dims { pred: (usize, usize), truth: (usize, usize) },
    #[error("nothing to score")]
    Empty,
    #[error("invalid oracle file: {0}")]
    Format(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Style(#[from] StyleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Pixel counts indexed by (true class, predicted class).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel pair of two equally sized grids.
    pub fn add(&mut self, pred: &Array2<u8>, truth: &Array2<u8>) -> Result<(), EvalError> {
        if pred.dim() != truth.dim() {
            return Err(EvalError::Dims { pred: pred.dim(), truth: truth.dim() });
        }
        let c = self.num_classes;
        for grid in [pred, truth] {
            if let Some(((y, x), &v)) = grid.indexed_iter().find(|(_, &v)| v as usize >= c) {
                return Err(DataError::InvalidLabel { value: v as usize, num_classes: c, y, x }.into());
            }
        }
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "confusion matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Accuracy and IoU; classes absent from both prediction and truth are
    /// left out of the mean.
    pub fn scores(&self) -> Result<SegScores, EvalError> {
        let total = self.total();
        if total == 0 {
            return Err(EvalError::Empty);
        }
        let c = self.num_classes;
        let correct: u64 = (0..c).map(|k| self.get(k, k)).sum();
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let union = row + col - self.get(k, k);
                (union > 0).then(|| self.get(k, k) as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean_iou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(SegScores { pixel_accuracy: correct as f64 / total as f64, mean_iou, per_class_iou })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    /// `None` for classes in neither map.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Agreement of a predicted label map with the reference.
pub fn seg_scores(pred: &LabelMap, truth: &LabelMap) -> Result<SegScores, EvalError> {
    let mut cm = ConfusionMatrix::new(pred.num_classes().max(truth.num_classes()));
    cm.add(pred.grid(), truth.grid())?;
    cm.scores()
}

/// Oracle training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight each class by the inverse square root of its pixel frequency.
    pub balance_classes: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { seed: 0, epochs: 4, batch_size: 4, lr: 2e-3, balance_classes: true }
    }
}

/// Per-class loss weights from the label frequencies of `dataset`.
pub fn class_weights(dataset: &Dataset, num_classes: usize, balance: bool) -> Vec<f32> {
    if !balance {
        return vec![1.0; num_classes];
    }
    let mut counts = vec![0u64; num_classes];
    for s in &dataset.samples {
        for &v in s.label.grid() {
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&n| if n == 0 { 0.0 } else { (total as f64 / n as f64).sqrt() as f32 }).collect()
}

/// Where an oracle came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleProvenance {
    pub config: OracleConfig,
    pub train_samples: usize,
    pub steps: u64,
    pub final_loss: f64,
}

/// Small fully convolutional segmenter with fixed weights after training.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSegmenter {
    pub net: Network,
    pub num_classes: usize,
    pub params: ParamStore<f32>,
    pub provenance: Option<OracleProvenance>,
}

#[derive(Serialize, Deserialize)]
struct OracleFile {
    format: u32,
    num_classes: usize,
    arch: String,
    provenance: Option<OracleProvenance>,
    params: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn oracle_network(num_classes: usize) -> Result<Network, ArchError> {
    let mut graph = parse_arch(ORACLE_ARCH)?;
    graph.layers.push(LayerSpec {
        kind: LayerKind::FinalConv,
        filters: num_classes,
        kernel: 1,
        stride: Stride::One,
        norm: Norm::None,
        activation: Activation::None,
        padding: Padding::Reflect,
    });
    Network::new(ORACLE_PREFIX, graph, 3)
}

fn labels_of(batch: &[&Array2<u8>]) -> Arc<Vec<u8>> {
    Arc::new(batch.iter().flat_map(|g| g.iter().copied()).collect())
}

impl OracleSegmenter {
    /// Untrained segmenter with seeded initial weights.
    pub fn new(num_classes: usize, seed: u64) -> Result<Self, EvalError> {
        let net = oracle_network(num_classes)?;
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { net, num_classes, params, provenance: None })
    }

    /// Per-pixel class logits, `N x C x H x W`.
    pub fn logits(&self, images: &Array4<f32>) -> Result<Array4<f32>, EvalError> {
        let (_, p, h, w) = images.dim();
        if p != 3 {
            return Err(ModelError::PlaneMismatch { what: "oracle image", expected: 3, found: p }.into());
        }
        self.net.infer_shapes(h, w)?;
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        b.bind(&mut tape, &self.params, &format!("{ORACLE_PREFIX}/"), false);
        let x = tape.constant4(images.clone());
        let out = self.net.forward(&mut tape, &b, x, None).output();
        Ok(tape.value4(out).to_owned())
    }

    /// Arg-max label map of each image.
    pub fn segment(&self, images: &Array4<f32>) -> Result<Vec<LabelMap>, EvalError> {
        let logits = self.logits(images)?;
        let mut out = Vec::with_capacity(logits.dim().0);
        for l in logits.outer_iter() {
            let (_, h, w) = l.dim();
            let grid = Array2::from_shape_fn((h, w), |(y, x)| {
                let mut best = 0;
                for k in 1..self.num_classes {
                    if l[[k, y, x]] > l[[best, y, x]] {
                        best = k;
                    }
                }
                best as u8
            });
            out.push(LabelMap::new(grid, self.num_classes)?);
        }
        Ok(out)
    }

    pub fn segment_image(&self, image: &Array3<f32>) -> Result<LabelMap, EvalError> {
        Ok(self.segment(&image.clone().insert_axis(Axis(0)))?.remove(0))
    }

    /// Scores of the oracle on the real images of `dataset`, pooled over all pixels.
    pub fn score_real(&self, dataset: &Dataset) -> Result<SegScores, EvalError> {
        let mut cm = ConfusionMatrix::new(self.num_classes);
        for s in &dataset.samples {
            cm.add(self.segment_image(&s.image)?.grid(), s.label.grid())?;
        }
        cm.scores()
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let params = self.params.iter().map(|(n, a)| (n.to_string(), (a.shape().to_vec(), a.iter().copied().collect()))).collect();
        let file = OracleFile {
            format: ORACLE_FORMAT,
            num_classes: self.num_classes,
            arch: ORACLE_ARCH.into(),
            provenance: self.provenance.clone(),
            params,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let file: OracleFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.format != ORACLE_FORMAT || file.arch != ORACLE_ARCH {
            return Err(EvalError::Format(format!("format {} with body `{}`", file.format, file.arch)));
        }
        let net = oracle_network(file.num_classes)?;
        let mut params = ParamStore::new();
        for (name, (shape, values)) in file.params {
            let a = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| EvalError::Format(format!("{name}: {e}")))?;
            params.insert(name, a);
        }
        net.check_params(&params)?;
        Ok(Self { net, num_classes: file.num_classes, params, provenance: file.provenance })
    }
}

impl<T: Scalar> FeatureNet<T> for OracleSegmenter {
    fn features(&self, tape: &mut Tape<T>, image: Var) -> Vec<Var> {
        let mut b = Bindings::new();
        b.bind(tape, &self.params.cast::<T>(), &format!("{ORACLE_PREFIX}/"), false);
        self.net.forward_until(tape, &b, image, None, FEATURE_LAYERS).layers
    }
}

/// Train a segmenter on the real images of `dataset` with per-pixel cross-entropy.
pub fn train_oracle(dataset: &Dataset, config: &OracleConfig) -> Result<OracleSegmenter, EvalError> {
    let first = dataset.samples.first().ok_or(EvalError::Empty)?;
    let mut oracle = OracleSegmenter::new(first.label.num_classes(), config.seed)?;
    let mut adam = Adam::new(AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let weights = class_weights(dataset, oracle.num_classes, config.balance_classes);
    let prefix = format!("{ORACLE_PREFIX}/");
    let mut steps = 0u64;
    let mut last = f64::NAN;
    for epoch in 0..config.epochs {
        // linear decay over the last half
        let half = config.epochs / 2;
        let lr = if epoch < config.epochs - half {
            config.lr
        } else {
            config.lr * (1.0 - (epoch + half - config.epochs) as f64 / half as f64).max(0.1)
        };
        for idx in iterate_batches(dataset.len(), config.batch_size, Some(config.seed ^ epoch as u64)) {
            let samples: Vec<_> = idx.iter().map(|&i| &dataset.samples[i]).collect();
            let images = stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
            let labels = labels_of(&samples.iter().map(|s| s.label.grid()).collect::<Vec<_>>());
            let mut tape = Tape::new();
            let mut b = Bindings::new();
            b.bind(&mut tape, &oracle.params, &prefix, true);
            let x = tape.constant4(images);
            let logits = oracle.net.forward(&mut tape, &b, x, None).output();
            let loss = tape.softmax_cross_entropy_weighted(logits, labels, &weights);
            last = tape.scalar(loss) as f64;
            let mut g = tape.backward(loss);
            adam.step(&mut oracle.params, &b.collect(&mut g), lr);
            steps += 1;
        }
        log::info!("oracle epoch {}/{} loss {last:.4}", epoch + 1, config.epochs);
    }
    oracle.provenance = Some(OracleProvenance { config: config.clone(), train_samples: dataset.len(), steps, final_loss: last });
    Ok(oracle)
}

/// Where synthesized images get their per-instance styles.
#[derive(Clone, Copy, Debug)]
pub enum EvalStyles<'a> {
    /// Encode the real image of each sample.
    Encoded,
    /// Random catalog centers, seeded per sample.
    Catalog { catalog: &'a StyleCatalog, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Oracle on synthesized images, scored against the input label maps.
    pub synthesized: SegScores,
    /// Oracle on the real images: the reference.
    pub real: SegScores,
    pub accuracy_ratio: f64,
    pub miou_ratio: f64,
}

fn styles_for(
    bundle: &ModelBundle,
    models: &crate::model::Models,
    sample: &crate::data::SamplePair,
    index: usize,
    styles: EvalStyles<'_>,
) -> Result<Option<BTreeMap<u16, StyleVector>>, EvalError> {
    if !models.spec.use_encoder {
        return Ok(None);
    }
    Ok(Some(match styles {
        EvalStyles::Encoded => models.encode_styles(&bundle.params, &sample.image, &sample.instance)?,
        EvalStyles::Catalog { catalog, seed } => {
            sample_styles(catalog, &sample.instance, &sample.label, &BTreeMap::new(), seed.wrapping_add(index as u64))?
        }
    }))
}

/// Synthesize from every label/instance map of `dataset`, segment the
/// result with `oracle` and score it against the input labels.
pub fn evaluate_model(
    bundle: &ModelBundle,
    dataset: &Dataset,
    oracle: &OracleSegmenter,
    styles: EvalStyles<'_>,
) -> Result<EvalReport, EvalError> {
    let models = bundle.models()?;
    let mut synth = ConfusionMatrix::new(oracle.num_classes);
    for (i, s) in dataset.samples.iter().enumerate() {
        let style = styles_for(bundle, &models, s, i, styles)?;
        let image = models.synthesize(&bundle.params, &s.label, &s.instance, style.as_ref())?;
        synth.add(oracle.segment_image(&image)?.grid(), s.label.grid())?;
    }
    let synthesized = synth.scores()?;
    let real = oracle.score_real(dataset)?;
    Ok(EvalReport {
        images: dataset.len(),
        accuracy_ratio: synthesized.pixel_accuracy / real.pixel_accuracy,
        miou_ratio: synthesized.mean_iou / real.mean_iou,
        synthesized,
        real,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub real: SegScores,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | pixel acc | mean IoU |\n|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {:.4} | {:.4} |", r.name, r.pixel_accuracy, r.mean_iou);
        }
        let _ = writeln!(s, "| real images | {:.4} | {:.4} |", self.real.pixel_accuracy, self.real.mean_iou);
        s
    }
}

/// Evaluate every named bundle on the same data, one row per bundle.
pub fn ablation_compare(
    bundles: &[(String, ModelBundle)],
    dataset: &Dataset,
    oracle: &OracleSegmenter,
    styles: EvalStyles<'_>,
) -> Result<AblationTable, EvalError> {
    let mut rows = Vec::with_capacity(bundles.len());
    let mut real = None;
    for (name, bundle) in bundles {
        let r = evaluate_model(bundle, dataset, oracle, styles)?;
        rows.push(AblationRow { name: name.clone(), pixel_accuracy: r.synthesized.pixel_accuracy, mean_iou: r.synthesized.mean_iou });
        real = Some(r.real);
    }
    let real = match real {
        Some(r) => r,
        None => oracle.score_real(dataset)?,
    };
    Ok(AblationTable { real, rows })
}
