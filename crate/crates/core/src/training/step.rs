use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array3, Array4, ArrayD, Axis};

use crate::autograd::{RegionIndex, Tape, Var};
use crate::data::{build_conditioning, stack, DataError, InstanceMap, LabelMap, SamplePair};
use crate::feature_encoder::{instance_regions, InstanceIds};
use crate::generator::GeneratorMode;
use crate::losses::{
    feature_matching_var, lsgan_d_var, lsgan_g_var, perceptual_var, report, DiscriminatorTerms, FeatureNet, GeneratorTerms,
    LossReport, LossWeights,
};
use crate::model::Models;
use crate::nn::{Adam, Bindings, ParamStore};
use crate::scalar::Scalar;

/// Region indices for instance-wise pooling of encoder output.
#[derive(Clone, Debug)]
pub struct PoolRegions {
    pub src: Arc<Vec<RegionIndex>>,
    pub dst: Arc<Vec<RegionIndex>>,
    pub dst_half: Option<Arc<Vec<RegionIndex>>>,
}

/// One batch at a phase's resolution.
#[derive(Clone, Debug)]
pub struct PhaseBatch<T> {
    /// One-hot and boundary planes.
    pub cond: Array4<T>,
    /// The same at half resolution (composed phases only).
    pub cond_half: Option<Array4<T>>,
    pub image: Array4<T>,
    pub regions: Option<PoolRegions>,
}

/// What one step runs: generator mode and the active discriminator scales (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub generator: GeneratorMode,
    pub scales: Vec<usize>,
}

fn label_planes<T: Scalar>(label: &LabelMap, instance: &InstanceMap, use_instance_maps: bool) -> Result<Array3<T>, DataError> {
    let c = build_conditioning::<T>(label, instance, None)?;
    Ok(if use_instance_maps { c.planes } else { c.without_boundary().planes })
}

fn pool_image(image: &Array3<f32>, times: usize) -> Array3<f32> {
    let mut x = image.view().insert_axis(Axis(0)).to_owned();
    for _ in 0..times {
        x = crate::autograd::kernels::avg_pool2(x.view());
    }
    x.index_axis_move(Axis(0), 0)
}

/// Assemble a batch at `height x width`, which must be the samples' size
/// divided by a power of two. Maps are nearest-downsampled with boundaries
/// recomputed; images are mean-pooled.
pub fn prepare_batch<T: Scalar>(
    samples: &[&SamplePair],
    height: usize,
    width: usize,
    composed: bool,
    use_instance_maps: bool,
    use_encoder: bool,
) -> Result<PhaseBatch<T>, DataError> {
    let mut conds = Vec::new();
    let mut halves = Vec::new();
    let mut images = Vec::new();
    let (mut src, mut dst_half) = (Vec::new(), Vec::new());
    for s in samples {
        let (h, w) = s.label.dims();
        let mut times = 0;
        while (h >> times) > height && times < 16 {
            times += 1;
        }
        if h >> times != height || w >> times != width || (h % (1 << times)) != 0 || (w % (1 << times)) != 0 {
            return Err(DataError::Shape(format!("sample {} is {h}x{w}; cannot reach {height}x{width} by halving", s.id)));
        }
        let (mut label, mut inst) = (s.label.clone(), s.instance.clone());
        for _ in 0..times {
            label = label.downsample_nearest();
            inst = inst.downsample_nearest();
        }
        conds.push(label_planes::<T>(&label, &inst, use_instance_maps)?);
        images.push(pool_image(&s.image, times).mapv(|v| T::of(v as f64)));
        let ids = InstanceIds::of(&inst);
        if use_encoder {
            src.push(instance_regions(&inst, &ids));
        }
        if composed {
            let (hl, hi) = (label.downsample_nearest(), inst.downsample_nearest());
            halves.push(label_planes::<T>(&hl, &hi, use_instance_maps)?);
            if use_encoder {
                dst_half.push(instance_regions(&hi, &ids));
            }
        }
    }
    let regions = use_encoder.then(|| {
        let src = Arc::new(src);
        PoolRegions { dst: Arc::clone(&src), src, dst_half: composed.then(|| Arc::new(dst_half)) }
    });
    Ok(PhaseBatch {
        cond: stack(&conds),
        cond_half: composed.then(|| stack(&halves)),
        image: stack(&images),
        regions,
    })
}

/// Generator output on `tape`, with the encoder's pooled features appended
/// to the conditioning when the model has an encoder.
pub fn generate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bindings,
    models: &Models,
    plan: &StepPlan,
    batch: &PhaseBatch<T>,
) -> Var {
    let cond = tape.constant4(batch.cond.clone());
    let half = batch.cond_half.as_ref().map(|c| tape.constant4(c.clone()));
    let (full_in, half_in) = match (&models.encoder, &batch.regions) {
        (Some(enc), Some(r)) => {
            let img = tape.constant4(batch.image.clone());
            let raw = enc.net.forward(tape, b, img, None).output();
            let f = tape.region_pool(raw, Arc::clone(&r.src), Arc::clone(&r.dst));
            let full = tape.concat(&[cond, f]);
            let half = match (half, &r.dst_half) {
                (Some(h), Some(dh)) => {
                    let fh = tape.region_pool(raw, Arc::clone(&r.src), Arc::clone(dh));
                    Some(tape.concat(&[h, fh]))
                }
                _ => None,
            };
            (full, half)
        }
        _ => (cond, half),
    };
    match plan.generator {
        GeneratorMode::GlobalOnly => models.generator.forward_g1(tape, b, full_in).image,
        GeneratorMode::Composed => models.generator.forward(tape, b, full_in, half_in),
    }
}

/// Discriminator objective on its own tape.
pub struct DiscriminatorPass<T: Scalar> {
    pub tape: Tape<T>,
    pub bindings: Bindings,
    pub terms: DiscriminatorTerms,
    pub total: Var,
    /// Feature taps of the real images per active scale.
    pub real_taps: Vec<Vec<Arc<ArrayD<T>>>>,
}

/// Score real images and a detached synthesized image with the active discriminators.
pub fn discriminator_pass<T: Scalar>(
    models: &Models,
    params: &ParamStore<T>,
    plan: &StepPlan,
    batch: &PhaseBatch<T>,
    fake: Arc<ArrayD<T>>,
    w: &LossWeights,
) -> DiscriminatorPass<T> {
    let mut tape = Tape::new();
    let mut b = Bindings::new();
    models.discriminator.bind(&mut tape, params, &mut b, true);
    let cond = tape.constant4(batch.cond.clone());
    let real = tape.constant4(batch.image.clone());
    let fake = tape.leaf(fake, false);
    let real_taps = models.discriminator.forward_scales(&mut tape, &b, cond, real, &plan.scales);
    let fake_taps = models.discriminator.forward_scales(&mut tape, &b, cond, fake, &plan.scales);
    let mut terms = DiscriminatorTerms::default();
    for (r, f) in real_taps.iter().zip(&fake_taps) {
        let (a, c) = lsgan_d_var(&mut tape, *r.last().expect("taps"), *f.last().expect("taps"), w);
        terms.real.push(a);
        terms.fake.push(c);
    }
    let total = terms.total(&mut tape);
    let real_taps = real_taps.iter().map(|s| s.iter().map(|&v| tape.shared_value(v)).collect()).collect();
    DiscriminatorPass { tape, bindings: b, terms, total, real_taps }
}

/// Adversarial, feature-matching and optional perceptual terms for the
/// synthesized image `fake` already on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn generator_terms<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bindings,
    models: &Models,
    plan: &StepPlan,
    batch: &PhaseBatch<T>,
    fake: Var,
    real_taps: &[Vec<Arc<ArrayD<T>>>],
    w: &LossWeights,
    feature_net: Option<&dyn FeatureNet<T>>,
) -> GeneratorTerms {
    let cond = tape.constant4(batch.cond.clone());
    let fake_taps = models.discriminator.forward_scales(tape, b, cond, fake, &plan.scales);
    let mut terms = GeneratorTerms::default();
    for (real, f) in real_taps.iter().zip(&fake_taps) {
        terms.gan.push(lsgan_g_var(tape, *f.last().expect("taps"), w));
        let r: Vec<Var> = real.iter().map(|a| tape.leaf(Arc::clone(a), false)).collect();
        terms.fm.push(feature_matching_var(tape, &r, f));
    }
    if let Some(net) = feature_net {
        let real = tape.constant4(batch.image.clone());
        terms.perc = Some(perceptual_var(tape, real, fake, net));
    }
    terms
}

/// Everything one training step computes before applying updates.
pub struct StepGradients<T> {
    pub d_grads: BTreeMap<String, ArrayD<T>>,
    pub g_grads: BTreeMap<String, ArrayD<T>>,
    pub report: LossReport,
    pub g_total: T,
}

/// Forward both objectives with the current parameters and return their gradients.
pub fn compute_gradients<T: Scalar>(
    models: &Models,
    params: &ParamStore<T>,
    plan: &StepPlan,
    batch: &PhaseBatch<T>,
    w: &LossWeights,
    feature_net: Option<&dyn FeatureNet<T>>,
) -> StepGradients<T> {
    let mut gt = Tape::new();
    let mut gb = Bindings::new();
    models.generator.bind(&mut gt, params, &mut gb, true);
    if let Some(e) = &models.encoder {
        e.bind(&mut gt, params, &mut gb, true);
    }
    models.discriminator.bind(&mut gt, params, &mut gb, false);
    let fake = generate_on_tape(&mut gt, &gb, models, plan, batch);

    let dp = discriminator_pass(models, params, plan, batch, gt.shared_value(fake), w);
    let mut dg = dp.tape.backward(dp.total);
    let d_grads = dp.bindings.collect(&mut dg);

    let terms = generator_terms(&mut gt, &gb, models, plan, batch, fake, &dp.real_taps, w, feature_net);
    let total = terms.total(&mut gt, w);
    let mut gg = gt.backward(total);
    let g_grads = gb.collect(&mut gg);
    let report = report(Some((&gt, &terms)), Some((&dp.tape, &dp.terms)), w);
    StepGradients { d_grads, g_grads, report, g_total: gt.scalar(total) }
}

/// One discriminator update followed by one generator (and encoder) update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    models: &Models,
    params: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    plan: &StepPlan,
    batch: &PhaseBatch<T>,
    w: &LossWeights,
    lr: (f64, f64),
    feature_net: Option<&dyn FeatureNet<T>>,
) -> LossReport {
    let grads = compute_gradients(models, params, plan, batch, w, feature_net);
    if grads.report.is_finite() {
        adam.step(params, &grads.d_grads, lr.1);
        adam.step(params, &grads.g_grads, lr.0);
    }
    grads.report
}
