//! Least-squares adversarial terms, discriminator feature matching, an
//! optional perceptual term, and their weighted combination.
//!
//! The `*_var` functions build terms on a [`Tape`] for training; the array
//! functions evaluate the same terms on plain arrays.

use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_fm: f64,
    /// Only applied when a feature network is supplied.
    pub lambda_perc: f64,
    pub real_target: f64,
    pub fake_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_fm: 10.0, lambda_perc: 10.0, real_target: 1.0, fake_target: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("lambda_fm", self.lambda_fm), ("lambda_perc", self.lambda_perc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::Invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss components of one step. Totals are recomputed from the components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub g_gan: Vec<f64>,
    pub g_fm: Vec<f64>,
    pub g_perc: f64,
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
    pub g_total: f64,
    pub d_total: f64,
}

impl LossReport {
    pub fn new(g_gan: Vec<f64>, g_fm: Vec<f64>, g_perc: f64, d_real: Vec<f64>, d_fake: Vec<f64>, w: &LossWeights) -> Self {
        let g_total = g_gan.iter().sum::<f64>() + w.lambda_fm * g_fm.iter().sum::<f64>() + w.lambda_perc * g_perc;
        let d_total = d_real.iter().sum::<f64>() + d_fake.iter().sum::<f64>();
        Self { g_gan, g_fm, g_perc, d_real, d_fake, g_total, d_total }
    }

    pub fn g_gan_sum(&self) -> f64 {
        self.g_gan.iter().sum()
    }

    pub fn g_fm_sum(&self) -> f64 {
        self.g_fm.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.g_total.is_finite() && self.d_total.is_finite()
    }
}

/// Extracts intermediate activations of a frozen network for the perceptual term.
pub trait FeatureNet<T: Scalar> {
    fn features(&self, tape: &mut Tape<T>, image: Var) -> Vec<Var>;
}

/// Discriminator terms `(mean((real - 1)^2)/2, mean(fake^2)/2)` for one scale.
pub fn lsgan_d_var<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, w: &LossWeights) -> (Var, Var) {
    (tape.ls_target(real, T::of(w.real_target)), tape.ls_target(fake, T::of(w.fake_target)))
}

/// Generator term `mean((fake - 1)^2)/2` for one scale.
pub fn lsgan_g_var<T: Scalar>(tape: &mut Tape<T>, fake: Var, w: &LossWeights) -> Var {
    tape.ls_target(fake, T::of(w.real_target))
}

/// `sum_i mean|real_i - fake_i|` over the taps of one scale. `real` should be
/// constants so no gradient reaches the real branch.
pub fn feature_matching_var<T: Scalar>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Var {
    assert_eq!(real.len(), fake.len(), "tap counts differ");
    let terms: Vec<Var> = real.iter().zip(fake).map(|(&r, &f)| tape.l1_mean(r, f)).collect();
    tape.sum(&terms)
}

/// Layer-wise L1 between feature-network activations of a real and a synthesized image.
pub fn perceptual_var<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, net: &dyn FeatureNet<T>) -> Var {
    let real_feats: Vec<Var> = net.features(tape, real).into_iter().map(|v| tape.detach(v)).collect();
    let fake_feats = net.features(tape, fake);
    feature_matching_var(tape, &real_feats, &fake_feats)
}

/// Per-scale terms of the generator objective.
#[derive(Clone, Debug, Default)]
pub struct GeneratorTerms {
    pub gan: Vec<Var>,
    pub fm: Vec<Var>,
    pub perc: Option<Var>,
}

impl GeneratorTerms {
    /// `sum gan + lambda_fm * sum fm + lambda_perc * perc`.
    pub fn total<T: Scalar>(&self, tape: &mut Tape<T>, w: &LossWeights) -> Var {
        let mut parts: Vec<(Var, T)> = self.gan.iter().map(|&v| (v, T::one())).collect();
        parts.extend(self.fm.iter().map(|&v| (v, T::of(w.lambda_fm))));
        if let Some(p) = self.perc {
            parts.push((p, T::of(w.lambda_perc)));
        }
        tape.weighted_sum(&parts)
    }
}

/// Per-scale terms of the discriminator objective.
#[derive(Clone, Debug, Default)]
pub struct DiscriminatorTerms {
    pub real: Vec<Var>,
    pub fake: Vec<Var>,
}

impl DiscriminatorTerms {
    pub fn total<T: Scalar>(&self, tape: &mut Tape<T>) -> Var {
        let all: Vec<Var> = self.real.iter().chain(&self.fake).copied().collect();
        tape.sum(&all)
    }
}

/// Report from evaluated terms on (possibly different) tapes.
pub fn report<T: Scalar>(g: Option<(&Tape<T>, &GeneratorTerms)>, d: Option<(&Tape<T>, &DiscriminatorTerms)>, w: &LossWeights) -> LossReport {
    let vals = |tape: &Tape<T>, vs: &[Var]| vs.iter().map(|&v| tape.scalar(v).to_f64_lossy()).collect::<Vec<_>>();
    let (gan, fm, perc) = match g {
        Some((tape, t)) => (vals(tape, &t.gan), vals(tape, &t.fm), t.perc.map_or(0.0, |p| tape.scalar(p).to_f64_lossy())),
        None => (Vec::new(), Vec::new(), 0.0),
    };
    let (real, fake) = match d {
        Some((tape, t)) => (vals(tape, &t.real), vals(tape, &t.fake)),
        None => (Vec::new(), Vec::new()),
    };
    LossReport::new(gan, fm, perc, real, fake, w)
}

/// Discriminator loss summed over scales.
pub fn lsgan_d_loss<T: Scalar>(real: &[ArrayD<T>], fake: &[ArrayD<T>]) -> Result<f64, ModelError> {
    if real.len() != fake.len() {
        return Err(ModelError::Invalid(format!("{} real vs {} synthesized score maps", real.len(), fake.len())));
    }
    let w = LossWeights::default();
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (k, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.shape() != f.shape() {
            return Err(ModelError::TapMismatch { scale: k, tap: 0, real: r.shape().to_vec(), fake: f.shape().to_vec() });
        }
        let (r, f) = (tape.constant(r.clone()), tape.constant(f.clone()));
        let (a, b) = lsgan_d_var(&mut tape, r, f, &w);
        total += tape.scalar(a).to_f64_lossy() + tape.scalar(b).to_f64_lossy();
    }
    Ok(total)
}

/// Generator adversarial loss summed over scales.
pub fn lsgan_g_loss<T: Scalar>(fake: &[ArrayD<T>]) -> f64 {
    let w = LossWeights::default();
    let mut tape = Tape::new();
    fake.iter()
        .map(|f| {
            let f = tape.constant(f.clone());
            let v = lsgan_g_var(&mut tape, f, &w);
            tape.scalar(v).to_f64_lossy()
        })
        .sum()
}

/// Feature-matching loss summed over scales and taps.
pub fn feature_matching_loss<T: Scalar>(real: &[Vec<ArrayD<T>>], fake: &[Vec<ArrayD<T>>]) -> Result<f64, ModelError> {
    if real.len() != fake.len() {
        return Err(ModelError::Invalid(format!("{} real vs {} synthesized scales", real.len(), fake.len())));
    }
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (k, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.len() != f.len() {
            return Err(ModelError::Invalid(format!("scale {k}: {} real vs {} synthesized taps", r.len(), f.len())));
        }
        let mut rv = Vec::new();
        let mut fv = Vec::new();
        for (i, (a, b)) in r.iter().zip(f).enumerate() {
            if a.shape() != b.shape() {
                return Err(ModelError::TapMismatch { scale: k, tap: i, real: a.shape().to_vec(), fake: b.shape().to_vec() });
            }
            rv.push(tape.constant(a.clone()));
            fv.push(tape.constant(b.clone()));
        }
        let v = feature_matching_var(&mut tape, &rv, &fv);
        total += tape.scalar(v).to_f64_lossy();
    }
    Ok(total)
}

/// Unweighted perceptual loss between `x` and `g_s`.
pub fn perceptual_loss<T: Scalar>(x: &Array4<T>, g_s: &Array4<T>, net: &dyn FeatureNet<T>) -> Result<f64, ModelError> {
    if x.dim() != g_s.dim() {
        return Err(ModelError::Dims(format!("{:?} vs {:?}", x.dim(), g_s.dim())));
    }
    let mut tape = Tape::new();
    let a = tape.constant4(x.clone());
    let b = tape.constant4(g_s.clone());
    let v = perceptual_var(&mut tape, a, b, net);
    Ok(tape.scalar(v).to_f64_lossy())
}

/// Generator report from per-scale component values.
pub fn total_g_loss(gan: &[f64], fm: &[f64], perc: f64, w: &LossWeights) -> LossReport {
    LossReport::new(gan.to_vec(), fm.to_vec(), perc, Vec::new(), Vec::new(), w)
}

/// Discriminator report from per-scale component values.
pub fn total_d_loss(real: &[f64], fake: &[f64]) -> LossReport {
    LossReport::new(Vec::new(), Vec::new(), 0.0, real.to_vec(), fake.to_vec(), &LossWeights::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use proptest::prelude::*;

    fn filled(v: f64, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), v)
    }

    #[test]
    fn lsgan_unit_values() {
        let s = [1, 1, 6, 6];
        assert_eq!(lsgan_d_loss(&[filled(1.0, &s)], &[filled(0.0, &s)]).unwrap(), 0.0);
        assert!((lsgan_d_loss(&[filled(0.0, &s)], &[filled(1.0, &s)]).unwrap() - 1.0).abs() < 1e-12);
        assert!((lsgan_d_loss(&[filled(0.5, &s)], &[filled(0.5, &s)]).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(lsgan_g_loss(&[filled(1.0, &s)]), 0.0);
        assert!((lsgan_g_loss(&[filled(0.0, &s)]) - 0.5).abs() < 1e-12);
        let three = vec![filled(0.0, &s), filled(0.0, &[1, 1, 3, 3]), filled(0.0, &[1, 1, 2, 2])];
        assert!((lsgan_g_loss(&three) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn feature_matching_unit_values() {
        let same = vec![vec![filled(0.3, &[2, 4, 5, 5])]];
        assert_eq!(feature_matching_loss(&same, &same).unwrap(), 0.0);
        for shape in [[1, 1, 1, 1], [2, 7, 3, 9]] {
            let v = feature_matching_loss(&[vec![filled(1.0, &shape)]], &[vec![filled(0.0, &shape)]]).unwrap();
            assert!((v - 1.0).abs() < 1e-12);
        }
        let real = vec![vec![filled(1.0, &[1, 2, 4, 4]), filled(0.5, &[1, 3, 2, 2])]];
        let fake = vec![vec![filled(0.0, &[1, 2, 4, 4]), filled(0.0, &[1, 3, 2, 2])]];
        assert!((feature_matching_loss(&real, &fake).unwrap() - 1.5).abs() < 1e-12);
        let bad = vec![vec![filled(0.0, &[1, 2, 4, 4]), filled(0.0, &[1, 3, 3, 2])]];
        assert!(matches!(feature_matching_loss(&real, &bad), Err(ModelError::TapMismatch { tap: 1, .. })));
    }

    #[test]
    fn total_arithmetic() {
        let zero = total_g_loss(&[0.0; 3], &[0.0; 3], 0.0, &LossWeights::default());
        assert_eq!((zero.g_total, zero.d_total), (0.0, 0.0));
        let w = LossWeights { lambda_fm: 10.0, lambda_perc: 0.0, ..Default::default() };
        let r = total_g_loss(&[0.3], &[0.2], 0.7, &w);
        assert!((r.g_total - 2.3).abs() < 1e-12);
    }

    #[test]
    fn tape_total_matches_report() {
        let w = LossWeights::default();
        let mut tape = Tape::<f32>::new();
        let gan: Vec<Var> = [0.4f32, 0.1, 0.25].iter().map(|&v| tape.constant(ArrayD::from_elem(IxDyn(&[2, 2]), v))).collect();
        let gan: Vec<Var> = gan.into_iter().map(|v| lsgan_g_var(&mut tape, v, &w)).collect();
        let fm: Vec<Var> = (0..3).map(|k| tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.01 * k as f32))).collect();
        let terms = GeneratorTerms { gan, fm, perc: None };
        let total = terms.total(&mut tape, &w);
        let rep = report(Some((&tape, &terms)), None, &w);
        assert!((rep.g_total - tape.scalar(total) as f64).abs() < 1e-6);
        let sum = rep.g_gan_sum() + w.lambda_fm * rep.g_fm_sum();
        assert!((rep.g_total - sum).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn scale_by_scale_equals_batched(vals in prop::collection::vec(-2.0f64..2.0, 6 * 32)) {
            let maps: Vec<ArrayD<f64>> = vals.chunks(32).map(|c| ArrayD::from_shape_vec(IxDyn(&[2, 1, 4, 4]), c.to_vec()).unwrap()).collect();
            let (real, fake) = maps.split_at(3);
            let fake_all = fake.to_vec();
            let batched = lsgan_d_loss(real, &fake_all).unwrap();
            let per: f64 = (0..3).map(|k| lsgan_d_loss(&real[k..k + 1], &fake_all[k..k + 1]).unwrap()).sum();
            prop_assert!((batched - per).abs() < 1e-6);
            prop_assert!(batched >= 0.0);
            prop_assert!(lsgan_g_loss(real) >= 0.0);
            let fm = feature_matching_loss(&[real.to_vec()], &[fake_all.clone()]).unwrap();
            prop_assert!(fm >= 0.0);
        }
    }
}
