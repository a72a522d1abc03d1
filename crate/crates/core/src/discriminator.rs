//! Multi-scale PatchGAN discriminators. Discriminator `k` (1-based) sees the
//! conditioning and image average-pooled `k - 1` times.

use ndarray::{Array3, Array4, ArrayD, Axis, Ix4};
use rand_chacha::ChaCha8Rng;

use crate::arch::{parse_arch, ArchError, LayerGraph, DISCRIMINATOR, DISCRIMINATOR_HEAD};
use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::nn::{Bindings, Network, ParamStore};
use crate::scalar::Scalar;

pub const DEFAULT_SCALES: usize = 3;

/// Score map and every tapped feature of one discriminator pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput<T> {
    pub score_map: Array4<T>,
    /// Outputs of every layer, head included; the last entry is the score map.
    pub features: Vec<ArrayD<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleDiscriminator {
    pub nets: Vec<Network>,
}

/// The patch discriminator graph followed by its one-plane head.
pub fn discriminator_graph(divisor: usize) -> Result<LayerGraph, ArchError> {
    Ok(parse_arch(DISCRIMINATOR)?.followed_by(&parse_arch(DISCRIMINATOR_HEAD)?).scaled(divisor))
}

impl MultiScaleDiscriminator {
    pub fn new(input_planes: usize, divisor: usize, scales: usize) -> Result<Self, ModelError> {
        Self::from_graph(discriminator_graph(divisor)?, input_planes, scales)
    }

    pub fn from_graph(graph: LayerGraph, input_planes: usize, scales: usize) -> Result<Self, ModelError> {
        if scales == 0 {
            return Err(ModelError::Invalid("at least one discriminator scale is required".into()));
        }
        let nets = (1..=scales)
            .map(|k| Network::new(format!("d{k}"), graph.clone(), input_planes))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { nets })
    }

    pub fn scales(&self) -> usize {
        self.nets.len()
    }

    pub fn input_planes(&self) -> usize {
        self.nets[0].input_planes
    }

    /// Number of tapped features per scale.
    pub fn taps(&self) -> usize {
        self.nets[0].graph.layers.len()
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.nets.iter().flat_map(Network::param_shapes).collect()
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for net in &self.nets {
            store.extend(net.init_params(rng));
        }
        store
    }

    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(), ModelError> {
        self.nets.iter().try_for_each(|n| n.check_params(store))
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, b: &mut Bindings, requires_grad: bool) {
        for net in &self.nets {
            b.bind(tape, store, &format!("{}/", net.prefix), requires_grad);
        }
    }

    /// Feature taps of scale `k` (0-based) on an already-pooled input.
    pub fn forward_scale<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, k: usize, input: Var) -> Vec<Var> {
        self.nets[k].forward(tape, b, input, None).layers
    }

    /// Run the listed scales on `cond ∥ image`, pooling the input once per scale step.
    pub fn forward_scales<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        cond: Var,
        image: Var,
        scales: &[usize],
    ) -> Vec<Vec<Var>> {
        let mut level = tape.concat(&[cond, image]);
        let mut at = 0;
        let mut out = Vec::with_capacity(scales.len());
        for &k in scales {
            assert!(k >= at, "scales must be listed in increasing order");
            while at < k {
                level = tape.avg_pool2(level);
                at += 1;
            }
            out.push(self.forward_scale(tape, b, k, level));
        }
        out
    }

    /// All scales.
    pub fn forward_all<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, cond: Var, image: Var) -> Vec<Vec<Var>> {
        let all: Vec<usize> = (0..self.scales()).collect();
        self.forward_scales(tape, b, cond, image, &all)
    }

    /// Discriminator `k` (1-based) on inputs already at that scale.
    pub fn d_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        k: usize,
        cond: &Array4<T>,
        image: &Array4<T>,
    ) -> Result<DiscriminatorOutput<T>, ModelError> {
        if k == 0 || k > self.scales() {
            return Err(ModelError::Invalid(format!("scale {k} outside 1..={}", self.scales())));
        }
        self.nets[k - 1].check_params(store)?;
        let (n, pc, h, w) = cond.dim();
        let (ni, pi, hi, wi) = image.dim();
        if (n, h, w) != (ni, hi, wi) {
            return Err(ModelError::Dims(format!("conditioning {n}x{h}x{w} vs image {ni}x{hi}x{wi}")));
        }
        if pi != 3 {
            return Err(ModelError::PlaneMismatch { what: "image", expected: 3, found: pi });
        }
        if pc + pi != self.input_planes() {
            return Err(ModelError::PlaneMismatch { what: "conditioning", expected: self.input_planes() - 3, found: pc });
        }
        self.nets[k - 1].infer_shapes(h, w)?;
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        b.bind(&mut tape, store, &format!("{}/", self.nets[k - 1].prefix), false);
        let c = tape.constant4(cond.clone());
        let x = tape.constant4(image.clone());
        let input = tape.concat(&[c, x]);
        let taps = self.forward_scale(&mut tape, &b, k - 1, input);
        Ok(collect_output(&tape, &taps))
    }

    /// Discriminator `k` applied to pyramid level `k`.
    pub fn multiscale_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cond_pyramid: &[Array4<T>],
        image_pyramid: &[Array4<T>],
    ) -> Result<Vec<DiscriminatorOutput<T>>, ModelError> {
        if cond_pyramid.len() != self.scales() || image_pyramid.len() != self.scales() {
            return Err(ModelError::Invalid(format!(
                "expected {} pyramid levels, got {} conditioning and {} image levels",
                self.scales(),
                cond_pyramid.len(),
                image_pyramid.len()
            )));
        }
        (0..self.scales()).map(|k| self.d_forward(store, k + 1, &cond_pyramid[k], &image_pyramid[k])).collect()
    }
}

fn collect_output<T: Scalar>(tape: &Tape<T>, taps: &[Var]) -> DiscriminatorOutput<T> {
    let features: Vec<ArrayD<T>> = taps.iter().map(|&v| tape.value(v).clone()).collect();
    let score_map = features.last().expect("taps").clone().into_dimensionality::<Ix4>().expect("4-d score map");
    DiscriminatorOutput { score_map, features }
}

/// Pyramid of a batched array by repeated 2x2 mean pooling.
pub fn batch_pyramid<T: Scalar>(x: &Array4<T>, levels: usize) -> Vec<Array4<T>> {
    let mut out = vec![x.clone()];
    for _ in 1..levels {
        let next = crate::autograd::kernels::avg_pool2(out.last().expect("non-empty").view());
        out.push(next);
    }
    out
}

/// Drop style planes: the discriminator sees labels and boundaries only.
pub fn discriminator_conditioning<T: Scalar>(planes: &Array3<T>, label_planes: usize) -> Array3<T> {
    planes.slice_axis(Axis(0), (0..label_planes).into()).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{LayerKind, Norm};
    use rand::{Rng, SeedableRng};

    fn rand4(rng: &mut ChaCha8Rng, n: usize, p: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_simple_fn((n, p, h, w), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_architectures_and_first_block_unnormalized() {
        let d = MultiScaleDiscriminator::new(8, 4, 3).unwrap();
        let printed: Vec<String> = d.nets.iter().map(|n| n.graph.to_string()).collect();
        assert!(printed.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(d.nets[0].graph.layers[0].norm, Norm::None);
        assert_eq!(d.nets[0].graph.count(LayerKind::PatchConv), 4);
        assert_eq!(d.taps(), 5);
        assert_eq!(d.nets[0].graph.receptive_field(), 70);
    }

    #[test]
    fn patch_locality_without_normalization() {
        // Instance normalization couples every position, so locality is
        // checked on the same layers with normalization removed.
        let mut graph = discriminator_graph(8).unwrap();
        for l in &mut graph.layers {
            l.norm = Norm::None;
        }
        let d = MultiScaleDiscriminator::from_graph(graph.clone(), 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let store = d.init_params::<f64>(&mut rng);
        let cond = rand4(&mut rng, 1, 5, 64, 64);
        let img = rand4(&mut rng, 1, 3, 64, 64);
        let base = d.d_forward(&store, 1, &cond, &img).unwrap().score_map;
        for (py, px) in [(0usize, 0usize), (17, 40), (63, 63)] {
            let mut poked = img.clone();
            poked[[0, 1, py, px]] += 0.5;
            let out = d.d_forward(&store, 1, &cond, &poked).unwrap().score_map;
            let mut changed = 0;
            for ((_, _, oy, ox), v) in out.indexed_iter() {
                let (y0, y1) = graph.receptive_window(oy).unwrap();
                let (x0, x1) = graph.receptive_window(ox).unwrap();
                let covers = (y0..=y1).contains(&(py as isize)) && (x0..=x1).contains(&(px as isize));
                if *v != base[[0, 0, oy, ox]] {
                    assert!(covers, "entry ({oy}, {ox}) changed for pixel ({py}, {px})");
                    changed += 1;
                }
            }
            assert!(changed > 0);
        }
        let normed = MultiScaleDiscriminator::new(8, 8, 1).unwrap();
        let store = normed.init_params::<f64>(&mut rng);
        let base = normed.d_forward(&store, 1, &cond, &img).unwrap().score_map;
        let mut poked = img.clone();
        poked[[0, 1, 0, 0]] += 0.5;
        let out = normed.d_forward(&store, 1, &cond, &poked).unwrap().score_map;
        assert_ne!(out[[0, 0, 10, 10]], base[[0, 0, 10, 10]]);
    }

    #[test]
    fn output_shapes_follow_inference() {
        let d = MultiScaleDiscriminator::new(8, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = d.init_params::<f64>(&mut rng);
        let cond = batch_pyramid(&rand4(&mut rng, 2, 5, 128, 256), 3);
        let img = batch_pyramid(&rand4(&mut rng, 2, 3, 128, 256), 3);
        let outs = d.multiscale_forward(&store, &cond, &img).unwrap();
        assert_eq!(outs.len(), 3);
        for (k, o) in outs.iter().enumerate() {
            let shapes = d.nets[k].infer_shapes(128 >> k, 256 >> k).unwrap();
            assert_eq!(o.features.len(), 5);
            for (f, s) in o.features.iter().zip(&shapes) {
                assert_eq!(f.shape(), &[2, s.planes, s.height, s.width]);
            }
        }
        let again = d.multiscale_forward(&store, &cond, &img).unwrap();
        assert_eq!(outs, again);
    }

    #[test]
    fn zero_weights_give_bias_constant() {
        let d = MultiScaleDiscriminator::new(8, 8, 3).unwrap();
        let mut store = d.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(1));
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in &names {
            store.get_mut(n).unwrap().fill(0.0);
        }
        for k in 1..=3 {
            store.get_mut(&format!("d{k}/l04/bias")).unwrap().fill(0.25);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cond = batch_pyramid(&rand4(&mut rng, 1, 5, 64, 64), 3);
        let img = batch_pyramid(&rand4(&mut rng, 1, 3, 64, 64), 3);
        for o in d.multiscale_forward(&store, &cond, &img).unwrap() {
            assert!(o.score_map.iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn plane_and_level_mismatch_are_errors() {
        let d = MultiScaleDiscriminator::new(8, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = d.init_params::<f64>(&mut rng);
        let cond = rand4(&mut rng, 1, 4, 32, 32);
        let img = rand4(&mut rng, 1, 3, 32, 32);
        assert!(matches!(d.d_forward(&store, 1, &cond, &img), Err(ModelError::PlaneMismatch { .. })));
        assert!(d.multiscale_forward(&store, &[cond.clone()], &[img.clone()]).is_err());
        assert!(d.d_forward(&store, 4, &cond, &img).is_err());
    }

    #[test]
    fn tape_pyramid_matches_array_pyramid() {
        let d = MultiScaleDiscriminator::new(8, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = d.init_params::<f64>(&mut rng);
        let cond = rand4(&mut rng, 1, 5, 64, 64);
        let img = rand4(&mut rng, 1, 3, 64, 64);
        let reference = d.multiscale_forward(&store, &batch_pyramid(&cond, 3), &batch_pyramid(&img, 3)).unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        d.bind(&mut tape, &store, &mut b, false);
        let c = tape.constant4(cond);
        let x = tape.constant4(img);
        let taps = d.forward_all(&mut tape, &b, c, x);
        for (r, t) in reference.iter().zip(&taps) {
            let got = collect_output(&tape, t);
            for (a, bb) in r.features.iter().zip(&got.features) {
                let diff = (a - bb).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
                assert!(diff < 1e-12);
            }
        }
    }
}
