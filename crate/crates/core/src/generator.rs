//! Coarse-to-fine generator: a global network at half resolution and a local
//! enhancer at full resolution, fused by adding the global network's last
//! feature map to the enhancer's front-end output.

use std::sync::Arc;

use ndarray::{Array4, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{parse_arch, ArchError, LayerGraph, GLOBAL_GENERATOR, LOCAL_ENHANCER, LOCAL_ENHANCER_FUSION};
use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::nn::{Bindings, Network, ParamStore};
use crate::scalar::Scalar;

pub const G1_PREFIX: &str = "g1";
pub const G2_PREFIX: &str = "g2";

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalGenerator {
    pub net: Network,
}

impl GlobalGenerator {
    pub fn new(input_planes: usize, divisor: usize) -> Result<Self, ArchError> {
        Self::from_graph(parse_arch(GLOBAL_GENERATOR)?.scaled(divisor), input_planes)
    }

    pub fn from_graph(graph: LayerGraph, input_planes: usize) -> Result<Self, ArchError> {
        if graph.layers.len() < 2 {
            return Err(ArchError::Shape { layer: 0, token: graph.to_string(), reason: "needs a feature stage and a head".into() });
        }
        Ok(Self { net: Network::new(G1_PREFIX, graph, input_planes)? })
    }

    /// Index of the layer whose output is handed to the enhancer.
    pub fn feature_layer(&self) -> usize {
        self.net.graph.layers.len() - 2
    }

    pub fn feature_planes(&self) -> usize {
        self.net.graph.planes_after(self.feature_layer())
    }

    /// Total spatial downsampling factor.
    pub fn dims_multiple(&self) -> usize {
        dims_multiple(&self.net.graph)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalEnhancer {
    pub net: Network,
}

impl LocalEnhancer {
    pub fn new(input_planes: usize, divisor: usize) -> Result<Self, ArchError> {
        let graph = parse_arch(LOCAL_ENHANCER)?.scaled(divisor).with_fusion_point(LOCAL_ENHANCER_FUSION)?;
        Self::from_graph(graph, input_planes)
    }

    pub fn from_graph(graph: LayerGraph, input_planes: usize) -> Result<Self, ArchError> {
        if graph.fusion_point.is_none() {
            return Err(ArchError::Shape { layer: 0, token: graph.to_string(), reason: "enhancer needs a fusion point".into() });
        }
        Ok(Self { net: Network::new(G2_PREFIX, graph, input_planes)? })
    }

    pub fn fusion_planes(&self) -> usize {
        self.net.graph.planes_after(self.net.graph.fusion_point.expect("checked at construction"))
    }
}

fn dims_multiple(graph: &LayerGraph) -> usize {
    let downs = graph.layers.iter().filter(|l| l.stride.ratio() == (2, 1)).count();
    1 << downs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    GlobalOnly,
    Composed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubNetwork {
    G1,
    G2,
}

/// Image and last feature map of one global-generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GlobalOutput {
    pub image: Var,
    pub last_feature: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedGenerator {
    pub g1: GlobalGenerator,
    pub g2: Option<LocalEnhancer>,
    frozen_g1: bool,
    frozen_g2: bool,
}

impl ComposedGenerator {
    pub fn new(g1: GlobalGenerator, g2: Option<LocalEnhancer>) -> Result<Self, ModelError> {
        if let Some(g2) = &g2 {
            if g2.net.input_planes != g1.net.input_planes {
                return Err(ModelError::PlaneMismatch {
                    what: "enhancer input",
                    expected: g1.net.input_planes,
                    found: g2.net.input_planes,
                });
            }
            if g2.fusion_planes() != g1.feature_planes() {
                return Err(ModelError::PlaneMismatch {
                    what: "fusion summand",
                    expected: g1.feature_planes(),
                    found: g2.fusion_planes(),
                });
            }
        }
        Ok(Self { g1, g2, frozen_g1: false, frozen_g2: false })
    }

    /// Networks from the standard architecture strings.
    pub fn build(input_planes: usize, divisor: usize, mode: GeneratorMode) -> Result<Self, ModelError> {
        let g1 = GlobalGenerator::new(input_planes, divisor)?;
        let g2 = match mode {
            GeneratorMode::GlobalOnly => None,
            GeneratorMode::Composed => Some(LocalEnhancer::new(input_planes, divisor)?),
        };
        Self::new(g1, g2)
    }

    pub fn mode(&self) -> GeneratorMode {
        if self.g2.is_some() {
            GeneratorMode::Composed
        } else {
            GeneratorMode::GlobalOnly
        }
    }

    pub fn input_planes(&self) -> usize {
        self.g1.net.input_planes
    }

    /// Required divisor of the full-resolution input dims.
    pub fn dims_multiple(&self) -> usize {
        match self.g2 {
            Some(_) => 2 * self.g1.dims_multiple(),
            None => self.g1.dims_multiple(),
        }
    }

    /// Stop gradient flow into a sub-network. Freezing an absent enhancer is a no-op.
    pub fn freeze(&mut self, which: SubNetwork) {
        match which {
            SubNetwork::G1 => self.frozen_g1 = true,
            SubNetwork::G2 => self.frozen_g2 = self.g2.is_some(),
        }
    }

    pub fn unfreeze(&mut self, which: SubNetwork) {
        match which {
            SubNetwork::G1 => self.frozen_g1 = false,
            SubNetwork::G2 => self.frozen_g2 = false,
        }
    }

    pub fn is_frozen(&self, which: SubNetwork) -> bool {
        match which {
            SubNetwork::G1 => self.frozen_g1,
            SubNetwork::G2 => self.frozen_g2,
        }
    }

    pub fn networks(&self) -> Vec<&Network> {
        let mut v = vec![&self.g1.net];
        if let Some(g2) = &self.g2 {
            v.push(&g2.net);
        }
        v
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.networks().into_iter().flat_map(Network::param_shapes).collect()
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for net in self.networks() {
            store.extend(net.init_params(rng));
        }
        store
    }

    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(), ModelError> {
        self.networks().into_iter().try_for_each(|n| n.check_params(store))
    }

    /// Bind parameters; frozen sub-networks are bound without gradients.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, b: &mut Bindings, trainable: bool) {
        b.bind(tape, store, &format!("{G1_PREFIX}/"), trainable && !self.frozen_g1);
        if self.g2.is_some() {
            b.bind(tape, store, &format!("{G2_PREFIX}/"), trainable && !self.frozen_g2);
        }
    }

    pub fn forward_g1<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, cond: Var) -> GlobalOutput {
        let acts = self.g1.net.forward(tape, b, cond, None);
        GlobalOutput { image: acts.output(), last_feature: acts.layers[self.g1.feature_layer()] }
    }

    /// Full-resolution image. `cond_half` is required in composed mode and ignored otherwise.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, cond_full: Var, cond_half: Option<Var>) -> Var {
        match &self.g2 {
            None => self.forward_g1(tape, b, cond_full).image,
            Some(g2) => {
                let half = cond_half.expect("composed generator needs half-resolution conditioning");
                let stop = self.g1.feature_layer() + 1;
                let feature = self.g1.net.forward_until(tape, b, half, None, stop).output();
                g2.net.forward(tape, b, cond_full, Some(feature)).output()
            }
        }
    }

    fn check_input<T: Scalar>(&self, x: &Array4<T>, multiple: usize, what: &'static str) -> Result<(), ModelError> {
        let (_, p, h, w) = x.dim();
        if p != self.input_planes() {
            return Err(ModelError::PlaneMismatch { what, expected: self.input_planes(), found: p });
        }
        if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
            return Err(ModelError::Dims(format!("{what} is {h}x{w}; both dims must be positive multiples of {multiple}")));
        }
        Ok(())
    }

    /// Radius in output pixels of the convolutional receptive field, counting
    /// the boundary map's neighbour reads. Instance normalization is not
    /// local and is not counted.
    pub fn receptive_radius(&self) -> usize {
        let g1 = &self.g1.net.graph;
        let field = match &self.g2 {
            None => g1.extend_field(1.0, 1.0).0,
            Some(e) => {
                let g2 = &e.net.graph;
                let fusion = g2.fusion_point.expect("enhancer has a fusion point");
                let tail = g2.slice(fusion + 1..g2.layers.len());
                let direct = g2.extend_field(1.0, 1.0).0;
                // half-resolution input: nearest downsampling steps by two pixels
                let (f, j) = g1.slice(0..self.g1.feature_layer() + 1).extend_field(1.0, 2.0);
                direct.max(tail.extend_field(f, j).0)
            }
        };
        (field.ceil() as usize - 1) / 2 + 1
    }

    /// Global network alone: image and last feature map.
    pub fn g1_forward<T: Scalar>(&self, store: &ParamStore<T>, cond: &Array4<T>) -> Result<(Array4<T>, Array4<T>), ModelError> {
        self.g1.net.check_params(store)?;
        self.check_input(cond, self.g1.dims_multiple(), "conditioning")?;
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        self.bind(&mut tape, store, &mut b, false);
        let x = tape.constant4(cond.clone());
        let out = self.forward_g1(&mut tape, &b, x);
        Ok((to4(&tape, out.image), to4(&tape, out.last_feature)))
    }

    /// Both networks: `cond_half` must have exactly half the dims of `cond_full`.
    pub fn composed_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cond_full: &Array4<T>,
        cond_half: &Array4<T>,
    ) -> Result<Array4<T>, ModelError> {
        if self.g2.is_none() {
            return Err(ModelError::Invalid("generator has no local enhancer".into()));
        }
        self.check_params(store)?;
        self.check_input(cond_full, self.dims_multiple(), "full-resolution conditioning")?;
        self.check_input(cond_half, self.g1.dims_multiple(), "half-resolution conditioning")?;
        let (nf, _, hf, wf) = cond_full.dim();
        let (nh, _, hh, wh) = cond_half.dim();
        if nf != nh || hf != 2 * hh || wf != 2 * wh {
            return Err(ModelError::Dims(format!(
                "half-resolution input {hh}x{wh} (batch {nh}) is not half of {hf}x{wf} (batch {nf})"
            )));
        }
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        self.bind(&mut tape, store, &mut b, false);
        let full = tape.constant4(cond_full.clone());
        let half = tape.constant4(cond_half.clone());
        let out = self.forward(&mut tape, &b, full, Some(half));
        Ok(to4(&tape, out))
    }

    /// Whichever pass the mode calls for.
    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cond_full: &Array4<T>,
        cond_half: &Array4<T>,
    ) -> Result<Array4<T>, ModelError> {
        match self.mode() {
            GeneratorMode::GlobalOnly => self.g1_forward(store, cond_full).map(|(img, _)| img),
            GeneratorMode::Composed => self.composed_forward(store, cond_full, cond_half),
        }
    }
}

pub(crate) fn to4<T: Scalar>(tape: &Tape<T>, v: Var) -> Array4<T> {
    let shared = tape.shared_value(v);
    Arc::try_unwrap(shared)
        .unwrap_or_else(|a| (*a).clone())
        .into_dimensionality::<Ix4>()
        .expect("network outputs are 4-d")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerKind;
    use ndarray::{s, Array4, Axis};
    use rand::{Rng, SeedableRng};

    fn random_input(rng: &mut ChaCha8Rng, n: usize, p: usize, h: usize, w: usize) -> Array4<f32> {
        Array4::from_shape_simple_fn((n, p, h, w), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn receptive_radius_by_hand() {
        // two 3x3 convs see 5 pixels; the boundary plane adds one more
        let g1 = GlobalGenerator::from_graph(parse_arch("c3s1-4,c3s1-3").unwrap(), 5).unwrap();
        let g = ComposedGenerator::new(g1, None).unwrap();
        assert_eq!(g.receptive_radius(), 3);
        // one downsample then one upsample: 3 + 2 + 1*2 + 2 (head at full res)
        let g1 = GlobalGenerator::from_graph(parse_arch("c3s1-4,d8,u4,c3s1-3").unwrap(), 5).unwrap();
        let g = ComposedGenerator::new(g1, None).unwrap();
        assert_eq!(g.receptive_radius(), (3 + 2 + 2 + 2 - 1) / 2 + 1);
        let desk = ComposedGenerator::build(5, 4, GeneratorMode::Composed).unwrap();
        let global = ComposedGenerator::build(5, 4, GeneratorMode::GlobalOnly).unwrap();
        assert!(desk.receptive_radius() > global.receptive_radius());
    }

    #[test]
    fn g1_shapes_and_range() {
        let g = ComposedGenerator::build(5, 16, GeneratorMode::GlobalOnly).unwrap();
        assert_eq!(g.g1.net.graph.count(LayerKind::ResidualBlock), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = g.init_params::<f32>(&mut rng);
        let x = random_input(&mut rng, 1, 5, 64, 128);
        let (img, feat) = g.g1_forward(&store, &x).unwrap();
        assert_eq!(img.dim(), (1, 3, 64, 128));
        assert_eq!(feat.dim(), (1, 4, 64, 128));
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_weights_give_tanh_of_bias() {
        let g = ComposedGenerator::build(5, 16, GeneratorMode::GlobalOnly).unwrap();
        let mut store = g.init_params::<f64>(&mut ChaCha8Rng::seed_from_u64(1));
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in &names {
            store.get_mut(n).unwrap().fill(0.0);
        }
        let head_bias = names.iter().filter(|n| n.ends_with("/bias")).last().unwrap().clone();
        store.get_mut(&head_bias).unwrap().assign(&ndarray::arr1(&[0.3, -0.2, 0.9]).into_dyn());
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(2), 1, 5, 32, 32).mapv(f64::from);
        let (img, _) = g.g1_forward(&store, &x).unwrap();
        for (c, b) in [0.3f64, -0.2, 0.9].iter().enumerate() {
            assert!(img.index_axis(Axis(1), c).iter().all(|v| (v - b.tanh()).abs() < 1e-12));
        }
    }

    #[test]
    fn batch_members_are_independent() {
        let g = ComposedGenerator::build(5, 16, GeneratorMode::GlobalOnly).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = g.init_params::<f64>(&mut rng);
        let x = random_input(&mut rng, 2, 5, 32, 32).mapv(f64::from);
        let (both, _) = g.g1_forward(&store, &x).unwrap();
        let (one, _) = g.g1_forward(&store, &x.slice(s![0..1, .., .., ..]).to_owned()).unwrap();
        let diff = (&both.slice(s![0..1, .., .., ..]) - &one).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn composed_doubles_resolution_and_rejects_bad_ratio() {
        let g = ComposedGenerator::build(5, 16, GeneratorMode::Composed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = g.init_params::<f32>(&mut rng);
        let full = random_input(&mut rng, 1, 5, 64, 128);
        let half = random_input(&mut rng, 1, 5, 32, 64);
        let out = g.composed_forward(&store, &full, &half).unwrap();
        assert_eq!(out.dim(), (1, 3, 64, 128));
        assert!(matches!(g.composed_forward(&store, &full, &full), Err(ModelError::Dims(_))));
        let bad_planes = random_input(&mut rng, 1, 4, 64, 128);
        assert!(matches!(g.composed_forward(&store, &bad_planes, &half), Err(ModelError::PlaneMismatch { .. })));
    }

    #[test]
    fn zeroed_front_end_passes_global_feature_through() {
        // With the enhancer front end zeroed, the fused feature equals the
        // global network's last feature, so the back end sees exactly it.
        let g = ComposedGenerator::build(5, 16, GeneratorMode::Composed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = g.init_params::<f64>(&mut rng);
        for name in ["g2/l00/weight", "g2/l00/bias", "g2/l01/weight", "g2/l01/bias"] {
            store.get_mut(name).unwrap().fill(0.0);
        }
        let full = random_input(&mut rng, 1, 5, 64, 64).mapv(f64::from);
        let half = random_input(&mut rng, 1, 5, 32, 32).mapv(f64::from);
        let composed = g.composed_forward(&store, &full, &half).unwrap();
        let (_, feat) = g.g1_forward(&store, &half).unwrap();

        let g2 = g.g2.as_ref().unwrap();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        g.bind(&mut tape, &store, &mut b, false);
        let x = tape.constant4(feat);
        let cur = g2.net.forward_range(&mut tape, &b, x, None, 2..g2.net.graph.layers.len()).output();
        let piped = to4(&tape, cur);
        assert_eq!(piped, composed);
    }

    #[test]
    fn freezing_controls_gradient_flow() {
        let mut g = ComposedGenerator::build(5, 32, GeneratorMode::Composed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = g.init_params::<f32>(&mut rng);
        g.freeze(SubNetwork::G1);
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        g.bind(&mut tape, &store, &mut b, true);
        let full = tape.constant4(random_input(&mut rng, 1, 5, 64, 64));
        let half = tape.constant4(random_input(&mut rng, 1, 5, 32, 32));
        let out = g.forward(&mut tape, &b, full, Some(half));
        let loss = tape.ls_target(out, 0.5);
        let mut grads = tape.backward(loss);
        let got = b.collect(&mut grads);
        assert!(got.keys().all(|k| k.starts_with("g2/")));
        assert!(got.keys().any(|k| k.starts_with("g2/")));

        let mut solo = ComposedGenerator::build(5, 32, GeneratorMode::GlobalOnly).unwrap();
        solo.freeze(SubNetwork::G2);
        assert!(!solo.is_frozen(SubNetwork::G2));
    }
}
