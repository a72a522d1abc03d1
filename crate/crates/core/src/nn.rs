//! Parameter storage, runnable networks built from a [`LayerGraph`], and Adam.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn, Zip};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{Activation, ArchError, LayerGraph, LayerKind, LayerShape, Norm, Padding};
use crate::autograd::{ConvGeom, Gradients, Tape, Var};
use crate::error::ModelError;
use crate::scalar::Scalar;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Arc<ArrayD<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.params.get(name).map(|a| a.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn shared(&self, name: &str) -> Option<Arc<ArrayD<T>>> {
        self.params.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Copy of every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Convert every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.mapv(|x| U::of(x.to_f64_lossy())))))
                .collect(),
        }
    }
}

/// Parameters registered as leaves on one tape.
#[derive(Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register every parameter under `prefix`.
    pub fn bind<T: Scalar>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, requires_grad: bool) {
        for (name, value) in store.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let v = tape.leaf(Arc::clone(value), requires_grad);
            self.vars.insert(name.clone(), v);
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound parameter that received one.
    pub fn collect<T: Scalar>(&self, grads: &mut Gradients<T>) -> BTreeMap<String, ArrayD<T>> {
        self.vars.iter().filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g))).collect()
    }
}

/// A [`LayerGraph`] bound to parameter names under a prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub prefix: String,
    pub graph: LayerGraph,
    pub input_planes: usize,
}

/// Outputs of every layer of one forward pass.
pub struct Activations {
    pub layers: Vec<Var>,
}

impl Activations {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("network has layers")
    }
}

impl Network {
    pub fn new(prefix: impl Into<String>, graph: LayerGraph, input_planes: usize) -> Result<Self, ArchError> {
        let mut planes = input_planes;
        for (i, l) in graph.layers.iter().enumerate() {
            if l.kind == LayerKind::ResidualBlock && l.filters != planes {
                return Err(ArchError::Shape {
                    layer: i,
                    token: format!("R{}", l.filters),
                    reason: format!("residual block over {} planes receives {planes}", l.filters),
                });
            }
            planes = l.filters;
        }
        Ok(Self { prefix: prefix.into(), graph, input_planes })
    }

    pub fn output_planes(&self) -> usize {
        self.graph.output_planes()
    }

    fn layer_name(&self, i: usize) -> String {
        format!("{}/l{:02}", self.prefix, i)
    }

    /// Name and shape of every parameter, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut planes = self.input_planes;
        for (i, l) in self.graph.layers.iter().enumerate() {
            let base = self.layer_name(i);
            let k = l.kernel;
            match l.kind {
                LayerKind::ResidualBlock => {
                    for s in ["a", "b"] {
                        out.push((format!("{base}/weight_{s}"), vec![l.filters, l.filters, k, k]));
                        out.push((format!("{base}/bias_{s}"), vec![l.filters]));
                    }
                }
                LayerKind::UpConv => {
                    out.push((format!("{base}/weight"), vec![planes, l.filters, k, k]));
                    out.push((format!("{base}/bias"), vec![l.filters]));
                }
                _ => {
                    out.push((format!("{base}/weight"), vec![l.filters, planes, k, k]));
                    out.push((format!("{base}/bias"), vec![l.filters]));
                }
            }
            planes = l.filters;
        }
        out
    }

    /// Every parameter of this network is present in `store` with the expected shape.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(), ModelError> {
        for (name, shape) in self.param_shapes() {
            match store.get(&name) {
                None => return Err(ModelError::MissingParam(name)),
                Some(v) if v.shape() != shape.as_slice() => {
                    return Err(ModelError::ParamShape { name, expected: shape, found: v.shape().to_vec() })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Gaussian weights, zero biases.
    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> ParamStore<T> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let value = if name.rsplit('/').next().is_some_and(|p| p.starts_with("bias")) {
                ArrayD::zeros(IxDyn(&shape))
            } else {
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || T::of(normal.sample(rng)))
            };
            store.insert(name, value);
        }
        store
    }

    pub fn infer_shapes(&self, height: usize, width: usize) -> Result<Vec<LayerShape>, ArchError> {
        self.graph.infer_shapes(height, width, self.input_planes)
    }

    /// Run every layer. `fusion` is added to the output of the graph's fusion point.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var, fusion: Option<Var>) -> Activations {
        self.forward_until(tape, b, x, fusion, self.graph.layers.len())
    }

    /// Run the first `stop` layers only.
    pub fn forward_until<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var, fusion: Option<Var>, stop: usize) -> Activations {
        self.forward_range(tape, b, x, fusion, 0..stop)
    }

    /// Run layers `range`, feeding `x` to the first of them.
    pub fn forward_range<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        x: Var,
        fusion: Option<Var>,
        range: std::ops::Range<usize>,
    ) -> Activations {
        let mut cur = x;
        let mut layers = Vec::with_capacity(range.len());
        for (i, l) in self.graph.layers.iter().enumerate().take(range.end).skip(range.start) {
            let base = self.layer_name(i);
            cur = match l.kind {
                LayerKind::ResidualBlock => {
                    let p = tape.reflect_pad(cur, 1);
                    let y = tape.conv2d(p, b.get(&format!("{base}/weight_a")), Some(b.get(&format!("{base}/bias_a"))), ConvGeom::new(3, 1, 0));
                    let y = tape.instance_norm(y);
                    let y = tape.relu(y);
                    let p = tape.reflect_pad(y, 1);
                    let y = tape.conv2d(p, b.get(&format!("{base}/weight_b")), Some(b.get(&format!("{base}/bias_b"))), ConvGeom::new(3, 1, 0));
                    let y = tape.instance_norm(y);
                    tape.add(cur, y)
                }
                LayerKind::UpConv => {
                    let y = tape.conv_transpose2d(cur, b.get(&format!("{base}/weight")), Some(b.get(&format!("{base}/bias"))), ConvGeom::new(l.kernel, 2, 1));
                    post(tape, y, l.norm, l.activation)
                }
                _ => {
                    let stride = l.stride.ratio().0;
                    let (input, geom) = match l.padding {
                        Padding::Reflect => (tape.reflect_pad(cur, l.pad()), ConvGeom::new(l.kernel, stride, 0)),
                        Padding::Zero => (cur, ConvGeom::new(l.kernel, stride, l.pad())),
                    };
                    let y = tape.conv2d(input, b.get(&format!("{base}/weight")), Some(b.get(&format!("{base}/bias"))), geom);
                    post(tape, y, l.norm, l.activation)
                }
            };
            if self.graph.fusion_point == Some(i) {
                if let Some(f) = fusion {
                    cur = tape.add(cur, f);
                }
            }
            layers.push(cur);
        }
        Activations { layers }
    }
}

fn post<T: Scalar>(tape: &mut Tape<T>, y: Var, norm: Norm, act: Activation) -> Var {
    let y = match norm {
        Norm::Instance => tape.instance_norm(y),
        Norm::None => y,
    };
    match act {
        Activation::Relu => tape.relu(y),
        Activation::LeakyRelu => tape.leaky_relu(y, T::of(crate::arch::LEAKY_SLOPE)),
        Activation::Tanh => tape.tanh(y),
        Activation::None => y,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>, u64)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, moments: BTreeMap::new() }
    }

    /// Moments and step counts as named arrays (`adam/m/..`, `adam/v/..`, `adam/t/..`).
    pub fn export_state(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, (m, v, t)) in &self.moments {
            out.insert(format!("adam/m/{name}"), m.clone());
            out.insert(format!("adam/v/{name}"), v.clone());
            out.insert(format!("adam/t/{name}"), ArrayD::from_elem(IxDyn(&[]), T::of(*t as f64)));
        }
        out
    }

    /// Inverse of [`Adam::export_state`]; entries outside `adam/` are ignored.
    pub fn import_state(config: AdamConfig, state: &ParamStore<T>) -> Self {
        let mut moments = BTreeMap::new();
        for (key, m) in state.iter() {
            let Some(name) = key.strip_prefix("adam/m/") else { continue };
            let (Some(v), Some(t)) = (state.get(&format!("adam/v/{name}")), state.get(&format!("adam/t/{name}"))) else {
                continue;
            };
            let t = t.iter().next().map_or(0, |x| x.to_f64_lossy() as u64);
            moments.insert(name.to_string(), (m.clone(), v.clone(), t));
        }
        Self { config, moments }
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, ArrayD<T>>, lr: f64) {
        let (b1, b2) = (T::of(self.config.beta1), T::of(self.config.beta2));
        let eps = T::of(self.config.eps);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let (m, v, t) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim()), 0));
            *t += 1;
            let c1 = T::one() - b1.powi(*t as i32);
            let c2 = T::one() - b2.powi(*t as i32);
            let step = T::of(lr);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - step * mh / (vh.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use rand::SeedableRng;

    #[test]
    fn param_shapes_follow_layer_kinds() {
        let net = Network::new("g", parse_arch("c7s1-4,d8,R8,u4,c7s1-3").unwrap(), 5).unwrap();
        let shapes: BTreeMap<_, _> = net.param_shapes().into_iter().collect();
        assert_eq!(shapes["g/l00/weight"], vec![4, 5, 7, 7]);
        assert_eq!(shapes["g/l01/weight"], vec![8, 4, 3, 3]);
        assert_eq!(shapes["g/l02/weight_b"], vec![8, 8, 3, 3]);
        assert_eq!(shapes["g/l03/weight"], vec![8, 4, 3, 3]);
        assert_eq!(shapes["g/l04/bias"], vec![3]);
        let total: usize = shapes.values().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, net.graph.param_count(5));
    }

    #[test]
    fn forward_shapes_match_inference() {
        let net = Network::new("g", parse_arch("c7s1-4,d8,R8,u4,c7s1-3").unwrap(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = net.init_params::<f32>(&mut rng);
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        b.bind(&mut tape, &store, "g/", false);
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 8, 12]), 0.3f32));
        let acts = net.forward(&mut tape, &b, x, None);
        let shapes = net.infer_shapes(8, 12).unwrap();
        for (v, s) in acts.layers.iter().zip(&shapes) {
            assert_eq!(tape.value(*v).shape(), &[1, s.planes, s.height, s.width]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("p", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grads, 0.1);
        let p = store.get("p").unwrap();
        assert!((p[[0]] - 0.9).abs() < 1e-6);
        assert!((p[[1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f32>::new();
        store.insert("p", ArrayD::from_elem(IxDyn(&[3]), 0.25));
        let before = store.clone();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[3]), 1.0));
        Adam::new(AdamConfig::default()).step(&mut store, &grads, 0.0);
        assert_eq!(store, before);
    }
}
