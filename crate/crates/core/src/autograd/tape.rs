use std::sync::Arc;

use ndarray::{Array4, ArrayD, ArrayView4, Axis, Ix4, IxDyn, Zip};

use super::kernels::{self, ConvGeom};
use super::regions::RegionIndex;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ReflectPad { x: Var, pad: usize },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    AvgPool2 { x: Var },
    RegionPool { x: Var, src: Arc<Vec<RegionIndex>>, dst: Arc<Vec<RegionIndex>> },
    LsTarget { x: Var, target: T },
    L1Mean { a: Var, b: Var },
    WeightedSum { parts: Vec<(Var, T)> },
    SoftmaxCe { logits: Var, labels: Arc<Vec<u8>>, probs: Array4<T>, class_weights: Vec<T>, norm: T },
}

struct Node<T> {
    value: Arc<ArrayD<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Reverse-mode recording of one forward computation.
///
/// Every op appends a node holding its value; [`Tape::backward`] walks the
/// nodes in reverse and accumulates gradients only along paths that reach a
/// leaf created with `requires_grad`.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as4<T>(a: &ArrayD<T>) -> ArrayView4<'_, T> {
    a.view().into_dimensionality::<Ix4>().expect("tensor is 4-d")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Arc<ArrayD<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn constant4(&mut self, value: Array4<T>) -> Var {
        self.constant(value.into_dyn())
    }

    /// Copy of `v`'s value with no path back to its producers.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<ArrayD<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn value4(&self, v: Var) -> ArrayView4<'_, T> {
        as4(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().expect("scalar node")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let bias: Option<Vec<T>> = b.map(|b| self.value(b).iter().copied().collect());
        let out = kernels::conv2d(self.value4(x), self.value4(w), bias.as_deref(), geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out.into_dyn(), rg, Op::Conv2d { x, w, b, geom })
    }

    /// Transposed convolution producing `2x` (for stride 2) spatial output.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let bias: Option<Vec<T>> = b.map(|b| self.value(b).iter().copied().collect());
        let out = kernels::conv_transpose2d(self.value4(x), self.value4(w), bias.as_deref(), geom, geom.stride - 1);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out.into_dyn(), rg, Op::ConvTranspose2d { x, w, b, geom })
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        if pad == 0 {
            return x;
        }
        let out = kernels::reflect_pad(self.value4(x), pad);
        let rg = self.rg(x);
        self.push(out.into_dyn(), rg, Op::ReflectPad { x, pad })
    }

    pub fn instance_norm(&mut self, x: Var) -> Var {
        let (out, inv_std) = kernels::instance_norm(self.value4(x));
        let rg = self.rg(x);
        self.push(out.into_dyn(), rg, Op::InstanceNorm { x, inv_std })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).mapv(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, rg, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, rg, Op::Tanh { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Add { a, b })
    }

    /// Concatenate along the plane axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat parts agree except in planes");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, rg, Op::Concat { parts: parts.to_vec() })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = kernels::avg_pool2(self.value4(x));
        let rg = self.rg(x);
        self.push(out.into_dyn(), rg, Op::AvgPool2 { x })
    }

    /// Average `x` over each region of `src` and broadcast the means onto the
    /// pixels of `dst` (which may have a different resolution). Pixels of
    /// `dst` outside every region, or in regions absent from `src`, get zero.
    pub fn region_pool(&mut self, x: Var, src: Arc<Vec<RegionIndex>>, dst: Arc<Vec<RegionIndex>>) -> Var {
        let out = super::regions::pool_forward(self.value4(x), &src, &dst);
        let rg = self.rg(x);
        self.push(out.into_dyn(), rg, Op::RegionPool { x, src, dst })
    }

    /// `mean((x - target)^2) / 2`.
    pub fn ls_target(&mut self, x: Var, target: T) -> Var {
        let v = self.value(x);
        let n = T::of_usize(v.len());
        let s = v.fold(T::zero(), |a, &e| a + (e - target) * (e - target)) / n * T::of(0.5);
        let rg = self.rg(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), rg, Op::LsTarget { x, target })
    }

    /// `mean(|a - b|)`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l1_mean operands differ in shape");
        let n = T::of_usize(va.len());
        let s = Zip::from(va).and(vb).fold(T::zero(), |acc, &p, &q| acc + (p - q).abs()) / n;
        let rg = self.rg(a) || self.rg(b);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), rg, Op::L1Mean { a, b })
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[(Var, T)]) -> Var {
        let s = parts.iter().fold(T::zero(), |acc, &(v, w)| acc + self.scalar(v) * w);
        let rg = parts.iter().any(|&(v, _)| self.rg(v));
        self.push(ArrayD::from_elem(IxDyn(&[]), s), rg, Op::WeightedSum { parts: parts.to_vec() })
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let weighted: Vec<_> = parts.iter().map(|&p| (p, T::one())).collect();
        self.weighted_sum(&weighted)
    }

    /// Mean per-pixel softmax cross-entropy; `labels` is `n*h*w` class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<Vec<u8>>) -> Var {
        let c = self.value4(logits).dim().1;
        self.softmax_cross_entropy_weighted(logits, labels, &vec![T::one(); c])
    }

    /// Cross-entropy with per-class pixel weights, normalized by the total
    /// weight of the labelled pixels.
    pub fn softmax_cross_entropy_weighted(&mut self, logits: Var, labels: Arc<Vec<u8>>, class_weights: &[T]) -> Var {
        let l = self.value4(logits);
        let (n, c, h, w) = l.dim();
        assert_eq!(labels.len(), n * h * w, "label count");
        assert_eq!(class_weights.len(), c, "one weight per class");
        let mut probs = Array4::<T>::zeros((n, c, h, w));
        let mut total = T::zero();
        let mut norm = T::zero();
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let m = (0..c).map(|k| l[[i, k, y, x]]).fold(T::neg_infinity(), T::max);
                    let z: T = (0..c).map(|k| (l[[i, k, y, x]] - m).exp()).sum();
                    for k in 0..c {
                        probs[[i, k, y, x]] = (l[[i, k, y, x]] - m).exp() / z;
                    }
                    let t = labels[(i * h + y) * w + x] as usize;
                    let wt = class_weights[t];
                    total = total - wt * (l[[i, t, y, x]] - m - z.ln());
                    norm = norm + wt;
                }
            }
        }
        let s = total / norm;
        let rg = self.rg(logits);
        let class_weights = class_weights.to_vec();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), rg, Op::SoftmaxCe { logits, labels, probs, class_weights, norm })
    }

    /// Gradients of scalar `loss` with respect to every node requiring grad.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            // interior gradients are dropped once propagated
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, d: ArrayD<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.zip_mut_with(&d, |a, &b| *a = *a + b),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let r = kernels::conv2d_backward(self.value4(*x), self.value4(*w), as4(g), *geom, need);
                if let Some(dx) = r.dx {
                    acc(*x, dx.into_dyn());
                }
                if let Some(dw) = r.dw {
                    acc(*w, dw.into_dyn());
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, db.into_dyn());
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let r = kernels::conv_transpose2d_backward(self.value4(*x), self.value4(*w), as4(g), *geom, need);
                if let Some(dx) = r.dx {
                    acc(*x, dx.into_dyn());
                }
                if let Some(dw) = r.dw {
                    acc(*w, dw.into_dyn());
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, db.into_dyn());
                }
            }
            Op::ReflectPad { x, pad } => {
                let (_, _, h, w) = self.value4(*x).dim();
                acc(*x, kernels::reflect_pad_backward(as4(g), *pad, h, w).into_dyn());
            }
            Op::InstanceNorm { x, inv_std } => {
                let d = kernels::instance_norm_backward(as4(&node.value), inv_std, as4(g));
                acc(*x, d.into_dyn());
            }
            Op::Relu { x } => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*node.value).for_each(|d, &y| {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                });
                acc(*x, d);
            }
            Op::LeakyRelu { x, slope } => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    if v <= T::zero() {
                        *d = *d * *slope;
                    }
                });
                acc(*x, d);
            }
            Op::Tanh { x } => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*node.value).for_each(|d, &y| *d = *d * (T::one() - y * y));
                acc(*x, d);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let planes = self.value(p).shape()[1];
                    if self.rg(p) {
                        let d = g.slice_axis(Axis(1), (start..start + planes).into()).to_owned();
                        acc(p, d);
                    }
                    start += planes;
                }
            }
            Op::AvgPool2 { x } => acc(*x, kernels::avg_pool2_backward(as4(g)).into_dyn()),
            Op::RegionPool { x, src, dst } => {
                let (n, c, h, w) = self.value4(*x).dim();
                let d = super::regions::pool_backward(as4(g), src, dst, (n, c, h, w));
                acc(*x, d.into_dyn());
            }
            Op::LsTarget { x, target } => {
                let gs = *g.iter().next().expect("scalar grad");
                let v = self.value(*x);
                let n = T::of_usize(v.len());
                acc(*x, v.mapv(|e| (e - *target) / n * gs));
            }
            Op::L1Mean { a, b } => {
                let gs = *g.iter().next().expect("scalar grad");
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = T::of_usize(va.len());
                let sign = Zip::from(va).and(vb).map_collect(|&p, &q| {
                    let d = p - q;
                    if d > T::zero() {
                        gs / n
                    } else if d < T::zero() {
                        -gs / n
                    } else {
                        T::zero()
                    }
                });
                if self.rg(*b) {
                    acc(*b, sign.mapv(|s| -s));
                }
                acc(*a, sign);
            }
            Op::WeightedSum { parts } => {
                let gs = *g.iter().next().expect("scalar grad");
                for &(p, w) in parts {
                    acc(p, ArrayD::from_elem(IxDyn(&[]), gs * w));
                }
            }
            Op::SoftmaxCe { logits, labels, probs, class_weights, norm } => {
                let gs = *g.iter().next().expect("scalar grad");
                let (n, c, h, w) = probs.dim();
                let scale = gs / *norm;
                let mut d = probs.clone();
                for i in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let t = labels[(i * h + y) * w + x] as usize;
                            let f = class_weights[t] * scale;
                            for k in 0..c {
                                d[[i, k, y, x]] = d[[i, k, y, x]] * f;
                            }
                            d[[i, t, y, x]] = d[[i, t, y, x]] - f;
                        }
                    }
                }
                acc(*logits, d.into_dyn());
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
