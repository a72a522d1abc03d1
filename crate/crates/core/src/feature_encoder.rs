//! Instance-level style features: an encoder-decoder whose output is averaged
//! over each instance, harvesting of per-instance vectors, per-class k-means
//! style catalogs, and style selection for synthesis.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{parse_arch, ArchError, LayerGraph, ENCODER};
use crate::autograd::{RegionIndex, Tape, Var};
use crate::data::{stack, Dataset, InstanceMap, LabelMap, StyleVector};
use crate::error::ModelError;
use crate::generator::to4;
use crate::nn::{Bindings, Network, ParamStore};
use crate::scalar::Scalar;

pub const ENCODER_PREFIX: &str = "enc";
/// Default number of styles per class.
pub const DEFAULT_K: usize = 10;
pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub net: Network,
}

impl Encoder {
    pub fn new(divisor: usize) -> Result<Self, ArchError> {
        Self::from_graph(parse_arch(ENCODER)?.scaled(divisor))
    }

    pub fn from_graph(graph: LayerGraph) -> Result<Self, ArchError> {
        Ok(Self { net: Network::new(ENCODER_PREFIX, graph, 3)? })
    }

    pub fn output_planes(&self) -> usize {
        self.net.output_planes()
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, b: &mut Bindings, requires_grad: bool) {
        b.bind(tape, store, &format!("{ENCODER_PREFIX}/"), requires_grad);
    }

    /// Encode `image` and average the result over the regions of `src`,
    /// writing each mean to the pixels of the same region in `dst`.
    pub fn forward_pooled<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        image: Var,
        src: Arc<Vec<RegionIndex>>,
        dst: Arc<Vec<RegionIndex>>,
    ) -> Var {
        let raw = self.net.forward(tape, b, image, None).output();
        tape.region_pool(raw, src, dst)
    }

    /// Pooled features of a batch of images at their own resolution.
    pub fn encode_pooled<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Array4<T>,
        instances: &[InstanceMap],
    ) -> Result<Array4<T>, ModelError> {
        self.net.check_params(store)?;
        let (n, p, h, w) = images.dim();
        if p != 3 {
            return Err(ModelError::PlaneMismatch { what: "encoder image", expected: 3, found: p });
        }
        check_instances(instances, n, (h, w))?;
        self.net.infer_shapes(h, w)?;
        let idx = Arc::new(instances.iter().map(|m| instance_regions(m, &InstanceIds::of(m))).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        self.bind(&mut tape, store, &mut b, false);
        let x = tape.constant4(images.clone());
        let out = self.forward_pooled(&mut tape, &b, x, Arc::clone(&idx), idx);
        Ok(to4(&tape, out))
    }
}

fn check_instances(instances: &[InstanceMap], n: usize, dims: (usize, usize)) -> Result<(), ModelError> {
    if instances.len() != n {
        return Err(ModelError::Invalid(format!("{} instance maps for a batch of {n}", instances.len())));
    }
    if let Some(m) = instances.iter().find(|m| m.dims() != dims) {
        return Err(ModelError::Dims(format!("instance map {:?} vs image {:?}", m.dims(), dims)));
    }
    Ok(())
}

/// Region numbering of the non-zero instance ids of one map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceIds {
    pub ids: Vec<u16>,
}

impl InstanceIds {
    pub fn of(map: &InstanceMap) -> Self {
        Self { ids: map.ids().into_iter().filter(|&i| i != 0).collect() }
    }

    fn region(&self, id: u16) -> Option<u32> {
        self.ids.binary_search(&id).ok().map(|r| r as u32)
    }
}

/// Pixel-to-region index of `map` under `ids`. Id 0 and ids absent from `ids` are unpooled.
pub fn instance_regions(map: &InstanceMap, ids: &InstanceIds) -> RegionIndex {
    let (h, w) = map.dims();
    let assignment = map.grid().iter().map(|&id| if id == 0 { None } else { ids.region(id) }).collect();
    RegionIndex::new(h, w, assignment, ids.ids.len())
}

/// Instance-wise average pooling of raw per-pixel values (`N x P x H x W`).
/// Pixels with instance id 0 are set to zero.
pub fn instance_average_pool<T: Scalar>(raw: &Array4<T>, instances: &[InstanceMap]) -> Result<Array4<T>, ModelError> {
    let (n, _, h, w) = raw.dim();
    check_instances(instances, n, (h, w))?;
    let idx = Arc::new(instances.iter().map(|m| instance_regions(m, &InstanceIds::of(m))).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let x = tape.constant4(raw.clone());
    let y = tape.region_pool(x, Arc::clone(&idx), idx);
    Ok(to4(&tape, y))
}

/// The vector of every non-zero instance, read from pooled features (`3 x H x W`).
pub fn instance_vectors<T: Scalar>(pooled: ArrayView3<'_, T>, instance: &InstanceMap) -> BTreeMap<u16, StyleVector> {
    let mut out = BTreeMap::new();
    for ((y, x), &id) in instance.grid().indexed_iter() {
        if id != 0 && !out.contains_key(&id) {
            out.insert(id, [0, 1, 2].map(|k| pooled[[k, y, x]].to_f64_lossy()));
        }
    }
    out
}

/// Feature vector of one instance of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFeature {
    pub image_id: String,
    pub instance_id: u16,
    pub class_id: u8,
    pub vector: StyleVector,
}

/// Harvested features plus instances listed in metadata that had no pixels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Harvest {
    pub features: Vec<InstanceFeature>,
    pub skipped: Vec<(String, u16)>,
}

/// Run the encoder on every image and record one vector per instance.
pub fn harvest_features(
    encoder: &Encoder,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Harvest, ModelError> {
    let mut out = Harvest::default();
    for chunk in dataset.samples.chunks(batch_size.max(1)) {
        let images = stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
        let maps: Vec<InstanceMap> = chunk.iter().map(|s| s.instance.clone()).collect();
        let pooled = encoder.encode_pooled(store, &images, &maps)?;
        for (i, s) in chunk.iter().enumerate() {
            let classes = s.instance.classes(&s.label);
            let vectors = instance_vectors(pooled.index_axis(Axis(0), i), &s.instance);
            for (&id, &vector) in &vectors {
                out.features.push(InstanceFeature { image_id: s.id.clone(), instance_id: id, class_id: classes[&id], vector });
            }
            if let Some(meta) = dataset.sample_meta(&s.id) {
                for inst in meta.instances.iter().filter(|m| !vectors.contains_key(&m.id)) {
                    log::warn!("sample {} instance {} has no pixels; skipped", s.id, inst.id);
                    out.skipped.push((s.id.clone(), inst.id));
                }
            }
        }
    }
    Ok(out)
}

/// Result of one k-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Vec<StyleVector>,
    pub assignments: Vec<usize>,
    pub counts: Vec<usize>,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &StyleVector, b: &StyleVector) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &StyleVector, centers: &[StyleVector]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. Uses `min(k, n)` centers.
pub fn kmeans(points: &[StyleVector], k: usize, seed: u64) -> KMeans {
    let k = k.min(points.len());
    if k == 0 {
        return KMeans { centers: Vec::new(), assignments: Vec::new(), counts: Vec::new(), inertia_history: Vec::new(), iterations: 0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centers[centers.len() - 1]));
        }
    }

    let mut assignments = vec![0; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut inertia = 0.0;
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centers);
            inertia += d;
            changed |= *a != j;
            *a = j;
        }
        let prev = history.last().copied();
        history.push(inertia);
        let converged = match prev {
            Some(prev) => !changed || prev - inertia <= KMEANS_REL_TOL * prev,
            None => false,
        };
        if converged || iterations >= KMEANS_MAX_ITERS {
            break;
        }
        // means are accumulated as offsets from a member so identical points average exactly
        let mut refs: Vec<Option<StyleVector>> = vec![None; k];
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            let r = *refs[a].get_or_insert(*p);
            counts[a] += 1;
            for d in 0..3 {
                sums[a][d] += p[d] - r[d];
            }
        }
        for j in 0..k {
            // an empty cluster keeps its previous center
            if let Some(r) = refs[j] {
                centers[j] = [0, 1, 2].map(|d| r[d] + sums[j][d] / counts[j] as f64);
            }
        }
    }
    let mut counts = vec![0; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    KMeans { centers, assignments, counts, inertia_history: history, iterations }
}

/// Selectable style centers of one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStyles {
    pub centers: Vec<StyleVector>,
    pub counts: Vec<usize>,
}

/// Per-class style centers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleCatalog {
    pub k: usize,
    pub classes: BTreeMap<u8, ClassStyles>,
}

impl StyleCatalog {
    pub fn centers(&self, class: u8) -> &[StyleVector] {
        self.classes.get(&class).map_or(&[], |c| &c.centers)
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Cluster every class's features separately. Every class in
/// `0..num_classes` gets an entry, possibly empty.
pub fn build_style_catalog(features: &[InstanceFeature], num_classes: usize, k: usize, seed: u64) -> StyleCatalog {
    let mut classes = BTreeMap::new();
    for c in 0..num_classes {
        let points: Vec<StyleVector> = features.iter().filter(|f| f.class_id as usize == c).map(|f| f.vector).collect();
        let km = kmeans(&points, k, seed.wrapping_add(c as u64));
        classes.insert(c as u8, ClassStyles { centers: km.centers, counts: km.counts });
    }
    StyleCatalog { k, classes }
}

/// How to pick the style of one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSelection {
    Cluster(usize),
    Vector(StyleVector),
    #[default]
    Random,
}

#[derive(Debug, Error, PartialEq)]
pub enum StyleError {
    #[error("instance {instance} (class {class}): cluster {index} requested but only {available} exist")]
    ClusterOutOfRange { instance: u16, class: u8, index: usize, available: usize },
    #[error("instance {instance} (class {class}): the catalog has no styles for this class")]
    NoStyles { instance: u16, class: u8 },
    #[error("instance {0} is not present in the instance map")]
    UnknownInstance(u16),
    #[error("instance {0}: style vector must be finite")]
    NonFinite(u16),
}

/// Resolve a style vector for every non-zero instance. Instances without a
/// selection are drawn at random; random draws are uniform over the class's
/// centers and seeded by `seed`.
pub fn sample_styles(
    catalog: &StyleCatalog,
    instance: &InstanceMap,
    label: &LabelMap,
    selection: &BTreeMap<u16, StyleSelection>,
    seed: u64,
) -> Result<BTreeMap<u16, StyleVector>, StyleError> {
    let classes = instance.classes(label);
    if let Some(&id) = selection.keys().find(|id| !classes.contains_key(id) || **id == 0) {
        return Err(StyleError::UnknownInstance(id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (&id, &class) in classes.iter().filter(|(&id, _)| id != 0) {
        let centers = catalog.centers(class);
        let v = match selection.get(&id).copied().unwrap_or_default() {
            StyleSelection::Vector(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(StyleError::NonFinite(id));
                }
                v
            }
            StyleSelection::Cluster(index) => *centers.get(index).ok_or(StyleError::ClusterOutOfRange {
                instance: id,
                class,
                index,
                available: centers.len(),
            })?,
            StyleSelection::Random => {
                if centers.is_empty() {
                    return Err(StyleError::NoStyles { instance: id, class });
                }
                centers[rng.random_range(0..centers.len())]
            }
        };
        out.insert(id, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_conditioning;
    use ndarray::{array, Array2};
    use proptest::prelude::{any, prop_assert, proptest};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn pooling_toy_mean() {
        let inst = InstanceMap::new(array![[1u16, 1, 2], [1, 2, 2]]);
        let raw = Array4::from_shape_vec((1, 1, 2, 3), vec![1.0, 3.0, 5.0, 2.0, 7.0, 9.0]).unwrap();
        let pooled = instance_average_pool(&raw, &[inst]).unwrap();
        assert_eq!(pooled.into_raw_vec_and_offset().0, vec![2.0, 2.0, 7.0, 2.0, 7.0, 7.0]);
    }

    #[test]
    fn encoder_output_dims() {
        let e = Encoder::new(4).unwrap();
        assert_eq!(e.output_planes(), 3);
        let store = e.net.init_params::<f32>(&mut ChaCha8Rng::seed_from_u64(0));
        let img = Array4::from_elem((1, 3, 32, 64), 0.1f32);
        let inst = InstanceMap::new(Array2::from_shape_fn((32, 64), |(y, _)| (y / 8) as u16));
        let out = e.encode_pooled(&store, &img, &[inst]).unwrap();
        assert_eq!(out.dim(), (1, 3, 32, 64));
    }

    proptest! {
        #[test]
        fn pooled_constant_and_mean_preserving(
            h in 1usize..12, w in 1usize..12, seed in any::<u64>(), ids in 1u16..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = InstanceMap::new(Array2::from_shape_simple_fn((h, w), || rng.random_range(0..=ids)));
            let raw = Array4::from_shape_simple_fn((1, 3, h, w), || rng.random_range(-1.0..1.0f64));
            let pooled = instance_average_pool(&raw, std::slice::from_ref(&inst)).unwrap();
            for id in InstanceIds::of(&inst).ids {
                for c in 0..3 {
                    let pix: Vec<(usize, usize)> = inst.grid().indexed_iter().filter(|(_, &v)| v == id).map(|(p, _)| p).collect();
                    let vals: Vec<f64> = pix.iter().map(|&(y, x)| pooled[[0, c, y, x]]).collect();
                    let raws: Vec<f64> = pix.iter().map(|&(y, x)| raw[[0, c, y, x]]).collect();
                    let (lo, hi) = vals.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                    prop_assert!(hi - lo <= 1e-12);
                    let m1 = vals.iter().sum::<f64>() / vals.len() as f64;
                    let m2 = raws.iter().sum::<f64>() / raws.len() as f64;
                    prop_assert!((m1 - m2).abs() < 1e-9);
                }
            }
        }
    }

    fn blobs(seed: u64) -> (Vec<StyleVector>, [StyleVector; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = [[1.0, 1.0, 1.0], [-1.0, 0.5, -1.0]];
        let noise = Normal::new(0.0, 0.05).unwrap();
        let pts = (0..200).map(|i| means[i % 2].map(|m| m + noise.sample(&mut rng))).collect();
        (pts, means)
    }

    #[test]
    fn kmeans_recovers_blobs_monotonically() {
        let (pts, means) = blobs(7);
        let km = kmeans(&pts, 2, 3);
        assert!(km.inertia_history.windows(2).all(|w| w[1] <= w[0]));
        for m in means {
            let best = km.centers.iter().map(|c| dist2(c, &m).sqrt()).fold(f64::MAX, f64::min);
            assert!(best < 0.05, "{best}");
        }
        assert_eq!(km, kmeans(&pts, 2, 3));
        for (p, &a) in pts.iter().zip(&km.assignments) {
            assert_eq!(nearest(p, &km.centers).0, a);
        }
    }

    #[test]
    fn kmeans_degenerate_cases() {
        let same = vec![[0.2, -0.1, 0.4]; 10];
        let km = kmeans(&same, 10, 0);
        assert_eq!(km.centers.len(), 10);
        assert!(km.centers.iter().all(|c| *c == same[0]));
        assert_eq!(kmeans(&same[..3], 10, 0).centers.len(), 3);
        assert!(kmeans(&[], 10, 0).centers.is_empty());
    }

    fn catalog() -> StyleCatalog {
        let mut classes = BTreeMap::new();
        classes.insert(0, ClassStyles::default());
        classes.insert(1, ClassStyles { centers: vec![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]], counts: vec![3, 4] });
        StyleCatalog { k: 10, classes }
    }

    #[test]
    fn style_selection_rules() {
        let label = LabelMap::new(array![[0u8, 1, 1], [0, 1, 1]], 2).unwrap();
        let inst = InstanceMap::checked(array![[0u16, 4, 4], [0, 4, 4]], &label).unwrap();
        let cat = catalog();
        let pick = |sel: StyleSelection| sample_styles(&cat, &inst, &label, &BTreeMap::from([(4, sel)]), 1);
        assert_eq!(pick(StyleSelection::Cluster(0)).unwrap()[&4], [0.1, 0.2, 0.3]);
        assert_eq!(pick(StyleSelection::Vector([1.0, 2.0, 3.0])).unwrap()[&4], [1.0, 2.0, 3.0]);
        assert!(matches!(pick(StyleSelection::Cluster(2)), Err(StyleError::ClusterOutOfRange { available: 2, .. })));
        assert_eq!(pick(StyleSelection::Random), pick(StyleSelection::Random));
        let unknown = sample_styles(&cat, &inst, &label, &BTreeMap::from([(9, StyleSelection::Random)]), 1);
        assert_eq!(unknown, Err(StyleError::UnknownInstance(9)));
    }

    #[test]
    fn cluster_change_alters_only_that_instance() {
        let label = LabelMap::new(array![[0u8, 1, 1, 1], [0, 1, 1, 1]], 2).unwrap();
        let inst = InstanceMap::checked(array![[0u16, 4, 4, 5], [0, 4, 4, 5]], &label).unwrap();
        let cat = catalog();
        let a = sample_styles(&cat, &inst, &label, &BTreeMap::from([(4, StyleSelection::Cluster(0)), (5, StyleSelection::Cluster(0))]), 0).unwrap();
        let b = sample_styles(&cat, &inst, &label, &BTreeMap::from([(4, StyleSelection::Cluster(1)), (5, StyleSelection::Cluster(0))]), 0).unwrap();
        let ca = build_conditioning::<f64>(&label, &inst, Some(&a)).unwrap();
        let cb = build_conditioning::<f64>(&label, &inst, Some(&b)).unwrap();
        for ((p, y, x), v) in ca.planes.indexed_iter() {
            let differs = *v != cb.planes[[p, y, x]];
            assert_eq!(differs, p >= 3 && inst.grid()[[y, x]] == 4);
        }
    }

    #[test]
    fn catalog_json_round_trip() {
        let cat = catalog();
        assert_eq!(StyleCatalog::from_json(&cat.to_json().unwrap()).unwrap(), cat);
    }
}
