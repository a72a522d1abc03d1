use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4, Axis};

use super::DataError;
use crate::scalar::Scalar;

/// Per-pixel class ids in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    grid: Array2<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(grid: Array2<u8>, num_classes: usize) -> Result<Self, DataError> {
        if num_classes < 2 {
            return Err(DataError::TooFewClasses(num_classes));
        }
        if let Some(((y, x), &v)) = grid.indexed_iter().find(|(_, &v)| v as usize >= num_classes) {
            return Err(DataError::InvalidLabel { value: v as usize, num_classes, y, x });
        }
        Ok(Self { grid, num_classes })
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Keep the top-left pixel of every 2x2 block.
    pub fn downsample_nearest(&self) -> LabelMap {
        LabelMap { grid: nearest_half(&self.grid), num_classes: self.num_classes }
    }
}

/// Per-pixel object ids; 0 means the pixel belongs to no object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    grid: Array2<u16>,
}

impl InstanceMap {
    pub fn new(grid: Array2<u16>) -> Self {
        Self { grid }
    }

    /// Build and check that every object lies inside a single class.
    pub fn checked(grid: Array2<u16>, label: &LabelMap) -> Result<Self, DataError> {
        if grid.dim() != label.dims() {
            return Err(DataError::DimMismatch { what: "instance map", expected: label.dims(), found: grid.dim() });
        }
        let mut class_of: BTreeMap<u16, u8> = BTreeMap::new();
        for (&id, &c) in grid.iter().zip(label.grid.iter()) {
            if id == 0 {
                continue;
            }
            if let Some(&prev) = class_of.get(&id) {
                if prev != c {
                    return Err(DataError::InconsistentInstance { instance: id, classes: (prev, c) });
                }
            } else {
                class_of.insert(id, c);
            }
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Array2<u16> {
        &self.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Sorted nonzero ids present in the map.
    pub fn ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.grid.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Class of every nonzero instance, read from `label`.
    pub fn classes(&self, label: &LabelMap) -> BTreeMap<u16, u8> {
        let mut out = BTreeMap::new();
        for (&id, &c) in self.grid.iter().zip(label.grid.iter()) {
            if id != 0 {
                out.entry(id).or_insert(c);
            }
        }
        out
    }

    pub fn downsample_nearest(&self) -> InstanceMap {
        InstanceMap { grid: nearest_half(&self.grid) }
    }
}

fn nearest_half<V: Copy>(grid: &Array2<V>) -> Array2<V> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| grid[[2 * y, 2 * x]])
}

/// 1 where a pixel's instance id differs from an in-bounds 4-neighbor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMap {
    grid: Array2<u8>,
}

impl BoundaryMap {
    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }
}

pub fn compute_boundary_map(instance: &InstanceMap) -> BoundaryMap {
    let g = &instance.grid;
    let (h, w) = g.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    // mark both sides of every differing horizontal and vertical pair
    for y in 0..h {
        for x in 0..w {
            let v = g[[y, x]];
            if x + 1 < w && g[[y, x + 1]] != v {
                out[[y, x]] = 1;
                out[[y, x + 1]] = 1;
            }
            if y + 1 < h && g[[y + 1, x]] != v {
                out[[y, x]] = 1;
                out[[y + 1, x]] = 1;
            }
        }
    }
    BoundaryMap { grid: out }
}

/// `C` binary planes; plane `c` is 1 exactly where the label is `c`.
pub fn encode_one_hot<T: Scalar>(label: &LabelMap) -> Array3<T> {
    let (h, w) = label.dims();
    let mut out = Array3::<T>::zeros((label.num_classes, h, w));
    for ((y, x), &c) in label.grid.indexed_iter() {
        out[[c as usize, y, x]] = T::one();
    }
    out
}

/// Checked variant for raw grids that have not been validated yet.
pub fn encode_one_hot_grid<T: Scalar>(grid: &Array2<u8>, num_classes: usize) -> Result<Array3<T>, DataError> {
    let label = LabelMap::new(grid.clone(), num_classes)?;
    Ok(encode_one_hot(&label))
}

pub type StyleVector = [f64; 3];

/// Number of per-instance style planes appended when features are used.
pub const FEATURE_PLANES: usize = 3;

/// Generator conditioning: one-hot labels, instance boundaries and optional
/// per-instance style planes, stacked along the first axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningTensor<T> {
    pub planes: Array3<T>,
    pub num_classes: usize,
    pub feature_planes: usize,
}

impl<T: Scalar> ConditioningTensor<T> {
    pub fn plane_count(&self) -> usize {
        self.planes.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.planes.dim();
        (h, w)
    }

    /// One-hot and boundary planes only.
    pub fn label_planes(&self) -> Array3<T> {
        self.planes.slice_axis(Axis(0), (0..self.num_classes + 1).into()).to_owned()
    }

    /// Zero the boundary plane (models trained without instance maps).
    pub fn without_boundary(mut self) -> Self {
        self.planes.index_axis_mut(Axis(0), self.num_classes).fill(T::zero());
        self
    }
}

/// Stack `one_hot ∥ boundary ∥ features`. Features are broadcast over each
/// instance's pixels; pixels with instance id 0 get zero features.
pub fn build_conditioning<T: Scalar>(
    label: &LabelMap,
    instance: &InstanceMap,
    features: Option<&BTreeMap<u16, StyleVector>>,
) -> Result<ConditioningTensor<T>, DataError> {
    if instance.dims() != label.dims() {
        return Err(DataError::DimMismatch { what: "instance map", expected: label.dims(), found: instance.dims() });
    }
    let (h, w) = label.dims();
    let c = label.num_classes;
    let extra = if features.is_some() { FEATURE_PLANES } else { 0 };
    let mut planes = Array3::<T>::zeros((c + 1 + extra, h, w));
    planes.slice_axis_mut(Axis(0), (0..c).into()).assign(&encode_one_hot::<T>(label));
    let boundary = compute_boundary_map(instance);
    planes.index_axis_mut(Axis(0), c).zip_mut_with(&boundary.grid, |p, &b| *p = T::of(b as f64));
    if let Some(features) = features {
        for id in instance.ids() {
            if !features.contains_key(&id) {
                return Err(DataError::IncompleteStyle { instance: id });
            }
        }
        for ((y, x), &id) in instance.grid.indexed_iter() {
            if id == 0 {
                continue;
            }
            let f = features[&id];
            for (k, &v) in f.iter().enumerate() {
                planes[[c + 1 + k, y, x]] = T::of(v);
            }
        }
    }
    Ok(ConditioningTensor { planes, num_classes: c, feature_planes: extra })
}

/// Conditioning at full and half resolution. The half-resolution maps are
/// nearest-downsampled and their boundaries recomputed.
pub fn build_conditioning_pair<T: Scalar>(
    label: &LabelMap,
    instance: &InstanceMap,
    features: Option<&BTreeMap<u16, StyleVector>>,
) -> Result<(ConditioningTensor<T>, ConditioningTensor<T>), DataError> {
    let full = build_conditioning(label, instance, features)?;
    let half = build_conditioning(&label.downsample_nearest(), &instance.downsample_nearest(), features)?;
    Ok((full, half))
}

/// Full, half and quarter resolution copies of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid<T> {
    pub levels: Vec<Array3<T>>,
}

pub const PYRAMID_LEVELS: usize = 3;

/// Three-level pyramid by repeated 2x2 mean pooling.
pub fn build_pyramid<T: Scalar>(image: &Array3<T>) -> Result<ImagePyramid<T>, DataError> {
    let (_, h, w) = image.dim();
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(DataError::Shape(format!("pyramid input {h}x{w} is not divisible by 4")));
    }
    let mut levels = vec![image.clone()];
    for _ in 1..PYRAMID_LEVELS {
        let prev = levels.last().expect("non-empty").view().insert_axis(Axis(0));
        let pooled = crate::autograd::kernels::avg_pool2(prev);
        levels.push(pooled.index_axis_move(Axis(0), 0));
    }
    Ok(ImagePyramid { levels })
}

/// Stack per-sample planes into an `N x P x H x W` batch.
pub fn stack<T: Scalar>(items: &[Array3<T>]) -> Array4<T> {
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("batch items share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Independent oracle: visit each pixel and compare against its 4 neighbors.
    fn boundary_oracle(g: &Array2<u16>) -> Array2<u8> {
        let (h, w) = g.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h as isize {
            for x in 0..w as isize {
                let v = g[[y as usize, x as usize]];
                let mut differs = false;
                for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize && g[[ny as usize, nx as usize]] != v {
                        differs = true;
                    }
                }
                out[[y as usize, x as usize]] = differs as u8;
            }
        }
        out
    }

    #[test]
    fn constant_map_has_no_boundary() {
        let inst = InstanceMap::new(Array2::from_elem((8, 8), 7));
        assert!(compute_boundary_map(&inst).grid().iter().all(|&v| v == 0));
    }

    #[test]
    fn two_by_two_split() {
        let inst = InstanceMap::new(array![[1, 1], [2, 2]]);
        assert_eq!(compute_boundary_map(&inst).grid(), &array![[1u8, 1], [1, 1]]);
    }

    fn instance_grid() -> impl Strategy<Value = Array2<u16>> {
        (1usize..=32, 1usize..=32, 1u16..=5).prop_flat_map(|(h, w, ids)| {
            proptest::collection::vec(0..ids, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn boundary_matches_oracle(g in instance_grid()) {
            let got = compute_boundary_map(&InstanceMap::new(g.clone()));
            prop_assert_eq!(got.grid(), &boundary_oracle(&g));
        }

        #[test]
        fn boundary_is_symmetric(g in instance_grid()) {
            let b = compute_boundary_map(&InstanceMap::new(g.clone()));
            let (h, w) = g.dim();
            for y in 0..h {
                for x in 0..w {
                    for (ny, nx) in [(y + 1, x), (y, x + 1)] {
                        if ny < h && nx < w && g[[y, x]] != g[[ny, nx]] {
                            prop_assert!(b.grid()[[y, x]] == 1 && b.grid()[[ny, nx]] == 1);
                        }
                    }
                }
            }
        }

        #[test]
        fn one_hot_partitions_unity(v in proptest::collection::vec(0u8..6, 1..200)) {
            let n = v.len();
            let label = LabelMap::new(Array2::from_shape_vec((1, n), v).unwrap(), 6).unwrap();
            let oh = encode_one_hot::<f32>(&label);
            let sums = oh.sum_axis(Axis(0));
            prop_assert!(sums.iter().all(|&s| s == 1.0));
        }
    }

    #[test]
    fn one_hot_single_pixel() {
        let label = LabelMap::new(array![[0u8]], 3).unwrap();
        let oh = encode_one_hot::<f64>(&label);
        assert_eq!(oh.iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_argmax_round_trip() {
        let mut s = 17u32;
        let grid = Array2::from_shape_fn((16, 16), |_| {
            s = s.wrapping_mul(1103515245).wrapping_add(12345);
            ((s >> 16) % 8) as u8
        });
        let label = LabelMap::new(grid.clone(), 8).unwrap();
        let oh = encode_one_hot::<f32>(&label);
        let back = Array2::from_shape_fn((16, 16), |(y, x)| {
            (0..8).max_by(|&a, &b| oh[[a, y, x]].partial_cmp(&oh[[b, y, x]]).unwrap()).unwrap() as u8
        });
        assert_eq!(back, grid);
    }

    #[test]
    fn invalid_label_is_rejected() {
        assert!(matches!(
            LabelMap::new(array![[0u8, 3]], 3),
            Err(DataError::InvalidLabel { value: 3, num_classes: 3, y: 0, x: 1 })
        ));
        assert!(encode_one_hot_grid::<f32>(&array![[4u8]], 4).is_err());
    }

    fn toy_maps() -> (LabelMap, InstanceMap) {
        let label = LabelMap::new(array![[0u8, 0, 2, 2], [0, 0, 2, 2], [1, 1, 3, 3], [1, 1, 3, 3]], 4).unwrap();
        let inst = InstanceMap::checked(array![[0u16, 0, 5, 5], [0, 0, 5, 5], [0, 0, 9, 9], [0, 0, 9, 9]], &label).unwrap();
        (label, inst)
    }

    #[test]
    fn conditioning_plane_counts() {
        let (label, inst) = toy_maps();
        let plain = build_conditioning::<f32>(&label, &inst, None).unwrap();
        assert_eq!(plain.plane_count(), 5);
        let mut feats = BTreeMap::new();
        feats.insert(5, [0.1, 0.2, 0.3]);
        feats.insert(9, [-0.5, 0.0, 0.5]);
        let with = build_conditioning::<f32>(&label, &inst, Some(&feats)).unwrap();
        assert_eq!(with.plane_count(), 8);
        assert_eq!(with.label_planes(), plain.planes);
    }

    #[test]
    fn feature_planes_are_instance_fills() {
        let (label, inst) = toy_maps();
        let mut feats = BTreeMap::new();
        feats.insert(5, [0.1, 0.2, 0.3]);
        feats.insert(9, [-0.5, 0.0, 0.5]);
        let cond = build_conditioning::<f64>(&label, &inst, Some(&feats)).unwrap();
        for k in 0..3 {
            let expected = inst.grid().mapv(|id| feats.get(&id).map_or(0.0, |f| f[k]));
            assert_eq!(cond.planes.index_axis(Axis(0), 5 + k), expected);
        }
    }

    #[test]
    fn missing_feature_is_incomplete_style() {
        let (label, inst) = toy_maps();
        let mut feats = BTreeMap::new();
        feats.insert(5, [0.1, 0.2, 0.3]);
        assert!(matches!(
            build_conditioning::<f32>(&label, &inst, Some(&feats)),
            Err(DataError::IncompleteStyle { instance: 9 })
        ));
    }

    #[test]
    fn instance_spanning_two_classes_is_rejected() {
        let label = LabelMap::new(array![[2u8, 3]], 4).unwrap();
        assert!(InstanceMap::checked(array![[4u16, 4]], &label).is_err());
    }

    #[test]
    fn pyramid_dims_and_constants() {
        let img = Array3::<f32>::from_elem((3, 256, 128), 0.37);
        let p = build_pyramid(&img).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| l.dim()).collect();
        assert_eq!(dims, vec![(3, 256, 128), (3, 128, 64), (3, 64, 32)]);
        assert!(p.levels.iter().all(|l| l.iter().all(|&v| v == 0.37)));
        assert!(build_pyramid(&Array3::<f32>::zeros((3, 10, 8))).is_err());
    }

    #[test]
    fn pyramid_level_is_block_mean() {
        let mut s = 5u64;
        let img = Array3::<f64>::from_shape_fn((3, 16, 12), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 40) as f64 / (1u64 << 24) as f64 * 2.0 - 1.0
        });
        let p = build_pyramid(&img).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..6 {
                    let m = (img[[c, 2 * y, 2 * x]] + img[[c, 2 * y + 1, 2 * x]] + img[[c, 2 * y, 2 * x + 1]] + img[[c, 2 * y + 1, 2 * x + 1]]) / 4.0;
                    assert!((p.levels[1][[c, y, x]] - m).abs() < 1e-6);
                }
            }
        }
        for level in &p.levels {
            assert!((level.mean().unwrap() - img.mean().unwrap()).abs() < 1e-5);
        }
    }
}
