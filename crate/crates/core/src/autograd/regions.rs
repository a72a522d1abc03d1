use ndarray::{Array4, ArrayView4};

use crate::scalar::Scalar;

/// Pixel-to-region assignment for one sample, used by region pooling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionIndex {
    pub height: usize,
    pub width: usize,
    /// Region of each pixel in row-major order, `None` for unpooled pixels.
    pub assignment: Vec<Option<u32>>,
    pub regions: usize,
}

impl RegionIndex {
    pub fn new(height: usize, width: usize, assignment: Vec<Option<u32>>, regions: usize) -> Self {
        assert_eq!(assignment.len(), height * width);
        debug_assert!(assignment.iter().flatten().all(|&r| (r as usize) < regions));
        Self { height, width, assignment, regions }
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.regions];
        for r in self.assignment.iter().flatten() {
            c[*r as usize] += 1;
        }
        c
    }
}

pub(crate) fn pool_forward<T: Scalar>(x: ArrayView4<'_, T>, src: &[RegionIndex], dst: &[RegionIndex]) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    assert_eq!(src.len(), n, "one region index per sample");
    assert_eq!(dst.len(), n, "one region index per sample");
    let (hd, wd) = (dst[0].height, dst[0].width);
    let mut out = Array4::<T>::zeros((n, c, hd, wd));
    for i in 0..n {
        let (s, d) = (&src[i], &dst[i]);
        assert_eq!((s.height, s.width), (h, w), "source regions match input dims");
        assert_eq!(s.regions, d.regions, "source and destination share region ids");
        let counts = s.counts();
        for j in 0..c {
            let mut sums = vec![T::zero(); s.regions];
            for (p, r) in s.assignment.iter().enumerate() {
                if let Some(r) = r {
                    sums[*r as usize] = sums[*r as usize] + x[[i, j, p / w, p % w]];
                }
            }
            for (p, r) in d.assignment.iter().enumerate() {
                if let Some(r) = r {
                    let k = *r as usize;
                    if counts[k] > 0 {
                        out[[i, j, p / wd, p % wd]] = sums[k] / T::of_usize(counts[k]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn pool_backward<T: Scalar>(
    dy: ArrayView4<'_, T>,
    src: &[RegionIndex],
    dst: &[RegionIndex],
    shape: (usize, usize, usize, usize),
) -> Array4<T> {
    let (n, c, _h, w) = shape;
    let wd = dst[0].width;
    let mut dx = Array4::<T>::zeros(shape);
    for i in 0..n {
        let (s, d) = (&src[i], &dst[i]);
        let counts = s.counts();
        for j in 0..c {
            let mut gsum = vec![T::zero(); s.regions];
            for (p, r) in d.assignment.iter().enumerate() {
                if let Some(r) = r {
                    gsum[*r as usize] = gsum[*r as usize] + dy[[i, j, p / wd, p % wd]];
                }
            }
            for (p, r) in s.assignment.iter().enumerate() {
                if let Some(r) = r {
                    let k = *r as usize;
                    dx[[i, j, p / w, p % w]] = gsum[k] / T::of_usize(counts[k]);
                }
            }
        }
    }
    dx
}
