//! Procedural "shapes world": sky over ground with discs and rectangles.
//!
//! Every object is painted with one of its class's styles, so one label map
//! corresponds to many plausible images.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, DatasetMeta, InstanceMeta, SampleMeta, SamplePair};
use super::maps::{InstanceMap, LabelMap};
use super::DataError;

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "ground", "disc", "rectangle"];
pub const SKY: u8 = 0;
pub const GROUND: u8 = 1;
pub const DISC: u8 = 2;
pub const RECTANGLE: u8 = 3;

/// Spatial dims must be multiples of this (total generator downsampling).
pub const SIZE_MULTIPLE: usize = 32;
pub const MAX_STYLES_PER_CLASS: usize = 8;

const MAX_OBJECTS: usize = 6;
const PLACEMENT_RETRIES: usize = 50;
const GAP: i64 = 2;

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Solid,
    Stripes,
    Checker,
    Gradient,
}

#[derive(Clone, Copy, Debug)]
struct Style {
    name: &'static str,
    rgb: [u8; 3],
    pattern: Pattern,
}

const DISC_STYLES: [Style; MAX_STYLES_PER_CLASS] = [
    Style { name: "red", rgb: [215, 40, 40], pattern: Pattern::Solid },
    Style { name: "orange-stripes", rgb: [240, 140, 30], pattern: Pattern::Stripes },
    Style { name: "yellow", rgb: [235, 215, 50], pattern: Pattern::Solid },
    Style { name: "magenta-checker", rgb: [200, 50, 175], pattern: Pattern::Checker },
    Style { name: "crimson-gradient", rgb: [165, 20, 45], pattern: Pattern::Gradient },
    Style { name: "pink", rgb: [250, 135, 165], pattern: Pattern::Solid },
    Style { name: "amber-stripes", rgb: [205, 110, 10], pattern: Pattern::Stripes },
    Style { name: "rose-checker", rgb: [230, 80, 110], pattern: Pattern::Checker },
];

const RECT_STYLES: [Style; MAX_STYLES_PER_CLASS] = [
    Style { name: "blue", rgb: [35, 60, 200], pattern: Pattern::Solid },
    Style { name: "purple-stripes", rgb: [110, 45, 170], pattern: Pattern::Stripes },
    Style { name: "gray", rgb: [120, 120, 130], pattern: Pattern::Solid },
    Style { name: "navy-checker", rgb: [25, 30, 110], pattern: Pattern::Checker },
    Style { name: "violet-gradient", rgb: [150, 90, 220], pattern: Pattern::Gradient },
    Style { name: "slate", rgb: [70, 80, 105], pattern: Pattern::Solid },
    Style { name: "indigo-stripes", rgb: [60, 20, 140], pattern: Pattern::Stripes },
    Style { name: "charcoal-checker", rgb: [50, 50, 55], pattern: Pattern::Checker },
];

const SKY_TOP: [f64; 3] = [110.0, 160.0, 235.0];
const SKY_BOTTOM: [f64; 3] = [190.0, 220.0, 250.0];
const GROUND_RGB: [f64; 3] = [95.0, 145.0, 55.0];

/// Style tag of `(class, style index)`, as recorded in the metadata.
pub fn style_tag(class: u8, style: usize) -> String {
    let table = if class == DISC { &DISC_STYLES } else { &RECT_STYLES };
    format!("{}/{}", CLASS_NAMES[class as usize], table[style].name)
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { cy: i64, cx: i64, r: i64 },
    Rect { y0: i64, x0: i64, h: i64, w: i64 },
}

impl Shape {
    fn bbox(&self) -> (i64, i64, i64, i64) {
        match *self {
            Shape::Disc { cy, cx, r } => (cy - r, cx - r, cy + r, cx + r),
            Shape::Rect { y0, x0, h, w } => (y0, x0, y0 + h - 1, x0 + w - 1),
        }
    }

    fn contains(&self, y: i64, x: i64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r,
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
        }
    }

    fn class(&self) -> u8 {
        match self {
            Shape::Disc { .. } => DISC,
            Shape::Rect { .. } => RECTANGLE,
        }
    }
}

fn overlaps(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> bool {
    !(a.2 + GAP < b.0 || b.2 + GAP < a.0 || a.3 + GAP < b.1 || b.3 + GAP < a.1)
}

fn sample_shape(rng: &mut ChaCha8Rng, h: i64, w: i64) -> Shape {
    let unit = h.min(w);
    if rng.random_bool(0.5) {
        let r = rng.random_range((unit / 12).max(2)..=(unit / 5).max(3));
        let cy = rng.random_range(r..h - r);
        let cx = rng.random_range(r..w - r);
        Shape::Disc { cy, cx, r }
    } else {
        let rh = rng.random_range((unit / 8).max(3)..=(unit / 3).max(4));
        let rw = rng.random_range((unit / 8).max(3)..=(unit / 3).max(4));
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        Shape::Rect { y0, x0, h: rh, w: rw }
    }
}

fn place_objects(rng: &mut ChaCha8Rng, h: i64, w: i64) -> Vec<Shape> {
    let target = rng.random_range(1..=MAX_OBJECTS);
    let mut placed: Vec<Shape> = Vec::with_capacity(target);
    for _ in 0..target {
        for _ in 0..PLACEMENT_RETRIES {
            let s = sample_shape(rng, h, w);
            if placed.iter().all(|p| !overlaps(p.bbox(), s.bbox())) {
                placed.push(s);
                break;
            }
        }
    }
    placed
}

fn texture(style: &Style, y: usize, x: usize, top: i64, bottom: i64) -> [f64; 3] {
    let base = style.rgb.map(f64::from);
    let scale = match style.pattern {
        Pattern::Solid => 1.0,
        Pattern::Stripes => {
            if (y / 3).is_multiple_of(2) {
                1.0
            } else {
                0.6
            }
        }
        Pattern::Checker => {
            if (y / 4 + x / 4).is_multiple_of(2) {
                1.0
            } else {
                0.65
            }
        }
        Pattern::Gradient => {
            let t = (y as f64 - top as f64) / ((bottom - top).max(1) as f64);
            1.15 - 0.5 * t.clamp(0.0, 1.0)
        }
    };
    base.map(|c| c * scale)
}

fn render_sample(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    styles_per_class: usize,
    id: String,
) -> Option<(SamplePair, SampleMeta)> {
    let (h, w) = (height as i64, width as i64);
    let horizon = rng.random_range(height * 3 / 10..=height * 6 / 10);
    let shapes = place_objects(rng, h, w);
    if shapes.is_empty() {
        return None;
    }
    let styles: Vec<usize> = shapes.iter().map(|_| rng.random_range(0..styles_per_class)).collect();
    let mut label = Array2::<u8>::from_shape_fn((height, width), |(y, _)| if y < horizon { SKY } else { GROUND });
    let mut inst = Array2::<u16>::zeros((height, width));
    let mut rgb = Array3::<f64>::zeros((3, height, width));
    for y in 0..height {
        for x in 0..width {
            let c = if y < horizon {
                let t = y as f64 / horizon.max(1) as f64;
                [0, 1, 2].map(|k| SKY_TOP[k] + (SKY_BOTTOM[k] - SKY_TOP[k]) * t)
            } else {
                let t = (y - horizon) as f64 / (height - horizon).max(1) as f64;
                GROUND_RGB.map(|v| v * (0.8 + 0.3 * t))
            };
            for k in 0..3 {
                rgb[[k, y, x]] = c[k];
            }
        }
    }
    let mut instances = Vec::with_capacity(shapes.len());
    for (i, (shape, &style_idx)) in shapes.iter().zip(&styles).enumerate() {
        let iid = (i + 1) as u16;
        let class = shape.class();
        let style = if class == DISC { &DISC_STYLES[style_idx] } else { &RECT_STYLES[style_idx] };
        let (top, left, bottom, right) = shape.bbox();
        for y in top.max(0)..=bottom.min(h - 1) {
            for x in left.max(0)..=right.min(w - 1) {
                if shape.contains(y, x) {
                    let (yu, xu) = (y as usize, x as usize);
                    label[[yu, xu]] = class;
                    inst[[yu, xu]] = iid;
                    let c = texture(style, yu, xu, top, bottom);
                    for k in 0..3 {
                        rgb[[k, yu, xu]] = c[k];
                    }
                }
            }
        }
        instances.push(InstanceMeta { id: iid, class, style: style_idx, tag: style_tag(class, style_idx) });
    }
    // mild sensor noise
    let image = rgb.mapv(|v| {
        let noisy = v + rng.random_range(-6.0..=6.0);
        noisy.round().clamp(0.0, 255.0) as u8 as f32 / 127.5 - 1.0
    });
    let label = LabelMap::new(label, NUM_CLASSES).expect("generator emits valid classes");
    let instance = InstanceMap::checked(inst, &label).expect("objects carry one class");
    Some((SamplePair { id: id.clone(), label, instance, image }, SampleMeta { id, instances }))
}

/// Deterministic synthetic dataset. Sample `i` depends only on `(seed, i)`.
pub fn generate_shapes_dataset(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    styles_per_class: usize,
) -> Result<Dataset, DataError> {
    if height == 0 || width == 0 || !height.is_multiple_of(SIZE_MULTIPLE) || !width.is_multiple_of(SIZE_MULTIPLE) {
        return Err(DataError::Shape(format!("dataset size {height}x{width} must be a positive multiple of {SIZE_MULTIPLE}")));
    }
    if styles_per_class == 0 || styles_per_class > MAX_STYLES_PER_CLASS {
        return Err(DataError::Shape(format!("styles per class must be in 1..={MAX_STYLES_PER_CLASS}")));
    }
    let mut samples = Vec::with_capacity(count);
    let mut metas = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let id = format!("{i:06}");
        // empty placements are redrawn from the same stream
        let (pair, meta) = loop {
            if let Some(s) = render_sample(&mut rng, height, width, styles_per_class, id.clone()) {
                break s;
            }
        };
        samples.push(pair);
        metas.push(meta);
    }
    let meta = DatasetMeta {
        num_classes: NUM_CLASSES,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        height,
        width,
        styles_per_class,
        samples: metas,
    };
    Ok(Dataset { meta, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn deterministic_under_seed() {
        let a = generate_shapes_dataset(0, 3, 64, 64, 4).unwrap();
        let b = generate_shapes_dataset(0, 3, 64, 64, 4).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = generate_shapes_dataset(1, 3, 64, 64, 4).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn samples_satisfy_map_invariants() {
        let d = generate_shapes_dataset(3, 20, 64, 128, 4).unwrap();
        for (s, m) in d.samples.iter().zip(&d.meta.samples) {
            assert_eq!(s.label.dims(), (64, 128));
            assert_eq!(s.instance.dims(), (64, 128));
            assert_eq!(s.image.dim(), (3, 64, 128));
            assert!(s.image.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            let ids = s.instance.ids();
            assert!((1..=6).contains(&ids.len()));
            assert_eq!(ids.len(), m.instances.len());
            let classes = s.instance.classes(&s.label);
            for im in &m.instances {
                assert_eq!(classes[&im.id], im.class);
            }
            // ids are unique and 1..=n
            assert_eq!(ids, (1..=ids.len() as u16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn several_disc_textures_appear() {
        let d = generate_shapes_dataset(11, 100, 64, 64, 4).unwrap();
        let tags: BTreeSet<_> = d
            .meta
            .samples
            .iter()
            .flat_map(|s| s.instances.iter())
            .filter(|i| i.class == DISC)
            .map(|i| i.tag.clone())
            .collect();
        assert!(tags.len() >= 2, "{tags:?}");
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_shapes_dataset(0, 1, 48, 64, 4).is_err());
        assert!(generate_shapes_dataset(0, 1, 64, 64, 0).is_err());
    }
}
