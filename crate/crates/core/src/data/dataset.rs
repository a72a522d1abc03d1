//! On-disk layout:
//!
//! ```text
//! DIR/labels/<id>.png     8-bit gray, pixel = class id
//! DIR/instances/<id>.png  16-bit gray, pixel = instance id
//! DIR/images/<id>.png     8-bit RGB
//! DIR/meta.json           classes, size and per-instance style tags
//! ```

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::maps::{InstanceMap, LabelMap};
use super::DataError;

/// One training example. `image` is `3 x H x W` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub label: LabelMap,
    pub instance: InstanceMap,
    pub image: Array3<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub id: u16,
    pub class: u8,
    pub style: usize,
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub instances: Vec<InstanceMeta>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub height: usize,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub styles_per_class: usize,
    #[serde(default)]
    pub samples: Vec<SampleMeta>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples (and their metadata).
    pub fn truncated(&self, n: usize) -> Dataset {
        let mut meta = self.meta.clone();
        meta.samples.truncate(n);
        Dataset { meta, samples: self.samples.iter().take(n).cloned().collect() }
    }

    /// Split into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let mut head_meta = self.meta.clone();
        let mut tail_meta = self.meta.clone();
        head_meta.samples = self.meta.samples.iter().take(n).cloned().collect();
        tail_meta.samples = self.meta.samples.iter().skip(n).cloned().collect();
        (
            Dataset { meta: head_meta, samples: self.samples[..n].to_vec() },
            Dataset { meta: tail_meta, samples: self.samples[n..].to_vec() },
        )
    }

    pub fn sample_meta(&self, id: &str) -> Option<&SampleMeta> {
        self.meta.samples.iter().find(|m| m.id == id)
    }
}

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `3 x H x W` image in `[-1, 1]` to an 8-bit RGB buffer.
pub fn image_to_rgb8(image: &Array3<f32>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (_, h, w) = image.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(image[[0, y, x]]), to_u8(image[[1, y, x]]), to_u8(image[[2, y, x]])])
    })
}

pub fn rgb8_to_image(buf: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Array3<f32> {
    let (w, h) = buf.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        buf.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    })
}

pub fn label_to_luma8(grid: &Array2<u8>) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    let (h, w) = grid.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([grid[[y as usize, x as usize]]]))
}

pub fn instance_to_luma16(grid: &Array2<u16>) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let (h, w) = grid.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([grid[[y as usize, x as usize]]]))
}

/// Decode an 8-bit single-channel PNG into a grid.
pub fn decode_label_png(bytes: &[u8]) -> Result<Array2<u8>, DataError> {
    match image::load_from_memory_with_format(bytes, image::ImageFormat::Png)? {
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            Ok(Array2::from_shape_vec((h as usize, w as usize), b.into_raw()).expect("buffer matches dims"))
        }
        other => Err(DataError::Format(format!("label map must be 8-bit gray, got {:?}", other.color()))),
    }
}

/// Decode a 16-bit (or 8-bit) single-channel PNG into an instance grid.
pub fn decode_instance_png(bytes: &[u8]) -> Result<Array2<u16>, DataError> {
    match image::load_from_memory_with_format(bytes, image::ImageFormat::Png)? {
        DynamicImage::ImageLuma16(b) => {
            let (w, h) = b.dimensions();
            Ok(Array2::from_shape_vec((h as usize, w as usize), b.into_raw()).expect("buffer matches dims"))
        }
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            Ok(Array2::from_shape_vec((h as usize, w as usize), b.into_raw().into_iter().map(u16::from).collect())
                .expect("buffer matches dims"))
        }
        other => Err(DataError::Format(format!("instance map must be 16-bit gray, got {:?}", other.color()))),
    }
}

pub fn encode_png<P, C>(buf: &ImageBuffer<P, C>) -> Result<Vec<u8>, DataError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    for sub in ["labels", "instances", "images"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for s in &dataset.samples {
        fs::write(dir.join("labels").join(format!("{}.png", s.id)), encode_png(&label_to_luma8(s.label.grid()))?)?;
        fs::write(dir.join("instances").join(format!("{}.png", s.id)), encode_png(&instance_to_luma16(s.instance.grid()))?)?;
        fs::write(dir.join("images").join(format!("{}.png", s.id)), encode_png(&image_to_rgb8(&s.image))?)?;
    }
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&dataset.meta)?)?;
    Ok(())
}

fn sorted_ids(dir: &Path) -> Result<Vec<String>, DataError> {
    let labels = dir.join("labels");
    if !labels.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids: Vec<String> = fs::read_dir(labels)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "png" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    Ok(ids)
}

fn load_sample(dir: &Path, id: &str, num_classes: usize) -> Result<SamplePair, DataError> {
    let corrupt = |reason: String| DataError::CorruptSample { id: id.to_string(), reason };
    let read = |sub: &str| fs::read(dir.join(sub).join(format!("{id}.png"))).map_err(|e| corrupt(format!("{sub}: {e}")));
    let label_grid = decode_label_png(&read("labels")?).map_err(|e| corrupt(e.to_string()))?;
    let inst_grid = decode_instance_png(&read("instances")?).map_err(|e| corrupt(e.to_string()))?;
    let rgb = match image::load_from_memory_with_format(&read("images")?, image::ImageFormat::Png).map_err(|e| corrupt(e.to_string()))? {
        DynamicImage::ImageRgb8(b) => b,
        other => return Err(corrupt(format!("image must be 8-bit RGB, got {:?}", other.color()))),
    };
    let image = rgb8_to_image(&rgb);
    let dims = label_grid.dim();
    if inst_grid.dim() != dims || (image.dim().1, image.dim().2) != dims {
        return Err(corrupt(format!(
            "dimension mismatch: label {:?}, instance {:?}, image {:?}",
            dims,
            inst_grid.dim(),
            (image.dim().1, image.dim().2)
        )));
    }
    let label = LabelMap::new(label_grid, num_classes).map_err(|e| corrupt(e.to_string()))?;
    let instance = InstanceMap::checked(inst_grid, &label).map_err(|e| corrupt(e.to_string()))?;
    Ok(SamplePair { id: id.to_string(), label, instance, image })
}

/// Load a dataset directory. A directory without samples yields an empty dataset.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = if meta_path.is_file() {
        serde_json::from_slice(&fs::read(&meta_path)?)?
    } else {
        DatasetMeta::default()
    };
    let ids = if meta.samples.is_empty() { sorted_ids(dir)? } else { meta.samples.iter().map(|s| s.id.clone()).collect() };
    if ids.is_empty() {
        return Ok(Dataset { meta, samples: Vec::new() });
    }
    if meta.num_classes < 2 {
        return Err(DataError::Format("meta.json with num_classes >= 2 is required".into()));
    }
    let samples = ids.iter().map(|id| load_sample(dir, id, meta.num_classes)).collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { meta, samples })
}

/// Index batches covering `0..len`; the last batch may be short.
/// With a seed the order is a seeded shuffle, otherwise sequential.
pub fn iterate_batches(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
