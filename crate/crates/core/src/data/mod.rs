//! Label/instance maps, conditioning tensors, the synthetic dataset and its storage.

mod dataset;
mod maps;
pub mod shapes;

use thiserror::Error;

pub use dataset::{
    decode_instance_png, decode_label_png, encode_png, image_to_rgb8, instance_to_luma16, iterate_batches, label_to_luma8,
    load_dataset, rgb8_to_image, save_dataset, Dataset, DatasetMeta, InstanceMeta, SampleMeta, SamplePair,
};
pub use maps::{
    build_conditioning, build_conditioning_pair, build_pyramid, compute_boundary_map, encode_one_hot, encode_one_hot_grid, stack, BoundaryMap,
    ConditioningTensor, ImagePyramid, InstanceMap, LabelMap, StyleVector, FEATURE_PLANES, PYRAMID_LEVELS,
};
pub use shapes::generate_shapes_dataset;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("label {value} at ({y}, {x}) is outside [0, {num_classes})")]
    InvalidLabel { value: usize, num_classes: usize, y: usize, x: usize },
    #[error("a label map needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{what} is {found:?}, expected {expected:?}")]
    DimMismatch { what: &'static str, expected: (usize, usize), found: (usize, usize) },
    #[error("instance {instance} spans classes {classes:?}")]
    InconsistentInstance { instance: u16, classes: (u8, u8) },
    #[error("no style vector for instance {instance}")]
    IncompleteStyle { instance: u16 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sample `{id}` is corrupt: {reason}")]
    CorruptSample { id: String, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
