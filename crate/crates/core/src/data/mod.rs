//! Frame preprocessing, class-folder datasets and synthetic frames.

pub mod dataset;
pub mod image;
pub mod synthetic;

pub use dataset::{class_weights, Dataset, ImageSet, Sample, CLASS_MANIFEST};
pub use image::{
    load_image, load_preprocessed, normalize01, preprocess, resize_bilinear, standardize, GrayscalePolicy,
    PreprocConfig,
};
pub use synthetic::{synthetic_frame, synthetic_image_set, write_synthetic_dataset, SYNTHETIC_CLASSES};
