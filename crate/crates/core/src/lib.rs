//! Power-quality disturbance classification with a Vision Transformer.
//!
//! The pipeline synthesizes labelled voltage waveforms ([`signal`],
//! [`dataset`]), draws each one as a grayscale plot ([`raster`]), and
//! classifies the plots with a ViT built on a small tape-based autodiff
//! engine ([`tensor`], [`tape`], [`vit`]). [`train`] fits the model with
//! AdamW and [`metrics`] scores it.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod rng;
pub mod signal;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use checkpoint::Checkpoint;
pub use dataset::{generate_dataset, Dataset, DatasetSpec, Split};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use raster::{rasterize, Image, ImageSpec};
pub use signal::{DisturbanceClass, TimeGrid};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainHistory};
pub use vit::{ViTConfig, VisionTransformer};
