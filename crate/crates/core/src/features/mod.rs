//! Region descriptor pipeline: preprocessing, per-image feature extraction,
//! style templates and stylization, multi-style fusion, precise ROI pooling
//! and PCA whitening.

mod extractor;
mod feature_map;
mod fusion;
mod image_ops;
mod pipeline;
mod prroi;
mod stylize;
mod whitening;

pub use extractor::{Extractor, ToyExtractor, TOY_CHANNELS};
pub use feature_map::FeatureMap;
pub use fusion::fuse_multi_style;
pub use image_ops::{load_image, preprocess, ImageTransform, PreprocessConfig, Preprocessed};
pub use pipeline::{FeaturePipeline, FeatureSource, ImageFeatures};
pub use prroi::{prroi_pool, prroi_pool_naive, PoolingSurface};
pub use stylize::{select_style_templates, StyleTemplate, Stylizer, ToyStylizer};
pub use whitening::{apply_whitening, fit_whitening, Whitened, WhiteningModel, WHITENING_EPS};
