use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::extractor::{Extractor, ToyExtractor};
use super::feature_map::FeatureMap;
use super::fusion::fuse_multi_style;
use super::image_ops::{preprocess, ImageTransform, PreprocessConfig};
use super::prroi::PoolingSurface;
use super::stylize::{StyleTemplate, Stylizer, ToyStylizer};
use crate::error::{Error, Result};
use crate::geometry::Rect;

/// Where per-image feature maps come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Toy extractor and stylizer run on the image pixels.
    Toy,
    /// Precomputed (already fused) maps stored as `<dir>/<image id>.msfm`.
    Ingested { dir: PathBuf },
}

/// Feature map of one image plus everything needed to pool regions given in
/// original pixel coordinates.
pub struct ImageFeatures {
    pub map: FeatureMap,
    pub transform: ImageTransform,
    surface: PoolingSurface,
}

impl ImageFeatures {
    pub fn new(map: FeatureMap, transform: ImageTransform) -> Self {
        let surface = PoolingSurface::new(&map);
        Self {
            map,
            transform,
            surface,
        }
    }

    pub fn channels(&self) -> usize {
        self.map.channels
    }

    /// Raw pooled vector for a region in original image coordinates.
    pub fn pool(&self, region: &Rect) -> Result<Vec<f32>> {
        self.surface.pool(&self.transform.to_resized(region))
    }

    /// Mean over the region of the channel-summed activation surface.
    pub fn activation(&self, region: &Rect) -> Result<f64> {
        Ok(self.pool(region)?.iter().map(|&v| v as f64).sum())
    }
}

/// Preprocess, optional multi-style stylization, extraction and fusion.
#[derive(Clone)]
pub struct FeaturePipeline {
    pub preprocess: PreprocessConfig,
    pub templates: Vec<StyleTemplate>,
    pub fuse: bool,
    extractor: Arc<dyn Extractor>,
    stylizer: Arc<dyn Stylizer>,
}

impl std::fmt::Debug for FeaturePipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeaturePipeline")
            .field("preprocess", &self.preprocess)
            .field("templates", &self.templates)
            .field("fuse", &self.fuse)
            .finish()
    }
}

impl FeaturePipeline {
    pub fn toy(preprocess: PreprocessConfig) -> Self {
        Self::with_parts(
            preprocess,
            Arc::new(ToyExtractor::default()),
            Arc::new(ToyStylizer),
        )
    }

    pub fn with_parts(
        preprocess: PreprocessConfig,
        extractor: Arc<dyn Extractor>,
        stylizer: Arc<dyn Stylizer>,
    ) -> Self {
        Self {
            preprocess,
            templates: Vec::new(),
            fuse: true,
            extractor,
            stylizer,
        }
    }

    pub fn channels(&self) -> usize {
        self.extractor.channels()
    }

    pub fn stride(&self) -> u32 {
        self.extractor.stride()
    }

    /// Unfused feature map of the image.
    pub fn base_map(&self, img: &RgbImage) -> Result<FeatureMap> {
        let pre = preprocess(img, &self.preprocess)?;
        Ok(self.extractor.extract(&pre.image, self.preprocess.pad))
    }

    /// Fused map (base plus one stylized map per template) of the image.
    pub fn features(&self, img: &RgbImage) -> Result<ImageFeatures> {
        let pre = preprocess(img, &self.preprocess)?;
        let base = self.extractor.extract(&pre.image, self.preprocess.pad);
        let map = if self.fuse && !self.templates.is_empty() {
            let stylized = self
                .templates
                .iter()
                .map(|t| {
                    let styled = self.stylizer.stylize(img, t);
                    let p = preprocess(&styled, &self.preprocess)?;
                    Ok(self.extractor.extract(&p.image, self.preprocess.pad))
                })
                .collect::<Result<Vec<_>>>()?;
            fuse_multi_style(&base, &stylized)?
        } else {
            base
        };
        Ok(ImageFeatures::new(map, pre.transform))
    }

    /// Wraps an externally computed map for an image of the given size.
    pub fn ingested(&self, map: FeatureMap, width: u32, height: u32) -> Result<ImageFeatures> {
        let cfg = PreprocessConfig {
            pad: map.pad,
            ..self.preprocess
        };
        let transform = ImageTransform::new(width, height, &cfg)?;
        let (pw, ph) = transform.padded_size();
        if (map.width as u32) < pw / map.stride || (map.height as u32) < ph / map.stride {
            return Err(Error::ShapeMismatch(format!(
                "ingested map {}x{} too small for a {}x{} image",
                map.width, map.height, width, height
            )));
        }
        Ok(ImageFeatures::new(map, transform))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn image() -> RgbImage {
        RgbImage::from_fn(64, 48, |x, y| {
            Rgb([(x * 4) as u8, (y * 5) as u8, ((x + y) * 2) as u8])
        })
    }

    #[test]
    fn deterministic_and_shaped() {
        let mut p = FeaturePipeline::toy(PreprocessConfig::default());
        p.templates.push(StyleTemplate {
            image_id: 0,
            mean: [90.0, 100.0, 110.0],
            std: [30.0, 20.0, 10.0],
        });
        let a = p.features(&image()).unwrap();
        let b = p.features(&image()).unwrap();
        assert_eq!(a.map, b.map);
        // 853x640 resized, 893x680 padded, 16 px cells
        assert_eq!((a.map.width, a.map.height), (56, 43));
        let r = Rect::new(10.0, 10.0, 20.0, 20.0).unwrap();
        assert_eq!(a.pool(&r).unwrap().len(), 64);
    }

    #[test]
    fn fusion_off_equals_base() {
        let mut p = FeaturePipeline::toy(PreprocessConfig::default());
        p.templates.push(StyleTemplate {
            image_id: 0,
            mean: [90.0; 3],
            std: [30.0; 3],
        });
        p.fuse = false;
        assert_eq!(
            p.features(&image()).unwrap().map,
            p.base_map(&image()).unwrap()
        );
    }
}
