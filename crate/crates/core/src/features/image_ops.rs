use std::path::Path;

use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::Rect;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Target length of the smallest image side after resizing.
    pub min_side: u32,
    /// Replicated border added on every side after resizing.
    pub pad: u32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_side: 640,
            pad: 20,
        }
    }
}

/// Affine map between original pixel coordinates and resized coordinates
/// (the padded image origin sits at `(-pad, -pad)` in resized coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTransform {
    pub original: (u32, u32),
    pub resized: (u32, u32),
    pub pad: u32,
}

impl ImageTransform {
    pub fn new(width: u32, height: u32, cfg: &PreprocessConfig) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image has zero size {width}x{height}"
            )));
        }
        let resized = if width <= height {
            let h = (height as f64 * cfg.min_side as f64 / width as f64).round() as u32;
            (cfg.min_side, h.max(1))
        } else {
            let w = (width as f64 * cfg.min_side as f64 / height as f64).round() as u32;
            (w.max(1), cfg.min_side)
        };
        Ok(Self {
            original: (width, height),
            resized,
            pad: cfg.pad,
        })
    }

    pub fn scale_x(&self) -> f64 {
        self.resized.0 as f64 / self.original.0 as f64
    }

    pub fn scale_y(&self) -> f64 {
        self.resized.1 as f64 / self.original.1 as f64
    }

    pub fn padded_size(&self) -> (u32, u32) {
        (self.resized.0 + 2 * self.pad, self.resized.1 + 2 * self.pad)
    }

    /// Original pixel coordinates to resized coordinates.
    pub fn to_resized(&self, r: &Rect) -> Rect {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        Rect::new(r.x() * sx, r.y() * sy, r.w() * sx, r.h() * sy).expect("positive scale")
    }

    /// Resized coordinates back to original pixel coordinates.
    pub fn to_original(&self, r: &Rect) -> Rect {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        Rect::new(r.x() / sx, r.y() / sy, r.w() / sx, r.h() / sy).expect("positive scale")
    }
}

pub struct Preprocessed {
    pub image: RgbImage,
    pub transform: ImageTransform,
}

/// Rescales so the smallest side is `min_side` (aspect preserved) and adds a
/// replicated border of `pad` pixels.
pub fn preprocess(img: &RgbImage, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let transform = ImageTransform::new(img.width(), img.height(), cfg)?;
    let (rw, rh) = transform.resized;
    let resized = if (rw, rh) == img.dimensions() {
        img.clone()
    } else {
        image::imageops::resize(img, rw, rh, FilterType::Triangle)
    };
    let (pw, ph) = transform.padded_size();
    let pad = cfg.pad as i64;
    let mut out = RgbImage::new(pw, ph);
    for y in 0..ph {
        let sy = (y as i64 - pad).clamp(0, rh as i64 - 1) as u32;
        for x in 0..pw {
            let sx = (x as i64 - pad).clamp(0, rw as i64 - 1) as u32;
            out.put_pixel(x, y, *resized.get_pixel(sx, sy));
        }
    }
    Ok(Preprocessed {
        image: out,
        transform,
    })
}

/// Decodes an image file into RGB.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: "empty image".into(),
        });
    }
    Ok(rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(w: u32, h: u32) -> ((u32, u32), (u32, u32)) {
        let t = ImageTransform::new(w, h, &PreprocessConfig::default()).unwrap();
        (t.resized, t.padded_size())
    }

    #[test]
    fn resize_examples() {
        assert_eq!(sizes(1280, 960), ((853, 640), (893, 680)));
        assert_eq!(sizes(640, 640), ((640, 640), (680, 680)));
        assert_eq!(sizes(320, 480), ((640, 960), (680, 1000)));
    }

    #[test]
    fn border_is_replicated() {
        let mut img = RgbImage::new(640, 640);
        img.put_pixel(0, 0, image::Rgb([9, 8, 7]));
        img.put_pixel(639, 639, image::Rgb([1, 2, 3]));
        let p = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(p.image.dimensions(), (680, 680));
        assert_eq!(p.image.get_pixel(0, 0).0, [9, 8, 7]);
        assert_eq!(p.image.get_pixel(20, 20).0, [9, 8, 7]);
        assert_eq!(p.image.get_pixel(679, 679).0, [1, 2, 3]);
    }

    #[test]
    fn coordinate_round_trip() {
        let t = ImageTransform::new(256, 200, &PreprocessConfig::default()).unwrap();
        let r = Rect::new(10.0, 20.0, 30.0, 40.0).unwrap();
        let back = t.to_original(&t.to_resized(&r));
        assert!((back.x() - 10.0).abs() < 1e-9 && (back.h() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn unreadable_image_names_path() {
        let err = load_image(Path::new("/nonexistent/img.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/img.png"));
    }
}
