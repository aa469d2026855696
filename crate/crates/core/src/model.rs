//! Dataset manifest and descriptor containers.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u32,
    pub path: String,
    pub width: u32,
    pub height: u32,
}

/// The image collection an index is built over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub descriptor_dim: usize,
    pub images: Vec<ImageRecord>,
    pub style_template_ids: Vec<u32>,
    pub config_fingerprint: String,
}

impl DatasetManifest {
    /// Manifest with dense ids `0..n` assigned in the given order.
    pub fn from_images(images: Vec<(String, u32, u32)>, descriptor_dim: usize) -> Result<Self> {
        let images = images
            .into_iter()
            .enumerate()
            .map(|(i, (path, width, height))| ImageRecord {
                id: i as u32,
                path,
                width,
                height,
            })
            .collect();
        let m = Self {
            version: MANIFEST_VERSION,
            descriptor_dim,
            images,
            style_template_ids: Vec::new(),
            config_fingerprint: String::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.images.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.images.len());
        for rec in &self.images {
            if rec.width == 0 || rec.height == 0 {
                return Err(Error::InvalidArgument(format!(
                    "image {} ({}) has zero size",
                    rec.id, rec.path
                )));
            }
            if !seen.insert(rec.id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate image id {}",
                    rec.id
                )));
            }
        }
        for id in &self.style_template_ids {
            if !seen.contains(id) {
                return Err(Error::InvalidArgument(format!(
                    "style template {id} is not a manifest image"
                )));
            }
        }
        if self.descriptor_dim == 0 {
            return Err(Error::InvalidArgument(
                "descriptor_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Record by id. Ids are dense, so this is usually a direct index.
    pub fn image(&self, id: u32) -> Option<&ImageRecord> {
        match self.images.get(id as usize) {
            Some(r) if r.id == id => Some(r),
            _ => self.images.iter().find(|r| r.id == id),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let m: DatasetManifest = serde_json::from_slice(&bytes)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Corrupt {
                what: path.display().to_string(),
                reason: format!("unsupported manifest version {}", m.version),
            });
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

/// A whitened local patch embedding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Descriptor(pub Vec<f32>);

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Squared L2 distance.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// L2-normalizes in place; returns false (leaving the input untouched) for a zero vector.
pub fn l2_normalize(v: &mut [f32]) -> bool {
    let n = v
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if n < 1e-12 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    true
}

/// Hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        DatasetManifest::from_images(vec![("a.png".into(), 10, 20), ("b.png".into(), 30, 40)], 96)
            .unwrap()
    }

    #[test]
    fn json_round_trip() {
        let mut m = manifest();
        m.style_template_ids = vec![1];
        let back: DatasetManifest = serde_json::from_slice(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.n(), 2);
        assert_eq!(back.image(1).unwrap().path, "b.png");
    }

    #[test]
    fn validation() {
        let mut m = manifest();
        m.style_template_ids = vec![7];
        assert!(m.validate().is_err());
        let mut m = manifest();
        m.images[1].id = 0;
        assert!(m.validate().is_err());
        assert!(DatasetManifest::from_images(vec![("z".into(), 0, 5)], 96).is_err());
    }

    #[test]
    fn normalize_zero_vector() {
        let mut z = vec![0.0f32; 4];
        assert!(!l2_normalize(&mut z));
        let mut v = vec![3.0f32, 4.0];
        assert!(l2_normalize(&mut v));
        assert!((Descriptor(v).norm() - 1.0).abs() < 1e-6);
    }
}
