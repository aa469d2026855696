use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::kmeans;
use crate::model::l2_sq;

const STD_EPS: f64 = 1e-6;

/// A dataset image used as a style source, summarized by its per-channel
/// pixel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTemplate {
    pub image_id: u32,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl StyleTemplate {
    pub fn from_image(image_id: u32, img: &RgbImage) -> Self {
        let (mean, std) = channel_stats(img);
        Self {
            image_id,
            mean,
            std,
        }
    }
}

fn channel_stats(img: &RgbImage) -> ([f64; 3], [f64; 3]) {
    let n = (img.width() as f64) * (img.height() as f64);
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for p in img.pixels() {
        for c in 0..3 {
            let v = p.0[c] as f64;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    (mean, std)
}

/// Renders a content image in the style of a template. Must be deterministic
/// and preserve dimensions.
pub trait Stylizer: Send + Sync {
    fn stylize(&self, content: &RgbImage, template: &StyleTemplate) -> RgbImage;
}

/// Per-channel mean/std color transfer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyStylizer;

impl Stylizer for ToyStylizer {
    fn stylize(&self, content: &RgbImage, t: &StyleTemplate) -> RgbImage {
        let (mean, std) = channel_stats(content);
        let gain: [f64; 3] = std::array::from_fn(|c| t.std[c] / std[c].max(STD_EPS));
        let mut out = content.clone();
        for p in out.pixels_mut() {
            for c in 0..3 {
                let v = (p.0[c] as f64 - mean[c]) * gain[c] + t.mean[c];
                p.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

/// Clusters image-level embeddings into `k_s` groups and returns, for every
/// cluster, the id of its member closest to the centroid (lowest id on ties).
pub fn select_style_templates(
    ids: &[u32],
    embeddings: &[Vec<f32>],
    k_s: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    if ids.len() != embeddings.len() {
        return Err(Error::ShapeMismatch(
            "one embedding per image required".into(),
        ));
    }
    if k_s > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "k_s = {k_s} exceeds the {} available images",
            ids.len()
        )));
    }
    if k_s == 0 {
        return Ok(Vec::new());
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::ShapeMismatch(
            "embeddings differ in dimension".into(),
        ));
    }
    let flat: Vec<f32> = embeddings.iter().flatten().copied().collect();
    let model = kmeans::kmeans(&flat, dim, k_s, kmeans::DEFAULT_MAX_ITERS, seed)?;
    let labels: Vec<usize> = embeddings.iter().map(|e| model.nearest(e).0).collect();
    let mut out = Vec::with_capacity(k_s);
    for c in 0..k_s {
        let centroid = model.centroid(c);
        let mut members: Vec<usize> = (0..ids.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            // Lloyd re-seeding keeps clusters populated; fall back to all images
            members = (0..ids.len()).filter(|i| !out.contains(&ids[*i])).collect();
        }
        let best = members
            .into_iter()
            .min_by(|&a, &b| {
                l2_sq(&embeddings[a], centroid)
                    .total_cmp(&l2_sq(&embeddings[b], centroid))
                    .then(ids[a].cmp(&ids[b]))
            })
            .unwrap();
        out.push(ids[best]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn template_of_itself_is_identity() {
        let img = RgbImage::from_fn(20, 10, |x, y| Rgb([(x * 10) as u8, (y * 20) as u8, 77]));
        let t = StyleTemplate::from_image(0, &img);
        assert_eq!(ToyStylizer.stylize(&img, &t), img);
    }

    #[test]
    fn constant_input_maps_to_template_mean() {
        let img = RgbImage::from_pixel(8, 8, Rgb([10, 20, 30]));
        let t = StyleTemplate {
            image_id: 0,
            mean: [50.0, 60.0, 70.0],
            std: [5.0, 5.0, 5.0],
        };
        let out = ToyStylizer.stylize(&img, &t);
        assert!(out.pixels().all(|p| p.0 == [50, 60, 70]));
    }

    #[test]
    fn mean_std_substitution() {
        // two pixel values 90 and 110: mean 100, std 10
        let img = RgbImage::from_fn(
            2,
            1,
            |x, _| if x == 0 { Rgb([90; 3]) } else { Rgb([110; 3]) },
        );
        let t = StyleTemplate {
            image_id: 0,
            mean: [50.0; 3],
            std: [20.0; 3],
        };
        let out = ToyStylizer.stylize(&img, &t);
        assert_eq!(out.get_pixel(1, 0).0, [70; 3]);
        assert_eq!(out.get_pixel(0, 0).0, [30; 3]);
        assert_eq!(out.dimensions(), img.dimensions());
    }

    #[test]
    fn k_equals_n_returns_every_image() {
        let emb = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![-5.0, 3.0]];
        let mut got = select_style_templates(&[4, 5, 6], &emb, 3, 1).unwrap();
        got.sort();
        assert_eq!(got, vec![4, 5, 6]);
        assert!(select_style_templates(&[4, 5, 6], &emb, 4, 1).is_err());
    }

    /// Brute force over all 3^n labelings for the inertia-optimal partition,
    /// then the member nearest each group mean.
    fn brute_force_templates(emb: &[Vec<f32>], k: usize) -> Vec<u32> {
        let n = emb.len();
        let dim = emb[0].len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let total = k.pow(n as u32);
        for code in 0..total {
            let mut labels = vec![0usize; n];
            let mut c = code;
            for l in labels.iter_mut() {
                *l = c % k;
                c /= k;
            }
            let mut cost = 0.0;
            let mut ok = true;
            for g in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == g).collect();
                if members.is_empty() {
                    ok = false;
                    break;
                }
                let mean: Vec<f64> = (0..dim)
                    .map(|d| {
                        members.iter().map(|&i| emb[i][d] as f64).sum::<f64>()
                            / members.len() as f64
                    })
                    .collect();
                for &i in &members {
                    cost += (0..dim)
                        .map(|d| (emb[i][d] as f64 - mean[d]).powi(2))
                        .sum::<f64>();
                }
            }
            if ok && best.as_ref().is_none_or(|(b, _)| cost < *b) {
                best = Some((cost, labels));
            }
        }
        let labels = best.unwrap().1;
        let mut out: Vec<u32> = (0..k)
            .map(|g| {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == g).collect();
                let mean: Vec<f32> = (0..dim)
                    .map(|d| members.iter().map(|&i| emb[i][d]).sum::<f32>() / members.len() as f32)
                    .collect();
                *members
                    .iter()
                    .min_by(|&&a, &&b| l2_sq(&emb[a], &mean).total_cmp(&l2_sq(&emb[b], &mean)))
                    .unwrap() as u32
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn separated_blobs_match_brute_force() {
        let centers = [[0.0f32, 0.0], [20.0, 0.0], [0.0, 20.0]];
        let offsets = [[0.3f32, -0.2], [-0.5, 0.1], [0.1, 0.6], [0.9, 0.9]];
        let mut emb = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for o in offsets.iter().take(3 + (b % 2)) {
                emb.push(vec![c[0] + o[0] * (b as f32 + 1.0), c[1] + o[1]]);
            }
        }
        let ids: Vec<u32> = (0..emb.len() as u32).collect();
        let expected = brute_force_templates(&emb, 3);
        for seed in 0..5 {
            let mut got = select_style_templates(&ids, &emb, 3, seed).unwrap();
            got.sort();
            assert_eq!(got, expected, "seed {seed}");
            assert_eq!(
                select_style_templates(&ids, &emb, 3, seed).unwrap(),
                select_style_templates(&ids, &emb, 3, seed).unwrap()
            );
        }
    }
}
