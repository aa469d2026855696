//! Seeded synthetic collection with procedural motifs planted into textured
//! backgrounds, each image under its own color jitter.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{Annotation, AnnotationFile, ClassInfo};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::model::DatasetManifest;
use crate::par;
use crate::persist::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterSpec {
    pub enabled: bool,
    pub gain: (f64, f64),
    pub offset: (f64, f64),
    pub blur_sigma: (f64, f64),
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            gain: (0.6, 1.4),
            offset: (-40.0, 40.0),
            blur_sigma: (0.0, 1.0),
        }
    }
}

impl JitterSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub num_images: usize,
    pub image_size: (u32, u32),
    pub num_motifs: usize,
    pub instances_per_motif: usize,
    /// Range of the geometric-mean side of planted instances, in pixels.
    pub scale_range: (f64, f64),
    pub style_jitter: JitterSpec,
    pub num_distractors: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            num_images: 200,
            image_size: (256, 256),
            num_motifs: 5,
            instances_per_motif: 10,
            scale_range: (56.0, 96.0),
            style_jitter: JitterSpec::default(),
            num_distractors: 150,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let hosts = self.num_images.saturating_sub(self.num_distractors);
        if self.num_images == 0 || self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::Infeasible("empty collection".into()));
        }
        if self.num_motifs > 0 && self.instances_per_motif > hosts {
            return Err(Error::Infeasible(format!(
                "{} instances per motif need as many non-distractor images, only {hosts} available",
                self.instances_per_motif
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Infeasible(
                "scale range must be positive and ordered".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Ring { cx: f64, cy: f64, r0: f64, r1: f64 },
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
    Stripes { angle: f64, period: f64, duty: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (u - cx).powi(2) + (v - cy).powi(2) <= r * r,
            Shape::Ring { cx, cy, r0, r1 } => {
                let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                d >= r0 && d <= r1
            }
            Shape::Box { x0, y0, x1, y1 } => u >= x0 && u <= x1 && v >= y0 && v <= y1,
            Shape::Stripes {
                angle,
                period,
                duty,
            } => {
                let t = (u * angle.cos() + v * angle.sin()) / period;
                t - t.floor() < duty
            }
            Shape::Triangle { p } => {
                let s = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0)
                };
                let (d0, d1, d2) = (s(p[0], p[1]), s(p[1], p[2]), s(p[2], p[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

/// A layered vector pattern over the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct Motif {
    base: [u8; 3],
    layers: Vec<(Shape, [u8; 3])>,
    pub aspect: f64,
}

fn vivid(rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut c = [
        rng.random_range(0..=255u8),
        rng.random_range(0..=255u8),
        rng.random_range(0..=255u8),
    ];
    // push one channel to an extreme for saturated colors
    let i = rng.random_range(0..3);
    c[i] = if rng.random_bool(0.5) {
        rng.random_range(0..40)
    } else {
        rng.random_range(215..=255)
    };
    c
}

fn random_shape(rng: &mut ChaCha8Rng, size: (f64, f64)) -> Shape {
    let (lo, hi) = size;
    match rng.random_range(0..5) {
        0 => Shape::Disc {
            cx: rng.random(),
            cy: rng.random(),
            r: rng.random_range(lo..hi),
        },
        1 => {
            let r1 = rng.random_range(lo..hi);
            Shape::Ring {
                cx: rng.random(),
                cy: rng.random(),
                r0: r1 * rng.random_range(0.4..0.8),
                r1,
            }
        }
        2 => {
            let (x0, y0): (f64, f64) = (rng.random_range(-0.1..0.9), rng.random_range(-0.1..0.9));
            Shape::Box {
                x0,
                y0,
                x1: x0 + rng.random_range(lo..hi) * 2.0,
                y1: y0 + rng.random_range(lo..hi) * 2.0,
            }
        }
        3 => Shape::Stripes {
            angle: rng.random_range(0.0..std::f64::consts::PI),
            period: rng.random_range(0.08..0.3),
            duty: rng.random_range(0.3..0.6),
        },
        _ => {
            let c: (f64, f64) = (rng.random(), rng.random());
            let r = rng.random_range(lo..hi) * 1.5;
            let p = std::array::from_fn(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (c.0 + r * a.cos(), c.1 + r * a.sin())
            });
            Shape::Triangle { p }
        }
    }
}

impl Motif {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = vivid(rng);
        let n = rng.random_range(6..10);
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let mut s = random_shape(rng, (0.08, 0.3));
            // stripes only as the first layer so they do not wash out the rest
            if i > 0 {
                while matches!(s, Shape::Stripes { .. }) {
                    s = random_shape(rng, (0.08, 0.3));
                }
            }
            layers.push((s, vivid(rng)));
        }
        let aspect = rng.random_range(0.75..1.333);
        Self {
            base,
            layers,
            aspect,
        }
    }

    pub fn color_at(&self, u: f64, v: f64) -> [u8; 3] {
        let mut c = self.base;
        for (s, col) in &self.layers {
            if s.contains(u, v) {
                c = *col;
            }
        }
        c
    }

    /// Paints the motif over the integer-aligned `rect`.
    pub fn render_into(&self, img: &mut RgbImage, rect: &Rect) {
        let (x0, y0) = (rect.x() as u32, rect.y() as u32);
        let (w, h) = (rect.w() as u32, rect.h() as u32);
        for y in y0..(y0 + h).min(img.height()) {
            for x in x0..(x0 + w).min(img.width()) {
                let u = (x - x0) as f64 / w as f64 + 0.5 / w as f64;
                let v = (y - y0) as f64 / h as f64 + 0.5 / h as f64;
                img.put_pixel(x, y, Rgb(self.color_at(u, v)));
            }
        }
    }

    pub fn render(&self, w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        self.render_into(&mut img, &Rect::new(0.0, 0.0, w as f64, h as f64).unwrap());
        img
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
    pub blur_sigma: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        gain: [1.0; 3],
        offset: [0.0; 3],
        blur_sigma: 0.0,
    };

    fn draw(spec: &JitterSpec, rng: &mut ChaCha8Rng) -> Self {
        if !spec.enabled {
            return Self::IDENTITY;
        }
        let mut range = |r: (f64, f64)| {
            if r.1 > r.0 {
                rng.random_range(r.0..r.1)
            } else {
                r.0
            }
        };
        let gain = [range(spec.gain), range(spec.gain), range(spec.gain)];
        let offset = [range(spec.offset), range(spec.offset), range(spec.offset)];
        Self {
            gain,
            offset,
            blur_sigma: range(spec.blur_sigma),
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut out = img.clone();
        for p in out.pixels_mut() {
            for c in 0..3 {
                p.0[c] = (p.0[c] as f64 * self.gain[c] + self.offset[c])
                    .round()
                    .clamp(0.0, 255.0) as u8;
            }
        }
        if self.blur_sigma > 0.05 {
            out = image::imageops::blur(&out, self.blur_sigma as f32);
        }
        out
    }
}

fn background(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    // bilinear value noise over a coarse random lattice, two colors mixed
    let g = 6usize;
    let lattice: Vec<f64> = (0..(g + 1) * (g + 1)).map(|_| rng.random()).collect();
    let a = [
        rng.random_range(40..220) as f64,
        rng.random_range(40..220) as f64,
        rng.random_range(40..220) as f64,
    ];
    let b = [
        rng.random_range(40..220) as f64,
        rng.random_range(40..220) as f64,
        rng.random_range(40..220) as f64,
    ];
    let grain: u64 = rng.random();
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let fx = x as f64 / w as f64 * g as f64;
        let fy = y as f64 / h as f64 * g as f64;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let at = |i: usize, j: usize| lattice[j.min(g) * (g + 1) + i.min(g)];
        let t = at(ix, iy) * (1.0 - tx) * (1.0 - ty)
            + at(ix + 1, iy) * tx * (1.0 - ty)
            + at(ix, iy + 1) * (1.0 - tx) * ty
            + at(ix + 1, iy + 1) * tx * ty;
        let noise = ((grain ^ ((x as u64) << 20 ^ y as u64)).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            >> 59) as f64
            - 16.0;
        Rgb(std::array::from_fn(|c| {
            (a[c] * (1.0 - t) + b[c] * t + noise).clamp(0.0, 255.0) as u8
        }))
    });
    let shapes = rng.random_range(8..16);
    for _ in 0..shapes {
        let s = random_shape(rng, (0.03, 0.12));
        if matches!(s, Shape::Stripes { .. }) {
            continue;
        }
        let col = [
            rng.random_range(0..=255u8),
            rng.random_range(0..=255u8),
            rng.random_range(0..=255u8),
        ];
        for y in 0..h {
            for x in 0..w {
                if s.contains((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64) {
                    img.put_pixel(x, y, Rgb(col));
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone)]
struct ImagePlan {
    seed: u64,
    instances: Vec<(usize, Rect)>,
    jitter: Jitter,
}

/// A generated collection held in memory.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub motifs: Vec<Motif>,
    pub images: Vec<RgbImage>,
    pub manifest: DatasetManifest,
    pub annotations: AnnotationFile,
    pub jitter: Vec<Jitter>,
    pub distractors: Vec<u32>,
}

pub fn image_file_name(id: u32) -> String {
    format!("{id:05}.png")
}

/// Generates the collection described by `spec`; identical specs give
/// identical pixels and annotations.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let motifs: Vec<Motif> = (0..spec.num_motifs)
        .map(|_| Motif::random(&mut rng))
        .collect();
    let (w, h) = spec.image_size;

    let mut ids: Vec<u32> = (0..spec.num_images as u32).collect();
    ids.shuffle(&mut rng);
    let (hosts, distractors) = ids.split_at(spec.num_images - spec.num_distractors);
    let mut distractors = distractors.to_vec();
    distractors.sort_unstable();

    let mut plans: Vec<ImagePlan> = (0..spec.num_images)
        .map(|_| ImagePlan {
            seed: rng.random(),
            instances: Vec::new(),
            jitter: Jitter::draw(&spec.style_jitter, &mut rng),
        })
        .collect();
    let per = spec.instances_per_motif;
    let mut annotations = Vec::new();
    for (m, motif) in motifs.iter().enumerate() {
        for i in 0..per {
            let host = hosts[(m * per + i) % hosts.len()];
            let plan = &mut plans[host as usize];
            let mut placed = None;
            for _ in 0..200 {
                let s = rng.random_range(spec.scale_range.0..=spec.scale_range.1);
                let iw = (s * motif.aspect.sqrt()).round();
                let ih = (s / motif.aspect.sqrt()).round();
                if iw < 1.0 || ih < 1.0 || iw > w as f64 || ih > h as f64 {
                    continue;
                }
                let x = rng.random_range(0..=(w - iw as u32)) as f64;
                let y = rng.random_range(0..=(h - ih as u32)) as f64;
                let r = Rect::new(x, y, iw, ih)?;
                let grown = Rect::new(x - 4.0, y - 4.0, iw + 8.0, ih + 8.0)?;
                if plan
                    .instances
                    .iter()
                    .all(|(_, o)| grown.intersection_area(o) == 0.0)
                {
                    placed = Some(r);
                    break;
                }
            }
            let r = placed.ok_or_else(|| {
                Error::Infeasible(format!(
                    "could not place motif {m} instance {i} in image {host}"
                ))
            })?;
            plan.instances.push((m, r));
            annotations.push(Annotation {
                class_id: m as u32,
                image_id: host,
                rect: r,
            });
        }
    }
    annotations.sort_by_key(|a| (a.class_id, a.image_id));

    let images = par::map(&plans, |plan| {
        let mut prng = ChaCha8Rng::seed_from_u64(plan.seed);
        let mut img = background(&mut prng, w, h);
        for (m, r) in &plan.instances {
            motifs[*m].render_into(&mut img, r);
        }
        plan.jitter.apply(&img)
    });
    let manifest = DatasetManifest::from_images(
        (0..spec.num_images as u32)
            .map(|id| (image_file_name(id), w, h))
            .collect(),
        crate::build::BuildConfig::default().descriptor_dim,
    )?;
    let classes = (0..spec.num_motifs as u32)
        .map(|id| ClassInfo {
            id,
            name: format!("motif-{id}"),
        })
        .collect();
    Ok(Benchmark {
        spec: spec.clone(),
        motifs,
        images,
        manifest,
        annotations: AnnotationFile {
            classes,
            annotations,
        },
        jitter: plans.iter().map(|p| p.jitter).collect(),
        distractors,
    })
}

impl Benchmark {
    /// Writes `<id>.png` files and `annotations.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (id, img) in self.images.iter().enumerate() {
            let mut bytes = Vec::new();
            img.write_to(
                &mut std::io::Cursor::new(&mut bytes),
                image::ImageFormat::Png,
            )?;
            write_atomic(&dir.join(image_file_name(id as u32)), &bytes)?;
        }
        self.annotations.save(&dir.join("annotations.json"))
    }
}

/// Mean squared per-channel pixel difference over a region of two images.
pub fn region_mse(a: &RgbImage, b: &RgbImage, rect: &Rect) -> f64 {
    let (x0, y0) = (rect.x() as u32, rect.y() as u32);
    let (x1, y1) = (
        (rect.right() as u32).min(a.width()),
        (rect.bottom() as u32).min(a.height()),
    );
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..3 {
                let d = a.get_pixel(x, y).0[c] as f64 - b.get_pixel(x, y).0[c] as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            num_images: 16,
            image_size: (96, 80),
            num_motifs: 2,
            instances_per_motif: 5,
            scale_range: (20.0, 30.0),
            num_distractors: 6,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_benchmark(&small()).unwrap();
        let b = generate_benchmark(&small()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.annotations, b.annotations);
        let c = generate_benchmark(&BenchmarkSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn annotation_count_and_distractors() {
        let spec = BenchmarkSpec {
            instances_per_motif: 10,
            num_distractors: 4,
            ..small()
        };
        let b = generate_benchmark(&spec).unwrap();
        assert_eq!(b.annotations.annotations.len(), 20);
        for a in &b.annotations.annotations {
            assert!(!b.distractors.contains(&a.image_id));
            assert!(a.rect.right() <= 96.0 && a.rect.bottom() <= 80.0);
        }
        assert_eq!(b.distractors.len(), 4);
    }

    #[test]
    fn unjittered_instances_are_exact_copies() {
        let spec = BenchmarkSpec {
            style_jitter: JitterSpec::disabled(),
            num_distractors: 0,
            ..small()
        };
        let b = generate_benchmark(&spec).unwrap();
        for a in &b.annotations.annotations {
            let mut reference = b.images[a.image_id as usize].clone();
            b.motifs[a.class_id as usize].render_into(&mut reference, &a.rect);
            assert_eq!(
                region_mse(&reference, &b.images[a.image_id as usize], &a.rect),
                0.0
            );
        }
    }

    #[test]
    fn infeasible_specs_error() {
        let spec = BenchmarkSpec {
            instances_per_motif: 11,
            num_distractors: 6,
            ..small()
        };
        assert!(matches!(
            generate_benchmark(&spec),
            Err(Error::Infeasible(_))
        ));
        let spec = BenchmarkSpec {
            scale_range: (200.0, 300.0),
            ..small()
        };
        assert!(matches!(
            generate_benchmark(&spec),
            Err(Error::Infeasible(_))
        ));
    }
}
