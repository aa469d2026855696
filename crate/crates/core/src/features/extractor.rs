use image::RgbImage;

use super::feature_map::FeatureMap;

pub const TOY_CHANNELS: usize = 64;

const COLOR_BASE: usize = 0;
const GRAD_BASE: usize = 16;
const DIFF_BASE: usize = 32;
const ORIENT_BINS: usize = 16;
const OFFSETS: [i32; 4] = [1, 2, 4, 8];
const DIRECTIONS: [(i32, i32); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

/// Maps a preprocessed (resized and padded) image to a dense feature map.
///
/// Implementations must be deterministic.
pub trait Extractor: Send + Sync {
    fn channels(&self) -> usize;
    fn stride(&self) -> u32;
    fn extract(&self, padded: &RgbImage, pad: u32) -> FeatureMap;
}

/// Hand-crafted 64-channel statistics per `stride x stride` cell:
///
/// * 0..16: color histogram over 4 luminance levels x 4 quadrants of the
///   opponent-color plane (fraction of cell pixels per bin);
/// * 16..32: gradient magnitude (central differences on luminance, scaled by
///   1/255) accumulated into 16 signed orientation bins, bin 0 = +x;
/// * 32..64: mean absolute luminance and chroma differences at offsets
///   {1, 2, 4, 8} along four directions.
#[derive(Debug, Clone, Copy)]
pub struct ToyExtractor {
    pub stride: u32,
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self { stride: 16 }
    }
}

struct Planes {
    w: usize,
    h: usize,
    lum: Vec<f32>,
    opp_a: Vec<f32>,
    opp_b: Vec<f32>,
}

impl Planes {
    fn new(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut lum = Vec::with_capacity(w * h);
        let mut opp_a = Vec::with_capacity(w * h);
        let mut opp_b = Vec::with_capacity(w * h);
        for p in img.pixels() {
            let [r, g, b] = p.0.map(|c| c as f32);
            lum.push(0.299 * r + 0.587 * g + 0.114 * b);
            opp_a.push(r - g);
            opp_b.push(0.5 * (r + g) - b);
        }
        Self {
            w,
            h,
            lum,
            opp_a,
            opp_b,
        }
    }
}

#[inline]
fn color_bin(lum: f32, a: f32, b: f32) -> usize {
    let level = ((lum / 64.0) as usize).min(3);
    let quadrant = match (a >= 0.0, b >= 0.0) {
        (false, false) => 0,
        (true, false) => 1,
        (true, true) => 2,
        (false, true) => 3,
    };
    level * 4 + quadrant
}

#[inline]
fn orientation_bin(gx: f32, gy: f32) -> usize {
    let theta = gy.atan2(gx);
    let step = std::f32::consts::TAU / ORIENT_BINS as f32;
    ((theta / step).round() as i32).rem_euclid(ORIENT_BINS as i32) as usize
}

impl Extractor for ToyExtractor {
    fn channels(&self) -> usize {
        TOY_CHANNELS
    }

    fn stride(&self) -> u32 {
        self.stride
    }

    fn extract(&self, padded: &RgbImage, pad: u32) -> FeatureMap {
        let p = Planes::new(padded);
        let s = self.stride as usize;
        let (cw, ch) = (p.w.div_ceil(s), p.h.div_ceil(s));
        let mut acc = vec![0.0f32; cw * ch * TOY_CHANNELS];
        let mut counts = vec![0u32; cw * ch];
        let (wi, hi) = (p.w as i32, p.h as i32);
        let at = |x: i32, y: i32| (y.clamp(0, hi - 1) * wi + x.clamp(0, wi - 1)) as usize;

        for y in 0..hi {
            let row = (y as usize / s) * cw;
            for x in 0..wi {
                let cell = row + x as usize / s;
                counts[cell] += 1;
                let base = &mut acc[cell * TOY_CHANNELS..(cell + 1) * TOY_CHANNELS];
                let idx = (y * wi + x) as usize;
                let (l, a, b) = (p.lum[idx], p.opp_a[idx], p.opp_b[idx]);

                base[COLOR_BASE + color_bin(l, a, b)] += 1.0;

                let gx = p.lum[at(x + 1, y)] - p.lum[at(x - 1, y)];
                let gy = p.lum[at(x, y + 1)] - p.lum[at(x, y - 1)];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 0.0 {
                    base[GRAD_BASE + orientation_bin(gx, gy)] += mag / 255.0;
                }

                let mut k = DIFF_BASE;
                for &(dx, dy) in &DIRECTIONS {
                    for &o in &OFFSETS {
                        let n = at(x + dx * o, y + dy * o);
                        base[k] += (p.lum[n] - l).abs() / 255.0;
                        base[k + 1] +=
                            ((p.opp_a[n] - a).abs() + (p.opp_b[n] - b).abs()) / (2.0 * 255.0);
                        k += 2;
                    }
                }
            }
        }

        let plane = cw * ch;
        let mut values = vec![0.0f32; TOY_CHANNELS * plane];
        for cell in 0..plane {
            let inv = 1.0 / counts[cell].max(1) as f32;
            for c in 0..TOY_CHANNELS {
                values[c * plane + cell] = acc[cell * TOY_CHANNELS + c] * inv;
            }
        }
        FeatureMap {
            channels: TOY_CHANNELS,
            height: ch,
            width: cw,
            stride: self.stride,
            pad,
            values,
        }
    }
}
