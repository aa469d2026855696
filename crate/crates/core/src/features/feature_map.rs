use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MSFM";
const VERSION: u32 = 1;

/// Dense activation grid, channel-major (`values[c * H * W + i * W + j]`).
///
/// Cell `(i, j)` covers resized-image pixels
/// `[j*stride - pad, (j+1)*stride - pad) x [i*stride - pad, (i+1)*stride - pad)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: u32,
    pub pad: u32,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        stride: u32,
        pad: u32,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} map",
                values.len()
            )));
        }
        if channels == 0 || height == 0 || width == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "feature map dimensions must be positive".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            pad,
            values,
        })
    }

    pub fn filled(
        channels: usize,
        height: usize,
        width: usize,
        stride: u32,
        pad: u32,
        v: f32,
    ) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            pad,
            values: vec![v; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.values[(c * self.height + i) * self.width + j]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, o: &FeatureMap) -> bool {
        self.channels == o.channels
            && self.height == o.height
            && self.width == o.width
            && self.stride == o.stride
            && self.pad == o.pad
    }

    /// Image-level embedding: per-channel mean over all cells.
    pub fn global_average(&self) -> Vec<f32> {
        let n = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| (self.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
            .collect()
    }

    /// Single-channel map holding the sum over channels of every cell.
    pub fn channel_sum(&self) -> FeatureMap {
        let n = self.height * self.width;
        let mut out = vec![0.0f32; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        FeatureMap {
            channels: 1,
            values: out,
            ..*self
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.stride,
            self.pad,
        ] {
            w.write_u32::<LittleEndian>(v)?;
        }
        for &v in &self.values {
            w.write_f32::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            what: "feature map".into(),
            reason,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| corrupt(e.to_string()))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut header = [0u32; 6];
        for h in header.iter_mut() {
            *h = r
                .read_u32::<LittleEndian>()
                .map_err(|e| corrupt(e.to_string()))?;
        }
        let [version, c, h, w, stride, pad] = header;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = (c as usize)
            .checked_mul(h as usize)
            .and_then(|x| x.checked_mul(w as usize))
            .ok_or_else(|| corrupt("dimensions overflow".into()))?;
        let mut values = vec![0.0f32; n];
        r.read_f32_into::<LittleEndian>(&mut values)
            .map_err(|e| corrupt(e.to_string()))?;
        FeatureMap::new(c as usize, h as usize, w as usize, stride, pad, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + 4 * self.values.len());
        self.write_to(&mut buf)?;
        crate::persist::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::read_from(bytes.as_slice())
    }
}
