use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::Descriptor;

pub const WHITENING_EPS: f64 = 1e-10;
/// Projections shorter than this (in whitened units) count as zero.
pub const DEGENERATE_NORM: f64 = 1e-6;
const MAGIC: &[u8; 4] = b"WHIT";

/// PCA whitening: `y = P (x - mean)` with rows of `P` the principal
/// directions divided by `sqrt(eigenvalue + eps)`, ordered by descending
/// eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningModel {
    pub dim_in: usize,
    pub d_out: usize,
    pub mean: Vec<f64>,
    /// Row-major `d_out x dim_in`.
    pub projection: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Output of [`apply_whitening`]; `degenerate` marks an input that projected
/// to the zero vector and was replaced by the first basis vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitened {
    pub descriptor: Descriptor,
    pub degenerate: bool,
}

/// Fits the whitening transform on `samples` (row-major, `dim` columns).
pub fn fit_whitening(samples: &[f32], dim: usize, d_out: usize) -> Result<WhiteningModel> {
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch(format!(
            "{} values for dimension {dim}",
            samples.len()
        )));
    }
    let n = samples.len() / dim;
    if d_out == 0 || d_out > dim {
        return Err(Error::InvalidArgument(format!(
            "output dimension {d_out} must be in 1..={dim}"
        )));
    }
    if n <= d_out {
        return Err(Error::InsufficientSample {
            found: n,
            minimum: d_out + 1,
        });
    }
    let mut mean = vec![0.0f64; dim];
    for row in samples.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0f64; dim * dim];
    let mut centered = vec![0.0f64; dim];
    for row in samples.chunks_exact(dim) {
        for (c, (&v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v as f64 - m;
        }
        for a in 0..dim {
            let ca = centered[a];
            let dst = &mut cov[a * dim..a * dim + a + 1];
            for (d, &cb) in dst.iter_mut().zip(&centered[..=a]) {
                *d += ca * cb;
            }
        }
    }
    for a in 0..dim {
        for b in 0..=a {
            let v = cov[a * dim + b] / n as f64;
            cov[a * dim + b] = v;
            cov[b * dim + a] = v;
        }
    }

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &cov));
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let available = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > WHITENING_EPS)
        .count();
    if available < d_out {
        return Err(Error::RankDeficient {
            available,
            requested: d_out,
        });
    }

    let mut projection = Vec::with_capacity(d_out * dim);
    let mut eigenvalues = Vec::with_capacity(d_out);
    for &i in order.iter().take(d_out) {
        let lambda = eig.eigenvalues[i];
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let pivot = v
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, x)| x)
            .unwrap_or(1.0);
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let scale = 1.0 / (lambda + WHITENING_EPS).sqrt();
        projection.extend(v.iter().map(|x| x * scale));
        eigenvalues.push(lambda);
    }
    Ok(WhiteningModel {
        dim_in: dim,
        d_out,
        mean,
        projection,
        eigenvalues,
    })
}

/// Projects and L2-normalizes one raw vector.
pub fn apply_whitening(model: &WhiteningModel, raw: &[f32]) -> Result<Whitened> {
    if raw.len() != model.dim_in {
        return Err(Error::DimensionMismatch {
            expected: model.dim_in,
            found: raw.len(),
        });
    }
    let y = model.project(raw);
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM || !norm.is_finite() {
        let mut v = vec![0.0f32; model.d_out];
        v[0] = 1.0;
        return Ok(Whitened {
            descriptor: Descriptor(v),
            degenerate: true,
        });
    }
    Ok(Whitened {
        descriptor: Descriptor(y.iter().map(|v| (v / norm) as f32).collect()),
        degenerate: false,
    })
}

impl WhiteningModel {
    /// `P (x - mean)` without normalization.
    pub fn project(&self, raw: &[f32]) -> Vec<f64> {
        let centered: Vec<f64> = raw
            .iter()
            .zip(&self.mean)
            .map(|(&x, m)| x as f64 - m)
            .collect();
        self.projection
            .chunks_exact(self.dim_in)
            .map(|row| row.iter().zip(&centered).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Unit principal directions (unscaled projection rows).
    pub fn directions(&self) -> Vec<Vec<f64>> {
        self.projection
            .chunks_exact(self.dim_in)
            .zip(&self.eigenvalues)
            .map(|(row, l)| {
                let s = (l + WHITENING_EPS).sqrt();
                row.iter().map(|v| v * s).collect()
            })
            .collect()
    }

    /// Rounds every parameter through f32, matching what [`Self::save`] stores.
    pub fn round_to_f32(&self) -> Self {
        let r = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        Self {
            dim_in: self.dim_in,
            d_out: self.d_out,
            mean: r(&self.mean),
            projection: r(&self.projection),
            eigenvalues: r(&self.eigenvalues),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.dim_in as u32)?;
        w.write_u32::<LittleEndian>(self.d_out as u32)?;
        for v in self
            .mean
            .iter()
            .chain(&self.projection)
            .chain(&self.eigenvalues)
        {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            what: "whitening model".into(),
            reason,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| corrupt(e.to_string()))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let dim_in = r
            .read_u32::<LittleEndian>()
            .map_err(|e| corrupt(e.to_string()))? as usize;
        let d_out = r
            .read_u32::<LittleEndian>()
            .map_err(|e| corrupt(e.to_string()))? as usize;
        if dim_in == 0 || d_out == 0 || d_out > dim_in {
            return Err(corrupt(format!("invalid dimensions {dim_in} -> {d_out}")));
        }
        let mut read = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0.0f32; n];
            r.read_f32_into::<LittleEndian>(&mut buf)
                .map_err(|e| corrupt(e.to_string()))?;
            Ok(buf.into_iter().map(f64::from).collect())
        };
        let mean = read(dim_in)?;
        let projection = read(d_out * dim_in)?;
        let eigenvalues = read(d_out)?;
        Ok(Self {
            dim_in,
            d_out,
            mean,
            projection,
            eigenvalues,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::persist::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn two_dimensional_oracle() {
        // covariance diag(2, 0.5): leading direction is the x axis
        let samples = [2.0f32, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let m = fit_whitening(&samples, 2, 1).unwrap();
        assert!((m.eigenvalues[0] - 2.0).abs() < 1e-12);
        let dir = &m.directions()[0];
        assert!((dir[0] - 1.0).abs() < 1e-12 && dir[1].abs() < 1e-12);
        let out: Vec<f64> = samples.chunks(2).map(|s| m.project(s)[0]).collect();
        let r2 = 2f64.sqrt();
        for (o, e) in out.iter().zip([r2, -r2, 0.0, 0.0]) {
            assert!((o - e).abs() < 1e-9, "{o} vs {e}");
        }
        let var = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn isotropic_samples_whiten_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nd = Normal::new(0.0f32, 1.0).unwrap();
        let dim = 4;
        let samples: Vec<f32> = (0..10_000 * dim).map(|_| nd.sample(&mut rng)).collect();
        let m = fit_whitening(&samples, dim, dim).unwrap();
        let proj: Vec<Vec<f64>> = samples.chunks(dim).map(|s| m.project(s)).collect();
        for a in 0..dim {
            for b in 0..dim {
                let c = proj.iter().map(|p| p[a] * p[b]).sum::<f64>() / proj.len() as f64;
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((c - expect).abs() < 1e-2);
            }
        }
        for e in &m.eigenvalues {
            assert!((e - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn duplicating_samples_leaves_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nd = Normal::new(0.0f32, 1.0).unwrap();
        let samples: Vec<f32> = (0..300 * 3)
            .map(|i| nd.sample(&mut rng) * (1 + i % 3) as f32)
            .collect();
        let mut doubled = samples.clone();
        doubled.extend_from_slice(&samples);
        let a = fit_whitening(&samples, 3, 2).unwrap();
        let b = fit_whitening(&doubled, 3, 2).unwrap();
        for (x, y) in a.projection.iter().zip(&b.projection) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_normalizes_and_flags_degenerate() {
        let samples = [2.0f32, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.5, 0.5];
        let m = fit_whitening(&samples, 2, 2).unwrap();
        let mean: Vec<f32> = m.mean.iter().map(|&v| v as f32).collect();
        let w = apply_whitening(&m, &mean).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.descriptor.0, vec![1.0, 0.0]);
        for raw in [[3.0f32, 1.0], [-0.1, 7.0], [100.0, -3.0]] {
            let w = apply_whitening(&m, &raw).unwrap();
            assert!(!w.degenerate);
            assert!((w.descriptor.norm() - 1.0).abs() < 1e-6);
        }
        assert!(apply_whitening(&m, &[1.0]).is_err());
    }

    #[test]
    fn rank_deficiency_reported() {
        // all samples on a line in 3d
        let samples: Vec<f32> = (0..50)
            .flat_map(|i| [i as f32, 2.0 * i as f32, 0.0])
            .collect();
        match fit_whitening(&samples, 3, 2) {
            Err(Error::RankDeficient {
                available: 1,
                requested: 2,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(fit_whitening(&samples[..6], 3, 2).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let samples: Vec<f32> = (0..40).map(|i| ((i * 37) % 11) as f32).collect();
        let m = fit_whitening(&samples, 4, 3).unwrap().round_to_f32();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WHIT");
        assert_eq!(buf.len(), 12 + 4 * (4 + 12 + 3));
        assert_eq!(WhiteningModel::read_from(buf.as_slice()).unwrap(), m);
        buf[1] = b'X';
        assert!(WhiteningModel::read_from(buf.as_slice()).is_err());
    }
}
