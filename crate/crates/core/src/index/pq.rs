use super::kmeans::{kmeans, nearest_in, SortedScalar};
use crate::error::{Error, Result};
use crate::par;

pub const PQ_BITS: u32 = 8;
pub const PQ_CODEWORDS: usize = 1 << PQ_BITS;

/// `m` sub-quantizers with 256 codewords each over `sub_dim`-wide slices.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    pub dim: usize,
    pub m: usize,
    pub sub_dim: usize,
    /// `m x 256 x sub_dim`, row-major.
    pub codebooks: Vec<f32>,
    scalar: Option<Vec<SortedScalar>>,
}

/// Largest divisor of `d` that does not exceed 96.
pub fn default_subquantizers(d: usize) -> usize {
    (1..=d.min(96))
        .rev()
        .find(|m| d.is_multiple_of(*m))
        .unwrap_or(1)
}

impl PqCodebook {
    pub fn from_codebooks(dim: usize, m: usize, codebooks: Vec<f32>) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!(
                "{m} sub-quantizers do not divide dimension {dim}"
            )));
        }
        let sub_dim = dim / m;
        if codebooks.len() != m * PQ_CODEWORDS * sub_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} codebook values, expected {}",
                codebooks.len(),
                m * PQ_CODEWORDS * sub_dim
            )));
        }
        let scalar = (sub_dim == 1).then(|| {
            codebooks
                .chunks_exact(PQ_CODEWORDS)
                .map(SortedScalar::new)
                .collect()
        });
        Ok(Self {
            dim,
            m,
            sub_dim,
            codebooks,
            scalar,
        })
    }

    /// Trains every sub-quantizer with k-means (k = 256) on its slice of `data`.
    pub fn train(data: &[f32], dim: usize, m: usize, max_iters: usize, seed: u64) -> Result<Self> {
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!(
                "{m} sub-quantizers do not divide dimension {dim}"
            )));
        }
        let n = data.len() / dim;
        if n < PQ_CODEWORDS {
            return Err(Error::InsufficientSample {
                found: n,
                minimum: PQ_CODEWORDS,
            });
        }
        let sub_dim = dim / m;
        let books = par::map_range(m, |s| {
            let slice: Vec<f32> = data
                .chunks_exact(dim)
                .flat_map(|row| row[s * sub_dim..(s + 1) * sub_dim].iter().copied())
                .collect();
            kmeans(
                &slice,
                sub_dim,
                PQ_CODEWORDS,
                max_iters,
                seed.wrapping_add(s as u64 * 7919),
            )
            .map(|km| km.centroids)
        });
        let mut codebooks = Vec::with_capacity(m * PQ_CODEWORDS * sub_dim);
        for b in books {
            codebooks.extend(b?);
        }
        Self::from_codebooks(dim, m, codebooks)
    }

    #[inline]
    pub fn codeword(&self, s: usize, c: usize) -> &[f32] {
        let off = (s * PQ_CODEWORDS + c) * self.sub_dim;
        &self.codebooks[off..off + self.sub_dim]
    }

    fn sub_book(&self, s: usize) -> &[f32] {
        let n = PQ_CODEWORDS * self.sub_dim;
        &self.codebooks[s * n..(s + 1) * n]
    }

    /// Nearest codeword per slice.
    pub fn encode_into(&self, v: &[f32], code: &mut [u8]) {
        for s in 0..self.m {
            let part = &v[s * self.sub_dim..(s + 1) * self.sub_dim];
            let c = match &self.scalar {
                Some(sorted) => sorted[s].nearest(part[0]).0,
                None => nearest_in(self.sub_book(s), self.sub_dim, part).0,
            };
            code[s] = c as u8;
        }
    }

    pub fn encode(&self, v: &[f32]) -> Vec<u8> {
        let mut code = vec![0u8; self.m];
        self.encode_into(v, &mut code);
        code
    }

    pub fn decode(&self, code: &[u8]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim);
        for (s, &c) in code.iter().enumerate() {
            out.extend_from_slice(self.codeword(s, c as usize));
        }
        out
    }

    /// Lookup table `t[s * 256 + c] = |v_s - codeword(s, c)|^2`.
    pub fn distance_table(&self, v: &[f32], table: &mut Vec<f32>) {
        table.clear();
        table.reserve(self.m * PQ_CODEWORDS);
        for s in 0..self.m {
            let part = &v[s * self.sub_dim..(s + 1) * self.sub_dim];
            if self.sub_dim == 1 {
                let x = part[0];
                table.extend(self.sub_book(s).iter().map(|&c| (x - c) * (x - c)));
            } else {
                table.extend(
                    self.sub_book(s)
                        .chunks_exact(self.sub_dim)
                        .map(|c| crate::model::l2_sq(part, c)),
                );
            }
        }
    }

    /// Sum of table entries selected by `code`.
    #[inline]
    pub fn adc(&self, table: &[f32], code: &[u8]) -> f32 {
        code.iter()
            .enumerate()
            .map(|(s, &c)| table[s * PQ_CODEWORDS + c as usize])
            .sum()
    }
}
