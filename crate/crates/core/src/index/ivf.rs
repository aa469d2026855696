use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distance::nearest_batch;
use super::kmeans::{kmeans, KMeansModel};
use super::pq::{default_subquantizers, PqCodebook, PQ_BITS, PQ_CODEWORDS};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::model::l2_sq;
use crate::par;
use crate::persist::write_atomic;

const MAGIC: &[u8; 4] = b"IVPQ";
pub const INDEX_VERSION: u32 = 1;

/// Back-reference from an index entry to the patch it encodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchRef {
    pub image_id: u32,
    pub patch_id: u32,
    pub rect: [f32; 4],
    pub scale: u8,
}

impl PatchRef {
    pub fn new(image_id: u32, patch_id: u32, rect: &Rect, scale: u8) -> Self {
        Self {
            image_id,
            patch_id,
            rect: rect.to_f32_array(),
            scale,
        }
    }

    pub fn rect(&self) -> Result<Rect> {
        Rect::from_f32_array(self.rect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexParams {
    pub n_list: usize,
    pub n_probe: usize,
    /// Sub-quantizer count; `None` picks the largest divisor of d not above 96.
    pub m: Option<usize>,
    pub kmeans_iters: usize,
    /// Training vectors beyond this count are subsampled away.
    pub max_train_points: usize,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            n_list: 1024,
            n_probe: 30,
            m: None,
            kmeans_iters: 25,
            max_train_points: 65_536,
        }
    }
}

impl IndexParams {
    /// Sizes suited to small collections.
    pub fn desk() -> Self {
        Self {
            n_list: 256,
            n_probe: 32,
            ..Self::default()
        }
    }

    pub fn subquantizers(&self, dim: usize) -> usize {
        self.m.unwrap_or_else(|| default_subquantizers(dim))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "descriptor dimension must be positive".into(),
            ));
        }
        if self.n_list == 0 || self.n_probe == 0 || self.kmeans_iters == 0 {
            return Err(Error::InvalidArgument(
                "n_list, n_probe and kmeans_iters must be positive".into(),
            ));
        }
        let m = self.subquantizers(dim);
        if m == 0 || !dim.is_multiple_of(m) {
            return Err(Error::InvalidArgument(format!(
                "{m} sub-quantizers do not divide descriptor dimension {dim}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct InvertedList {
    refs: Vec<PatchRef>,
    codes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub patch: PatchRef,
    pub dist2: f32,
    pub list: u32,
    pub pos: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
    /// Fewer than k entries were reachable.
    pub short: bool,
}

/// Inverted file over coarse centroids with residual PQ codes.
#[derive(Debug, Clone)]
pub struct IvfPqIndex {
    dim: usize,
    coarse: KMeansModel,
    pq: PqCodebook,
    lists: Vec<InvertedList>,
}

impl PartialEq for IvfPqIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.coarse.centroids == other.coarse.centroids
            && self.pq == other.pq
            && self.lists == other.lists
    }
}

struct Ranked(Hit);

impl Ranked {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.0
            .dist2
            .total_cmp(&other.0.dist2)
            .then(self.0.patch.image_id.cmp(&other.0.patch.image_id))
            .then(self.0.patch.patch_id.cmp(&other.0.patch.patch_id))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

impl IvfPqIndex {
    /// Trains the coarse quantizer on `sample`, then the PQ codebooks on the
    /// residuals of the sample to their coarse centroids.
    pub fn train(sample: &[f32], dim: usize, params: &IndexParams, seed: u64) -> Result<Self> {
        params.validate(dim)?;
        if !sample.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dimension {dim}",
                sample.len()
            )));
        }
        let n = sample.len() / dim;
        let minimum = params.n_list.max(PQ_CODEWORDS);
        if n < minimum {
            return Err(Error::InsufficientSample { found: n, minimum });
        }
        let owned;
        let sample = if n > params.max_train_points.max(minimum) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
            order.truncate(params.max_train_points.max(minimum));
            order.sort_unstable();
            owned = order
                .iter()
                .flat_map(|&i| sample[i * dim..(i + 1) * dim].iter().copied())
                .collect::<Vec<f32>>();
            &owned[..]
        } else {
            sample
        };
        let coarse = kmeans(sample, dim, params.n_list, params.kmeans_iters, seed)?;
        let (labels, _) = nearest_batch(sample, dim, &coarse.centroids);
        let mut residuals = sample.to_vec();
        for (row, &l) in residuals.chunks_exact_mut(dim).zip(&labels) {
            for (r, c) in row.iter_mut().zip(coarse.centroid(l as usize)) {
                *r -= c;
            }
        }
        let m = params.subquantizers(dim);
        let pq = PqCodebook::train(
            &residuals,
            dim,
            m,
            params.kmeans_iters,
            seed.wrapping_add(1),
        )?;
        let lists = vec![InvertedList::default(); coarse.k];
        Ok(Self {
            dim,
            coarse,
            pq,
            lists,
        })
    }

    pub fn from_parts(coarse: KMeansModel, pq: PqCodebook) -> Result<Self> {
        if coarse.dim != pq.dim {
            return Err(Error::DimensionMismatch {
                expected: coarse.dim,
                found: pq.dim,
            });
        }
        let lists = vec![InvertedList::default(); coarse.k];
        Ok(Self {
            dim: coarse.dim,
            coarse,
            pq,
            lists,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_list(&self) -> usize {
        self.coarse.k
    }

    pub fn m(&self) -> usize {
        self.pq.m
    }

    pub fn coarse(&self) -> &KMeansModel {
        &self.coarse
    }

    pub fn codebook(&self) -> &PqCodebook {
        &self.pq
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.refs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn list_len(&self, list: usize) -> usize {
        self.lists[list].refs.len()
    }

    /// Entries of one inverted list with their codes.
    pub fn list_entries(&self, list: usize) -> impl Iterator<Item = (&PatchRef, &[u8])> {
        let l = &self.lists[list];
        l.refs.iter().zip(l.codes.chunks_exact(self.pq.m))
    }

    /// Assigns every vector to its nearest coarse centroid and appends its
    /// residual code to that list, in input order.
    pub fn add(&mut self, refs: &[PatchRef], vectors: &[f32]) -> Result<()> {
        if vectors.len() != refs.len() * self.dim {
            return Err(Error::ShapeMismatch(format!(
                "{} refs but {} values for dimension {}",
                refs.len(),
                vectors.len(),
                self.dim
            )));
        }
        if vectors.is_empty() {
            return Ok(());
        }
        let (labels, _) = nearest_batch(vectors, self.dim, &self.coarse.centroids);
        let m = self.pq.m;
        let dim = self.dim;
        let mut codes = vec![0u8; refs.len() * m];
        const CHUNK: usize = 1024;
        par::for_each_chunk_mut(&mut codes, CHUNK * m, |ci, out| {
            let mut residual = vec![0.0f32; dim];
            for (j, code) in out.chunks_exact_mut(m).enumerate() {
                let p = ci * CHUNK + j;
                let v = &vectors[p * dim..(p + 1) * dim];
                let c = self.coarse.centroid(labels[p] as usize);
                for ((r, a), b) in residual.iter_mut().zip(v).zip(c) {
                    *r = a - b;
                }
                self.pq.encode_into(&residual, code);
            }
        });
        for (p, (r, &l)) in refs.iter().zip(&labels).enumerate() {
            let list = &mut self.lists[l as usize];
            list.refs.push(*r);
            list.codes.extend_from_slice(&codes[p * m..(p + 1) * m]);
        }
        Ok(())
    }

    /// Decoded approximation of a stored entry: centroid + decoded residual.
    pub fn reconstruct(&self, list: u32, pos: u32) -> Vec<f32> {
        let l = &self.lists[list as usize];
        let m = self.pq.m;
        let code = &l.codes[pos as usize * m..(pos as usize + 1) * m];
        let mut v = self.pq.decode(code);
        for (x, c) in v.iter_mut().zip(self.coarse.centroid(list as usize)) {
            *x += c;
        }
        v
    }

    /// Top-k entries per query by asymmetric distance over the `n_probe`
    /// nearest lists. Ties are broken by (image_id, patch_id).
    pub fn search(&self, queries: &[f32], k: usize, n_probe: usize) -> Result<Vec<SearchResult>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if !queries.len().is_multiple_of(self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: queries.len() % self.dim,
            });
        }
        if k == 0 || n_probe == 0 {
            return Err(Error::InvalidArgument(
                "k and n_probe must be positive".into(),
            ));
        }
        let nq = queries.len() / self.dim;
        Ok(par::map_range(nq, |qi| {
            self.search_one(&queries[qi * self.dim..(qi + 1) * self.dim], k, n_probe)
        }))
    }

    fn search_one(&self, q: &[f32], k: usize, n_probe: usize) -> SearchResult {
        let mut ranked: Vec<(usize, f32)> = self
            .coarse
            .centroids
            .chunks_exact(self.dim)
            .map(|c| l2_sq(q, c))
            .enumerate()
            .collect();
        let n_probe = n_probe.min(ranked.len());
        let cmp = |a: &(usize, f32), b: &(usize, f32)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if n_probe < ranked.len() {
            ranked.select_nth_unstable_by(n_probe - 1, cmp);
            ranked.truncate(n_probe);
        }
        ranked.sort_by(cmp);

        let m = self.pq.m;
        let mut residual = vec![0.0f32; self.dim];
        let mut table = Vec::with_capacity(m * PQ_CODEWORDS);
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        let mut reachable = 0usize;
        for &(li, _) in &ranked {
            let list = &self.lists[li];
            if list.refs.is_empty() {
                continue;
            }
            reachable += list.refs.len();
            for ((r, a), b) in residual.iter_mut().zip(q).zip(self.coarse.centroid(li)) {
                *r = a - b;
            }
            self.pq.distance_table(&residual, &mut table);
            for (pos, (pref, code)) in list.refs.iter().zip(list.codes.chunks_exact(m)).enumerate()
            {
                let d = self.pq.adc(&table, code);
                let cand = Ranked(Hit {
                    patch: *pref,
                    dist2: d,
                    list: li as u32,
                    pos: pos as u32,
                });
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        let hits = heap.into_sorted_vec().into_iter().map(|r| r.0).collect();
        SearchResult {
            hits,
            short: reachable < k,
        }
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        let m = self.pq.m;
        for v in [
            INDEX_VERSION,
            self.dim as u32,
            self.coarse.k as u32,
            m as u32,
            PQ_BITS,
        ] {
            out.write_u32::<LE>(v).unwrap();
        }
        for &c in self.coarse.centroids.iter().chain(&self.pq.codebooks) {
            out.write_f32::<LE>(c).unwrap();
        }
        out.write_u64::<LE>(self.len() as u64).unwrap();
        for list in &self.lists {
            out.write_u64::<LE>(list.refs.len() as u64).unwrap();
            for (r, code) in list.refs.iter().zip(list.codes.chunks_exact(m)) {
                out.write_u32::<LE>(r.image_id).unwrap();
                out.write_u32::<LE>(r.patch_id).unwrap();
                for v in r.rect {
                    out.write_f32::<LE>(v).unwrap();
                }
                out.push(r.scale);
                out.extend_from_slice(code);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            what: "index".into(),
            reason,
        };
        let eof = |_| corrupt("truncated".into());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LE>().map_err(eof)?;
        if version != INDEX_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let dim = r.read_u32::<LE>().map_err(eof)? as usize;
        let n_list = r.read_u32::<LE>().map_err(eof)? as usize;
        let m = r.read_u32::<LE>().map_err(eof)? as usize;
        let bits = r.read_u32::<LE>().map_err(eof)?;
        if bits != PQ_BITS {
            return Err(corrupt(format!("unsupported code width {bits}")));
        }
        if dim == 0 || n_list == 0 || m == 0 || !dim.is_multiple_of(m) {
            return Err(corrupt(format!(
                "invalid geometry d={dim} n_list={n_list} m={m}"
            )));
        }
        let header_floats = n_list * dim + PQ_CODEWORDS * dim;
        if bytes.len() < 24 + header_floats * 4 + 8 {
            return Err(corrupt("truncated".into()));
        }
        let mut read_f32s = |n: usize| -> Result<Vec<f32>> {
            let mut v = vec![0.0f32; n];
            r.read_f32_into::<LE>(&mut v).map_err(eof)?;
            Ok(v)
        };
        let centroids = read_f32s(n_list * dim)?;
        let codebooks = read_f32s(m * PQ_CODEWORDS * (dim / m))?;
        let coarse = KMeansModel::from_centroids(dim, centroids)?;
        let pq = PqCodebook::from_codebooks(dim, m, codebooks)?;
        let total = r.read_u64::<LE>().map_err(eof)?;
        let entry_bytes = 8 + 16 + 1 + m;
        let mut lists = Vec::with_capacity(n_list);
        let mut seen = 0u64;
        for _ in 0..n_list {
            let len = r.read_u64::<LE>().map_err(eof)?;
            let remaining = (bytes.len() as u64).saturating_sub(r.position());
            if len.saturating_mul(entry_bytes as u64) > remaining {
                return Err(corrupt("truncated".into()));
            }
            let len = len as usize;
            let mut list = InvertedList {
                refs: Vec::with_capacity(len),
                codes: Vec::with_capacity(len * m),
            };
            for _ in 0..len {
                let image_id = r.read_u32::<LE>().map_err(eof)?;
                let patch_id = r.read_u32::<LE>().map_err(eof)?;
                let mut rect = [0.0f32; 4];
                r.read_f32_into::<LE>(&mut rect).map_err(eof)?;
                let scale = r.read_u8().map_err(eof)?;
                let start = list.codes.len();
                list.codes.resize(start + m, 0);
                r.read_exact(&mut list.codes[start..]).map_err(eof)?;
                list.refs.push(PatchRef {
                    image_id,
                    patch_id,
                    rect,
                    scale,
                });
            }
            seen += len as u64;
            lists.push(list);
        }
        if seen != total {
            return Err(corrupt(format!(
                "entry count {total} does not match lists ({seen})"
            )));
        }
        if r.position() as usize != bytes.len() {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(Self {
            dim,
            coarse,
            pq,
            lists,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the descriptor dimension against the caller's pipeline.
    pub fn load_expecting(path: &Path, dim: usize) -> Result<Self> {
        let index = Self::load(path)?;
        if index.dim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: index.dim,
            });
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn refs(n: usize) -> Vec<PatchRef> {
        (0..n)
            .map(|i| PatchRef {
                image_id: (i / 10) as u32,
                patch_id: i as u32,
                rect: [0.0, 0.0, 8.0, 8.0],
                scale: 0,
            })
            .collect()
    }

    fn lossless() -> (Vec<f32>, IvfPqIndex) {
        let dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..400 * dim)
            .map(|_| rng.random_range(0..30) as f32 * 0.5)
            .collect();
        let params = IndexParams {
            n_list: 1,
            n_probe: 1,
            m: Some(dim),
            kmeans_iters: 25,
            ..IndexParams::default()
        };
        let mut index = IvfPqIndex::train(&data, dim, &params, 3).unwrap();
        index.add(&refs(400), &data).unwrap();
        (data, index)
    }

    #[test]
    fn lossless_search_matches_exact() {
        let (data, index) = lossless();
        let queries = &data[..40 * 4];
        let res = index.search(queries, 10, 1).unwrap();
        let truth = super::super::exact_knn(queries, &data, 4, 400);
        for (r, t) in res.iter().zip(&truth) {
            // exact distances with the index's tie-break on (image, patch)
            let mut t: Vec<(usize, f32)> = t.clone();
            t.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for (h, e) in r.hits.iter().zip(&t) {
                assert!((h.dist2 - e.1).abs() < 1e-4, "{} vs {}", h.dist2, e.1);
            }
            assert_eq!(r.hits[0].dist2, 0.0);
        }
    }

    #[test]
    fn conservation_and_duplicates() {
        let (data, mut index) = lossless();
        assert_eq!(index.len(), 400);
        let one = refs(1);
        index.add(&one, &data[..4]).unwrap();
        index.add(&one, &data[..4]).unwrap();
        assert_eq!(index.len(), 402);
        let codes: Vec<&[u8]> = index
            .list_entries(0)
            .filter(|(r, _)| r.patch_id == 0)
            .map(|(_, c)| c)
            .collect();
        assert_eq!(codes.len(), 3);
        assert_eq!(codes[1], codes[2]);
    }

    #[test]
    fn zero_residual_vector() {
        let (_, mut index) = lossless();
        let c = index.coarse.centroid(0).to_vec();
        let before = index.len();
        index.add(&refs(1), &c).unwrap();
        let (_, code) = index.list_entries(0).nth(before).unwrap();
        let expected = index.pq.encode(&[0.0; 4]);
        assert_eq!(code, &expected[..]);
    }

    #[test]
    fn short_results_are_flagged() {
        let (_, index) = lossless();
        let r = index.search(&[0.0; 4], 1000, 1).unwrap();
        assert!(r[0].short);
        assert_eq!(r[0].hits.len(), 400);
        let r = index.search(&[0.0; 4], 5, 1).unwrap();
        assert!(!r[0].short);
    }

    #[test]
    fn round_trip_and_guards() {
        let (data, index) = lossless();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.ivpq");
        index.save(&path).unwrap();
        let back = IvfPqIndex::load(&path).unwrap();
        assert_eq!(back, index);
        assert_eq!(
            back.search(&data[..40], 5, 1).unwrap(),
            index.search(&data[..40], 5, 1).unwrap()
        );
        assert!(matches!(
            IvfPqIndex::load_expecting(&path, 8),
            Err(Error::DimensionMismatch {
                expected: 8,
                found: 4
            })
        ));
        let mut bytes = index.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            IvfPqIndex::from_bytes(&bytes),
            Err(Error::Corrupt { .. })
        ));
        let bytes = index.to_bytes();
        assert!(matches!(
            IvfPqIndex::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn empty_index_errors() {
        let (data, _) = lossless();
        let params = IndexParams {
            n_list: 2,
            m: Some(2),
            ..IndexParams::default()
        };
        let index = IvfPqIndex::train(&data, 4, &params, 0).unwrap();
        assert!(matches!(
            index.search(&data[..4], 1, 1),
            Err(Error::EmptyIndex)
        ));
    }

    #[test]
    fn insufficient_sample() {
        let params = IndexParams {
            n_list: 8,
            m: Some(2),
            ..IndexParams::default()
        };
        assert!(matches!(
            IvfPqIndex::train(&[0.0; 100 * 4], 4, &params, 0),
            Err(Error::InsufficientSample {
                found: 100,
                minimum: 256
            })
        ));
        let params = IndexParams {
            m: Some(3),
            ..IndexParams::default()
        };
        assert!(IvfPqIndex::train(&[0.0; 100 * 4], 4, &params, 0).is_err());
    }
}
