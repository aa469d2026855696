use crate::model::l2_sq;
use crate::par;

/// Exhaustive k nearest neighbours of every query, by ascending squared
/// distance and then ascending stored index.
pub fn exact_knn(queries: &[f32], data: &[f32], dim: usize, k: usize) -> Vec<Vec<(usize, f32)>> {
    let nq = queries.len() / dim;
    par::map_range(nq, |qi| {
        let q = &queries[qi * dim..(qi + 1) * dim];
        let mut all: Vec<(usize, f32)> = data
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, v)| (i, l2_sq(q, v)))
            .collect();
        let k = k.min(all.len());
        if k == 0 {
            return Vec::new();
        }
        let cmp = |a: &(usize, f32), b: &(usize, f32)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, cmp);
            all.truncate(k);
        }
        all.sort_by(cmp);
        all
    })
}

/// Mean fraction of the true top-k ids found in each approximate list.
pub fn recall_at_k(truth: &[Vec<(usize, f32)>], found: &[Vec<usize>]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let total: f64 = truth
        .iter()
        .zip(found)
        .map(|(t, f)| {
            if t.is_empty() {
                return 1.0;
            }
            let hits = t.iter().filter(|(id, _)| f.contains(id)).count();
            hits as f64 / t.len() as f64
        })
        .sum();
    total / truth.len() as f64
}
