//! Coarse-quantized product-quantization index and its building blocks.

mod distance;
pub mod exact;
pub mod ivf;
pub mod kmeans;
pub mod pq;

pub use exact::{exact_knn, recall_at_k};
pub use ivf::{Hit, IndexParams, IvfPqIndex, PatchRef, SearchResult};
pub use kmeans::{kmeans, KMeansModel};
pub use pq::{default_subquantizers, PqCodebook, PQ_BITS, PQ_CODEWORDS};
