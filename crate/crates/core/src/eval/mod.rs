//! Retrieval metrics, the synthetic planted-motif benchmark, exhaustive
//! oracles and the benchmark harness.

pub mod benchmark;
pub mod harness;
pub mod metrics;
pub mod oracle;

pub use benchmark::{generate_benchmark, Benchmark, BenchmarkSpec, JitterSpec};
pub use harness::{evaluate, run_benchmark, run_scaling, EvalReport, Preset};
pub use metrics::{
    accuracy_at_1, average_precision, mean_average_precision, Annotation, AnnotationFile,
};
pub use oracle::{brute_force_retrieval_oracle, DenseCollection};
