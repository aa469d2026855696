//! Region-level visual instance retrieval: multi-style fused features, an
//! IVF-PQ patch index and two-stage voting localization.

pub mod build;
pub mod engine;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod index;
pub mod model;
pub mod par;
pub mod persist;
pub mod proposals;
pub mod voting;

pub use build::{build_artifacts, build_to_dir, load_engine, BuildConfig, BuildOutcome};
pub use engine::{DirSource, Engine, ImageSource, MemorySource, QueryOutcome};
pub use error::{Error, Result};
pub use geometry::{center_diagonal, iou, Point, Rect};
pub use model::{DatasetManifest, Descriptor, ImageRecord};
pub use voting::{match_score, Retrieval, VotingParams};
