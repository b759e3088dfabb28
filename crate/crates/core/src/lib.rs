//! Open cross-domain visual search over precomputed feature vectors.
//!
//! Every visual domain gets its own learned mapping onto a shared unit
//! hypersphere where categories sit at fixed prototype positions. Retrieval,
//! classification, query refinement, binary hashing and the retrieval-metric
//! suite all operate in that shared space, so sources and targets can be any
//! domain or any combination of domains.

pub mod dataset;
pub mod error;
pub mod harness;
pub mod hypersphere;
pub mod itq;
pub mod mapper;
pub mod metrics;
pub mod prototype;
pub mod search;
pub mod synth;

pub use error::{Error, Result};
pub use hypersphere::UnitVector;
pub use mapper::{DomainMapper, TrainConfig};
pub use prototype::{CategorySplit, PrototypeBook, SplitMode};
pub use search::{GalleryIndex, ItemRecord, RankedItem, RankedList};

// Re-exported so downstream crates and tests use the same matrix types.
pub use nalgebra;
