//! Block-level deduplication for versioned byte streams.
//!
//! Content-defined chunking splits layers into chunks, a log-structured
//! store keeps each distinct chunk once, and a content-defined Merkle tree
//! indexes every version so that two parties can find the chunks one of
//! them lacks without comparing every fingerprint.

pub mod cdmt;
pub mod chunker;
pub mod cli;
pub mod error;
pub mod merkle;
pub mod metrics;
pub mod rolling_hash;
pub mod store;
pub mod transfer;
pub mod versioning;

pub use cdmt::{
    cdmt_build, cdmt_compare, cdmt_compare_with, cdmt_comparison_count, cdmt_deserialize,
    cdmt_serialize, BoundaryRule, CdmtConfig, CdmtTree, CompareOutcome, KnownIds, NodeRef,
};
pub use chunker::{chunk_bytes, chunk_stream, Chunk, ChunkMode, ChunkerConfig};
pub use error::{Error, Result};
pub use merkle::MerkleTree;
pub use rolling_hash::{strong_hash, Fingerprint};
pub use versioning::{Lineage, VersionId, VersionKind};
