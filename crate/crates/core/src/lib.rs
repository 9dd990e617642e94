//! Dataset repository: content-addressed storage with content-defined
//! chunking, versioned datasets, role-based access control, workflows that
//! commit their outputs back, and lineage with revocation.

pub mod acl;
pub mod chunker;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod hash;
pub mod lineage;
pub mod manifest;
pub mod names;
pub mod par;
pub mod query;
pub mod repo;
pub mod store;
pub mod workflow;

pub use acl::{Action, Role, ANY_DATASET};
pub use chunker::ChunkParams;
pub use dataset::{CheckinRequest, Commit, CommitView, DiffReport, Selector};
pub use error::{Error, Result};
pub use hash::{ChunkId, CommitId, Digest, ManifestId};
pub use lineage::{Direction, ProvenanceRecord, RevocationMark};
pub use manifest::{FileEntry, Manifest};
pub use names::Principal;
pub use query::QueryExpr;
pub use repo::{Clock, ManualClock, Repo, RepoConfig, SystemClock};
pub use store::ContentStore;
