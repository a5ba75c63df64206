//! Synthetic dataset construction for FEniCS code generation.
//!
//! A seed corpus of instruction/input/output triples feeds a retrieval step,
//! which grounds a staged generator: problem drafts, geometry variants,
//! boundary-condition variants, code synthesis. Every candidate script is run
//! in the sandbox, gets at most one correction, and the survivors become
//! Alpaca records. [`pipeline`] wires the stages together with checkpoints.

pub mod offline;
pub mod pipeline;
pub mod prompts;
pub mod record;
pub mod retrieve;
pub mod seed;
pub mod split;
pub mod stages;
pub mod vocab;

pub use pipeline::{DatasetManifest, ForgeEndpoints, ForgeError, Pipeline, PipelineConfig, StageCounts};
pub use record::AlpacaRecord;
pub use retrieve::{retrieve, Scorer, TfCosine};
pub use seed::{ingest_seed, PhysicsTag, SeedCorpus, SeedEntry};
pub use split::{kfold_indices, kfold_split, SplitError};
pub use stages::{CodeCandidate, Lineage, ProblemDraft, StageError, VariantAxis, VariantSpec, VetStatus};
pub use vocab::{BoundaryDescriptor, DomainDescriptor, PdeFamily, Shape};
