// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cluster/switch analysis of semantic fluency sequences produced by people
//! and language models, plus the interpretability tooling used to look for
//! the same behavior inside a transformer:
//!
//! - [`norms`]: category norms, sequence ingestion, filtering and switch labeling
//! - [`seqstats`]: transition matrices, rank statistics and permutation tests
//! - [`lens`]: tensor dumps, logit lens, vocabulary partitions and switch-aligned curves
//! - [`probe`]: PCA + logistic-regression probes, AUROC and layer-wise reports
//! - [`contrastive`]: convergent/divergent prompt datasets built from embeddings
//! - [`config`]: run configuration shared by the command-line front end
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default). Every result is independent of the worker count.

pub mod config;
pub mod contrastive;
pub mod jsonl;
pub mod lens;
pub mod norms;
pub mod par;
pub mod probe;
pub mod reference;
pub mod seqstats;

/// Version stamped into every record and report this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
