//! Block-level KV cache sharing for redundancy-heavy decode workloads.
//!
//! Long chain-of-thought generations tend to repeat themselves: near-identical
//! reasoning steps recur within a single sequence, and their cached key/value
//! vectors stay close across layers. This crate turns that observation into a
//! memory optimization that can be exercised end to end on a laptop:
//!
//! - [`tensorlab`] — per-head attention math (scores, softmax, outputs, norms).
//! - [`kvgen`] — deterministic synthetic traces with planted step redundancy
//!   plus per-layer/per-head KV states, standing in for a real model.
//! - [`simfilter`] — the two-stage reuse filter: bag-of-words cosine over steps,
//!   then layer-averaged normalized Euclidean distance over cache blocks.
//! - [`blockstore`] — a paged cache with per-sequence block tables, refcounts,
//!   and zero-copy block sharing by table remap.
//! - [`schedsim`] — a deterministic continuous-batching simulator that converts
//!   freed blocks into batch size and throughput.
//! - [`bounds`] — numerical verification of the key/value perturbation bounds
//!   that justify substituting one block for a sufficiently close one.

pub mod blockstore;
pub mod bounds;
pub mod error;
pub mod kvgen;
pub mod schedsim;
pub mod simfilter;
pub mod tensorlab;

pub use error::{Error, Result};
