//! navmem: a deterministic, desk-scale navigation-memory system.
//!
//! The crate couples a graph-based navigation map with a tiny seeded
//! decoder-only transformer whose KV cache is computed per object group,
//! stored in a two-tier (device / backing) cache, and retrieved under a
//! byte budget by a 0/1 knapsack over goal-relevance probabilities. A
//! synthetic grid-world simulator drives the whole loop and a latency
//! cost model turns per-step counters into planning-time estimates.

pub mod clusterer;
pub mod costmodel;
pub mod error;
pub mod experiments;
pub mod kvstore;
pub mod model;
pub mod navmap;
pub mod planner;
pub mod retrieval;
pub mod simworld;
pub mod themes;

pub use error::{Error, Result};
