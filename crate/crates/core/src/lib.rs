//! Query-aware frame selection for long videos.
//!
//! A video is reduced to a candidate pool, the pool is cut into numbered
//! windows, a scorer rates the frames of each window against a question and
//! the best frames across all windows form the sample plan.

pub mod engine;
pub mod eval;
pub mod forge;
pub mod frame;
pub mod parallel;
pub mod prompt;
pub mod relevance;
