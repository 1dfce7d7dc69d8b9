//! Candidate frame pools and retrieval windows.
//!
//! A pool is built from a pre-extracted frame manifest, subsampled to a
//! target rate, and then cut into retrieval windows. Inside a window every
//! frame is addressed by a 1-based local index, independent of the pool's
//! sampling rate.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest window a generative scorer is asked to look at in one call.
pub const MAX_WINDOW_CAPACITY: usize = 256;

/// Default candidate sampling rate in frames per second.
pub const DEFAULT_SAMPLE_RATIO: f64 = 1.0;

// Guards the bucket computation against products like 2.9999999999999996.
const BUCKET_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame manifest is empty")]
    EmptyManifest,
    #[error("manifest timestamps are not strictly increasing at row {row} ({prev} -> {next})")]
    NonMonotonicTimestamps { row: usize, prev: f64, next: f64 },
    #[error("invalid timestamp {value} at row {row}")]
    InvalidTimestamp { row: usize, value: f64 },
    #[error("manifest mixes video ids {first:?} and {other:?}")]
    MixedVideoIds { first: String, other: String },
    #[error("sample ratio {requested} fps exceeds the manifest's native rate of {native:.6} fps")]
    RateExceedsSource { requested: f64, native: f64 },
    #[error("sample ratio must be finite and > 0, got {0}")]
    InvalidSampleRatio(f64),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("window capacity must be in 1..={max}, got {got}")]
    InvalidCapacity { got: usize, max: usize },
    #[error("stride must be in 1..={capacity}, got {got}")]
    InvalidStride { got: usize, capacity: usize },
    #[error("{len} frames do not fit into a window of capacity {capacity}")]
    Overflow { len: usize, capacity: usize },
    #[error("global index {0} appears twice in one window")]
    DuplicateGlobalIndex(usize),
    #[error("window members are not in temporal order at position {0}")]
    UnsortedMembers(usize),
    #[error("a window needs at least one frame")]
    EmptyWindow,
    #[error("local index {index} is outside 1..={n}")]
    LocalIndexOutOfRange { index: usize, n: usize },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading manifest: {0}")]
    Io(String),
}

/// One candidate frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    /// Dense position inside the candidate pool.
    pub global_index: usize,
    pub timestamp_s: f64,
    pub uri: String,
    /// `global_index` of the manifest row this frame came from.
    pub source_index: usize,
}

/// One row of a frame manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub video_id: String,
    pub global_index: usize,
    pub timestamp_s: f64,
    pub uri: String,
}

/// Pre-extracted frames of a single video, in timestamp order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameManifest {
    pub video_id: String,
    pub rows: Vec<ManifestRow>,
}

impl FrameManifest {
    /// Validates rows for a single video. Rows must be strictly increasing in time.
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self, FrameError> {
        let first = rows.first().ok_or(FrameError::EmptyManifest)?;
        let video_id = first.video_id.clone();
        for (row, r) in rows.iter().enumerate() {
            if !r.timestamp_s.is_finite() || r.timestamp_s < 0.0 {
                return Err(FrameError::InvalidTimestamp {
                    row,
                    value: r.timestamp_s,
                });
            }
            if r.video_id != video_id {
                return Err(FrameError::MixedVideoIds {
                    first: video_id,
                    other: r.video_id.clone(),
                });
            }
            if row > 0 && rows[row - 1].timestamp_s >= r.timestamp_s {
                return Err(FrameError::NonMonotonicTimestamps {
                    row,
                    prev: rows[row - 1].timestamp_s,
                    next: r.timestamp_s,
                });
            }
        }
        Ok(Self { video_id, rows })
    }

    /// Builds a regular manifest: `count` frames at `fps`, starting at t = 0.
    pub fn regular(video_id: &str, count: usize, fps: f64) -> Self {
        let rows = (0..count)
            .map(|i| ManifestRow {
                video_id: video_id.to_string(),
                global_index: i,
                timestamp_s: i as f64 / fps,
                uri: format!("{video_id}/frame_{i:06}.jpg"),
            })
            .collect();
        Self {
            video_id: video_id.to_string(),
            rows,
        }
    }

    /// Mean frame rate between the first and last row. `None` for a single row.
    pub fn native_rate(&self) -> Option<f64> {
        let n = self.rows.len();
        if n < 2 {
            return None;
        }
        let span = self.rows[n - 1].timestamp_s - self.rows[0].timestamp_s;
        Some((n - 1) as f64 / span)
    }
}

/// Reads newline-delimited manifest records. Blank lines are skipped.
pub fn read_manifest_rows<R: BufRead>(reader: R) -> Result<Vec<ManifestRow>, FrameError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FrameError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| FrameError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Splits rows by `video_id` (in order of first appearance) and validates each group.
pub fn group_manifests(rows: Vec<ManifestRow>) -> Result<Vec<FrameManifest>, FrameError> {
    if rows.is_empty() {
        return Err(FrameError::EmptyManifest);
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<ManifestRow>> = BTreeMap::new();
    for row in rows {
        if !groups.contains_key(&row.video_id) {
            order.push(row.video_id.clone());
        }
        groups.entry(row.video_id.clone()).or_default().push(row);
    }
    order
        .into_iter()
        .map(|id| FrameManifest::new(groups.remove(&id).unwrap_or_default()))
        .collect()
}

/// All frames of a video at the configured sampling rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub video_id: String,
    pub frames: Vec<FrameRef>,
    pub sample_ratio: f64,
    pub source_duration_s: f64,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Time covered by one pool frame.
    pub fn sampling_period(&self) -> f64 {
        1.0 / self.sample_ratio
    }

    /// Pool frames whose manifest index is in `sources`.
    pub fn globals_for_sources<'a, I>(&self, sources: I) -> Vec<usize>
    where
        I: IntoIterator<Item = &'a usize>,
    {
        let wanted: std::collections::BTreeSet<usize> = sources.into_iter().copied().collect();
        self.frames
            .iter()
            .filter(|f| wanted.contains(&f.source_index))
            .map(|f| f.global_index)
            .collect()
    }
}

/// Time bucket of a timestamp at a given rate.
pub fn rate_bucket(timestamp_s: f64, sample_ratio: f64) -> i64 {
    (timestamp_s * sample_ratio + BUCKET_EPS).floor() as i64
}

/// Subsamples a manifest to `sample_ratio` fps.
///
/// A row is kept when its time bucket `floor(t * sample_ratio)` is larger
/// than the bucket of the last kept row. Kept frames are re-indexed densely
/// from zero; the manifest index is kept in `source_index`.
pub fn build_candidate_pool(
    manifest: &FrameManifest,
    sample_ratio: f64,
) -> Result<CandidatePool, FrameError> {
    if !sample_ratio.is_finite() || sample_ratio <= 0.0 {
        return Err(FrameError::InvalidSampleRatio(sample_ratio));
    }
    if manifest.rows.is_empty() {
        return Err(FrameError::EmptyManifest);
    }
    let native = manifest.native_rate();
    if let Some(native) = native {
        if sample_ratio > native * (1.0 + 1e-6) {
            return Err(FrameError::RateExceedsSource {
                requested: sample_ratio,
                native,
            });
        }
    }

    let mut frames = Vec::new();
    let mut last_bucket: Option<i64> = None;
    for row in &manifest.rows {
        let bucket = rate_bucket(row.timestamp_s, sample_ratio);
        if last_bucket.map_or(true, |b| bucket > b) {
            frames.push(FrameRef {
                global_index: frames.len(),
                timestamp_s: row.timestamp_s,
                uri: row.uri.clone(),
                source_index: row.global_index,
            });
            last_bucket = Some(bucket);
        }
    }

    let last_t = manifest.rows[manifest.rows.len() - 1].timestamp_s;
    let period = native.map_or(1.0 / sample_ratio, |r| 1.0 / r);
    Ok(CandidatePool {
        video_id: manifest.video_id.clone(),
        frames,
        sample_ratio,
        source_duration_s: last_t + period,
    })
}

/// A group of at most [`MAX_WINDOW_CAPACITY`] frames addressed by local indices `1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalWindow {
    pub window_id: usize,
    members: Vec<FrameRef>,
    by_global: BTreeMap<usize, usize>,
}

impl RetrievalWindow {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[FrameRef] {
        &self.members
    }

    /// Local index (1-based) of a pool frame, if it belongs to this window.
    pub fn normalize_index(&self, global_index: usize) -> Option<usize> {
        self.by_global.get(&global_index).map(|pos| pos + 1)
    }

    pub fn contains(&self, global_index: usize) -> bool {
        self.by_global.contains_key(&global_index)
    }

    /// `(local, frame)` pairs in ascending local order.
    pub fn local_map(&self) -> impl Iterator<Item = (usize, &FrameRef)> {
        self.members.iter().enumerate().map(|(i, f)| (i + 1, f))
    }

    pub fn first_timestamp(&self) -> f64 {
        self.members[0].timestamp_s
    }
}

/// Relabels time-sorted frames with local indices `1..=n`.
pub fn normalize_window(
    window_id: usize,
    members: Vec<FrameRef>,
    capacity: usize,
) -> Result<RetrievalWindow, FrameError> {
    if members.is_empty() {
        return Err(FrameError::EmptyWindow);
    }
    if members.len() > capacity {
        return Err(FrameError::Overflow {
            len: members.len(),
            capacity,
        });
    }
    let mut by_global = BTreeMap::new();
    for (pos, f) in members.iter().enumerate() {
        if by_global.insert(f.global_index, pos).is_some() {
            return Err(FrameError::DuplicateGlobalIndex(f.global_index));
        }
        if pos > 0 && members[pos - 1].timestamp_s >= f.timestamp_s {
            return Err(FrameError::UnsortedMembers(pos));
        }
    }
    Ok(RetrievalWindow {
        window_id,
        members,
        by_global,
    })
}

/// Frame at a 1-based local index.
pub fn denormalize(window: &RetrievalWindow, local_index: usize) -> Result<&FrameRef, FrameError> {
    if local_index == 0 || local_index > window.n() {
        return Err(FrameError::LocalIndexOutOfRange {
            index: local_index,
            n: window.n(),
        });
    }
    Ok(&window.members[local_index - 1])
}

/// Cuts a pool into windows of `window_capacity` frames starting every `stride` frames.
///
/// Windows stop as soon as one reaches the end of the pool, so every frame is
/// covered; with `stride == window_capacity` they are disjoint and the last
/// one holds the remainder.
pub fn partition_windows(
    pool: &CandidatePool,
    window_capacity: usize,
    stride: usize,
) -> Result<Vec<RetrievalWindow>, FrameError> {
    if window_capacity == 0 || window_capacity > MAX_WINDOW_CAPACITY {
        return Err(FrameError::InvalidCapacity {
            got: window_capacity,
            max: MAX_WINDOW_CAPACITY,
        });
    }
    if stride == 0 || stride > window_capacity {
        return Err(FrameError::InvalidStride {
            got: stride,
            capacity: window_capacity,
        });
    }
    if pool.frames.is_empty() {
        return Err(FrameError::EmptyPool);
    }

    let len = pool.frames.len();
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window_capacity).min(len);
        let members = pool.frames[start..end].to_vec();
        windows.push(normalize_window(windows.len(), members, window_capacity)?);
        if end == len {
            break;
        }
        start += stride;
    }
    Ok(windows)
}
