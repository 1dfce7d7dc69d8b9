//! Staged construction of frame-relevance training data.
//!
//! Stage 1 captions a sparse candidate pool, stage 2 writes one question per
//! caption chunk and records the frames it was grounded on, stage 3 widens
//! the relevant set by similarity and stage 4 has a judge grade every
//! candidate frame. Every model call goes through [`Annotator`].

mod annotator;
mod et;
mod run;
mod stages;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use annotator::{
    AnnotationRequest, Annotator, RemoteAnnotator, StubAnnotator, StubSimilarity,
    PARAM_ANSWER_FORMAT, PARAM_HINT, PARAM_NEGATIVE, PARAM_TASK_TYPE, PARAM_VIDEO_ID,
    LOW_QUALITY_SIGNAL,
};
pub use et::{aggregate_et, EtLabel, EtRecord};
pub use run::{ForgeRun, RunManifest, StageSummary};
pub use stages::{
    chunk_captions, schedule_slot, stage1_caption, stage2_generate, stage3_extend, stage4_score,
    Stage2Output, Stage4Outcome, TaskSlot,
};
pub use stats::{dataset_stats, DatasetStats};

use crate::engine::BackendError;
use crate::frame::{FrameError, FrameRef};
use crate::prompt::PromptError;
use crate::relevance::Score;

pub const SCHEMA_VERSION: u32 = 1;

pub const TASK_TYPES: [&str; 12] = [
    "object_reasoning",
    "action_reasoning",
    "spatial_reasoning",
    "temporal_reasoning",
    "object_perception",
    "action_perception",
    "attribute_perception",
    "spatial_perception",
    "video_detail_referring",
    "counting",
    "ocr",
    "temporal_perception",
];

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("annotator unavailable: {0}")]
    AnnotatorUnavailable(BackendError),
    #[error("annotator output does not follow the schema: {0}")]
    SchemaViolation(String),
    #[error("invalid forge configuration: {0}")]
    InvalidConfig(String),
    #[error("video {video_id}: stage {stage} output is missing")]
    MissingStage { video_id: String, stage: u8 },
    #[error("run directory was created with a different configuration")]
    RunMismatch,
    #[error("{path}: {message}")]
    Corrupt { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ForgeError {
    pub fn is_backend(&self) -> bool {
        matches!(self, ForgeError::AnnotatorUnavailable(_))
    }
}

impl From<BackendError> for ForgeError {
    fn from(e: BackendError) -> Self {
        ForgeError::AnnotatorUnavailable(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub caption_fps: f64,
    pub chunk_size: usize,
    pub task_types: Vec<String>,
    pub mc_fraction: f64,
    pub negative_rate: f64,
    pub target_ratio: f64,
    /// Previous captions shown to the captioner.
    pub caption_context: usize,
    pub transport_retries: u32,
    pub schema_retries: u32,
    pub seed: u64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            caption_fps: 0.2,
            chunk_size: 50,
            task_types: TASK_TYPES.iter().map(|s| s.to_string()).collect(),
            mc_fraction: 0.5,
            negative_rate: 0.01,
            target_ratio: 0.30,
            caption_context: 3,
            transport_retries: 2,
            schema_retries: 1,
            seed: 0,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        let bad = |m: String| Err(ForgeError::InvalidConfig(m));
        if !(self.caption_fps > 0.0 && self.caption_fps.is_finite()) {
            return bad(format!("caption_fps {} must be positive", self.caption_fps));
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1".into());
        }
        if self.task_types.is_empty() {
            return bad("task_types is empty".into());
        }
        if !(0.0..=1.0).contains(&self.mc_fraction) {
            return bad(format!("mc_fraction {} outside [0, 1]", self.mc_fraction));
        }
        if !(0.0..1.0).contains(&self.negative_rate) {
            return bad(format!("negative_rate {} outside [0, 1)", self.negative_rate));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return bad(format!("target_ratio {} outside (0, 1]", self.target_ratio));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCaption {
    pub frame: FrameRef,
    pub text: String,
    /// Set when the captioner returned nothing twice.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub sample_id: String,
    pub video_id: String,
    /// Position in the corpus-wide generation schedule.
    pub ordinal: u64,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub answer: String,
    pub task_type: String,
    pub grounded_frames: BTreeSet<usize>,
    pub candidate_relevant: BTreeSet<usize>,
    pub scored_relevant: BTreeMap<usize, Score>,
    pub is_negative: bool,
    /// Captioned frames in the video.
    pub n_total: usize,
    pub duration_s: f64,
}

impl QASample {
    pub fn is_multiple_choice(&self) -> bool {
        self.options.is_some()
    }

    /// Question text used for retrieval; options are appended for multiple choice.
    pub fn retrieval_query(&self) -> Result<String, PromptError> {
        crate::prompt::augment_query(&self.question, self.options.as_deref().unwrap_or(&[]))
    }

    pub fn retrieval_ratio(&self) -> RetrievalRatio {
        RetrievalRatio::new(self.candidate_relevant.len(), self.n_total.max(1))
    }

    /// Frames judged relevant (score above zero).
    pub fn n_relevant(&self) -> usize {
        self.scored_relevant.values().filter(|s| s.is_relevant()).count()
    }

    /// Checks the dataset row invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err(format!("{}: empty question", self.sample_id));
        }
        if let Some(opts) = &self.options {
            if opts.len() != 5 || opts.iter().any(|o| o.trim().is_empty()) {
                return Err(format!("{}: expected five non-empty options", self.sample_id));
            }
            if !matches!(self.answer.as_str(), "A" | "B" | "C" | "D" | "E") {
                return Err(format!("{}: answer {:?} is not a letter A-E", self.sample_id, self.answer));
            }
        }
        if !self.grounded_frames.is_subset(&self.candidate_relevant) {
            return Err(format!("{}: grounded frames missing from candidates", self.sample_id));
        }
        if let Some(&g) = self.candidate_relevant.iter().next_back() {
            if g >= self.n_total {
                return Err(format!("{}: frame {g} outside the pool", self.sample_id));
            }
        }
        if self.scored_relevant.keys().any(|g| !self.candidate_relevant.contains(g)) {
            return Err(format!("{}: scored frame is not a candidate", self.sample_id));
        }
        if self.is_negative && self.n_relevant() > 0 {
            return Err(format!("{}: negative sample has relevant frames", self.sample_id));
        }
        Ok(())
    }
}

/// `n_grd / n_total`, kept as both parts and the quotient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRatio {
    pub n_grd: usize,
    pub n_total: usize,
    pub r_f: f64,
}

impl RetrievalRatio {
    pub fn new(n_grd: usize, n_total: usize) -> Self {
        assert!(n_total >= 1, "n_total must be positive");
        Self {
            n_grd,
            n_total,
            r_f: n_grd as f64 / n_total as f64,
        }
    }

    /// Smallest frame count reaching `target` of `n_total`.
    pub fn frames_for(target: f64, n_total: usize) -> usize {
        ((target * n_total as f64 - 1e-9).ceil().max(0.0) as usize).min(n_total)
    }
}

/// Why a chunk or sample did not make it into a stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub stage: u8,
    pub item: String,
    pub reason: String,
}

/// `MM:SS` with minutes unbounded.
pub fn format_timestamp(t: f64) -> String {
    let s = t.max(0.0).floor() as u64;
    format!("{:02}:{:02}", s / 60, s % 60)
}

/// Parses `MM:SS`, `H:MM:SS` or either in square brackets, to seconds.
pub fn parse_timestamp(text: &str) -> Option<f64> {
    let t = text.trim().trim_start_matches('[').trim_end_matches(']').trim();
    let parts: Vec<&str> = t.split(':').collect();
    if parts.len() < 2 || parts.len() > 3 {
        return None;
    }
    let mut total = 0.0;
    for p in &parts {
        let v: f64 = p.trim().parse().ok()?;
        if v < 0.0 || !v.is_finite() {
            return None;
        }
        total = total * 60.0 + v;
    }
    Some(total)
}

/// First balanced `{...}` in `text`, skipping braces inside strings.
pub fn first_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Platform-independent 64-bit hash of string parts.
pub fn stable_hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
