use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::frame::FrameRef;
use crate::relevance::Score;

/// Score attached to a frame by one scorer family.
///
/// Sets never mix families; each family has its own notion of "relevant".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Relevance {
    /// Generative confidence 0..=5.
    Graded(Score),
    /// Cosine similarity in [-1, 1].
    Similarity(f64),
    /// Picked by the uniform baseline; carries no score.
    Uniform,
}

impl Relevance {
    pub fn is_relevant(&self) -> bool {
        match self {
            Relevance::Graded(s) => s.is_relevant(),
            Relevance::Similarity(_) | Relevance::Uniform => true,
        }
    }

    /// Numeric value used for ranking; uniform picks rank as 0.
    pub fn rank_value(&self) -> f64 {
        match self {
            Relevance::Graded(s) => s.get() as f64,
            Relevance::Similarity(v) => *v,
            Relevance::Uniform => 0.0,
        }
    }

    fn family(&self) -> u8 {
        match self {
            Relevance::Graded(_) => 0,
            Relevance::Similarity(_) => 1,
            Relevance::Uniform => 2,
        }
    }

    /// Higher score first.
    pub fn cmp_desc(&self, other: &Self) -> Ordering {
        other.rank_value().total_cmp(&self.rank_value())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub frame: FrameRef,
    pub score: Relevance,
    pub window_id: usize,
    pub scorer_tag: String,
    /// Local span of the scorer output that produced this score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
}

/// Canonical ranking: score descending, then earlier timestamp, then lower global index.
pub fn rank_order(a: &ScoredFrame, b: &ScoredFrame) -> Ordering {
    a.score
        .cmp_desc(&b.score)
        .then(a.frame.timestamp_s.total_cmp(&b.frame.timestamp_s))
        .then(a.frame.global_index.cmp(&b.frame.global_index))
}

fn chronological(a: &ScoredFrame, b: &ScoredFrame) -> Ordering {
    a.frame
        .timestamp_s
        .total_cmp(&b.frame.timestamp_s)
        .then(a.frame.global_index.cmp(&b.frame.global_index))
}

/// Frames scored in one or more windows, kept in canonical rank order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredFrameSet {
    items: Vec<ScoredFrame>,
    n_ret: usize,
}

impl ScoredFrameSet {
    pub fn new(mut items: Vec<ScoredFrame>) -> Result<Self, EngineError> {
        items.sort_by(rank_order);
        let mut seen = std::collections::BTreeSet::new();
        let mut family = None;
        for it in &items {
            if !seen.insert(it.frame.global_index) {
                return Err(EngineError::DuplicateFrame(it.frame.global_index));
            }
            match family {
                None => family = Some(it.score.family()),
                Some(f) if f != it.score.family() => return Err(EngineError::MixedScoreKinds),
                _ => {}
            }
        }
        let n_ret = items.iter().filter(|i| i.score.is_relevant()).count();
        Ok(Self { items, n_ret })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn items(&self) -> &[ScoredFrame] {
        &self.items
    }

    /// Number of relevant frames (score > 0 for generative scores).
    pub fn n_ret(&self) -> usize {
        self.n_ret
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// How to resolve a frame scored by more than one (overlapping) window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DedupPolicy {
    /// Duplicates are an error.
    Reject,
    /// Keep the highest score; ties go to the lower window id.
    #[default]
    Max,
}

/// Union of per-window results. The output does not depend on input order.
pub fn merge_window_results(
    results: Vec<ScoredFrameSet>,
    policy: DedupPolicy,
) -> Result<ScoredFrameSet, EngineError> {
    let mut best: BTreeMap<usize, ScoredFrame> = BTreeMap::new();
    for item in results.into_iter().flat_map(|r| r.items) {
        match best.get_mut(&item.frame.global_index) {
            None => {
                best.insert(item.frame.global_index, item);
            }
            Some(_) if policy == DedupPolicy::Reject => {
                return Err(EngineError::DuplicateFrame(item.frame.global_index));
            }
            Some(current) => {
                let better = item
                    .score
                    .cmp_desc(&current.score)
                    .then(item.window_id.cmp(&current.window_id))
                    .then(item.span.cmp(&current.span))
                    == Ordering::Less;
                if better {
                    *current = item;
                }
            }
        }
    }
    ScoredFrameSet::new(best.into_values().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionOrder {
    #[default]
    Chronological,
    ByScore,
}

/// Per-window record of how a window was scored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WindowProvenance {
    pub window_id: usize,
    pub n: usize,
    pub first_global: usize,
    pub last_global: usize,
    pub n_ret: usize,
    pub attempts: u32,
    #[serde(default)]
    pub salvaged_pairs: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub incidents: Vec<String>,
}

/// The frames handed to the downstream model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub selected: Vec<ScoredFrame>,
    pub k: usize,
    pub n_ctx: usize,
    pub n_ret: usize,
    pub emission_order: EmissionOrder,
    pub windows: Vec<WindowProvenance>,
}

impl SamplePlan {
    pub fn selected_globals(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.frame.global_index).collect()
    }
}

/// Keeps the `min(n_ret, n_ctx)` best relevant frames.
///
/// Ties at the cut go to the earlier frame. The kept frames are then emitted
/// in `order`.
pub fn select_top_k(scored: &ScoredFrameSet, n_ctx: usize, order: EmissionOrder) -> SamplePlan {
    let k = scored.n_ret().min(n_ctx);
    let mut selected: Vec<ScoredFrame> = scored
        .items()
        .iter()
        .filter(|i| i.score.is_relevant())
        .take(k)
        .cloned()
        .collect();
    if order == EmissionOrder::Chronological {
        selected.sort_by(chronological);
    }
    SamplePlan {
        selected,
        k,
        n_ctx,
        n_ret: scored.n_ret(),
        emission_order: order,
        windows: Vec::new(),
    }
}

/// `m` evenly spread positions out of `n`, centred in their strata.
pub fn uniform_indices(n: usize, m: usize) -> Vec<usize> {
    let m = m.min(n);
    (0..m).map(|j| ((2 * j + 1) * n) / (2 * m)).collect()
}
