//! Grounding, retrieval and QA metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SamplePlan;

pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions for {references} references")]
    LengthMismatch { predictions: usize, references: usize },
    #[error("invalid interval [{start_s}, {end_s})")]
    InvalidInterval { start_s: f64, end_s: f64 },
    #[error("plan selects no frames")]
    EmptyPlan,
    #[error("annotated frame set is empty")]
    EmptyAnnotation,
    #[error("item {0:?} has no counterpart")]
    UnmatchedItem(String),
    #[error("item {0:?} appears twice")]
    DuplicateItem(String),
}

/// Half-open time interval `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeInterval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, EvalError> {
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || end_s < start_s {
            return Err(EvalError::InvalidInterval { start_s, end_s });
        }
        Ok(Self { start_s, end_s })
    }

    pub fn len(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0.0
    }
}

/// Intersection over union. Two point intervals score 1 when they coincide
/// and 0 otherwise.
pub fn interval_iou(a: &TimeInterval, b: &TimeInterval) -> f64 {
    let inter = (a.end_s.min(b.end_s) - a.start_s.max(b.start_s)).max(0.0);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Threshold keys are printed with one decimal ("0.3").
pub fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub r1: BTreeMap<String, f64>,
    pub miou: f64,
    pub per_item_iou: Vec<f64>,
    pub n_items: usize,
}

/// R1@θ and mIoU over paired items. A missing prediction has IoU 0.
pub fn grounding_metrics(
    preds: &[Option<TimeInterval>],
    gts: &[TimeInterval],
    thresholds: &[f64],
) -> Result<GroundingResult, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch {
            predictions: preds.len(),
            references: gts.len(),
        });
    }
    let per_item_iou: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.as_ref().map_or(0.0, |p| interval_iou(p, g)))
        .collect();
    let n = per_item_iou.len();
    let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let r1 = thresholds
        .iter()
        .map(|&t| (threshold_key(t), frac(per_item_iou.iter().filter(|&&v| v >= t).count())))
        .collect();
    let miou = if n == 0 {
        0.0
    } else {
        per_item_iou.iter().sum::<f64>() / n as f64
    };
    Ok(GroundingResult {
        r1,
        miou,
        per_item_iou,
        n_items: n,
    })
}

/// Turns a plan into one grounding interval.
///
/// Selected frames are grouped into runs of consecutive pool indices; a
/// run scores as its best member. The best run wins, then the longer one,
/// then the earlier one. The interval ends one sampling period after the
/// run's last frame.
pub fn plan_to_interval(plan: &SamplePlan, period_s: f64) -> Result<TimeInterval, EvalError> {
    let mut frames: Vec<_> = plan.selected.iter().collect();
    if frames.is_empty() {
        return Err(EvalError::EmptyPlan);
    }
    frames.sort_by_key(|s| s.frame.global_index);

    // (score, len, start position, end position)
    let mut best: Option<(f64, usize, usize, usize)> = None;
    let mut start = 0;
    for i in 0..frames.len() {
        let run_ends = i + 1 == frames.len()
            || frames[i + 1].frame.global_index != frames[i].frame.global_index + 1;
        if !run_ends {
            continue;
        }
        let score = frames[start..=i]
            .iter()
            .map(|s| s.score.rank_value())
            .fold(f64::NEG_INFINITY, f64::max);
        let len = i + 1 - start;
        let better = match best {
            None => true,
            Some((bs, bl, _, _)) => score > bs || (score == bs && len > bl),
        };
        if better {
            best = Some((score, len, start, i));
        }
        start = i + 1;
    }
    let (_, _, s, e) = best.expect("non-empty plan has a run");
    TimeInterval::new(
        frames[s].frame.timestamp_s,
        frames[e].frame.timestamp_s + period_s.max(0.0),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub recall: f64,
    pub precision: f64,
    pub k_used: usize,
    pub hits: usize,
    pub n_annotated: usize,
}

/// Recall and precision of the selected pool indices against annotated ones.
pub fn frame_recall(selected: &[usize], annotated: &BTreeSet<usize>) -> Result<RetrievalEval, EvalError> {
    if annotated.is_empty() {
        return Err(EvalError::EmptyAnnotation);
    }
    let picked: BTreeSet<usize> = selected.iter().copied().collect();
    let hits = picked.intersection(annotated).count();
    Ok(RetrievalEval {
        recall: hits as f64 / annotated.len() as f64,
        precision: if picked.is_empty() {
            0.0
        } else {
            hits as f64 / picked.len() as f64
        },
        k_used: picked.len(),
        hits,
        n_annotated: annotated.len(),
    })
}

/// First standalone A-E token in free text, as an uppercase letter.
///
/// A token is a single letter with no letters or digits on either side, so
/// "(B)", "B.", "b:" and "answer: c" all count while "Bob" does not.
pub fn extract_choice_letter(text: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let up = c.to_ascii_uppercase();
        if !('A'..='E').contains(&up) {
            continue;
        }
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if before_ok && after_ok {
            return Some(up);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaResult {
    pub accuracy: f64,
    pub n_items: usize,
    pub n_correct: usize,
    /// Responses with no answer letter; they count as wrong.
    pub n_unextractable: usize,
}

pub fn qa_accuracy<S: AsRef<str>>(predicted: &[S], gold: &[char]) -> Result<QaResult, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predicted.len(),
            references: gold.len(),
        });
    }
    let mut n_correct = 0;
    let mut n_unextractable = 0;
    for (p, g) in predicted.iter().zip(gold) {
        match extract_choice_letter(p.as_ref()) {
            Some(l) if l == g.to_ascii_uppercase() => n_correct += 1,
            Some(_) => {}
            None => n_unextractable += 1,
        }
    }
    let n = gold.len();
    Ok(QaResult {
        accuracy: if n == 0 { 0.0 } else { n_correct as f64 / n as f64 },
        n_items: n,
        n_correct,
        n_unextractable,
    })
}

/// One line of a grounding prediction or reference file. A prediction with
/// no interval is written with null bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub item_id: String,
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
}

impl GroundingRecord {
    pub fn interval(&self) -> Result<Option<TimeInterval>, EvalError> {
        match (self.start_s, self.end_s) {
            (Some(s), Some(e)) => TimeInterval::new(s, e).map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub item_id: String,
    pub answer: String,
}

/// Orders predictions to match references by id. Every id must appear
/// exactly once on both sides.
pub fn pair_by_id<'a, P, R>(
    preds: &'a [P],
    refs: &'a [R],
    pred_id: impl Fn(&P) -> &str,
    ref_id: impl Fn(&R) -> &str,
) -> Result<Vec<(&'a P, &'a R)>, EvalError> {
    let mut by_id: BTreeMap<&str, &P> = BTreeMap::new();
    for p in preds {
        if by_id.insert(pred_id(p), p).is_some() {
            return Err(EvalError::DuplicateItem(pred_id(p).to_string()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(refs.len());
    for r in refs {
        let id = ref_id(r);
        if !seen.insert(id) {
            return Err(EvalError::DuplicateItem(id.to_string()));
        }
        let p = by_id
            .remove(id)
            .ok_or_else(|| EvalError::UnmatchedItem(id.to_string()))?;
        pairs.push((p, r));
    }
    if let Some((id, _)) = by_id.into_iter().next() {
        return Err(EvalError::UnmatchedItem(id.to_string()));
    }
    Ok(pairs)
}
