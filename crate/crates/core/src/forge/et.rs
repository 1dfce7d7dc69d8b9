//! Per-video aggregation of timestamp-output instruction records.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// A timestamp label: a frame index or a time span in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtLabel {
    Frame(usize),
    Span { start_s: f64, end_s: f64 },
}

impl EtLabel {
    fn order(&self, other: &Self) -> Ordering {
        match (self, other) {
            (EtLabel::Frame(a), EtLabel::Frame(b)) => a.cmp(b),
            (EtLabel::Frame(_), EtLabel::Span { .. }) => Ordering::Less,
            (EtLabel::Span { .. }, EtLabel::Frame(_)) => Ordering::Greater,
            (EtLabel::Span { start_s: a0, end_s: a1 }, EtLabel::Span { start_s: b0, end_s: b1 }) => {
                a0.total_cmp(b0).then(a1.total_cmp(b1))
            }
        }
    }

    /// Latest second the label touches, for frame labels at `fps`.
    pub fn end_s(&self, fps: f64) -> f64 {
        match self {
            EtLabel::Frame(i) => *i as f64 / fps,
            EtLabel::Span { end_s, .. } => *end_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtRecord {
    pub video_id: String,
    pub query: String,
    pub timestamp_labels: Vec<EtLabel>,
    pub task_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    /// Original queries of an aggregated record, in numbering order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub queries: Vec<String>,
    /// For an aggregated record, the 1-based query numbers behind each label.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_sources: Vec<Vec<usize>>,
}

impl EtRecord {
    /// Every label ends within the video, when the duration is known.
    pub fn labels_within_duration(&self, fps: f64) -> bool {
        match self.duration_s {
            None => true,
            Some(d) => self.timestamp_labels.iter().all(|l| l.end_s(fps) <= d + 1e-9),
        }
    }
}

/// Merges all records of a video into one.
///
/// Queries are joined as a numbered list, labels are the exact union in
/// sorted order, and `label_sources` keeps which queries each label came
/// from. Videos with a single record pass through untouched. Output follows
/// the first appearance of each video in the input.
pub fn aggregate_et(records: &[EtRecord]) -> Vec<EtRecord> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&EtRecord>> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.video_id.as_str()).or_default();
        if g.is_empty() {
            order.push(r.video_id.as_str());
        }
        g.push(r);
    }

    order
        .into_iter()
        .map(|vid| {
            let group = &groups[vid];
            if group.len() == 1 {
                return group[0].clone();
            }
            let queries: Vec<String> = group.iter().map(|r| r.query.clone()).collect();
            let query = queries
                .iter()
                .enumerate()
                .map(|(i, q)| format!("{}. {}", i + 1, q))
                .collect::<Vec<_>>()
                .join("\n");

            let mut labels: Vec<(EtLabel, Vec<usize>)> = Vec::new();
            for (qi, r) in group.iter().enumerate() {
                for l in &r.timestamp_labels {
                    match labels.iter_mut().find(|(x, _)| x.order(l) == Ordering::Equal) {
                        Some((_, src)) => {
                            if src.last() != Some(&(qi + 1)) {
                                src.push(qi + 1);
                            }
                        }
                        None => labels.push((*l, vec![qi + 1])),
                    }
                }
            }
            labels.sort_by(|a, b| a.0.order(&b.0));

            let mut tags: Vec<&str> = Vec::new();
            for r in group {
                if !tags.contains(&r.task_tag.as_str()) {
                    tags.push(&r.task_tag);
                }
            }
            let duration_s = group
                .iter()
                .filter_map(|r| r.duration_s)
                .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))));

            EtRecord {
                video_id: vid.to_string(),
                query,
                task_tag: tags.join("+"),
                duration_s,
                timestamp_labels: labels.iter().map(|(l, _)| *l).collect(),
                label_sources: labels.into_iter().map(|(_, s)| s).collect(),
                queries,
            }
        })
        .collect()
}
