use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::QASample;

/// Corpus summary in the shape of a dataset statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: usize,
    pub n_videos: usize,
    pub mean_duration_s: f64,
    pub mean_captioned_frames: f64,
    /// Mean over samples of judged-relevant frames / captioned frames.
    pub relevance_rate: f64,
    /// Mean candidate ratio after extension.
    pub mean_retrieval_ratio: f64,
    /// Count of scored frames per score 0..=5.
    pub score_histogram: [usize; 6],
    pub negative_fraction: f64,
    pub multiple_choice_fraction: f64,
    pub task_types: BTreeMap<String, usize>,
}

pub fn dataset_stats(dataset: &[QASample]) -> DatasetStats {
    let n = dataset.len();
    let mean = |f: &dyn Fn(&QASample) -> f64| {
        if n == 0 {
            0.0
        } else {
            dataset.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let mut videos: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut score_histogram = [0usize; 6];
    let mut task_types = BTreeMap::new();
    for s in dataset {
        videos.insert(&s.video_id, (s.duration_s, s.n_total));
        for score in s.scored_relevant.values() {
            score_histogram[score.get() as usize] += 1;
        }
        *task_types.entry(s.task_type.clone()).or_insert(0) += 1;
    }
    let per_video = |f: &dyn Fn(&(f64, usize)) -> f64| {
        if videos.is_empty() {
            0.0
        } else {
            videos.values().map(f).sum::<f64>() / videos.len() as f64
        }
    };
    let ids: BTreeSet<&str> = videos.keys().copied().collect();
    DatasetStats {
        n_samples: n,
        n_videos: ids.len(),
        mean_duration_s: per_video(&|v| v.0),
        mean_captioned_frames: per_video(&|v| v.1 as f64),
        relevance_rate: mean(&|s| s.n_relevant() as f64 / s.n_total.max(1) as f64),
        mean_retrieval_ratio: mean(&|s| s.retrieval_ratio().r_f),
        score_histogram,
        negative_fraction: mean(&|s| s.is_negative as u8 as f64),
        multiple_choice_fraction: mean(&|s| s.is_multiple_choice() as u8 as f64),
        task_types,
    }
}
