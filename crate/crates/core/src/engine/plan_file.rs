use serde::{Deserialize, Serialize};

use super::{PrefilterReport, Relevance, SamplePlan, WindowProvenance};
use crate::engine::EmissionOrder;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedFrame {
    pub global_index: usize,
    pub source_index: usize,
    pub timestamp_s: f64,
    pub uri: String,
    pub score: Relevance,
    pub window_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProvenance {
    pub scorer: String,
    pub n_ret: usize,
    pub pool_size: usize,
    pub sampling_period_s: f64,
    pub windows: Vec<WindowProvenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter: Option<PrefilterReport>,
}

/// On-disk form of a sample plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub video_id: String,
    pub query: String,
    pub k: usize,
    pub n_ctx: usize,
    pub emission_order: EmissionOrder,
    pub selected: Vec<PlannedFrame>,
    pub provenance: PlanProvenance,
    /// Effective configuration of the run that produced the plan.
    pub config: serde_json::Value,
}

impl PlanFile {
    pub fn new(
        video_id: &str,
        query: &str,
        plan: &SamplePlan,
        provenance: PlanProvenance,
        config: serde_json::Value,
    ) -> Self {
        Self {
            schema_version: PLAN_SCHEMA_VERSION,
            video_id: video_id.to_string(),
            query: query.to_string(),
            k: plan.k,
            n_ctx: plan.n_ctx,
            emission_order: plan.emission_order,
            selected: plan
                .selected
                .iter()
                .map(|s| PlannedFrame {
                    global_index: s.frame.global_index,
                    source_index: s.frame.source_index,
                    timestamp_s: s.frame.timestamp_s,
                    uri: s.frame.uri.clone(),
                    score: s.score,
                    window_id: s.window_id,
                    span: s.span,
                })
                .collect(),
            provenance,
            config,
        }
    }

    pub fn selected_globals(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.global_index).collect()
    }
}
