//! Sampler comparison over frame budgets on a synthetic scenario.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use framesift_core::engine::{
    hybrid_sample, sample, EmbeddingSimilarity, OracleScorer, QueryExtras, SamplePlan, Scorer, SyntheticEmbedder,
};
use framesift_core::eval::frame_recall;
use framesift_core::frame::{build_candidate_pool, FrameManifest};
use framesift_core::relevance::Score;

use crate::config::{resolve, Flags};
use crate::error::CliError;
use crate::io::{parse_list, read_json, write_json};

use super::template_store;

fn default_fps() -> f64 {
    1.0
}

fn default_score() -> u8 {
    Score::MAX
}

/// Inclusive range of manifest indices planted as relevant.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Segment {
    start: usize,
    end: usize,
    #[serde(default = "default_score")]
    score: u8,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Scenario {
    video_id: String,
    n_frames: usize,
    #[serde(default = "default_fps")]
    fps: f64,
    planted: Vec<Segment>,
    query: String,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct Cell {
    budget: usize,
    recall: f64,
    plan_size: usize,
}

#[derive(Debug, Serialize)]
struct Row {
    method: &'static str,
    cells: Vec<Cell>,
}

#[derive(Debug, Serialize)]
struct Comparison {
    video_id: String,
    pool_size: usize,
    planted: usize,
    seed: u64,
    budgets: Vec<usize>,
    rows: Vec<Row>,
    config: Value,
}

const METHODS: [&str; 4] = ["uniform", "similarity", "generative", "hybrid"];

pub fn run(scenario: &Path, budgets: &str, out: &Path, config: Option<&Path>, flags: Flags) -> Result<(), CliError> {
    let cfg = resolve(None, config, flags.0)?;
    let budgets: Vec<usize> = parse_list(budgets, "budget")?;
    if budgets.is_empty() || budgets.contains(&0) {
        return Err(CliError::usage("budgets must be positive frame counts"));
    }
    let sc: Scenario = read_json(scenario)?;
    if sc.n_frames == 0 || !(sc.fps > 0.0 && sc.fps.is_finite()) {
        return Err(CliError::data("scenario needs n_frames > 0 and fps > 0"));
    }
    let mut by_source: BTreeMap<usize, Score> = BTreeMap::new();
    for s in &sc.planted {
        if s.start > s.end || s.end >= sc.n_frames {
            return Err(CliError::data(format!("planted segment {}-{} is outside the video", s.start, s.end)));
        }
        let score = Score::new(s.score).ok_or_else(|| CliError::data(format!("score {} outside 0..=5", s.score)))?;
        for i in s.start..=s.end {
            let e = by_source.entry(i).or_insert(score);
            *e = (*e).max(score);
        }
    }

    let manifest = FrameManifest::regular(&sc.video_id, sc.n_frames, sc.fps);
    let pool = build_candidate_pool(&manifest, cfg.sampler.sample_ratio)?;
    let planted: BTreeMap<usize, Score> = pool
        .frames
        .iter()
        .filter_map(|f| by_source.get(&f.source_index).map(|s| (f.global_index, *s)))
        .filter(|(_, s)| s.is_relevant())
        .collect();
    let truth: BTreeSet<usize> = planted.keys().copied().collect();
    if truth.is_empty() {
        return Err(CliError::data("scenario plants no relevant frame in the pool"));
    }

    let seed = sc.seed.wrapping_add(cfg.sampler.seed);
    let store = template_store(&cfg)?;
    let extras = QueryExtras::default();
    let oracle = OracleScorer::new(planted.clone());
    let similarity = EmbeddingSimilarity::new(SyntheticEmbedder::new(truth.iter().copied(), seed));
    let prefilter_k = cfg.sampler.prefilter_k.min(cfg.sampler.window_capacity);

    let mut rows: Vec<Row> = METHODS.iter().map(|m| Row { method: m, cells: Vec::new() }).collect();
    for &budget in &budgets {
        let mut scfg = cfg.sampler_config();
        scfg.n_ctx = budget;
        let plans: [SamplePlan; 4] = [
            sample(&pool, &sc.query, &extras, Scorer::Uniform, &store, &scfg)?,
            sample(&pool, &sc.query, &extras, Scorer::Similarity(&similarity), &store, &scfg)?,
            sample(&pool, &sc.query, &extras, Scorer::Generative(&oracle), &store, &scfg)?,
            hybrid_sample(&pool, &sc.query, &extras, &similarity, &oracle, prefilter_k, &store, &scfg)?.plan,
        ];
        for (row, plan) in rows.iter_mut().zip(plans.iter()) {
            let r = frame_recall(&plan.selected_globals(), &truth)?;
            row.cells.push(Cell {
                budget,
                recall: r.recall,
                plan_size: plan.selected.len(),
            });
        }
    }

    let report = Comparison {
        video_id: sc.video_id.clone(),
        pool_size: pool.len(),
        planted: truth.len(),
        seed,
        budgets: budgets.clone(),
        rows,
        config: cfg.echo(),
    };
    write_json(out, &report)?;
    print!("{}", render_table(&report));
    println!("config {}", serde_json::to_string(&report.config).expect("config serializes"));
    Ok(())
}

/// Recall per method and budget; each cell is `recall/plan size`.
fn render_table(c: &Comparison) -> String {
    let mut s = format!(
        "video {}  pool {} frames  planted {}  seed {}\n",
        c.video_id, c.pool_size, c.planted, c.seed
    );
    s.push_str(&format!("{:<12}", "method"));
    for b in &c.budgets {
        s.push_str(&format!(" {:>12}", format!("<={b} frm")));
    }
    s.push('\n');
    for row in &c.rows {
        s.push_str(&format!("{:<12}", row.method));
        for cell in &row.cells {
            s.push_str(&format!(" {:>12}", format!("{:.3}/{}", cell.recall, cell.plan_size)));
        }
        s.push('\n');
    }
    s
}
