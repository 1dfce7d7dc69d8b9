//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use num_rational::Ratio;
use rand::seq::index::sample as pick;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use framesift_core::engine::{
    hybrid_sample, merge_window_results, sample, select_top_k, DedupPolicy, EmbeddingSimilarity, EmissionOrder,
    OracleEmbedder, OracleScorer, QueryExtras, Relevance, SamplerConfig, ScoredFrame, ScoredFrameSet, Scorer,
    SyntheticEmbedder,
};
use framesift_core::eval::{
    extract_choice_letter, frame_recall, grounding_metrics, interval_iou, qa_accuracy, threshold_key, TimeInterval,
};
use framesift_core::forge::{
    aggregate_et, dataset_stats, ForgeConfig, ForgeRun, EtLabel, EtRecord, StubAnnotator, StubSimilarity,
};
use framesift_core::frame::{
    build_candidate_pool, denormalize, partition_windows, CandidatePool, FrameManifest, FrameRef, MAX_WINDOW_CAPACITY,
};
use framesift_core::prompt::TemplateStore;
use framesift_core::relevance::{expand_entries, parse_relevance_output, ParseMode, RelevanceEntry, RelevanceError, Score};

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("normalization round-trip", normalization_round_trip),
        ("relevance grammar", relevance_grammar),
        ("top-k law", top_k_law),
        ("merge determinism", merge_determinism),
        ("oracle end-to-end recall", oracle_recall),
        ("hybrid degeneracy", hybrid_degeneracy),
        ("metric correctness", metric_correctness),
        ("forge pipeline", forge_pipeline),
        ("timestamp aggregation", et_aggregation),
        ("cli contract", cli_contract),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("criterion {} {name}: PASS ({secs:.1}s)", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s): {e}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn pool(n: usize) -> CandidatePool {
    build_candidate_pool(&FrameManifest::regular("v", n, 1.0), 1.0).unwrap()
}

fn frame(g: usize) -> FrameRef {
    FrameRef {
        global_index: g,
        timestamp_s: g as f64,
        uri: format!("f{g}"),
        source_index: g,
    }
}

fn graded(g: usize, score: u8, window_id: usize) -> ScoredFrame {
    ScoredFrame {
        frame: frame(g),
        score: Relevance::Graded(Score::new(score).unwrap()),
        window_id,
        scorer_tag: "t".into(),
        span: None,
    }
}

fn normalization_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.gen_range(1..=2000);
        let capacity = rng.gen_range(1..=MAX_WINDOW_CAPACITY);
        let stride = rng.gen_range(1..=capacity);
        let windows = partition_windows(&pool(n), capacity, stride).map_err(|e| e.to_string())?;
        let mut covered = vec![false; n];
        for w in &windows {
            let locals: Vec<usize> = w.local_map().map(|(l, _)| l).collect();
            ensure!(w.n() <= 256, "case {case}: window of {}", w.n());
            ensure!(locals == (1..=w.n()).collect::<Vec<_>>(), "case {case}: locals {locals:?}");
            for (local, f) in w.local_map() {
                ensure!(w.normalize_index(f.global_index) == Some(local), "case {case}: normalize {local}");
                ensure!(denormalize(w, local).ok() == Some(f), "case {case}: denormalize {local}");
                covered[f.global_index] = true;
            }
        }
        ensure!(covered.iter().all(|c| *c), "case {case}: frames left uncovered");
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Expected {
    Entries(Vec<(usize, usize, u8)>),
    Error(String),
}

#[derive(Deserialize)]
struct GoldenCase {
    text: String,
    strict: Expected,
    lenient: Vec<(usize, usize, u8)>,
}

fn relevance_grammar() -> Outcome {
    let cases: Vec<GoldenCase> =
        serde_json::from_str(include_str!("../../core/tests/data/relevance_golden.json")).unwrap();
    ensure!(cases.len() == 25, "{} golden cases", cases.len());
    let malformed = cases.iter().filter(|c| matches!(c.strict, Expected::Error(_))).count();
    ensure!(malformed == 8, "{malformed} malformed cases");
    let to_entries = |v: &[(usize, usize, u8)]| -> Vec<RelevanceEntry> {
        v.iter().map(|&(s, e, sc)| RelevanceEntry::span(s, e, Score::new(sc).unwrap())).collect()
    };
    for c in &cases {
        match (&c.strict, parse_relevance_output(&c.text, ParseMode::Strict)) {
            (Expected::Entries(want), Ok(got)) => ensure!(got.entries == to_entries(want), "{:?}", c.text),
            (Expected::Error(kind), Err(e)) => {
                let got = match e {
                    RelevanceError::MalformedOutput { .. } => "malformed",
                    RelevanceError::ScoreOutOfRange { .. } => "score_out_of_range",
                    RelevanceError::InvertedSpan { .. } => "inverted",
                    RelevanceError::SpanOutOfWindow { .. } => "out_of_window",
                };
                ensure!(got == kind, "{:?}: {got} instead of {kind}", c.text);
            }
            (_, got) => return Err(format!("{:?}: strict gave {got:?}", c.text)),
        }
        let lenient = parse_relevance_output(&c.text, ParseMode::Lenient).map_err(|e| e.to_string())?;
        ensure!(lenient.entries == to_entries(&c.lenient), "{:?} lenient", c.text);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let alphabet = b"{}[]\"0123456789 :,-.eENone\n\t";
    for i in 0..10_000 {
        let len = rng.gen_range(0..160);
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..len).map(|_| rng.gen()).collect()
        } else {
            (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect()
        };
        let text = String::from_utf8_lossy(&bytes);
        for mode in [ParseMode::Strict, ParseMode::Lenient] {
            if let Ok(p) = parse_relevance_output(&text, mode) {
                ensure!(p.entries.iter().all(|e| e.score.get() <= 5), "score out of range from {text:?}");
                if let Ok(map) = expand_entries(&p.entries, 256, ParseMode::Lenient) {
                    ensure!(map.values().all(|s| s.get() <= 5), "expanded score out of range from {text:?}");
                }
            }
        }
    }
    Ok(())
}

fn brute_force(items: &[(usize, u8)], n_ctx: usize) -> Vec<usize> {
    let mut rest: Vec<(usize, u8)> = items.iter().copied().filter(|&(_, s)| s > 0).collect();
    let k = rest.len().min(n_ctx);
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best = 0;
        for i in 1..rest.len() {
            let ((g, s), (bg, bs)) = (rest[i], rest[best]);
            if s > bs || (s == bs && g < bg) {
                best = i;
            }
        }
        out.push(rest.remove(best).0);
    }
    out
}

fn top_k_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..500 {
        let m = rng.gen_range(0..200);
        let mut scores = BTreeMap::new();
        for _ in 0..m {
            scores.insert(rng.gen_range(0..600usize), rng.gen_range(0..=5u8));
        }
        let items: Vec<(usize, u8)> = scores.into_iter().collect();
        let n_ctx = rng.gen_range(1..120);
        let set = ScoredFrameSet::new(items.iter().map(|&(g, s)| graded(g, s, 0)).collect()).unwrap();
        let want = brute_force(&items, n_ctx);
        let plan = select_top_k(&set, n_ctx, EmissionOrder::ByScore);
        ensure!(plan.selected_globals() == want, "case {case}: selection differs");
        ensure!(plan.selected.len() == set.n_ret().min(n_ctx), "case {case}: |plan| {}", plan.selected.len());
    }
    Ok(())
}

fn merge_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for run in 0..100 {
        let n = rng.gen_range(20..900);
        let capacity = rng.gen_range(8..=256);
        let stride = rng.gen_range(1..=capacity);
        let mut sets = Vec::new();
        let (mut start, mut wid) = (0, 0);
        loop {
            let end = (start + capacity).min(n);
            let mut items = Vec::new();
            for g in start..end {
                if rng.gen_bool(0.4) {
                    items.push(graded(g, rng.gen_range(0..=5), wid));
                }
            }
            sets.push(ScoredFrameSet::new(items).unwrap());
            if end == n {
                break;
            }
            start += stride;
            wid += 1;
        }
        let serialize = |sets: Vec<ScoredFrameSet>| {
            let merged = merge_window_results(sets, DedupPolicy::Max).unwrap();
            serde_json::to_vec(&select_top_k(&merged, 64, EmissionOrder::ByScore)).unwrap()
        };
        let reference = serialize(sets.clone());
        for perm in 0..20 {
            let mut shuffled = sets.clone();
            shuffled.shuffle(&mut rng);
            ensure!(serialize(shuffled) == reference, "run {run} permutation {perm}");
        }
    }
    Ok(())
}

fn cfg(n_ctx: usize) -> SamplerConfig {
    SamplerConfig {
        n_ctx,
        ..SamplerConfig::default()
    }
}

fn oracle_recall() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = TemplateStore::builtin();
    let q = QueryExtras::default();
    for case in 0..30 {
        let n = rng.gen_range(600..=3600);
        let m = rng.gen_range(5..=50);
        let planted: BTreeSet<usize> = pick(&mut rng, n, m).into_iter().collect();
        let oracle = OracleScorer::planted(planted.iter().copied());
        let n_ctx = rng.gen_range(m..=64);
        let plan = sample(&pool(n), "q", &q, Scorer::Generative(&oracle), &store, &cfg(n_ctx)).map_err(|e| e.to_string())?;
        let r = frame_recall(&plan.selected_globals(), &planted).unwrap().recall;
        ensure!(r == 1.0, "case {case}: n={n} m={m} recall {r}");
    }

    let p = pool(1000);
    let planted: BTreeSet<usize> = (60..75).collect();
    let oracle = OracleScorer::planted(planted.iter().copied());
    let gen = sample(&p, "q", &q, Scorer::Generative(&oracle), &store, &cfg(16)).unwrap();
    let uni = sample(&p, "q", &q, Scorer::Uniform, &store, &cfg(16)).unwrap();
    let r_gen = frame_recall(&gen.selected_globals(), &planted).unwrap().recall;
    let r_uni = frame_recall(&uni.selected_globals(), &planted).unwrap().recall;
    ensure!(r_uni < r_gen, "uniform {r_uni} vs oracle {r_gen}");
    Ok(())
}

fn hybrid_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let store = TemplateStore::builtin();
    let q = QueryExtras::default();
    for case in 0..50 {
        let n = rng.gen_range(1..=256);
        let mut scores = BTreeMap::new();
        for g in 0..n {
            if rng.gen_bool(0.3) {
                scores.insert(g, Score::new(rng.gen_range(0..=5)).unwrap());
            }
        }
        let oracle = OracleScorer::new(scores);
        let sim = EmbeddingSimilarity::new(SyntheticEmbedder::new(0..n / 3, case));
        let c = cfg(rng.gen_range(1..=64));
        let p = pool(n);
        let prefilter_k = rng.gen_range(n..=5000);
        let plain = sample(&p, "q", &q, Scorer::Generative(&oracle), &store, &c).map_err(|e| e.to_string())?;
        let hybrid = hybrid_sample(&p, "q", &q, &sim, &oracle, prefilter_k, &store, &c).map_err(|e| e.to_string())?;
        ensure!(hybrid.plan == plain, "case {case}: n={n} plans differ");
    }
    for case in 0..20 {
        let n = rng.gen_range(600..=3600);
        let m = rng.gen_range(5..=50);
        let planted: BTreeSet<usize> = pick(&mut rng, n, m).into_iter().collect();
        let sim = EmbeddingSimilarity::new(OracleEmbedder::new(planted.iter().copied()));
        let gen = OracleScorer::planted(planted.iter().copied());
        let out = hybrid_sample(&pool(n), "q", &q, &sim, &gen, 256, &store, &cfg(64)).map_err(|e| e.to_string())?;
        let r = frame_recall(&out.plan.selected_globals(), &planted).unwrap().recall;
        ensure!(r == 1.0, "oracle case {case}: recall {r}");
    }
    Ok(())
}

fn grid_iou(a: (u32, u32), b: (u32, u32)) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for cell in 0..a.1.max(b.1) {
        let in_a = a.0 <= cell && cell < a.1;
        let in_b = b.0 <= cell && cell < b.1;
        inter += (in_a && in_b) as u32;
        union += (in_a || in_b) as u32;
    }
    match union {
        0 if a == b => 1.0,
        0 => 0.0,
        u => inter as f64 / u as f64,
    }
}

fn hundredths((s, e): (u32, u32)) -> TimeInterval {
    TimeInterval::new(s as f64 / 100.0, e as f64 / 100.0).unwrap()
}

#[derive(Deserialize)]
struct LetterCase {
    text: String,
    gold: char,
}

fn metric_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let interval = |rng: &mut ChaCha8Rng| {
        let s = rng.gen_range(0..6000);
        (s, s + rng.gen_range(0..3000))
    };
    for _ in 0..1000 {
        let (a, b) = (interval(&mut rng), interval(&mut rng));
        let got = interval_iou(&hundredths(a), &hundredths(b));
        ensure!((got - grid_iou(a, b)).abs() < 1e-6, "{a:?} {b:?}: {got}");
    }

    let (a, b) = ((3i64, 7i64), (5i64, 10i64));
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0);
    let exact = Ratio::new(inter, (a.1 - a.0) + (b.1 - b.0) - inter);
    ensure!(exact == Ratio::new(2, 7), "rational fixture {exact}");
    let got = interval_iou(&TimeInterval::new(3.0, 7.0).unwrap(), &TimeInterval::new(5.0, 10.0).unwrap());
    ensure!(got == 2.0 / 7.0, "fixture IoU {got}");

    let thresholds: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    for suite in 0..200 {
        let n = rng.gen_range(1..40);
        let preds: Vec<Option<TimeInterval>> = (0..n)
            .map(|_| rng.gen_bool(0.9).then(|| hundredths(interval(&mut rng))))
            .collect();
        let gts: Vec<TimeInterval> = (0..n).map(|_| hundredths(interval(&mut rng))).collect();
        let r = grounding_metrics(&preds, &gts, &thresholds).map_err(|e| e.to_string())?;
        for w in thresholds.windows(2) {
            ensure!(r.r1[&threshold_key(w[0])] >= r.r1[&threshold_key(w[1])], "suite {suite} at {}", w[1]);
        }
    }

    let cases: Vec<LetterCase> = serde_json::from_str(include_str!("../../core/tests/data/letters_golden.json")).unwrap();
    let texts: Vec<&str> = cases.iter().map(|c| c.text.as_str()).collect();
    let gold: Vec<char> = cases.iter().map(|c| c.gold).collect();
    let hand_correct = cases.iter().filter(|c| extract_choice_letter(&c.text) == Some(c.gold)).count();
    let r = qa_accuracy(&texts, &gold).map_err(|e| e.to_string())?;
    ensure!(cases.len() == 20, "{} letter cases", cases.len());
    ensure!(r.n_correct == 10 && hand_correct == 10, "correct {} (hand count 10)", r.n_correct);
    ensure!(r.n_unextractable == 6, "unextractable {}", r.n_unextractable);
    ensure!(r.accuracy == 0.5, "accuracy {}", r.accuracy);
    Ok(())
}

fn forge(dir: &Path, manifests: &[FrameManifest], seed: u64, jobs: usize) -> Result<ForgeRun, String> {
    let run = ForgeRun::open(dir, Some(ForgeConfig { seed, ..Default::default() }), jobs).map_err(|e| e.to_string())?;
    let stub = StubAnnotator::new(seed);
    let store = TemplateStore::builtin();
    run.stage1(manifests, &stub, &store).map_err(|e| e.to_string())?;
    run.stage2(&stub, &store).map_err(|e| e.to_string())?;
    run.stage3(&StubSimilarity { seed }).map_err(|e| e.to_string())?;
    run.stage4(&stub, &store).map_err(|e| e.to_string())?;
    Ok(run)
}

fn forge_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let manifests: Vec<FrameManifest> = (0..10)
        .map(|i| FrameManifest::regular(&format!("video{i}"), rng.gen_range(300..3000), 1.0))
        .collect();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = forge(a.path(), &manifests, 17, 1)?;
    forge(b.path(), &manifests, 17, 6)?;

    let (mut n, mut mc, mut neg) = (0usize, 0usize, 0usize);
    for v in run.videos().map_err(|e| e.to_string())? {
        let s2 = run.samples(&v, 2).map_err(|e| e.to_string())?;
        let s3 = run.samples(&v, 3).map_err(|e| e.to_string())?;
        let s4 = run.samples(&v, 4).map_err(|e| e.to_string())?;
        for (x, y) in s2.iter().zip(&s3) {
            ensure!(x.grounded_frames.is_subset(&y.candidate_relevant), "{}: grounded frame dropped", x.sample_id);
            ensure!(y.retrieval_ratio().r_f >= x.retrieval_ratio().r_f, "{}: R_f decreased", x.sample_id);
            let reachable = y.n_total > 0;
            ensure!(
                y.is_negative || !reachable || y.retrieval_ratio().r_f >= 0.30 - 1e-9,
                "{}: R_f {}",
                y.sample_id,
                y.retrieval_ratio().r_f
            );
        }
        for s in &s4 {
            let before = s3.iter().find(|x| x.sample_id == s.sample_id).unwrap();
            ensure!(before.grounded_frames.is_subset(&s.candidate_relevant), "{}: stage 4 dropped grounding", s.sample_id);
        }
        n += s2.len();
        mc += s2.iter().filter(|s| s.is_multiple_choice()).count();
        neg += s2.iter().filter(|s| s.is_negative).count();
        for stage in 1..=4 {
            let p = run.stage_path(&v, stage);
            let twin = b.path().join(p.strip_prefix(a.path()).unwrap());
            ensure!(fs::read(&p).unwrap() == fs::read(&twin).unwrap(), "{v} stage {stage} differs across runs");
        }
    }
    let nf = n as f64;
    ensure!((mc as f64 / nf - 0.5).abs() <= 1.0 / nf, "MC fraction {}", mc as f64 / nf);
    ensure!((neg as f64 / nf - 0.01).abs() <= 1.0 / nf, "negative fraction {}", neg as f64 / nf);

    let corpus: Vec<FrameManifest> = (0..100)
        .map(|i| FrameManifest::regular(&format!("v{i:03}"), 2500, 1.0))
        .collect();
    let c = tempfile::tempdir().unwrap();
    let run = forge(c.path(), &corpus, 3, 8)?;
    let stats = dataset_stats(&run.dataset().map_err(|e| e.to_string())?);
    ensure!(
        (0.15..=0.25).contains(&stats.relevance_rate),
        "relevance rate {} over {} samples",
        stats.relevance_rate,
        stats.n_samples
    );
    Ok(())
}

fn et_aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for fixture in 0..200 {
        let n = rng.gen_range(1..30);
        let mut records = Vec::new();
        for i in 0..n {
            let labels: Vec<EtLabel> = (0..rng.gen_range(0..5))
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        EtLabel::Frame(rng.gen_range(0..20))
                    } else {
                        let s = rng.gen_range(0..10) as f64;
                        EtLabel::Span { start_s: s, end_s: s + rng.gen_range(1..5) as f64 }
                    }
                })
                .collect();
            records.push(EtRecord {
                video_id: format!("v{}", rng.gen_range(0..6)),
                query: format!("query {i}"),
                timestamp_labels: labels,
                task_tag: ["tvg", "epm", "tal"][rng.gen_range(0..3)].into(),
                duration_s: Some(100.0),
                queries: vec![],
                label_sources: vec![],
            });
        }
        let out = aggregate_et(&records);
        let mut per_video: BTreeMap<&str, Vec<&EtRecord>> = BTreeMap::new();
        for r in &records {
            per_video.entry(&r.video_id).or_default().push(r);
        }
        ensure!(out.len() == per_video.len(), "fixture {fixture}: {} records out", out.len());
        for agg in &out {
            let group = &per_video[agg.video_id.as_str()];
            if group.len() == 1 {
                ensure!(agg == group[0], "fixture {fixture}: singleton {} changed", agg.video_id);
                continue;
            }
            let key = |l: &EtLabel| serde_json::to_string(l).unwrap();
            let want: BTreeSet<String> = group.iter().flat_map(|r| r.timestamp_labels.iter().map(key)).collect();
            let got: Vec<String> = agg.timestamp_labels.iter().map(key).collect();
            let got_set: BTreeSet<String> = got.iter().cloned().collect();
            ensure!(got.len() == got_set.len(), "fixture {fixture}: duplicate labels");
            ensure!(got_set == want, "fixture {fixture}: label union differs for {}", agg.video_id);
            for q in &group.iter().map(|r| r.query.as_str()).collect::<Vec<_>>() {
                ensure!(agg.query.contains(q), "fixture {fixture}: query {q:?} missing");
            }
        }
    }
    Ok(())
}

struct Cli {
    dir: tempfile::TempDir,
}

struct Ran {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Cli {
    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, body: &str) -> String {
        fs::write(self.path(name), body).unwrap();
        self.path(name)
    }

    fn run(&self, args: &[&str]) -> Ran {
        let out = Command::new(env!("CARGO_BIN_EXE_framesift"))
            .args(args)
            .env_remove("SCORER_TOKEN")
            .env_remove("ANNOTATOR_TOKEN")
            .output()
            .unwrap();
        Ran {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    fn json(&self, path: &str) -> Result<Value, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
        serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))
    }
}

fn expect(label: &str, r: &Ran, code: i32) -> Outcome {
    ensure!(
        r.code == code,
        "{label}: exit {} instead of {code}; stderr: {}",
        r.code,
        r.stderr.trim()
    );
    if code == 0 {
        ensure!(r.stdout.contains("config"), "{label}: no config echo on stdout");
    }
    Ok(())
}

fn echoed(label: &str, v: &Value) -> Outcome {
    ensure!(v["config"].is_object(), "{label}: output has no config object");
    Ok(())
}

fn closed_port() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}/v1")
}

fn cli_contract() -> Outcome {
    let cli = Cli {
        dir: tempfile::tempdir().unwrap(),
    };
    let rows: Vec<String> = (0..600)
        .map(|i| json!({"video_id": "v", "global_index": i, "timestamp_s": i as f64, "uri": format!("v/{i}.jpg")}).to_string())
        .collect();
    let manifest = cli.write("manifest.jsonl", &(rows.join("\n") + "\n"));
    let planted = cli.write("planted.json", "[100, 101, 102, 400]");
    let missing = cli.path("nope.jsonl");
    let dead = closed_port();

    // sample
    let plan = cli.path("plan.json");
    let base = ["sample", "--manifest", &manifest, "--query", "what happens?", "--out", &plan];
    let r = cli.run(&[&base[..], &["--backend", "oracle", "--planted", &planted]].concat());
    expect("sample oracle", &r, 0)?;
    let v = cli.json(&plan)?;
    echoed("sample plan", &v)?;
    ensure!(v["selected"].as_array().map(Vec::len) == Some(4), "sample plan size");
    let uni = cli.path("uniform.json");
    let r = cli.run(&["sample", "--manifest", &manifest, "--query", "q", "--out", &uni, "--backend", "uniform"]);
    expect("sample uniform", &r, 0)?;
    echoed("uniform plan", &cli.json(&uni)?)?;
    let scratch = cli.path("scratch.json");
    let base = ["sample", "--manifest", &manifest, "--query", "what happens?", "--out", &scratch];
    expect("sample oracle without planted", &cli.run(&[&base[..], &["--backend", "oracle"]].concat()), 2)?;
    expect("sample unknown backend", &cli.run(&[&base[..], &["--backend", "bogus"]].concat()), 2)?;
    expect("sample remote without endpoint", &cli.run(&[&base[..], &["--backend", "remote"]].concat()), 2)?;
    expect(
        "sample remote unreachable",
        &cli.run(&[&base[..], &["--backend", "remote", "--scorer-endpoint", &dead]].concat()),
        3,
    )?;
    expect(
        "sample missing manifest",
        &cli.run(&["sample", "--manifest", &missing, "--query", "q", "--out", &plan, "--backend", "uniform"]),
        4,
    )?;

    // hybrid
    let hplan = cli.path("hybrid.json");
    let hbase = ["hybrid", "--manifest", &manifest, "--query", "q", "--out", &hplan, "--backend", "oracle", "--planted", &planted];
    expect("hybrid oracle", &cli.run(&[&hbase[..], &["--similarity", "oracle"]].concat()), 0)?;
    echoed("hybrid plan", &cli.json(&hplan)?)?;
    expect(
        "hybrid prefilter over capacity",
        &cli.run(&[&hbase[..], &["--similarity", "oracle", "--prefilter-k", "300"]].concat()),
        2,
    )?;
    expect(
        "hybrid similarity unreachable",
        &cli.run(&[&hbase[..], &["--similarity", "remote", "--embedder-endpoint", &dead]].concat()),
        3,
    )?;
    expect(
        "hybrid missing manifest",
        &cli.run(&["hybrid", "--manifest", &missing, "--query", "q", "--out", &hplan, "--backend", "oracle", "--similarity", "oracle", "--planted", &planted]),
        4,
    )?;

    // eval
    let pred = cli.write("pred.jsonl", include_str!("../../core/tests/data/grounding_pred.jsonl"));
    let gt = cli.write("gt.jsonl", include_str!("../../core/tests/data/grounding_gt.jsonl"));
    let odd = cli.write("odd.jsonl", "{\"item_id\": \"zzz\", \"start_s\": 0.0, \"end_s\": 1.0}\n");
    let rep = cli.path("report.json");
    expect("eval grounding", &cli.run(&["eval", "grounding", "--pred", &pred, "--gt", &gt, "--out", &rep]), 0)?;
    let v = cli.json(&rep)?;
    echoed("grounding report", &v)?;
    ensure!((v["miou"].as_f64().unwrap_or(-1.0) - 3.0 / 7.0).abs() < 1e-9, "grounding mIoU {}", v["miou"]);
    expect("eval grounding unmatched", &cli.run(&["eval", "grounding", "--pred", &odd, "--gt", &gt, "--out", &rep]), 4)?;
    expect(
        "eval grounding bad threshold",
        &cli.run(&["eval", "grounding", "--pred", &pred, "--gt", &gt, "--out", &rep, "--thresholds", "1.5"]),
        2,
    )?;
    let answers = cli.write("answers.jsonl", "{\"item_id\": \"1\", \"answer\": \"(B) red\"}\n{\"item_id\": \"2\", \"answer\": \"no idea\"}\n");
    let gold = cli.write("gold.jsonl", "{\"item_id\": \"1\", \"answer\": \"B\"}\n{\"item_id\": \"2\", \"answer\": \"C\"}\n");
    expect("eval qa", &cli.run(&["eval", "qa", "--pred", &answers, "--gold", &gold, "--out", &rep]), 0)?;
    let v = cli.json(&rep)?;
    echoed("qa report", &v)?;
    ensure!(v["accuracy"].as_f64() == Some(0.5), "qa accuracy {}", v["accuracy"]);
    expect("eval qa missing file", &cli.run(&["eval", "qa", "--pred", &missing, "--gold", &gold, "--out", &rep]), 4)?;
    let bad = cli.write("bad.json", "{not json");
    expect("eval recall", &cli.run(&["eval", "recall", "--plan", &plan, "--annotated", &planted, "--out", &rep]), 0)?;
    let v = cli.json(&rep)?;
    echoed("recall report", &v)?;
    ensure!(v["recall"].as_f64() == Some(1.0), "recall {}", v["recall"]);
    expect("eval recall malformed", &cli.run(&["eval", "recall", "--plan", &plan, "--annotated", &bad, "--out", &rep]), 4)?;

    // forge
    let small: Vec<String> = ["a", "b"]
        .iter()
        .flat_map(|v| (0..400).map(move |i| json!({"video_id": v, "global_index": i, "timestamp_s": i as f64, "uri": format!("{v}/{i}.jpg")}).to_string()))
        .collect();
    let fmanifest = cli.write("forge.jsonl", &(small.join("\n") + "\n"));
    let run_dir = cli.path("run");
    let summary = cli.path("summary.json");
    expect(
        "forge run",
        &cli.run(&["forge", "run", "--manifest", &fmanifest, "--run", &run_dir, "--stub", "--out", &summary]),
        0,
    )?;
    echoed("forge summary", &cli.json(&summary)?)?;
    expect(
        "forge run with changed config",
        &cli.run(&["forge", "run", "--manifest", &fmanifest, "--run", &run_dir, "--stub", "--target-ratio", "0.5"]),
        2,
    )?;
    expect("forge stage2 without run", &cli.run(&["forge", "stage2", "--run", &cli.path("none"), "--stub"]), 4)?;
    expect(
        "forge stage1 annotator unreachable",
        &cli.run(&["forge", "stage1", "--manifest", &fmanifest, "--run", &cli.path("remote"), "--annotator-endpoint", &dead]),
        3,
    )?;
    let stats = cli.path("stats.json");
    expect("forge stats", &cli.run(&["forge", "stats", "--run", &run_dir, "--out", &stats]), 0)?;
    echoed("forge stats", &cli.json(&stats)?)?;
    expect("forge stats without input", &cli.run(&["forge", "stats"]), 2)?;
    let et_in = cli.write(
        "et.jsonl",
        "{\"video_id\":\"v\",\"query\":\"a\",\"timestamp_labels\":[1],\"task_tag\":\"tvg\"}\n\
         {\"video_id\":\"v\",\"query\":\"b\",\"timestamp_labels\":[2],\"task_tag\":\"tvg\"}\n\
         {\"video_id\":\"w\",\"query\":\"c\",\"timestamp_labels\":[3],\"task_tag\":\"tvg\"}\n",
    );
    let et_out = cli.path("et_out.jsonl");
    expect("forge aggregate-et", &cli.run(&["forge", "aggregate-et", "--input", &et_in, "--out", &et_out]), 0)?;
    echoed("aggregate-et sidecar", &cli.json(&format!("{et_out}.config.json"))?)?;
    let lines = fs::read_to_string(&et_out).unwrap().lines().count();
    ensure!(lines == 2, "aggregate-et wrote {lines} records");
    expect("forge aggregate-et malformed", &cli.run(&["forge", "aggregate-et", "--input", &bad, "--out", &et_out]), 4)?;

    // compare
    let scenario = cli.write(
        "scenario.json",
        &json!({
            "video_id": "synthetic",
            "n_frames": 3600,
            "planted": [{"start": 500, "end": 529}, {"start": 2000, "end": 2019}],
            "query": "when does the red car appear?",
            "seed": 7
        })
        .to_string(),
    );
    let cmp = cli.path("compare.json");
    let r = cli.run(&["compare", "--scenario", &scenario, "--out", &cmp]);
    expect("compare", &r, 0)?;
    let v = cli.json(&cmp)?;
    echoed("compare output", &v)?;
    let header = r.stdout.lines().find(|l| l.starts_with("method")).unwrap_or_default().to_string();
    let columns: Vec<&str> = header.split_whitespace().filter(|c| c.starts_with("<=")).collect();
    ensure!(
        columns == ["<=10", "<=20", "<=30", "<=40", "<=50"],
        "compare header {header:?}"
    );
    ensure!(header.matches("frm").count() == 5, "compare header {header:?}");
    let rows = v["rows"].as_array().map(Vec::len).unwrap_or(0);
    ensure!(rows == 4, "compare has {rows} sampler rows");
    let again = cli.run(&["compare", "--scenario", &scenario, "--out", &cli.path("compare2.json")]);
    ensure!(again.stdout == r.stdout, "compare table is not reproducible");
    expect("compare missing scenario", &cli.run(&["compare", "--scenario", &missing, "--out", &cmp]), 4)?;
    expect("compare bad budgets", &cli.run(&["compare", "--scenario", &scenario, "--out", &cmp, "--budgets", "x"]), 2)?;
    Ok(())
}
