use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use framesift_core::engine::{
    merge_window_results, select_top_k, DedupPolicy, EmissionOrder, Relevance, ScoredFrame, ScoredFrameSet,
};
use framesift_core::frame::FrameRef;
use framesift_core::relevance::Score;

fn frame(g: usize) -> FrameRef {
    FrameRef {
        global_index: g,
        timestamp_s: g as f64 * 0.5,
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

/// Picks the best remaining frame k times by linear scan.
fn brute_force(items: &[(usize, u8)], n_ctx: usize) -> Vec<usize> {
    let mut pool: Vec<(usize, u8)> = items.iter().copied().filter(|&(_, s)| s > 0).collect();
    let k = pool.len().min(n_ctx);
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best = 0;
        for i in 1..pool.len() {
            let (g, s) = pool[i];
            let (bg, bs) = pool[best];
            if s > bs || (s == bs && g < bg) {
                best = i;
            }
        }
        out.push(pool.remove(best).0);
    }
    out
}

fn scored_items() -> impl Strategy<Value = Vec<(usize, u8)>> {
    proptest::collection::btree_map(0usize..600, 0u8..=5, 0..200).prop_map(|m| m.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn top_k_matches_brute_force(items in scored_items(), n_ctx in 1usize..120) {
        let set = ScoredFrameSet::new(items.iter().map(|&(g, s)| graded(g, s, 0)).collect()).unwrap();
        let want = brute_force(&items, n_ctx);

        let by_score = select_top_k(&set, n_ctx, EmissionOrder::ByScore);
        prop_assert_eq!(by_score.selected_globals(), want.clone());
        prop_assert_eq!(by_score.k, set.n_ret().min(n_ctx));
        prop_assert_eq!(by_score.selected.len(), by_score.k);

        let chrono = select_top_k(&set, n_ctx, EmissionOrder::Chronological);
        let mut sorted = want;
        sorted.sort_unstable();
        prop_assert_eq!(chrono.selected_globals(), sorted);
    }
}

/// Overlapping windows over `n` frames, each frame scored independently per window.
fn multi_window(rng: &mut ChaCha8Rng, n: usize, capacity: usize, stride: usize) -> Vec<ScoredFrameSet> {
    use rand::Rng;
    let mut sets = Vec::new();
    let mut start = 0;
    let mut wid = 0;
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
    sets
}

#[test]
fn merge_is_independent_of_arrival_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for run in 0..100 {
        use rand::Rng;
        let n = rng.gen_range(20..900);
        let capacity = rng.gen_range(8..=256);
        let stride = rng.gen_range(1..=capacity);
        let sets = multi_window(&mut rng, n, capacity, stride);
        let serialize = |sets: Vec<ScoredFrameSet>| {
            let merged = merge_window_results(sets, DedupPolicy::Max).unwrap();
            serde_json::to_string(&select_top_k(&merged, 64, EmissionOrder::ByScore)).unwrap()
        };
        let reference = serialize(sets.clone());
        for _ in 0..20 {
            let mut shuffled = sets.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(serialize(shuffled), reference, "run {run}");
        }
    }
}

#[test]
fn max_dedup_prefers_higher_score_then_lower_window() {
    let a = ScoredFrameSet::new(vec![graded(5, 3, 0), graded(6, 4, 0)]).unwrap();
    let b = ScoredFrameSet::new(vec![graded(5, 4, 1), graded(6, 4, 1)]).unwrap();
    let merged = merge_window_results(vec![b, a], DedupPolicy::Max).unwrap();
    let wins: Vec<(usize, usize)> = merged.items().iter().map(|i| (i.frame.global_index, i.window_id)).collect();
    assert_eq!(wins, vec![(5, 1), (6, 0)]);
}
