use proptest::prelude::*;

use framesift_core::frame::{
    build_candidate_pool, denormalize, partition_windows, rate_bucket, FrameManifest, ManifestRow, MAX_WINDOW_CAPACITY,
};

/// Manifest at `fps` with row timestamps `i / fps`.
fn manifest(n: usize, fps: f64) -> FrameManifest {
    FrameManifest::regular("v", n, fps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn normalize_denormalize_is_identity(
        n in 1usize..2000,
        capacity in 1usize..=MAX_WINDOW_CAPACITY,
        stride_frac in 0.05f64..=1.0,
    ) {
        let pool = build_candidate_pool(&manifest(n, 1.0), 1.0).unwrap();
        let stride = ((capacity as f64 * stride_frac).ceil() as usize).clamp(1, capacity);
        let windows = partition_windows(&pool, capacity, stride).unwrap();
        let mut covered = vec![false; n];
        for w in &windows {
            prop_assert!(w.n() >= 1 && w.n() <= capacity);
            let locals: Vec<usize> = w.local_map().map(|(l, _)| l).collect();
            prop_assert_eq!(locals, (1..=w.n()).collect::<Vec<_>>());
            for (local, f) in w.local_map() {
                prop_assert_eq!(w.normalize_index(f.global_index), Some(local));
                prop_assert_eq!(denormalize(w, local).unwrap(), f);
                covered[f.global_index] = true;
            }
            prop_assert!(denormalize(w, 0).is_err());
            prop_assert!(denormalize(w, w.n() + 1).is_err());
        }
        prop_assert!(covered.into_iter().all(|c| c));
    }

    #[test]
    fn pool_matches_bucket_oracle(n in 1usize..1500, native in prop::sample::select(vec![1.0, 2.0, 5.0, 30.0]), ratio in 0.05f64..1.0) {
        let m = manifest(n, native);
        let pool = build_candidate_pool(&m, ratio).unwrap();
        let mut kept = Vec::new();
        let mut last: Option<i64> = None;
        for row in &m.rows {
            let b = rate_bucket(row.timestamp_s, ratio);
            if last.map_or(true, |l| b > l) {
                kept.push(row.global_index);
                last = Some(b);
            }
        }
        let sources: Vec<usize> = pool.frames.iter().map(|f| f.source_index).collect();
        prop_assert_eq!(sources, kept);
        for (i, f) in pool.frames.iter().enumerate() {
            prop_assert_eq!(f.global_index, i);
        }
        let bound = (pool.source_duration_s * ratio - 1e-9).ceil() as usize;
        prop_assert!(pool.len() <= bound.max(1));
    }
}

#[test]
fn scattered_manifest_indices_survive_as_provenance() {
    let rows: Vec<ManifestRow> = (0..50)
        .map(|i| ManifestRow {
            video_id: "v".into(),
            global_index: 1000 + 7 * i,
            timestamp_s: i as f64 * 0.5,
            uri: format!("f{i}.jpg"),
        })
        .collect();
    let pool = build_candidate_pool(&FrameManifest::new(rows).unwrap(), 1.0).unwrap();
    assert_eq!(pool.len(), 25);
    assert_eq!(pool.frames[3].source_index, 1000 + 7 * 6);
    assert_eq!(pool.frames[3].global_index, 3);
}
