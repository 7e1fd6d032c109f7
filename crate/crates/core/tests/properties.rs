mod common;

use blacklight::config::{DetectorConfig, ResetPolicy, Salt};
use blacklight::detector::{compute_metrics, Action, Label, QueryRecord, Verdict};
use blacklight::fingerprint::{
    fingerprint, quantize, select_fingerprint, window_hashes, Dims, Fingerprint, HashDigest,
    QueryImage,
};
use blacklight::formats;
use blacklight::simulator::{trace_images, TraceKind, TraceSpec};
use blacklight::store::{FingerprintIndex, QueryId};
use proptest::prelude::*;

fn image_strategy(max_side: usize) -> impl Strategy<Value = QueryImage> {
    (
        2..=max_side,
        2..=max_side,
        prop_oneof![Just(1usize), Just(3usize)],
    )
        .prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(any::<u8>(), h * w * c)
                .prop_map(move |px| QueryImage::new(h, w, c, px).unwrap())
        })
}

fn digest_from(n: u8) -> HashDigest {
    let mut d = [0u8; 32];
    d[0] = n;
    d[31] = n.wrapping_mul(37);
    HashDigest(d)
}

/// Fingerprint drawn from a universe of 64 digests, so overlaps are common.
fn small_universe_fp() -> impl Strategy<Value = Fingerprint> {
    proptest::collection::btree_set(0u8..64, 1..12).prop_map(|ids| {
        let mut ds: Vec<HashDigest> = ids.into_iter().map(digest_from).collect();
        ds.sort_unstable_by(|a, b| b.cmp(a));
        Fingerprint::from_sorted(ds, 0).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn locality_bound(
        img in image_strategy(12),
        edits in proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6),
        window in 1usize..30,
        step in 1usize..5,
    ) {
        prop_assume!(img.len() >= window);
        let mut edited = img.clone();
        let mut touched = std::collections::BTreeSet::new();
        for (idx, v) in &edits {
            let i = idx.index(img.len());
            edited.pixels_mut()[i] = *v;
            touched.insert(i);
        }
        let salt = Salt::from_seed(1);
        let a = window_hashes(&quantize(&img, 50), window, step, &salt).unwrap();
        let b = window_hashes(&quantize(&edited, 50), window, step, &salt).unwrap();
        let changed = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        prop_assert!(changed <= touched.len() * window.div_ceil(step));
    }

    #[test]
    fn quantization_absorbs_same_bucket_edits(
        img in image_strategy(10),
        picks in proptest::collection::vec(any::<u8>(), 1..400),
        q in 1u8..=100,
    ) {
        let mut edited = img.clone();
        for (i, r) in edited.pixels_mut().iter_mut().zip(picks.iter().cycle()) {
            let bucket = *i / q;
            let lo = u16::from(bucket) * u16::from(q);
            let hi = (lo + u16::from(q) - 1).min(255);
            *i = (lo + u16::from(*r) % (hi - lo + 1)) as u8;
        }
        let cfg = DetectorConfig::new(Salt::from_seed(2)).with_quant_step(q).with_window(3);
        prop_assume!(img.len() >= 3);
        prop_assert_eq!(fingerprint(&img, &cfg).unwrap(), fingerprint(&edited, &cfg).unwrap());
    }

    #[test]
    fn selection_matches_sort_and_dedup(raw in proptest::collection::vec(0u8..40, 1..200), size in 1usize..60) {
        let hashes: Vec<HashDigest> = raw.iter().map(|&n| digest_from(n)).collect();
        let mut all = hashes.clone();
        all.sort_unstable_by(|a, b| b.cmp(a));
        all.dedup();
        all.truncate(size);
        let fp = select_fingerprint(&hashes, size);
        prop_assert_eq!(fp.digests(), &all[..]);
        prop_assert_eq!(fp.source_n(), hashes.len());
    }

    #[test]
    fn store_matches_brute_force(fps in proptest::collection::vec(small_universe_fp(), 1..40), t in 0usize..6) {
        let mut index = FingerprintIndex::new(t, Salt::from_seed(0));
        for (i, fp) in fps.iter().enumerate() {
            let got = index.check_and_insert(fp).unwrap();
            let (overlap, best) = common::brute_force_max_overlap(&fps[..i], fp);
            prop_assert_eq!(got.max_overlap, overlap);
            prop_assert_eq!(got.best_match, best.map(|b| QueryId(b as u64)));
            prop_assert_eq!(got.flagged, overlap > t);
            prop_assert_eq!(got.best_match.is_some(), overlap > 0);
        }
        let total: usize = fps.iter().map(Fingerprint::len).sum();
        prop_assert_eq!(index.stored_digests() as usize, total);
        let snapshot = index.stored_fingerprints();
        prop_assert_eq!(snapshot.iter().map(|(_, d)| d.len()).sum::<usize>(), total);
    }

    #[test]
    fn fingerprint_file_round_trip(fp in small_universe_fp()) {
        let bytes = formats::encode_fingerprint(&fp);
        let back = formats::decode_fingerprint(&bytes).unwrap();
        prop_assert_eq!(back.digests(), fp.digests());
        prop_assert_eq!(formats::encode_fingerprint(&back), bytes);
    }

    #[test]
    fn store_file_round_trip(fps in proptest::collection::vec(small_universe_fp(), 0..20), resets in 0u32..3) {
        let mut index = FingerprintIndex::new(3, Salt::from_seed(4));
        for r in 0..resets {
            index.reset(Salt::from_seed(u64::from(r) + 10));
        }
        for fp in &fps {
            index.insert(fp).unwrap();
        }
        let bytes = formats::encode_store(&index);
        let back = formats::decode_store(&bytes, 3).unwrap();
        prop_assert_eq!(back.epoch(), resets);
        prop_assert_eq!(formats::encode_store(&back), bytes.clone());
        for fp in &fps {
            prop_assert_eq!(back.max_overlap(fp), index.max_overlap(fp));
        }
    }

    #[test]
    fn stream_file_round_trip(
        imgs in proptest::collection::vec(image_strategy(6), 0..8),
        attack in any::<bool>(),
    ) {
        let records: Vec<QueryRecord> = imgs
            .into_iter()
            .enumerate()
            .map(|(i, image)| QueryRecord {
                image,
                label: if attack { Label::Attack { trace_id: 3, step: i as u32 } } else { Label::Benign },
                timestamp: i as u64,
            })
            .collect();
        let bytes = formats::encode_stream(&records).unwrap();
        let back = formats::decode_stream(&bytes).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(formats::encode_stream(&back).unwrap(), bytes);
    }

    #[test]
    fn image_file_round_trip(img in image_strategy(16)) {
        let bytes = formats::encode_netpbm(&img);
        let back = formats::decode_netpbm(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(formats::encode_netpbm(&back), bytes);
    }

    #[test]
    fn config_text_round_trip(
        q in 1u8..=255, w in 1usize..64, p in 1usize..8, s in 2usize..100, frac in 0.0f64..1.0,
        seed in any::<u64>(), reset in proptest::option::of(1u64..10_000),
    ) {
        prop_assume!(p <= w);
        let t = ((s as f64) * frac) as usize;
        let mut cfg = DetectorConfig::new(Salt::from_seed(seed))
            .with_quant_step(q).with_window(w).with_step(p).with_fingerprint_size(s).with_threshold(t);
        if let Some(n) = reset {
            cfg = cfg.with_reset(ResetPolicy::EveryQueries(n));
        }
        prop_assert_eq!(DetectorConfig::parse_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn metrics_stay_in_range(flags in proptest::collection::vec((any::<bool>(), 0u32..4), 0..200)) {
        let mut steps = [0u32; 4];
        let mut verdicts = Vec::new();
        let mut labels = Vec::new();
        for (flagged, source) in flags {
            verdicts.push(Verdict {
                timestamp: verdicts.len() as u64,
                epoch: 0,
                flagged,
                overlap: 0,
                best_match: None,
                action: if flagged { Action::Rejected } else { Action::Forwarded },
                error: None,
            });
            labels.push(if source == 0 {
                Label::Benign
            } else {
                steps[source as usize] += 1;
                Label::Attack { trace_id: source, step: steps[source as usize] }
            });
        }
        let r = compute_metrics(&verdicts, &labels).unwrap();
        for v in [r.attack_detection_rate, r.mean_coverage, r.false_positive_rate, r.attack_success_with_mitigation] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for t in &r.per_trace {
            prop_assert!((0.0..=1.0).contains(&t.coverage));
            if t.attack_detected {
                let q = t.queries_to_detect.unwrap();
                prop_assert!(q >= 1 && q < t.length);
            }
            prop_assert_eq!(t.forwarded + t.flagged, t.length);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_traces_keep_queries_close(
        kind in prop_oneof![Just(TraceKind::ProbePair), Just(TraceKind::Interpolation), Just(TraceKind::PatchFlip)],
        length in 2usize..120,
        budget in 1u8..40,
        seed in any::<u64>(),
        gray in any::<bool>(),
    ) {
        let dims = if gray { Dims::new(12, 9, 1) } else { Dims::new(8, 8, 3) };
        let imgs = trace_images(&TraceSpec::new(kind, length, budget, seed, dims)).unwrap();
        prop_assert_eq!(imgs.len(), length);
        for i in 1..imgs.len() {
            prop_assert!((0..i).any(|j| imgs[i].linf_distance(&imgs[j]) <= budget));
        }
    }
}
