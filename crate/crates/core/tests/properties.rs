use std::collections::{BTreeSet, HashSet};

use proptest::collection::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otf_core::compression::{
    build_score_lut, hamming, make_tight_frame, score_binary, BinaryCode, BinaryCodec, PqCodebook,
    PqCodes,
};
use otf_core::eval::precision_at_k;
use otf_core::ranker::{score_pq, top_k};
use otf_core::store::{l2_norm, normalize};
use otf_core::trainer::{pegasos_step, Rows};
use otf_core::{FeatureStore, LinearModel, OnlineTrainer, RankedEntry, Repository, TrainerConfig};

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_codebook(rng: &mut ChaCha8Rng, dim: usize, subdim: usize, k: usize) -> PqCodebook {
    let centroids = gaussian(rng, dim / subdim * k * subdim);
    let center = gaussian(rng, dim);
    PqCodebook::from_parts(dim, subdim, k, centroids, center).unwrap()
}

fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureStore {
    FeatureStore::from_rows(dim, gaussian(rng, n * dim))
        .unwrap()
        .normalized()
        .unwrap()
}

fn nonzero_vector(max_dim: usize) -> impl Strategy<Value = Vec<f32>> {
    vec(-100.0f32..100.0, 1..max_dim).prop_filter("non-zero", |v| l2_norm(v) > 1e-3)
}

fn entry_ids(entries: &[RankedEntry]) -> Vec<u64> {
    entries.iter().map(|e| e.id).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_unit_and_idempotent(v in nonzero_vector(64)) {
        let a = normalize(&v).unwrap();
        prop_assert!((l2_norm(&a) - 1.0).abs() <= 1e-6);
        let b = normalize(&a).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn lut_score_equals_decoded_dot(
        seed in any::<u64>(),
        (blocks, subdim) in (1usize..6, 1usize..6),
        k in 1usize..20,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = blocks * subdim;
        let cb = random_codebook(&mut rng, dim, subdim, k);
        let w = gaussian(&mut rng, dim);
        let lut = build_score_lut(&w, &cb).unwrap();
        let mut flat = Vec::new();
        for _ in 0..16 {
            let code: Vec<u8> = (0..blocks).map(|_| rng.random_range(0..k) as u8).collect();
            let decoded = cb.decode(&code).unwrap();
            let exact: f64 = w.iter().zip(&decoded).map(|(&a, &b)| a as f64 * b as f64).sum();
            let got = lut.score(&code);
            // Relative to the magnitude of the terms, which guards cancellation.
            let scale: f64 = w.iter().zip(&decoded).map(|(&a, &b)| (a as f64 * b as f64).abs()).sum();
            prop_assert!((got - exact).abs() <= 1e-5 * scale.max(1e-12));
            flat.extend_from_slice(&code);
        }
        let codes = PqCodes::new(blocks, flat).unwrap();
        let batch = score_pq(&w, &cb, &codes).unwrap();
        for (i, code) in codes.iter().enumerate() {
            prop_assert_eq!(batch[i], lut.score(code) as f32);
        }
    }

    #[test]
    fn centroid_vectors_roundtrip_exactly(
        seed in any::<u64>(),
        (blocks, subdim) in (1usize..6, 1usize..6),
        k in 1usize..20,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = blocks * subdim;
        let cb = random_codebook(&mut rng, dim, subdim, k);
        let code: Vec<u8> = (0..blocks).map(|_| rng.random_range(0..k) as u8).collect();
        let v: Vec<f32> = (0..blocks).flat_map(|m| cb.centroid(m, code[m] as usize).to_vec()).collect();
        let back = cb.decode(&cb.encode(&v).unwrap()).unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn binarize_ignores_positive_scaling(
        seed in any::<u64>(),
        scale in 1e-3f32..1e3,
        n_mult in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 8;
        let n = m * n_mult + 3;
        let frame = make_tight_frame(m, n, seed).unwrap();
        let center = gaussian(&mut rng, m);
        let codec = BinaryCodec::new(frame, center.clone()).unwrap();
        let offset = gaussian(&mut rng, m);
        let a: Vec<f32> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
        let b: Vec<f32> = center.iter().zip(&offset).map(|(c, o)| c + scale * o).collect();
        let ca = codec.binarize(&a).unwrap();
        let cb = codec.binarize(&b).unwrap();
        // Projections within rounding noise of zero may flip; skip them.
        let centered: Vec<f64> = offset.iter().map(|&x| x as f64).collect();
        let y = codec.frame().project(&centered).unwrap();
        for j in 0..n {
            if y[j].abs() > 1e-4 {
                prop_assert_eq!(ca.bit(j), cb.bit(j));
            }
        }
    }

    #[test]
    fn packed_padding_is_zero(bits in vec(any::<bool>(), 1..100)) {
        let code = BinaryCode::from_bits(&bits);
        let n = bits.len();
        prop_assert_eq!(code.bytes().len(), n.div_ceil(8));
        if n % 8 != 0 {
            let last = *code.bytes().last().unwrap();
            prop_assert_eq!(last >> (n % 8), 0);
        }
        let c = code.complement();
        if n % 8 != 0 {
            prop_assert_eq!(*c.bytes().last().unwrap() >> (n % 8), 0);
        }
        prop_assert_eq!(code.count_ones() + c.count_ones(), n as u32);
        prop_assert_eq!(BinaryCode::from_bytes(n, code.bytes().to_vec()).unwrap(), code);
    }

    #[test]
    fn hamming_matches_bit_loop(pairs in vec(any::<(bool, bool)>(), 1..200)) {
        let a: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let naive = pairs.iter().filter(|p| p.0 != p.1).count() as u32;
        let ca = BinaryCode::from_bits(&a);
        prop_assert_eq!(hamming(&ca, &BinaryCode::from_bits(&b)).unwrap(), naive);
        prop_assert_eq!(hamming(&ca, &ca).unwrap(), 0);
        prop_assert_eq!(hamming(&ca, &ca.complement()).unwrap(), a.len() as u32);
    }

    #[test]
    fn score_binary_is_dot_with_unpacked_bits(
        bits in vec(any::<bool>(), 1..150),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian(&mut rng, bits.len());
        let code = BinaryCode::from_bits(&bits);
        let dense: f64 = w.iter().zip(&bits).filter(|p| *p.1).map(|p| *p.0 as f64).sum();
        let got = score_binary(&w, &code).unwrap();
        prop_assert!((got - dense).abs() <= 1e-9 * (1.0 + dense.abs()));
        let unpacked = code.unpack();
        let expected: Vec<f32> = bits.iter().map(|&b| b as u8 as f32).collect();
        prop_assert_eq!(unpacked, expected);
    }

    // Integer-valued scores keep scaling and shifting exact in binary32, so the
    // induced order is unchanged and ties stay ties.
    #[test]
    fn top_k_invariant_under_scale_and_shift(
        raw in vec(-1000i32..1000, 1..300),
        k in 1usize..50,
        c in 1e-3f32..1e3,
        b in -1_000_000i32..1_000_000,
    ) {
        let scores: Vec<f32> = raw.iter().map(|&x| x as f32).collect();
        let base = entry_ids(&top_k(&scores, k));
        let scaled: Vec<f32> = scores.iter().map(|s| c * s).collect();
        let shifted: Vec<f32> = scores.iter().map(|s| s + b as f32).collect();
        prop_assert_eq!(&entry_ids(&top_k(&scaled, k)), &base);
        prop_assert_eq!(&entry_ids(&top_k(&shifted, k)), &base);
    }

    #[test]
    fn top_k_is_prefix_of_stable_sort(scores in vec(-50i32..50, 0..400), k in 0usize..500) {
        let scores: Vec<f32> = scores.iter().map(|&x| x as f32 / 4.0).collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        order.truncate(k);
        let got = top_k(&scores, k);
        prop_assert_eq!(entry_ids(&got), order.iter().map(|&i| i as u64).collect::<Vec<_>>());
        for e in &got {
            prop_assert_eq!(e.score, scores[e.id as usize]);
        }
    }

    #[test]
    fn precision_ignores_tail_order(
        ids in vec(0u64..1000, 1..80).prop_map(|v| {
            let mut seen = HashSet::new();
            v.into_iter().filter(|x| seen.insert(*x)).collect::<Vec<_>>()
        }),
        positives in vec(0u64..1000, 0..200),
        k in 1usize..40,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let positives: BTreeSet<u64> = positives.into_iter().collect();
        let entries: Vec<RankedEntry> = ids.iter().map(|&id| RankedEntry { id, score: 0.0 }).collect();
        let mut shuffled = entries.clone();
        if shuffled.len() > k {
            shuffled[k..].shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let p = precision_at_k(&entries, &positives, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p, precision_at_k(&shuffled, &positives, k).unwrap());
    }

    #[test]
    fn distractors_never_raise_precision(
        seed in any::<u64>(),
        base_n in 20usize..120,
        extra_n in 0usize..200,
        k in 1usize..30,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 8;
        let model = LinearModel::from_weights(gaussian(&mut rng, dim));
        let base = random_store(&mut rng, base_n, dim);
        let positives: BTreeSet<u64> = (0..base_n as u64).filter(|_| rng.random_bool(0.3)).collect();
        let extra = random_store(&mut rng, extra_n.max(1), dim);
        let extra = FeatureStore::new(
            dim,
            extra.data().to_vec(),
            (0..extra.len() as u64).map(|i| 10_000 + i).collect(),
        ).unwrap();
        let grown = FeatureStore::concat(&[&base, &extra]).unwrap();

        let before = Repository::dense(base).rank(&model, k, None, 0.0).unwrap();
        let after = Repository::dense(grown).rank(&model, k, None, 0.0).unwrap();
        let p0 = precision_at_k(&before.entries, &positives, k).unwrap();
        let p1 = precision_at_k(&after.entries, &positives, k).unwrap();
        prop_assert!(p1 <= p0, "{p1} > {p0}");
    }

    #[test]
    fn exclusion_equals_rebuilt_store(
        seed in any::<u64>(),
        n in 1usize..200,
        k in 1usize..60,
        frac in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let model = LinearModel::from_weights(gaussian(&mut rng, dim));
        let store = random_store(&mut rng, n, dim);
        let excluded: HashSet<u64> = store.ids().iter().copied().filter(|_| rng.random_bool(frac)).collect();
        // An empty store cannot be built, so keep at least one row.
        prop_assume!(excluded.len() < n);
        let full = Repository::dense(store);
        let rebuilt = full.without_ids(&excluded).unwrap();
        let a = full.rank(&model, k, Some(&excluded), 0.0).unwrap();
        let b = rebuilt.rank(&model, k, None, 0.0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pegasos_norm_bound_holds_every_step(
        seed in any::<u64>(),
        lambda in prop::sample::select(vec![1e-3, 1e-2, 0.1, 1.0, 10.0]),
        half in 1usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 12;
        let pos = random_store(&mut rng, 10, dim);
        let neg = random_store(&mut rng, 30, dim);
        let cfg = TrainerConfig { lambda, batch_size: 2 * half, seed, ..Default::default() };
        let mut model = LinearModel::zeros(dim);
        let bound = 1.0 / lambda.sqrt();
        for t in 1..=200u64 {
            let report = pegasos_step(&mut model, &pos, &neg, &cfg, &mut rng).unwrap();
            prop_assert_eq!(report.t, t);
            prop_assert_eq!(report.positives.len(), half);
            prop_assert_eq!(report.negatives.len(), half);
            prop_assert!(model.norm() <= bound, "step {t}: {} > {bound}", model.norm());
        }
    }

    #[test]
    fn online_trainer_is_deterministic(seed in any::<u64>(), steps in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 10;
        let mut pos = Rows::new(dim);
        for v in random_store(&mut rng, 7, dim).rows() {
            pos.push(v).unwrap();
        }
        let neg = random_store(&mut rng, 25, dim);
        let cfg = TrainerConfig { seed, ..Default::default() };
        let run = || {
            let mut tr = OnlineTrainer::new(dim, cfg).unwrap();
            for _ in 0..steps {
                tr.step(&pos, &neg).unwrap();
            }
            tr.snapshot().unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.checksum(), b.checksum());
        prop_assert_eq!(a.weights(), b.weights());
        prop_assert_eq!(a.iteration(), steps as u64 + 1);
    }

    #[test]
    fn feature_file_roundtrip(seed in any::<u64>(), n in 1usize..40, dim in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = FeatureStore::from_rows(dim, gaussian(&mut rng, n * dim)).unwrap();
        let bytes = store.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), 20 + 4 * n * dim);
        let back = FeatureStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.data(), store.data());
    }

    #[test]
    fn codebook_and_code_files_roundtrip(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = random_codebook(&mut rng, 12, 3, 7);
        let back = PqCodebook::from_bytes(&cb.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &cb);
        let codes = cb.encode_store(&random_store(&mut rng, n, 12)).unwrap();
        prop_assert_eq!(PqCodes::from_bytes(&codes.to_bytes().unwrap()).unwrap(), codes);

        let model = LinearModel::from_weights(gaussian(&mut rng, 12)).with_version(3);
        let m2 = LinearModel::from_bytes(&model.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(m2.weights(), model.weights());
        prop_assert_eq!(m2.iteration(), model.iteration());
    }
}

#[test]
fn ranked_lists_are_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = random_store(&mut rng, 70_000, 16);
    let cb = random_codebook(&mut rng, 16, 4, 16);
    let model = LinearModel::from_weights(gaussian(&mut rng, 16));
    for repo in [Repository::pq(&store, cb).unwrap(), Repository::dense(store)] {
        let a = repo.rank(&model, 100, None, 0.0).unwrap();
        let b = repo.rank(&model, 100, None, 0.0).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
    }
}
