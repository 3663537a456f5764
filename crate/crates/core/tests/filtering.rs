use mtpref::filter::{score_corpus, select_indices, select_subset, SubsetSpec};
use mtpref::scoring::mock_qe_score;
use mtpref::*;
use proptest::prelude::*;

fn noisy_corpus(size: usize, seed: u64) -> Corpus {
    let spec = TaskSpec {
        vocab_size: 30,
        min_len: 8,
        max_len: 14,
        noise_rate: 0.3,
        seed,
        ..TaskSpec::default()
    };
    gen_corpus(&spec, size).unwrap()
}

#[test]
fn clean_corpus_scores_one() {
    let corpus = gen_corpus(&TaskSpec::default(), 200).unwrap();
    let qe = MetricBackend::mock_qe(corpus.gold.clone());
    let scored = score_corpus(&corpus.pairs, &qe, 16).unwrap();
    assert!(scored.iter().all(|s| s.qe_score.value == 1.0));
    assert_eq!(qe.cost(), 200);
}

#[test]
fn scores_match_pointwise_recomputation() {
    let corpus = noisy_corpus(10, 1);
    let qe = MetricBackend::mock_qe(corpus.gold.clone());
    let scored = score_corpus(&corpus.pairs, &qe, 3).unwrap();
    assert_eq!(qe.cost(), 10);
    for (k, s) in scored.iter().enumerate() {
        assert_eq!(s.original_index, k);
        let direct = mock_qe_score(&corpus.pairs[k].src, &corpus.pairs[k].reference, &corpus.gold).unwrap();
        assert_eq!(s.qe_score.value, direct.value);
        assert!(!s.qe_score.used_reference);
    }
}

#[test]
fn corruption_lowers_mock_qe() {
    for seed in 0..3 {
        let corpus = noisy_corpus(2000, seed);
        let qe = MetricBackend::mock_qe(corpus.gold.clone());
        let scored = score_corpus(&corpus.pairs, &qe, 256).unwrap();
        let mean = |noisy: bool| {
            let v: Vec<f64> = scored
                .iter()
                .filter(|s| s.pair.is_noisy == noisy)
                .map(|s| s.qe_score.value)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(false) - mean(true) >= 0.2, "seed {seed}: {} vs {}", mean(false), mean(true));
    }
}

#[test]
fn by_count_examples() {
    let scores = [(0, 0.3), (1, 0.9), (2, 0.7)];
    assert_eq!(select_indices(&scores, SubsetSpec::ByCount(2)).unwrap(), vec![1, 2]);
    assert!(select_indices(&scores, SubsetSpec::ByCount(4)).is_err());
    assert_eq!(select_indices(&scores, SubsetSpec::ByThreshold(0.0)).unwrap(), vec![0, 1, 2]);
    assert!(select_indices(&scores, SubsetSpec::ByThreshold(1.0 + 1e-9)).unwrap().is_empty());
}

#[test]
fn filtering_is_deterministic() {
    let corpus = noisy_corpus(500, 4);
    let qe = MetricBackend::mock_qe(corpus.gold.clone());
    let a = select_subset(&score_corpus(&corpus.pairs, &qe, 64).unwrap(), SubsetSpec::ByCount(300)).unwrap();
    let b = select_subset(&score_corpus(&corpus.pairs, &qe, 7).unwrap(), SubsetSpec::ByCount(300)).unwrap();
    assert_eq!(a, b);
}

fn scores_strategy() -> impl Strategy<Value = Vec<(usize, f64)>> {
    prop::collection::vec(0u8..8, 1..60)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, s)| (i, f64::from(s) / 8.0)).collect())
}

proptest! {
    #[test]
    fn by_count_keeps_the_best(scores in scores_strategy(), k_seed in any::<prop::sample::Index>()) {
        let k = k_seed.index(scores.len()) + 1;
        let chosen = select_indices(&scores, SubsetSpec::ByCount(k)).unwrap();
        prop_assert_eq!(chosen.len(), k);
        prop_assert!(chosen.windows(2).all(|w| w[0] < w[1]));
        let worst_in = chosen.iter().map(|&i| scores[i].1).fold(f64::INFINITY, f64::min);
        for (i, s) in &scores {
            if !chosen.contains(i) {
                prop_assert!(*s <= worst_in);
            }
        }
    }

    #[test]
    fn by_count_is_monotone(scores in scores_strategy(), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let (k1, k2) = {
            let x = a.index(scores.len()) + 1;
            let y = b.index(scores.len()) + 1;
            (x.min(y), x.max(y))
        };
        let small = select_indices(&scores, SubsetSpec::ByCount(k1)).unwrap();
        let large = select_indices(&scores, SubsetSpec::ByCount(k2)).unwrap();
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn threshold_keeps_exactly_the_passing(scores in scores_strategy(), tau in 0.0f64..=1.0) {
        let chosen = select_indices(&scores, SubsetSpec::ByThreshold(tau)).unwrap();
        let expected: Vec<usize> = scores.iter().filter(|(_, s)| *s >= tau).map(|(i, _)| *i).collect();
        prop_assert_eq!(chosen, expected);
    }
}
