mod common;

use common::{bleu_fixtures, chrf_fixtures, oracle};
use mtpref::textmetrics::{chrf, corpus_bleu, sentence_bleu, tokenize, TokenSequence, CHRF_BETA, CHRF_ORDER};
use proptest::prelude::*;

fn bleu(hyp: &str, reference: &str, max_n: usize) -> f64 {
    sentence_bleu(&tokenize(hyp), &tokenize(reference), max_n).unwrap().value
}

fn chrf6(hyp: &str, reference: &str) -> f64 {
    chrf(hyp, reference, CHRF_ORDER, CHRF_BETA).unwrap().value
}

#[test]
fn bleu_hand_fixtures() {
    for (hyp, reference, n, expected) in bleu_fixtures() {
        let got = bleu(hyp, reference, n);
        assert!((got - expected).abs() < 1e-6, "{hyp:?} vs {reference:?}: {got} != {expected}");
    }
}

#[test]
fn corpus_bleu_hand_fixture() {
    let pairs: Vec<(TokenSequence, TokenSequence)> = [("a b c d", "a b c d"), ("a b x", "a b y"), ("z", "q r")]
        .iter()
        .map(|(h, r)| (tokenize(h), tokenize(r)))
        .collect();
    // pooled: 6/8, 4/5, 2/3, 1/1; lengths 8 vs 9
    let expected = (-1.0f64 / 8.0).exp() * 0.4f64.powf(0.25);
    let got = corpus_bleu(&pairs, 4).unwrap().value;
    assert!((got - expected).abs() < 1e-6, "{got} != {expected}");
}

#[test]
fn chrf_hand_fixtures() {
    for (hyp, reference, expected) in chrf_fixtures() {
        let got = chrf6(hyp, reference);
        assert!((got - expected).abs() < 1e-6, "{hyp:?} vs {reference:?}: {got} != {expected}");
    }
}

#[test]
fn empty_references_rejected() {
    assert!(sentence_bleu(&tokenize("a"), &tokenize("  "), 4).is_err());
    assert!(chrf("a", " \t", 6, 2.0).is_err());
    let empty: Vec<(TokenSequence, TokenSequence)> = Vec::new();
    assert!(corpus_bleu(&empty, 4).is_err());
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn bleu_matches_scanning_oracle(h in sentence(), r in sentence(), n in 1usize..5) {
        let got = sentence_bleu(&h, &r, n).unwrap().value;
        prop_assert!((got - oracle::bleu(&h, &r, n)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn chrf_matches_scanning_oracle(h in "[abc ]{0,14}", r in "[abcd ]{0,14}[ab]") {
        let got = chrf6(&h, &r);
        prop_assert!((got - oracle::chrf(&h, &r, 6, 2.0)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn identity_scores_one(s in sentence()) {
        prop_assert!((sentence_bleu(&s, &s, 4).unwrap().value - 1.0).abs() < 1e-12);
        let text = s.join(" ");
        prop_assert!((chrf6(&text, &text) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_invariant_under_relabeling(h in sentence(), r in sentence()) {
        let rename = |xs: &[String]| -> Vec<String> { xs.iter().map(|w| format!("{}_{}", w.to_uppercase(), w.len())).collect() };
        let a = sentence_bleu(&h, &r, 4).unwrap().value;
        let b = sentence_bleu(&rename(&h), &rename(&r), 4).unwrap().value;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn corpus_bleu_duplication_invariant(h in sentence(), r in sentence(), copies in 1usize..6) {
        let one = corpus_bleu(&[(h.clone(), r.clone())], 4).unwrap().value;
        let many: Vec<_> = (0..copies).map(|_| (h.clone(), r.clone())).collect();
        prop_assert!((corpus_bleu(&many, 4).unwrap().value - one).abs() < 1e-12);
    }

    #[test]
    fn chrf_monotone_under_corruption(
        reference in "[a-f]{12,24}",
        positions in prop::collection::vec(any::<prop::sample::Index>(), 3),
    ) {
        let mut hyp: Vec<char> = reference.chars().collect();
        let mut last = chrf6(&reference, &reference);
        let mut used = Vec::new();
        for idx in positions {
            let mut pos = idx.index(hyp.len());
            while used.contains(&pos) {
                pos = (pos + 1) % hyp.len();
            }
            used.push(pos);
            hyp[pos] = '#';
            let now = chrf6(&hyp.iter().collect::<String>(), &reference);
            prop_assert!(now <= last + 1e-12, "{} > {}", now, last);
            last = now;
        }
    }
}
