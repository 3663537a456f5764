//! Oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use mtpref::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Straightforward list-scanning metric implementations.
pub mod oracle {
    fn grams<T: Clone>(xs: &[T], n: usize) -> Vec<Vec<T>> {
        if xs.len() < n {
            return Vec::new();
        }
        (0..=xs.len() - n).map(|i| xs[i..i + n].to_vec()).collect()
    }

    fn clipped<T: Clone + PartialEq>(h: &[T], r: &[T], n: usize) -> (f64, f64) {
        let hg = grams(h, n);
        let mut rg = grams(r, n);
        let mut m = 0.0;
        for g in &hg {
            if let Some(pos) = rg.iter().position(|x| x == g) {
                rg.remove(pos);
                m += 1.0;
            }
        }
        (m, hg.len() as f64)
    }

    pub fn bleu(h: &[String], r: &[String], max_n: usize) -> f64 {
        if h.is_empty() {
            return 0.0;
        }
        let mut prod = 1.0;
        for n in 1..=max_n {
            let (m, t) = clipped(h, r, n);
            prod *= if n == 1 { m / t } else { (m + 1.0) / (t + 1.0) };
        }
        let bp = if h.len() >= r.len() {
            1.0
        } else {
            (1.0 - r.len() as f64 / h.len() as f64).exp()
        };
        bp * prod.powf(1.0 / max_n as f64)
    }

    pub fn chrf(h: &str, r: &str, max_n: usize, beta: f64) -> f64 {
        let h: Vec<char> = h.split_whitespace().collect::<Vec<_>>().join(" ").chars().collect();
        let r: Vec<char> = r.split_whitespace().collect::<Vec<_>>().join(" ").chars().collect();
        let (mut ps, mut rs, mut k) = (0.0, 0.0, 0.0);
        for n in 1..=max_n {
            let (m, ht) = clipped(&h, &r, n);
            let rt = grams(&r, n).len() as f64;
            if ht == 0.0 && rt == 0.0 {
                continue;
            }
            k += 1.0;
            if ht > 0.0 && rt > 0.0 {
                ps += m / ht;
                rs += m / rt;
            }
        }
        let (p, rc) = (ps / k, rs / k);
        let b2 = beta * beta;
        if b2 * p + rc == 0.0 {
            0.0
        } else {
            (1.0 + b2) * p * rc / (b2 * p + rc)
        }
    }
}

/// `(hyp, ref, max_n, expected)`; expected values are clipped-count
/// arithmetic worked out by hand, the expression recording per-order
/// precisions and brevity penalty.
pub fn bleu_fixtures() -> Vec<(&'static str, &'static str, usize, f64)> {
    let e = std::f64::consts::E;
    vec![
        ("the cat sat on the mat", "the cat sat on the mat", 4, 1.0),
        ("", "the cat", 4, 0.0),
        // p1 = 1/3, p2 = (0+1)/(2+1), p3 = (0+1)/(1+1), p4 = 1/1
        ("the the the", "the cat sat", 4, (1.0 / 3.0 * 1.0 / 3.0 * 0.5f64).powf(0.25)),
        // all precisions 1, BP = exp(1 - 6/4)
        ("a b c d", "a b c d e f", 4, (-0.5f64).exp()),
        // p2 = 1/2, p3 = p4 = 1 (no n-grams on either side)
        ("a b", "b a", 4, 0.5f64.powf(0.25)),
        ("x y z", "a b c", 4, 0.0),
        // p1 = 2/4, p2 = 2/4, p3 = 1/3, p4 = 1/2
        ("a a b b", "a b", 4, (1.0f64 / 24.0).powf(0.25)),
        // BP = exp(1 - 4/2)
        ("b c", "a b c d", 4, 1.0 / e),
        ("p q r p", "p r q p", 4, (1.0f64 / 24.0).powf(0.25)),
        ("a", "a", 4, 1.0),
        // p1 = 3/6, p2 = 3/6, p3 = 2/5, p4 = 1/4
        ("a b c d e f", "a b c", 4, (1.0f64 / 40.0).powf(0.25)),
        ("a b c d", "a b x y", 1, 0.5),
        // p1 = 2/3, p2 = (1+1)/(2+1)
        ("a b c", "a b d", 2, 2.0 / 3.0),
        ("  a   b c  d e ", "a b c d e", 4, 1.0),
    ]
}

/// `(hyp, ref, expected)` at order 6, beta 2.
pub fn chrf_fixtures() -> Vec<(&'static str, &'static str, f64)> {
    vec![
        ("abcdef", "abcdef", 1.0),
        ("zzzz", "abcd", 0.0),
        // orders 1-4: 3/4, 2/3, 1/2, 0 on both sides
        ("abcd", "abce", 23.0 / 48.0),
        // P = (1 + 1 + 0 + 0)/4, R = (1/2 + 1/3 + 0 + 0)/4
        ("ab", "abcd", 25.0 / 106.0),
        ("abcd", "ab", 25.0 / 64.0),
        // P = (1/3)/3, R = 1/3
        ("aaa", "a", 5.0 / 21.0),
        ("a  b", "a b", 1.0),
        ("ab", "ba", 0.5),
        ("", "ab", 0.0),
        // "a b" vs "a c": 2/3, 1/2, 0
        ("a b", "a c", 7.0 / 18.0),
        // P = (1/2 + 2/5 + 1/4)/6, R = 3/6
        ("abcabc", "abc", 115.0 / 304.0),
    ]
}

pub const WORDS: [&str; 6] = ["ka", "ru", "mo", "te", "si", "no"];

pub fn random_set(rng: &mut ChaCha8Rng, n: usize) -> CandidateSet {
    let hyps = (0..n)
        .map(|_| {
            let len = rng.gen_range(1..6);
            (0..len).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect();
    CandidateSet::new("src", hyps)
}

/// Mean oracle chrF of each hypothesis against every candidate as
/// reference, by nested loops; first maximum wins.
pub fn brute_force_mbr(hyps: &[String]) -> (usize, Vec<f64>) {
    let n = hyps.len() as f64;
    let eu: Vec<f64> = hyps
        .iter()
        .map(|h| hyps.iter().map(|r| oracle::chrf(h, r, 6, 2.0)).sum::<f64>() / n)
        .collect();
    let mut best = 0;
    for i in 1..eu.len() {
        if eu[i] > eu[best] {
            best = i;
        }
    }
    (best, eu)
}

/// chrF passed through `a * u + b`.
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Scorer for Affine {
    fn metric_id(&self) -> MetricId {
        MetricId::Custom {
            name: "affine-chrf".into(),
            reference_based: true,
        }
    }

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        let base = MetricBackend::chrf().score_values(items)?;
        Ok(base.iter().map(|u| self.a * u + self.b).collect())
    }
}
