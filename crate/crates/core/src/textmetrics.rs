//! Lexical evaluation metrics: smoothed sentence BLEU, corpus BLEU and chrF.
//!
//! All scores live on `[0, 1]`; the CLI multiplies by 100 for display.

use std::fmt;
use std::hash::Hash;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whitespace-tokenized text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        TokenSequence(tokens)
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn join(&self) -> String {
        self.0.join(" ")
    }
}

impl Deref for TokenSequence {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl AsRef<[String]> for TokenSequence {
    fn as_ref(&self) -> &[String] {
        &self.0
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSequence(iter.into_iter().map(Into::into).collect())
    }
}

pub fn tokenize(text: &str) -> TokenSequence {
    text.split_whitespace().collect()
}

/// Identity of the metric that produced a score.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MetricId {
    Bleu,
    Chrf,
    MockQe,
    /// Indicator utility `u(a, b) = [a == b]`.
    ExactMatch,
    /// Table-driven scores, used for fixtures.
    Fixture { reference_based: bool },
    /// Scored by the remote service under `name`.
    Remote {
        name: Arc<str>,
        reference_based: bool,
    },
    /// Any other scorer plugged in by a caller.
    Custom {
        name: Arc<str>,
        reference_based: bool,
    },
}

impl MetricId {
    pub fn uses_reference(&self) -> bool {
        match self {
            MetricId::Bleu | MetricId::Chrf | MetricId::ExactMatch => true,
            MetricId::MockQe => false,
            MetricId::Fixture { reference_based }
            | MetricId::Remote {
                reference_based, ..
            }
            | MetricId::Custom {
                reference_based, ..
            } => *reference_based,
        }
    }

    pub fn name(&self) -> String {
        match self {
            MetricId::Bleu => "bleu".into(),
            MetricId::Chrf => "chrf".into(),
            MetricId::MockQe => "mock-qe".into(),
            MetricId::ExactMatch => "exact-match".into(),
            MetricId::Fixture { .. } => "fixture".into(),
            MetricId::Remote { name, .. } => format!("remote:{name}"),
            MetricId::Custom { name, .. } => name.to_string(),
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// A quality value in `[0, 1]` tagged with the metric that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricScore {
    pub value: f64,
    pub metric_id: MetricId,
    pub used_reference: bool,
}

impl MetricScore {
    pub fn new(value: f64, metric_id: MetricId) -> Self {
        let used_reference = metric_id.uses_reference();
        MetricScore {
            value,
            metric_id,
            used_reference,
        }
    }
}

/// Size of the multiset intersection of two sorted lists.
fn sorted_overlap<K: Ord>(h: &[K], r: &[K]) -> usize {
    let (mut i, mut j, mut matches) = (0, 0, 0);
    while i < h.len() && j < r.len() {
        match h[i].cmp(&r[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                matches += 1;
                i += 1;
                j += 1;
            }
        }
    }
    matches
}

/// Clipped matches and hypothesis n-gram total for one order: both n-gram
/// lists are sorted and merged, so equal grams pair up at most
/// `min(count_hyp, count_ref)` times.
fn clipped_matches<T: Ord>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    debug_assert!(n > 0);
    let total = hyp.len().saturating_sub(n - 1);
    if hyp.len() < n || reference.len() < n {
        return (0, total);
    }
    let mut h: Vec<&[T]> = hyp.windows(n).collect();
    let mut r: Vec<&[T]> = reference.windows(n).collect();
    h.sort_unstable();
    r.sort_unstable();
    (sorted_overlap(&h, &r), total)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

fn check_order(max_n: usize) -> Result<()> {
    if max_n == 0 {
        return Err(Error::invalid("BLEU max order must be at least 1"));
    }
    Ok(())
}

/// Sentence BLEU with add-one smoothing on orders `n >= 2`.
pub fn sentence_bleu(hyp: &[String], reference: &[String], max_n: usize) -> Result<MetricScore> {
    check_order(max_n)?;
    if reference.is_empty() {
        return Err(Error::invalid("BLEU reference is empty"));
    }
    if hyp.is_empty() {
        return Ok(MetricScore::new(0.0, MetricId::Bleu));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matches, total) = clipped_matches(hyp, reference, n);
        let precision = if n == 1 {
            matches as f64 / total as f64
        } else {
            (matches as f64 + 1.0) / (total as f64 + 1.0)
        };
        if precision == 0.0 {
            return Ok(MetricScore::new(0.0, MetricId::Bleu));
        }
        log_sum += precision.ln();
    }
    let value = brevity_penalty(hyp.len(), reference.len()) * (log_sum / max_n as f64).exp();
    Ok(MetricScore::new(value.clamp(0.0, 1.0), MetricId::Bleu))
}

/// Corpus BLEU: counts are pooled over all pairs before precisions are
/// formed, and no smoothing is applied, so duplicating every pair leaves the
/// score unchanged.
pub fn corpus_bleu<H, R>(pairs: &[(H, R)], max_n: usize) -> Result<MetricScore>
where
    H: AsRef<[String]>,
    R: AsRef<[String]>,
{
    check_order(max_n)?;
    if pairs.is_empty() {
        return Err(Error::invalid("corpus BLEU over an empty corpus"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (k, (hyp, reference)) in pairs.iter().enumerate() {
        let (hyp, reference) = (hyp.as_ref(), reference.as_ref());
        if reference.is_empty() {
            return Err(Error::at("pair", k, Error::invalid("BLEU reference is empty")));
        }
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let (m, t) = clipped_matches(hyp, reference, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    for (m, t) in matches.iter().zip(&totals) {
        if *m == 0 || *t == 0 {
            return Ok(MetricScore::new(0.0, MetricId::Bleu));
        }
        log_sum += (*m as f64 / *t as f64).ln();
    }
    let value = brevity_penalty(hyp_len, ref_len) * (log_sum / max_n as f64).exp();
    Ok(MetricScore::new(value.clamp(0.0, 1.0), MetricId::Bleu))
}

/// Character n-grams up to this order fit in a `u128` at 21 bits a char.
const PACKED_MAX_N: usize = 6;

fn pack_windows(chars: &[char], n: usize, out: &mut Vec<u128>) {
    out.clear();
    out.extend(
        chars
            .windows(n)
            .map(|w| w.iter().fold(0u128, |acc, &c| (acc << 21) | u128::from(u32::from(c)))),
    );
    out.sort_unstable();
}

/// [`clipped_matches`] for short character n-grams.
fn packed_matches(hyp: &[char], reference: &[char], n: usize, scratch: &mut (Vec<u128>, Vec<u128>)) -> usize {
    let (h, r) = scratch;
    pack_windows(hyp, n, h);
    pack_windows(reference, n, r);
    sorted_overlap(h, r)
}

/// Collapses whitespace runs into single spaces and trims the ends.
fn normalize_whitespace(text: &str) -> Vec<char> {
    let mut out = Vec::with_capacity(text.len());
    for (k, word) in text.split_whitespace().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        out.extend(word.chars());
    }
    out
}

/// Character n-gram F-score.
///
/// Precision and recall are averaged uniformly over the orders `1..=char_n`
/// that have at least one n-gram on either side, then combined as F-beta.
pub fn chrf(hyp: &str, reference: &str, char_n: usize, beta: f64) -> Result<MetricScore> {
    if char_n == 0 {
        return Err(Error::invalid("chrF order must be at least 1"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("chrF beta must be positive, got {beta}")));
    }
    let reference = normalize_whitespace(reference);
    if reference.is_empty() {
        return Err(Error::invalid("chrF reference is empty"));
    }
    let hyp = normalize_whitespace(hyp);

    let mut scratch = (Vec::new(), Vec::new());
    let (mut precision_sum, mut recall_sum, mut orders) = (0.0, 0.0, 0usize);
    for n in 1..=char_n {
        let hyp_total = hyp.len().saturating_sub(n - 1);
        let ref_total = reference.len().saturating_sub(n - 1);
        if hyp_total == 0 && ref_total == 0 {
            continue;
        }
        orders += 1;
        if hyp_total == 0 || ref_total == 0 {
            continue;
        }
        let matches = if n <= PACKED_MAX_N {
            packed_matches(&hyp, &reference, n, &mut scratch)
        } else {
            clipped_matches(&hyp, &reference, n).0
        };
        precision_sum += matches as f64 / hyp_total as f64;
        recall_sum += matches as f64 / ref_total as f64;
    }
    let precision = precision_sum / orders as f64;
    let recall = recall_sum / orders as f64;
    let beta2 = beta * beta;
    let denom = beta2 * precision + recall;
    let value = if denom > 0.0 {
        (1.0 + beta2) * precision * recall / denom
    } else {
        0.0
    };
    Ok(MetricScore::new(value.clamp(0.0, 1.0), MetricId::Chrf))
}

/// Mean sentence-level chrF over pairs (the corpus figure used for
/// held-out evaluation).
pub fn corpus_chrf<H: AsRef<str>, R: AsRef<str>>(pairs: &[(H, R)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("chrF over an empty corpus"));
    }
    let mut sum = 0.0;
    for (k, (h, r)) in pairs.iter().enumerate() {
        sum += chrf(h.as_ref(), r.as_ref(), CHRF_ORDER, CHRF_BETA)
            .map_err(|e| Error::at("pair", k, e))?
            .value;
    }
    Ok(sum / pairs.len() as f64)
}

pub const BLEU_ORDER: usize = 4;
pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;
