//! Metric backends behind one interface.
//!
//! A [`MetricBackend`] wraps any [`Scorer`] with a call counter so decoding
//! and filtering costs can be asserted exactly. Reference-based backends can
//! be turned into MBR utilities with [`as_utility`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::GoldOracle;
use crate::textmetrics::{self, MetricId, MetricScore};

/// Largest number of items sent in one scoring request.
pub const BATCH_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreItem {
    pub src: String,
    pub mt: String,
    #[serde(rename = "ref")]
    pub reference: Option<String>,
}

impl ScoreItem {
    pub fn qe(src: impl Into<String>, mt: impl Into<String>) -> Self {
        ScoreItem {
            src: src.into(),
            mt: mt.into(),
            reference: None,
        }
    }

    pub fn with_ref(src: impl Into<String>, mt: impl Into<String>, reference: impl Into<String>) -> Self {
        ScoreItem {
            src: src.into(),
            mt: mt.into(),
            reference: Some(reference.into()),
        }
    }
}

/// A raw scoring function. Implementations return one value per item, in
/// order; item-level failures should be wrapped with [`Error::at`] using the
/// item's position.
pub trait Scorer: Send + Sync {
    fn metric_id(&self) -> MetricId;

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>>;

    /// Whether `u(a, b) == u(b, a)` when used as a utility.
    fn is_symmetric(&self) -> bool {
        false
    }
}

/// Applies `f` per item, tagging failures with the item position.
pub fn score_each<F>(items: &[ScoreItem], f: F) -> Result<Vec<f64>>
where
    F: Fn(&ScoreItem) -> Result<f64>,
{
    items
        .iter()
        .enumerate()
        .map(|(k, item)| f(item).map_err(|e| Error::at("item", k, e)))
        .collect()
}

fn require_ref(item: &ScoreItem) -> Result<&str> {
    item.reference
        .as_deref()
        .ok_or_else(|| Error::invalid("reference-based metric requires a reference"))
}

/// Scorer plus a monotone count of scored items.
pub struct MetricBackend {
    scorer: Arc<dyn Scorer>,
    metric_id: MetricId,
    calls: AtomicU64,
}

impl MetricBackend {
    pub fn new(scorer: impl Scorer + 'static) -> Self {
        Self::from_arc(Arc::new(scorer))
    }

    pub fn from_arc(scorer: Arc<dyn Scorer>) -> Self {
        let metric_id = scorer.metric_id();
        MetricBackend {
            scorer,
            metric_id,
            calls: AtomicU64::new(0),
        }
    }

    pub fn bleu() -> Self {
        Self::new(BleuScorer::default())
    }

    pub fn chrf() -> Self {
        Self::new(ChrfScorer::default())
    }

    pub fn mock_qe(gold: Arc<GoldOracle>) -> Self {
        Self::new(MockQe::new(gold))
    }

    pub fn metric_id(&self) -> &MetricId {
        &self.metric_id
    }

    pub fn uses_reference(&self) -> bool {
        self.metric_id.uses_reference()
    }

    pub fn is_symmetric(&self) -> bool {
        self.scorer.is_symmetric()
    }

    /// Items scored so far.
    pub fn cost(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_cost(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn score_batch(&self, items: &[ScoreItem]) -> Result<Vec<MetricScore>> {
        Ok(self
            .score_values(items)?
            .into_iter()
            .map(|v| MetricScore::new(v, self.metric_id.clone()))
            .collect())
    }

    /// Like [`score_batch`](Self::score_batch) without the per-score tags.
    pub fn score_values(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Err(Error::invalid("score batch is empty"));
        }
        if self.uses_reference() {
            if let Some(k) = items.iter().position(|i| i.reference.is_none()) {
                return Err(Error::at(
                    "item",
                    k,
                    Error::invalid(format!("{} requires a reference", self.metric_id)),
                ));
            }
        }
        self.calls.fetch_add(items.len() as u64, Ordering::Relaxed);
        let values = self.scorer.score(items)?;
        if values.len() != items.len() {
            return Err(Error::format(
                "scores",
                format!("{} returned {} scores for {} items", self.metric_id, values.len(), items.len()),
            ));
        }
        Ok(values)
    }
}

impl std::fmt::Debug for MetricBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricBackend")
            .field("metric_id", &self.metric_id)
            .field("cost", &self.cost())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct BleuScorer {
    pub max_n: usize,
}

impl Default for BleuScorer {
    fn default() -> Self {
        BleuScorer {
            max_n: textmetrics::BLEU_ORDER,
        }
    }
}

impl Scorer for BleuScorer {
    fn metric_id(&self) -> MetricId {
        MetricId::Bleu
    }

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        score_each(items, |item| {
            let reference = textmetrics::tokenize(require_ref(item)?);
            let hyp = textmetrics::tokenize(&item.mt);
            Ok(textmetrics::sentence_bleu(&hyp, &reference, self.max_n)?.value)
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChrfScorer {
    pub char_n: usize,
    pub beta: f64,
}

impl Default for ChrfScorer {
    fn default() -> Self {
        ChrfScorer {
            char_n: textmetrics::CHRF_ORDER,
            beta: textmetrics::CHRF_BETA,
        }
    }
}

impl Scorer for ChrfScorer {
    fn metric_id(&self) -> MetricId {
        MetricId::Chrf
    }

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        score_each(items, |item| {
            Ok(textmetrics::chrf(&item.mt, require_ref(item)?, self.char_n, self.beta)?.value)
        })
    }
}

/// Reference-free stand-in for a neural QE model: chrF of the translation
/// against a clean target that only the scorer can see.
#[derive(Debug, Clone)]
pub struct MockQe {
    gold: Arc<GoldOracle>,
}

impl MockQe {
    pub fn new(gold: Arc<GoldOracle>) -> Self {
        MockQe { gold }
    }
}

pub fn mock_qe_score(src: &str, mt: &str, gold: &GoldOracle) -> Result<MetricScore> {
    let target = gold
        .get(src)
        .ok_or_else(|| Error::invalid(format!("mock QE has no entry for source {src:?}")))?;
    let value = textmetrics::chrf(mt, target, textmetrics::CHRF_ORDER, textmetrics::CHRF_BETA)?.value;
    Ok(MetricScore::new(value, MetricId::MockQe))
}

impl Scorer for MockQe {
    fn metric_id(&self) -> MetricId {
        MetricId::MockQe
    }

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        score_each(items, |item| Ok(mock_qe_score(&item.src, &item.mt, &self.gold)?.value))
    }
}

/// `1` when the translation equals the reference exactly, else `0`.
#[derive(Debug, Clone, Default)]
pub struct ExactMatch;

impl Scorer for ExactMatch {
    fn metric_id(&self) -> MetricId {
        MetricId::ExactMatch
    }

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        score_each(items, |item| Ok(f64::from(u8::from(item.mt == require_ref(item)?))))
    }

    fn is_symmetric(&self) -> bool {
        true
    }
}

/// Exact-match indicator that also burns a fixed amount of work per item,
/// giving a utility with constant per-call cost for timing experiments.
#[derive(Debug, Clone)]
pub struct FixedCostUtility {
    pub work: u32,
}

impl Scorer for FixedCostUtility {
    fn metric_id(&self) -> MetricId {
        MetricId::Custom {
            name: "fixed-cost".into(),
            reference_based: true,
        }
    }

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        score_each(items, |item| {
            let mut acc: u64 = 0x9e37_79b9_7f4a_7c15;
            for k in 0..self.work {
                acc = acc.rotate_left(5) ^ u64::from(k);
                acc = acc.wrapping_mul(0x2545_f491_4f6c_dd1d);
            }
            std::hint::black_box(acc);
            Ok(f64::from(u8::from(item.mt == require_ref(item)?)))
        })
    }

    fn is_symmetric(&self) -> bool {
        true
    }
}

/// Declared scores looked up by translation text; for fixtures.
#[derive(Debug, Clone)]
pub struct FixtureScorer {
    table: HashMap<String, f64>,
    default: Option<f64>,
    reference_based: bool,
}

impl FixtureScorer {
    pub fn new(table: impl IntoIterator<Item = (String, f64)>, reference_based: bool) -> Self {
        FixtureScorer {
            table: table.into_iter().collect(),
            default: None,
            reference_based,
        }
    }

    pub fn constant(value: f64, reference_based: bool) -> Self {
        FixtureScorer {
            table: HashMap::new(),
            default: Some(value),
            reference_based,
        }
    }
}

impl Scorer for FixtureScorer {
    fn metric_id(&self) -> MetricId {
        MetricId::Fixture {
            reference_based: self.reference_based,
        }
    }

    fn score(&self, items: &[ScoreItem]) -> Result<Vec<f64>> {
        score_each(items, |item| {
            self.table
                .get(&item.mt)
                .copied()
                .or(self.default)
                .ok_or_else(|| Error::invalid(format!("no fixture score for {:?}", item.mt)))
        })
    }
}

/// A metric as named in flags and config files: `bleu`, `chrf`, `mock-qe`,
/// `exact-match` or `remote:<name>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricChoice {
    Bleu,
    Chrf,
    MockQe,
    ExactMatch,
    Remote(String),
}

impl MetricChoice {
    pub fn is_remote(&self) -> bool {
        matches!(self, MetricChoice::Remote(_))
    }

    /// `endpoint` is only consulted for remote metrics; `mock-qe` needs the
    /// gold oracle.
    pub fn build(&self, gold: Option<&Arc<GoldOracle>>, endpoint: Option<&str>) -> Result<MetricBackend> {
        Ok(match self {
            MetricChoice::Bleu => MetricBackend::bleu(),
            MetricChoice::Chrf => MetricBackend::chrf(),
            MetricChoice::ExactMatch => MetricBackend::new(ExactMatch),
            MetricChoice::MockQe => {
                let gold = gold.ok_or_else(|| Error::config("mock-qe needs the gold oracle file"))?;
                MetricBackend::mock_qe(gold.clone())
            }
            MetricChoice::Remote(name) => {
                let endpoint = endpoint.ok_or_else(|| {
                    Error::config(format!(
                        "remote:{name} needs a scorer endpoint (flag or {})",
                        crate::remote::ENDPOINT_ENV
                    ))
                })?;
                let cfg = crate::remote::RemoteConfig::new(endpoint, name.as_str(), !name.ends_with("-qe"));
                MetricBackend::new(crate::remote::RemoteScorer::new(cfg))
            }
        })
    }
}

impl std::str::FromStr for MetricChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bleu" => MetricChoice::Bleu,
            "chrf" => MetricChoice::Chrf,
            "mock-qe" => MetricChoice::MockQe,
            "exact-match" => MetricChoice::ExactMatch,
            _ => match s.strip_prefix("remote:") {
                Some(name) if !name.is_empty() => MetricChoice::Remote(name.to_string()),
                _ => {
                    return Err(Error::invalid(format!(
                        "unknown metric {s:?} (expected bleu, chrf, mock-qe, exact-match or remote:<name>)"
                    )))
                }
            },
        })
    }
}

impl std::fmt::Display for MetricChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricChoice::Bleu => f.write_str("bleu"),
            MetricChoice::Chrf => f.write_str("chrf"),
            MetricChoice::MockQe => f.write_str("mock-qe"),
            MetricChoice::ExactMatch => f.write_str("exact-match"),
            MetricChoice::Remote(name) => write!(f, "remote:{name}"),
        }
    }
}

impl TryFrom<String> for MetricChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricChoice> for String {
    fn from(m: MetricChoice) -> String {
        m.to_string()
    }
}

/// Pairwise utility `u(pseudo_ref, hyp)` backed by a reference-based metric.
#[derive(Clone, Copy)]
pub struct Utility<'a> {
    backend: &'a MetricBackend,
}

/// Wraps a reference-based backend as an MBR utility: the pseudo-reference
/// goes in the reference slot and the hypothesis in the translation slot.
pub fn as_utility(backend: &MetricBackend) -> Result<Utility<'_>> {
    if !backend.uses_reference() {
        return Err(Error::invalid(format!(
            "{} is reference-free and cannot serve as a utility",
            backend.metric_id()
        )));
    }
    Ok(Utility { backend })
}

impl<'a> Utility<'a> {
    pub fn backend(&self) -> &'a MetricBackend {
        self.backend
    }

    pub fn eval(&self, src: &str, pseudo_ref: &str, hyp: &str) -> Result<f64> {
        Ok(self.eval_pairs(src, &[(pseudo_ref, hyp)])?[0])
    }

    /// Scores `(pseudo_ref, hyp)` pairs in one backend call. A blank sampled
    /// pseudo-reference cannot go to the metric; it is worth 1 to a blank
    /// hypothesis and 0 to anything else, and still counts as one call.
    pub fn eval_pairs(&self, src: &str, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        let blank = |s: &str| s.trim().is_empty();
        let mut out: Vec<f64> = pairs
            .iter()
            .map(|(r, h)| match (blank(r), blank(h)) {
                (true, true) => 1.0,
                (true, false) => 0.0,
                _ => f64::NAN,
            })
            .collect();
        let live: Vec<usize> = (0..pairs.len()).filter(|&k| !blank(pairs[k].0)).collect();
        let skipped = (pairs.len() - live.len()) as u64;
        self.backend.calls.fetch_add(skipped, Ordering::Relaxed);
        if live.is_empty() {
            return Ok(out);
        }
        let items: Vec<ScoreItem> = live
            .iter()
            .map(|&k| ScoreItem::with_ref(src, pairs[k].1, pairs[k].0))
            .collect();
        let scores = self.backend.score_values(&items).map_err(|e| match e {
            Error::At { what, index, source } if index < live.len() => Error::At {
                what,
                index: live[index],
                source,
            },
            other => other,
        })?;
        for (&k, v) in live.iter().zip(scores) {
            out[k] = v;
        }
        Ok(out)
    }

    pub fn is_symmetric(&self) -> bool {
        self.backend.is_symmetric()
    }
}
