//! Quality-aware corpus filtering.
//!
//! Each pair is scored once by a reference-free backend, with the reference
//! in the translation slot. Selection keeps the best `k` pairs or every pair
//! above a threshold, always in original corpus order. Large corpora go
//! through two passes: [`score_stream`] spills `index<TAB>score` rows, then
//! [`select_stream`] re-reads the corpus and keeps the selected lines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scoring::{MetricBackend, ScoreItem};
use crate::synthdata::SentencePair;
use crate::textmetrics::MetricScore;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub pair: SentencePair,
    pub qe_score: MetricScore,
    pub original_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetSpec {
    ByCount(usize),
    ByThreshold(f64),
}

fn check_backend(backend: &MetricBackend) -> Result<()> {
    if backend.uses_reference() {
        return Err(Error::invalid(format!(
            "filtering needs a reference-free scorer, got {}",
            backend.metric_id()
        )));
    }
    Ok(())
}

fn score_chunk(backend: &MetricBackend, start: usize, pairs: &[SentencePair]) -> Result<Vec<f64>> {
    let items: Vec<ScoreItem> = pairs.iter().map(|p| ScoreItem::qe(&p.src, &p.reference)).collect();
    backend.score_values(&items).map_err(|e| match e {
        Error::At { index, source, .. } => Error::At {
            what: "pair",
            index: start + index,
            source,
        },
        other => Error::at("pair", start, other),
    })
}

/// Scores every pair exactly once; output follows corpus order.
pub fn score_corpus(pairs: &[SentencePair], backend: &MetricBackend, batch_size: usize) -> Result<Vec<ScoredPair>> {
    check_backend(backend)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let parts = par::map_chunks(pairs, batch_size, |start, chunk| score_chunk(backend, start, chunk));
    let scores = par::collect_ordered(parts)?.concat();
    Ok(pairs
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(k, (pair, value))| ScoredPair {
            pair: pair.clone(),
            qe_score: MetricScore::new(value, backend.metric_id().clone()),
            original_index: k,
        })
        .collect())
}

/// Streaming scorer: reads pairs lazily, scores `batch_size` at a time and
/// hands `(original_index, score)` to `sink`. Memory is bounded by the batch.
pub fn score_stream<I, F>(pairs: I, backend: &MetricBackend, batch_size: usize, mut sink: F) -> Result<usize>
where
    I: IntoIterator<Item = Result<SentencePair>>,
    F: FnMut(usize, f64) -> Result<()>,
{
    check_backend(backend)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut batch = Vec::with_capacity(batch_size);
    let mut start = 0;
    let mut flush = |batch: &mut Vec<SentencePair>, start: &mut usize| -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        // Sub-batches score in parallel; the sink still sees corpus order.
        let sub = batch.len().div_ceil(rayon_width()).max(1);
        let parts = par::map_chunks(batch, sub, |s, chunk| score_chunk(backend, *start + s, chunk));
        for (k, v) in par::collect_ordered(parts)?.concat().into_iter().enumerate() {
            sink(*start + k, v)?;
        }
        *start += batch.len();
        batch.clear();
        Ok(())
    };
    for (k, pair) in pairs.into_iter().enumerate() {
        batch.push(pair.map_err(|e| Error::at("pair", k, e))?);
        if batch.len() == batch_size {
            flush(&mut batch, &mut start)?;
        }
    }
    flush(&mut batch, &mut start)?;
    Ok(start)
}

fn rayon_width() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Original indices selected by `spec`, ascending.
pub fn select_indices(scores: &[(usize, f64)], spec: SubsetSpec) -> Result<Vec<usize>> {
    let mut chosen: Vec<usize> = match spec {
        SubsetSpec::ByCount(k) => {
            if k == 0 {
                return Err(Error::invalid("subset size must be at least 1"));
            }
            if k > scores.len() {
                return Err(Error::invalid(format!("subset size {k} exceeds corpus size {}", scores.len())));
            }
            let mut order: Vec<&(usize, f64)> = scores.iter().collect();
            order.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            order[..k].iter().map(|(i, _)| *i).collect()
        }
        SubsetSpec::ByThreshold(tau) => {
            if !tau.is_finite() || tau < 0.0 {
                return Err(Error::invalid(format!("threshold must be a finite non-negative score, got {tau}")));
            }
            let kept: Vec<usize> = scores.iter().filter(|(_, s)| *s >= tau).map(|(i, _)| *i).collect();
            if kept.is_empty() {
                log::warn!("threshold {tau} selects no pairs");
            }
            kept
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// The selected pairs, in original corpus order.
pub fn select_subset(scored: &[ScoredPair], spec: SubsetSpec) -> Result<Vec<ScoredPair>> {
    let scores: Vec<(usize, f64)> = scored.iter().map(|s| (s.original_index, s.qe_score.value)).collect();
    let chosen = select_indices(&scores, spec)?;
    let by_index: BTreeMap<usize, &ScoredPair> = scored.iter().map(|s| (s.original_index, s)).collect();
    Ok(chosen.iter().map(|i| by_index[i].clone()).collect())
}

/// Second pass: copies the selected lines of a corpus JSONL file.
pub fn select_stream(corpus: &Path, chosen: &[usize], out: &Path) -> Result<usize> {
    let reader = BufReader::new(File::open(corpus)?);
    let mut writer = BufWriter::new(File::create(out)?);
    let mut next = chosen.iter().peekable();
    let mut written = 0;
    for (k, line) in reader.lines().filter(|l| !matches!(l, Ok(s) if s.trim().is_empty())).enumerate() {
        let Some(&&want) = next.peek() else { break };
        let line = line?;
        if k == want {
            writeln!(writer, "{line}")?;
            written += 1;
            next.next();
        }
    }
    writer.flush()?;
    if written != chosen.len() {
        return Err(Error::format("corpus", format!("selected {} lines, found {written}", chosen.len())));
    }
    Ok(written)
}

/// Writes `index<TAB>qe_score` with six decimals, after a header line.
pub fn write_scores_tsv(scores: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "index\tqe_score")?;
    for (i, s) in scores {
        writeln!(out, "{i}\t{s:.6}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scores_tsv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (k, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let parsed = match (cols.next(), cols.next()) {
            (Some(i), Some(s)) => i.parse::<usize>().ok().zip(s.parse::<f64>().ok()),
            _ => None,
        };
        rows.push(parsed.ok_or_else(|| Error::format("scores", format!("line {}: {line:?}", k + 1)))?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub size: usize,
    /// Dev scores keyed by metric name; empty when training failed.
    pub scores: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub selection_metric: String,
    pub entries: Vec<SweepEntry>,
    pub chosen_size: usize,
}

impl SweepReport {
    pub fn score(&self, size: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.size == size)
            .and_then(|e| e.scores.get(&self.selection_metric).copied())
    }
}

/// Trains on the top-`size` subset for every size and keeps the size with
/// the best `selection_metric`. Sizes are trained in parallel; a failing size
/// is recorded and the sweep continues.
pub fn sweep_subsets<F>(scored: &[ScoredPair], sizes: &[usize], selection_metric: &str, train_and_eval: F) -> Result<SweepReport>
where
    F: Fn(usize, &[SentencePair]) -> Result<BTreeMap<String, f64>> + Sync + Send,
{
    if sizes.is_empty() {
        return Err(Error::invalid("no subset sizes to sweep"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("subset sizes must be strictly increasing"));
    }
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > scored.len()) {
        return Err(Error::invalid(format!("subset size {bad} outside 1..={}", scored.len())));
    }
    let entries = par::map(sizes, |&size| {
        let outcome = select_subset(scored, SubsetSpec::ByCount(size)).and_then(|subset| {
            let pairs: Vec<SentencePair> = subset.into_iter().map(|s| s.pair).collect();
            train_and_eval(size, &pairs)
        });
        match outcome {
            Ok(scores) if scores.contains_key(selection_metric) => SweepEntry {
                size,
                scores,
                error: None,
            },
            Ok(_) => SweepEntry {
                size,
                scores: BTreeMap::new(),
                error: Some(format!("no {selection_metric} score reported")),
            },
            Err(e) => {
                log::warn!("sweep size {size} failed: {e}");
                SweepEntry {
                    size,
                    scores: BTreeMap::new(),
                    error: Some(e.to_string()),
                }
            }
        }
    });
    let mut chosen: Option<(usize, f64)> = None;
    for e in &entries {
        if let Some(&v) = e.scores.get(selection_metric) {
            if chosen.is_none_or(|(_, best)| v > best) {
                chosen = Some((e.size, v));
            }
        }
    }
    let (chosen_size, _) = chosen.ok_or_else(|| Error::invalid("every sweep size failed"))?;
    Ok(SweepReport {
        selection_metric: selection_metric.to_string(),
        entries,
        chosen_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::FixtureScorer;
    use crate::textmetrics::MetricId;

    fn scored(values: &[f64]) -> Vec<ScoredPair> {
        values
            .iter()
            .enumerate()
            .map(|(k, &v)| ScoredPair {
                pair: SentencePair::new(format!("s{k}"), format!("r{k}")),
                qe_score: MetricScore::new(v, MetricId::MockQe),
                original_index: k,
            })
            .collect()
    }

    fn indices(sel: &[ScoredPair]) -> Vec<usize> {
        sel.iter().map(|s| s.original_index).collect()
    }

    #[test]
    fn by_count_top_k() {
        let s = scored(&[0.3, 0.9, 0.7]);
        assert_eq!(indices(&select_subset(&s, SubsetSpec::ByCount(2)).unwrap()), vec![1, 2]);
        assert!(select_subset(&s, SubsetSpec::ByCount(4)).is_err());
    }

    #[test]
    fn boundary_ties_prefer_lower_index() {
        let s = scored(&[0.5, 0.9, 0.5, 0.5]);
        assert_eq!(indices(&select_subset(&s, SubsetSpec::ByCount(2)).unwrap()), vec![0, 1]);
    }

    #[test]
    fn threshold_extremes() {
        let s = scored(&[0.3, 0.9, 0.7]);
        assert_eq!(select_subset(&s, SubsetSpec::ByThreshold(0.0)).unwrap().len(), 3);
        assert!(select_subset(&s, SubsetSpec::ByThreshold(1.0 + 1e-9)).unwrap().is_empty());
        assert_eq!(indices(&select_subset(&s, SubsetSpec::ByThreshold(0.7)).unwrap()), vec![1, 2]);
        assert!(select_subset(&s, SubsetSpec::ByThreshold(f64::NAN)).is_err());
    }

    #[test]
    fn rejects_reference_backend() {
        let pairs = vec![SentencePair::new("a", "b")];
        assert!(score_corpus(&pairs, &MetricBackend::chrf(), 4).is_err());
    }

    #[test]
    fn scoring_error_names_pair() {
        let qe = MetricBackend::new(FixtureScorer::new([("ok".to_string(), 0.5)], false));
        let pairs: Vec<_> = ["ok", "ok", "ok", "bad"].iter().map(|r| SentencePair::new("s", *r)).collect();
        let err = score_corpus(&pairs, &qe, 2).unwrap_err();
        assert!(matches!(err, Error::At { what: "pair", index: 3, .. }), "{err}");
    }

    #[test]
    fn stream_matches_in_memory() {
        let qe = MetricBackend::new(FixtureScorer::new(
            (0..7).map(|k| (format!("r{k}"), k as f64 / 10.0)),
            false,
        ));
        let pairs: Vec<_> = (0..7).map(|k| SentencePair::new(format!("s{k}"), format!("r{k}"))).collect();
        let mut seen = Vec::new();
        let n = score_stream(pairs.iter().cloned().map(Ok), &qe, 3, |i, s| {
            seen.push((i, s));
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 7);
        let mem: Vec<_> = score_corpus(&pairs, &qe, 3)
            .unwrap()
            .iter()
            .map(|s| (s.original_index, s.qe_score.value))
            .collect();
        assert_eq!(seen, mem);
        assert_eq!(qe.cost(), 14);
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        write_scores_tsv(&[(0, 0.5), (1, 1.0 / 3.0)], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "index\tqe_score\n0\t0.500000\n1\t0.333333\n");
        assert_eq!(read_scores_tsv(&p).unwrap(), vec![(0, 0.5), (1, 0.333333)]);
    }

    #[test]
    fn select_stream_copies_lines() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.jsonl");
        let pairs: Vec<_> = (0..5).map(|k| SentencePair::new(format!("s{k}"), format!("r{k}"))).collect();
        crate::synthdata::write_jsonl(&pairs, &src).unwrap();
        let out = dir.path().join("o.jsonl");
        assert_eq!(select_stream(&src, &[1, 3], &out).unwrap(), 2);
        let back = crate::synthdata::read_jsonl(&out).unwrap();
        assert_eq!(back, vec![pairs[1].clone(), pairs[3].clone()]);
    }

    #[test]
    fn sweep_singleton_and_peak() {
        let s = scored(&[0.9, 0.8, 0.7, 0.6, 0.5]);
        let r = sweep_subsets(&s, &[3], "chrf", |_, _| Ok(BTreeMap::from([("chrf".to_string(), 0.1)]))).unwrap();
        assert_eq!(r.chosen_size, 3);

        let injected = BTreeMap::from([(1, 0.2), (3, 0.6), (5, 0.4)]);
        let r = sweep_subsets(&s, &[1, 3, 5], "chrf", |size, pairs| {
            assert_eq!(pairs.len(), size);
            Ok(BTreeMap::from([("chrf".to_string(), injected[&size])]))
        })
        .unwrap();
        assert_eq!(r.chosen_size, 3);
        assert_eq!(r.score(5), Some(0.4));
    }

    #[test]
    fn sweep_records_failures() {
        let s = scored(&[0.9, 0.8, 0.7]);
        let r = sweep_subsets(&s, &[1, 2, 3], "chrf", |size, _| {
            if size == 2 {
                Err(Error::Diverged("nan".into()))
            } else {
                Ok(BTreeMap::from([("chrf".to_string(), size as f64)]))
            }
        })
        .unwrap();
        assert_eq!(r.chosen_size, 3);
        assert!(r.entries[1].error.as_deref().unwrap().contains("nan"));
        assert!(sweep_subsets(&s, &[2, 1], "chrf", |_, _| Ok(BTreeMap::new())).is_err());
        assert!(sweep_subsets(&s, &[4], "chrf", |_, _| Ok(BTreeMap::new())).is_err());
    }
}
