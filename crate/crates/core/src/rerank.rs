//! Inference-time selection over a candidate list.
//!
//! N-best reranking picks the candidate a reference-free scorer likes best
//! and costs N scorer calls. MBR decoding treats the same candidates as
//! pseudo-references and picks the one with the highest average utility
//! against all of them (self-comparison included), which costs N² calls.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scoring::{MetricBackend, ScoreItem, Utility, BATCH_LIMIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub src: String,
    pub hyps: Vec<String>,
    #[serde(rename = "logps")]
    pub gen_logps: Option<Vec<f64>>,
}

impl CandidateSet {
    pub fn new(src: impl Into<String>, hyps: Vec<String>) -> Self {
        CandidateSet {
            src: src.into(),
            hyps,
            gen_logps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.hyps.is_empty() {
            return Err(Error::invalid("candidate set is empty"));
        }
        if let Some(lp) = &self.gen_logps {
            if lp.len() != self.hyps.len() {
                return Err(Error::invalid(format!(
                    "{} log-probabilities for {} candidates",
                    lp.len(),
                    self.hyps.len()
                )));
            }
        }
        Ok(())
    }

    fn restrict(&self, indices: &[usize]) -> CandidateSet {
        CandidateSet {
            src: self.src.clone(),
            hyps: indices.iter().map(|&i| self.hyps[i].clone()).collect(),
            gen_logps: self.gen_logps.as_ref().map(|lp| indices.iter().map(|&i| lp[i]).collect()),
        }
    }
}

/// Outcome of a selection: chosen position, its text and per-candidate scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub selected: String,
    pub scores: Vec<f64>,
}

/// First position of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Scores every candidate with a reference-free backend and returns the best.
pub fn nbest_rerank(cands: &CandidateSet, qe: &MetricBackend) -> Result<Selection> {
    cands.check()?;
    if qe.uses_reference() {
        return Err(Error::invalid(format!(
            "N-best reranking needs a reference-free scorer, got {}",
            qe.metric_id()
        )));
    }
    let scores = qe_scores(cands, qe)?;
    let index = argmax(&scores);
    Ok(Selection {
        index,
        selected: cands.hyps[index].clone(),
        scores,
    })
}

fn qe_scores(cands: &CandidateSet, qe: &MetricBackend) -> Result<Vec<f64>> {
    let parts = par::map_chunks(&cands.hyps, BATCH_LIMIT, |start, chunk| {
        let items: Vec<ScoreItem> = chunk.iter().map(|h| ScoreItem::qe(&cands.src, h)).collect();
        qe.score_values(&items).map_err(|e| reindex(e, start))
    });
    Ok(par::collect_ordered(parts)?.concat())
}

/// Shifts an item-level error from chunk-local to candidate position.
fn reindex(err: Error, offset: usize) -> Error {
    match err {
        Error::At { index, source, .. } => Error::At {
            what: "candidate",
            index: index + offset,
            source,
        },
        other => Error::at("candidate", offset, other),
    }
}

/// `N × N` utilities; entry `(j, i)` is `u(y_j, y_i)` with `y_j` the
/// pseudo-reference.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl UtilityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("utility matrix must be square"));
        }
        Ok(UtilityMatrix {
            n,
            values: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, pseudo_ref: usize, hyp: usize) -> f64 {
        self.values[pseudo_ref * self.n + hyp]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }

    /// Monte Carlo expected utility of each candidate: `(1/N) Σ_j u(y_j, y_i)`.
    pub fn expected_utilities(&self) -> Vec<f64> {
        let n = self.n as f64;
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(j, i)).sum::<f64>() / n)
            .collect()
    }
}

/// Builds the pairwise utility matrix. Uncached, exactly `N²` utility calls
/// are made. With `symmetric_cache` and a symmetric utility only the upper
/// triangle (diagonal included) is evaluated and mirrored.
pub fn utility_matrix(cands: &CandidateSet, utility: &Utility<'_>, symmetric_cache: bool) -> Result<UtilityMatrix> {
    cands.check()?;
    let n = cands.len();
    let mirror = symmetric_cache && utility.is_symmetric();
    let cells: Vec<(usize, usize)> = if mirror {
        (0..n).flat_map(|j| (j..n).map(move |i| (j, i))).collect()
    } else {
        (0..n).flat_map(|j| (0..n).map(move |i| (j, i))).collect()
    };
    let parts = par::map_chunks(&cells, BATCH_LIMIT, |start, chunk| {
        let pairs: Vec<(&str, &str)> = chunk
            .iter()
            .map(|&(j, i)| (cands.hyps[j].as_str(), cands.hyps[i].as_str()))
            .collect();
        utility.eval_pairs(&cands.src, &pairs).map_err(|e| match e {
            Error::At { index, source, .. } => {
                let (row, col) = cells[start + index];
                Error::Pair { row, col, source }
            }
            other => {
                let (row, col) = cells[start];
                Error::Pair {
                    row,
                    col,
                    source: Box::new(other),
                }
            }
        })
    });
    let flat = par::collect_ordered(parts)?.concat();
    let mut values = vec![0.0; n * n];
    for (&(j, i), v) in cells.iter().zip(flat) {
        values[j * n + i] = v;
        if mirror {
            values[i * n + j] = v;
        }
    }
    Ok(UtilityMatrix { n, values })
}

/// MBR selection with the candidates as their own pseudo-references.
pub fn mbr_select(cands: &CandidateSet, utility: &Utility<'_>) -> Result<Selection> {
    mbr_select_with(cands, utility, false)
}

pub fn mbr_select_with(cands: &CandidateSet, utility: &Utility<'_>, symmetric_cache: bool) -> Result<Selection> {
    let expected = utility_matrix(cands, utility, symmetric_cache)?.expected_utilities();
    let index = argmax(&expected);
    Ok(Selection {
        index,
        selected: cands.hyps[index].clone(),
        scores: expected,
    })
}

/// One step of a selection pipeline.
pub enum Stage<'a> {
    /// Keep the `keep` best candidates by QE score (all when `None`), in their
    /// original order.
    NbestTopK {
        qe: &'a MetricBackend,
        keep: Option<usize>,
    },
    /// MBR over the surviving candidates; reduces the set to one.
    Mbr { utility: Utility<'a> },
}

impl Stage<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::NbestTopK { .. } => "nrr",
            Stage::Mbr { .. } => "mbr",
        }
    }
}

/// Per-stage record: surviving original indices and the stage's scores over
/// its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub kept: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSelection {
    pub index: usize,
    pub selected: String,
    pub stages: Vec<StageReport>,
}

/// Applies stages left to right. When the final stage leaves several
/// candidates, the one it scored highest is returned.
pub fn pipeline_select(cands: &CandidateSet, stages: &[Stage<'_>]) -> Result<PipelineSelection> {
    cands.check()?;
    if stages.is_empty() {
        return Err(Error::config("selection pipeline has no stages"));
    }
    let mut alive: Vec<usize> = (0..cands.len()).collect();
    let mut reports = Vec::with_capacity(stages.len());
    let mut last_best = 0;
    for (k, stage) in stages.iter().enumerate() {
        let subset = cands.restrict(&alive);
        let (kept_local, scores, best) = match stage {
            Stage::NbestTopK { qe, keep } => {
                let sel = nbest_rerank(&subset, qe)?;
                let keep = keep.unwrap_or(subset.len());
                if keep == 0 {
                    return Err(Error::config(format!("stage {k} ({}) keeps no candidates", stage.name())));
                }
                (top_k_in_order(&sel.scores, keep), sel.scores, sel.index)
            }
            Stage::Mbr { utility } => {
                let sel = mbr_select(&subset, utility)?;
                (vec![sel.index], sel.scores, sel.index)
            }
        };
        if kept_local.is_empty() {
            return Err(Error::config(format!("stage {k} ({}) left no candidates", stage.name())));
        }
        last_best = alive[best];
        alive = kept_local.iter().map(|&i| alive[i]).collect();
        reports.push(StageReport {
            stage: stage.name().to_string(),
            kept: alive.clone(),
            scores,
        });
    }
    Ok(PipelineSelection {
        index: last_best,
        selected: cands.hyps[last_best].clone(),
        stages: reports,
    })
}

/// Positions of the `k` highest scores (ties to lower position), ascending.
pub fn top_k_in_order(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateSet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut sets = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: CandidateSet =
            serde_json::from_str(&line).map_err(|e| Error::format("candidates", format!("line {}: {e}", k + 1)))?;
        set.check().map_err(|e| Error::at("line", k + 1, e))?;
        sets.push(set);
    }
    Ok(sets)
}

pub fn write_candidates(sets: &[CandidateSet], path: &Path) -> Result<()> {
    write_lines(sets, path, "candidates")
}

/// One selection report line: `{"src", "selected", "index", "scores"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub src: String,
    pub selected: String,
    pub index: usize,
    pub scores: Vec<f64>,
}

impl SelectionRecord {
    pub fn new(src: &str, sel: Selection) -> Self {
        SelectionRecord {
            src: src.to_string(),
            selected: sel.selected,
            index: sel.index,
            scores: sel.scores,
        }
    }
}

pub fn write_selections(records: &[SelectionRecord], path: &Path) -> Result<()> {
    write_lines(records, path, "selections")
}

fn write_lines<T: Serialize>(rows: &[T], path: &Path, what: &'static str) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::format(what, e))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
