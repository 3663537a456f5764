//! Batch decoding and test-set evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{Policy, SamplingConfig};
use crate::rerank::CandidateSet;
use crate::scoring::{mock_qe_score, MetricBackend, ScoreItem};
use crate::synthdata::{GoldOracle, SentencePair};
use crate::textmetrics::{chrf, corpus_bleu, tokenize, BLEU_ORDER, CHRF_BETA, CHRF_ORDER};

/// Beam-decodes every source and returns the best output text.
pub fn beam_decode_all(policy: &Policy, srcs: &[String], beam_size: usize) -> Result<Vec<String>> {
    let out = par::map(srcs, |s| policy.translate(s, beam_size));
    out.into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::at("source", k, e)))
        .collect()
}

/// `n` sampled candidates per source. Source `k` uses seed `seed + k`.
pub fn sample_candidates(
    policy: &Policy,
    srcs: &[String],
    n: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<CandidateSet>> {
    let idx: Vec<usize> = (0..srcs.len()).collect();
    let out = par::map(&idx, |&k| -> Result<CandidateSet> {
        let ids = policy.vocab().encode_src(&srcs[k])?;
        let hyps = policy.sample(&ids, n, cfg, seed.wrapping_add(k as u64))?;
        Ok(CandidateSet {
            src: srcs[k].clone(),
            hyps: hyps.iter().map(|h| policy.vocab().decode_tgt(&h.tokens)).collect(),
            gen_logps: Some(hyps.iter().map(|h| h.logp).collect()),
        })
    });
    out.into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::at("source", k, e)))
        .collect()
}

/// The beam list (best first) as candidates.
pub fn beam_candidates(policy: &Policy, srcs: &[String], beam_size: usize) -> Result<Vec<CandidateSet>> {
    let out = par::map(srcs, |s| -> Result<CandidateSet> {
        let ids = policy.vocab().encode_src(s)?;
        let hyps = policy.beam_search(&ids, beam_size)?;
        Ok(CandidateSet {
            src: s.clone(),
            hyps: hyps.iter().map(|h| policy.vocab().decode_tgt(&h.tokens)).collect(),
            gen_logps: Some(hyps.iter().map(|h| h.logp).collect()),
        })
    });
    out.into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::at("source", k, e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub bleu: f64,
    pub chrf: f64,
    pub mock_qe: f64,
}

/// Corpus BLEU, mean sentence chrF and mean mock-QE of `outputs` against
/// the pairs' references.
pub fn evaluate_outputs(pairs: &[SentencePair], outputs: &[String], gold: &GoldOracle) -> Result<EvalScores> {
    if pairs.is_empty() || pairs.len() != outputs.len() {
        return Err(Error::invalid(format!("{} outputs for {} pairs", outputs.len(), pairs.len())));
    }
    let tok: Vec<_> = pairs
        .iter()
        .zip(outputs)
        .map(|(p, o)| (tokenize(o), tokenize(&p.reference)))
        .collect();
    let bleu = corpus_bleu(&tok, BLEU_ORDER)?.value;
    let n = pairs.len() as f64;
    let mut chrf_sum = 0.0;
    let mut qe_sum = 0.0;
    for (k, (p, o)) in pairs.iter().zip(outputs).enumerate() {
        chrf_sum += chrf(o, &p.reference, CHRF_ORDER, CHRF_BETA)?.value;
        qe_sum += mock_qe_score(&p.src, o, gold).map_err(|e| Error::at("pair", k, e))?.value;
    }
    Ok(EvalScores {
        bleu,
        chrf: chrf_sum / n,
        mock_qe: qe_sum / n,
    })
}

/// Beam-decodes `pairs` and evaluates the outputs.
pub fn evaluate(policy: &Policy, pairs: &[SentencePair], gold: &GoldOracle, beam_size: usize) -> Result<EvalScores> {
    let srcs: Vec<String> = pairs.iter().map(|p| p.src.clone()).collect();
    let outputs = beam_decode_all(policy, &srcs, beam_size)?;
    evaluate_outputs(pairs, &outputs, gold)
}

/// Mean backend score of `outputs`, using the pairs' references when the
/// backend needs them.
pub fn mean_metric(backend: &MetricBackend, pairs: &[SentencePair], outputs: &[String]) -> Result<f64> {
    let items: Vec<ScoreItem> = pairs
        .iter()
        .zip(outputs)
        .map(|(p, o)| ScoreItem {
            src: p.src.clone(),
            mt: o.clone(),
            reference: backend.uses_reference().then(|| p.reference.clone()),
        })
        .collect();
    let scores = backend.score_values(&items)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
