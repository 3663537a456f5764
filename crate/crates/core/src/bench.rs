//! Wall-clock comparison of training and decoding methods.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{beam_decode_all, sample_candidates};
use crate::par;
use crate::policy::{Policy, SamplingConfig};
use crate::rerank::{mbr_select, nbest_rerank, CandidateSet};
use crate::rltrain::{encode_pairs, mle_train, rl_train, MleConfig, PpoConfig, RolloutSource};
use crate::scoring::{as_utility, FixedCostUtility, MetricBackend, MetricChoice};
use crate::synthdata::{GoldOracle, SentencePair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub beam_size: usize,
    pub num_candidates: usize,
    pub sampling: SamplingConfig,
    pub nrr_metric: MetricChoice,
    pub mbr_utility: MetricChoice,
    pub mle: MleConfig,
    pub ppo: PpoConfig,
    /// Skip the training rows.
    pub skip_training: bool,
    /// Candidate-set sizes for the MBR growth measurement.
    pub scaling_sizes: (usize, usize),
    pub scaling_sources: usize,
    /// Work units per fixed-cost utility call.
    pub fixed_cost_work: u32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            beam_size: 5,
            num_candidates: 32,
            sampling: SamplingConfig::default(),
            nrr_metric: MetricChoice::MockQe,
            mbr_utility: MetricChoice::Chrf,
            mle: MleConfig {
                epochs: 2,
                ..MleConfig::default()
            },
            ppo: PpoConfig {
                trajectory_limit: 640,
                ..PpoConfig::default()
            },
            skip_training: false,
            scaling_sizes: (32, 64),
            scaling_sources: 8,
            fixed_cost_work: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub training_secs: f64,
    pub inference_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbrScaling {
    pub n_small: usize,
    pub n_large: usize,
    pub secs_small: f64,
    pub secs_large: f64,
    pub calls_small: u64,
    pub calls_large: u64,
}

impl MbrScaling {
    pub fn ratio(&self) -> f64 {
        self.secs_large / self.secs_small
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub scaling: MbrScaling,
    pub test_sources: usize,
    pub num_candidates: usize,
}

fn minutes(secs: f64) -> String {
    format!("{:.2}", secs / 60.0)
}

impl BenchTable {
    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Times in minutes, two decimals.
    pub fn markdown(&self) -> String {
        let mut s = String::from("| method | training (min) | inference (min) |\n|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} |",
                r.method,
                minutes(r.training_secs),
                minutes(r.inference_secs)
            );
        }
        let sc = &self.scaling;
        let _ = writeln!(
            s,
            "\nMBR with a fixed-cost utility: N={} {:.3}s, N={} {:.3}s, ratio {:.2}",
            sc.n_small,
            sc.secs_small,
            sc.n_large,
            sc.secs_large,
            sc.ratio()
        );
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("method,training_min,inference_min\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.method, minutes(r.training_secs), minutes(r.inference_secs));
        }
        s
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Seconds for uncached MBR over `sets`, with the number of utility calls.
pub fn time_mbr(sets: &[CandidateSet], utility: &MetricBackend) -> Result<(f64, u64)> {
    let u = as_utility(utility)?;
    let before = utility.cost();
    let (_, secs) = timed(|| par::collect_ordered(sets.iter().map(|c| mbr_select(c, &u)).collect()))?;
    Ok((secs, utility.cost() - before))
}

/// Distinct synthetic candidates; their content does not matter for the
/// fixed-cost utility.
fn synthetic_sets(sources: usize, n: usize) -> Vec<CandidateSet> {
    (0..sources)
        .map(|s| CandidateSet::new(format!("src{s}"), (0..n).map(|i| format!("h{s} {i}")).collect()))
        .collect()
}

pub fn mbr_scaling(cfg: &BenchConfig) -> Result<MbrScaling> {
    let (n_small, n_large) = cfg.scaling_sizes;
    if n_small == 0 || n_large <= n_small || cfg.scaling_sources == 0 {
        return Err(Error::config("scaling sizes must satisfy 0 < small < large"));
    }
    let utility = MetricBackend::new(FixedCostUtility {
        work: cfg.fixed_cost_work,
    });
    // warm the thread pool and caches
    time_mbr(&synthetic_sets(1, n_small), &utility)?;
    let (secs_small, calls_small) = time_mbr(&synthetic_sets(cfg.scaling_sources, n_small), &utility)?;
    let (secs_large, calls_large) = time_mbr(&synthetic_sets(cfg.scaling_sources, n_large), &utility)?;
    Ok(MbrScaling {
        n_small,
        n_large,
        secs_small,
        secs_large,
        calls_small,
        calls_large,
    })
}

pub struct BenchInputs<'a> {
    pub policy: &'a Policy,
    pub train: &'a [SentencePair],
    pub dev: &'a [SentencePair],
    pub test: &'a [SentencePair],
    pub gold: Option<&'a Arc<GoldOracle>>,
    pub scorer_url: Option<&'a str>,
}

/// Times MLE and RL training (unless skipped), beam decoding, N-best
/// reranking and MBR on the test sources. Reranking rows start from the
/// given policy and have no training cost; candidate sampling counts as
/// inference.
pub fn run_bench(inputs: &BenchInputs<'_>, cfg: &BenchConfig) -> Result<BenchTable> {
    if inputs.test.is_empty() {
        return Err(Error::invalid("bench needs a non-empty test split"));
    }
    let policy = inputs.policy;
    let srcs: Vec<String> = inputs.test.iter().map(|p| p.src.clone()).collect();
    let mut rows = Vec::new();

    let (_, beam_secs) = timed(|| beam_decode_all(policy, &srcs, cfg.beam_size))?;
    rows.push(BenchRow {
        method: "beam".into(),
        training_secs: 0.0,
        inference_secs: beam_secs,
    });

    if !cfg.skip_training {
        let fresh = Policy::random(*policy.config(), policy.vocab().clone(), cfg.seed)?;
        let tr = encode_pairs(&fresh, inputs.train)?;
        let dv = encode_pairs(&fresh, inputs.dev)?;
        let (mle, mle_secs) = timed(|| mle_train(&fresh, &tr, &dv, &cfg.mle))?;
        let (_, mle_inf) = timed(|| beam_decode_all(&mle.0, &srcs, cfg.beam_size))?;
        rows.push(BenchRow {
            method: "mle".into(),
            training_secs: mle_secs,
            inference_secs: mle_inf,
        });

        let reward = MetricBackend::chrf();
        let train: Vec<RolloutSource> = inputs.train.iter().map(RolloutSource::from).collect();
        let dev: Vec<RolloutSource> = inputs.dev.iter().map(RolloutSource::from).collect();
        let (rl, rl_secs) = timed(|| rl_train(policy, &train, &dev, &reward, &cfg.ppo))?;
        let (_, rl_inf) = timed(|| beam_decode_all(&rl.0, &srcs, cfg.beam_size))?;
        rows.push(BenchRow {
            method: "rl".into(),
            training_secs: rl_secs,
            inference_secs: rl_inf,
        });
    }

    let (cands, sample_secs) =
        timed(|| sample_candidates(policy, &srcs, cfg.num_candidates, &cfg.sampling, cfg.seed))?;

    let qe = cfg.nrr_metric.build(inputs.gold, inputs.scorer_url)?;
    let (_, nrr_secs) = timed(|| par::collect_ordered(par::map(&cands, |c| nbest_rerank(c, &qe))))?;
    rows.push(BenchRow {
        method: "nrr".into(),
        training_secs: 0.0,
        inference_secs: sample_secs + nrr_secs,
    });

    let util = cfg.mbr_utility.build(inputs.gold, inputs.scorer_url)?;
    let (mbr_secs, _) = time_mbr(&cands, &util)?;
    rows.push(BenchRow {
        method: "mbr".into(),
        training_secs: 0.0,
        inference_secs: sample_secs + mbr_secs,
    });

    Ok(BenchTable {
        rows,
        scaling: mbr_scaling(cfg)?,
        test_sources: srcs.len(),
        num_candidates: cfg.num_candidates,
    })
}
