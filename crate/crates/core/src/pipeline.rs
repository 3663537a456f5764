//! End-to-end runs: data, optional filtering, training, candidate selection
//! and test-set evaluation, each stage leaving plain files in its own
//! directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{beam_decode_all, evaluate_outputs, sample_candidates, EvalScores};
use crate::filter::{score_corpus, select_subset, write_scores_tsv, SubsetSpec};
use crate::par;
use crate::policy::{Policy, PolicyConfig, SamplingConfig, Vocab};
use crate::rerank::{pipeline_select, write_candidates, Stage};
use crate::rltrain::{encode_pairs, mle_train, rl_train, write_stats_csv, MleConfig, PpoConfig, RolloutSource};
use crate::scoring::{as_utility, MetricChoice};
use crate::synthdata::{gen_corpus, split, write_jsonl, Corpus, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineStage {
    Filter,
    Mle,
    Rl,
    Nrr,
    Mbr,
    /// Accepted for readability; evaluation always runs last.
    Eval,
}

impl PipelineStage {
    pub fn name(self) -> &'static str {
        match self {
            PipelineStage::Filter => "filter",
            PipelineStage::Mle => "mle",
            PipelineStage::Rl => "rl",
            PipelineStage::Nrr => "nrr",
            PipelineStage::Mbr => "mbr",
            PipelineStage::Eval => "eval",
        }
    }

    fn is_training(self) -> bool {
        matches!(self, PipelineStage::Mle | PipelineStage::Rl)
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "filter" => PipelineStage::Filter,
            "mle" => PipelineStage::Mle,
            "rl" => PipelineStage::Rl,
            "nrr" => PipelineStage::Nrr,
            "mbr" => PipelineStage::Mbr,
            "eval" => PipelineStage::Eval,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown stage {s:?} (expected filter, mle, rl, nrr, mbr or eval)"
                )))
            }
        })
    }
}

/// Parses a comma-separated stage list. Stages must appear in the order
/// filter, mle, rl, nrr, mbr, eval, each at most once, and filtering needs a
/// training stage after it.
pub fn parse_stages(list: &str) -> Result<Vec<PipelineStage>> {
    let stages = list
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<PipelineStage>>>()?;
    validate_stages(&stages)?;
    Ok(stages)
}

pub fn validate_stages(stages: &[PipelineStage]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::config("no pipeline stages"));
    }
    for w in stages.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::config(format!(
                "invalid stage ordering: {} cannot follow {}",
                w[1], w[0]
            )));
        }
    }
    if stages.contains(&PipelineStage::Filter) && !stages.iter().any(|s| s.is_training()) {
        return Err(Error::config("filter needs a later mle or rl stage"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub task: TaskSpec,
    pub corpus_size: usize,
    pub train_frac: f64,
    pub dev_frac: f64,
    /// Defaults to the task-sized architecture.
    pub policy: Option<PolicyConfig>,
    /// Fraction of the training split kept by the filter stage.
    pub filter_keep: f64,
    pub filter_metric: MetricChoice,
    pub mle: MleConfig,
    /// Train MLE on at most this many pairs of the (filtered) training set.
    pub mle_max_pairs: Option<usize>,
    pub ppo: PpoConfig,
    pub reward: MetricChoice,
    pub beam_size: usize,
    pub num_candidates: usize,
    pub sampling: SamplingConfig,
    pub nrr_metric: MetricChoice,
    /// Candidates the N-best stage passes on when MBR follows it.
    pub nrr_keep: usize,
    pub mbr_utility: MetricChoice,
    /// Reused when neither mle nor rl runs, or as the rl start without mle.
    pub init_checkpoint: Option<PathBuf>,
    pub scorer_url: Option<String>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            task: TaskSpec {
                noise_rate: 0.3,
                ..TaskSpec::default()
            },
            corpus_size: 10_000,
            train_frac: 0.8,
            dev_frac: 0.1,
            policy: None,
            filter_keep: 0.7,
            filter_metric: MetricChoice::MockQe,
            mle: MleConfig::default(),
            mle_max_pairs: None,
            ppo: PpoConfig::default(),
            reward: MetricChoice::Chrf,
            beam_size: 5,
            num_candidates: 100,
            sampling: SamplingConfig::default(),
            nrr_metric: MetricChoice::MockQe,
            nrr_keep: 10,
            mbr_utility: MetricChoice::Chrf,
            init_checkpoint: None,
            scorer_url: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: PipelineStage,
    pub seconds: f64,
    pub artifacts: Vec<PathBuf>,
    /// Dev or selection summary numbers, stage specific.
    pub notes: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<PipelineStage>,
    pub records: Vec<StageRecord>,
    pub test_pairs: usize,
    pub scores: EvalScores,
}

impl PipelineReport {
    /// One Markdown row: stage list, BLEU, chrF, mock-QE.
    pub fn markdown(&self) -> String {
        let name: Vec<&str> = self.stages.iter().map(|s| s.name()).collect();
        format!(
            "| pipeline | BLEU | chrF | mock-QE |\n|---|---|---|---|\n| {} | {:.4} | {:.4} | {:.4} |\n",
            name.join(","),
            self.scores.bleu,
            self.scores.chrf,
            self.scores.mock_qe
        )
    }
}

/// The corpus every pipeline stage reads: splits with gold references on
/// dev and test.
pub struct PipelineData {
    pub corpus: Corpus,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl PipelineData {
    pub fn generate(cfg: &PipelineConfig) -> Result<Self> {
        let corpus = gen_corpus(&cfg.task, cfg.corpus_size)?;
        let (train, dev, test) = split(&corpus, cfg.train_frac, cfg.dev_frac, cfg.seed)?;
        Ok(PipelineData {
            dev: dev.with_gold_references(),
            test: test.with_gold_references(),
            corpus,
            train,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let files = [
            ("corpus.jsonl", &self.corpus),
            ("train.jsonl", &self.train),
            ("dev.jsonl", &self.dev),
            ("test.jsonl", &self.test),
        ];
        let mut out = Vec::new();
        for (name, c) in files {
            let path = dir.join(name);
            write_jsonl(&c.pairs, &path)?;
            out.push(path);
        }
        let gold = dir.join("gold.jsonl");
        self.corpus.gold.write_jsonl(&gold)?;
        out.push(gold);
        Ok(out)
    }
}

struct Run<'a> {
    dir: &'a Path,
    records: Vec<StageRecord>,
}

impl Run<'_> {
    fn stage<T>(&mut self, stage: PipelineStage, f: impl FnOnce(&Path, &mut StageRecord) -> Result<T>) -> Result<T> {
        let dir = self.dir.join(stage.name());
        let start = Instant::now();
        let mut record = StageRecord {
            stage,
            seconds: 0.0,
            artifacts: Vec::new(),
            notes: serde_json::Map::new(),
        };
        let out = fs::create_dir_all(&dir)
            .map_err(Error::from)
            .and_then(|_| f(&dir, &mut record))
            .map_err(|e| Error::Stage {
                stage: stage.name(),
                source: Box::new(e),
            })?;
        record.seconds = start.elapsed().as_secs_f64();
        log::info!("stage {stage} done in {:.1}s", record.seconds);
        self.records.push(record);
        Ok(out)
    }
}

fn note(record: &mut StageRecord, key: &str, value: impl Into<serde_json::Value>) {
    record.notes.insert(key.to_string(), value.into());
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Runs `stages` on a freshly generated corpus, writing everything under
/// `dir`. A failing stage aborts with [`Error::Stage`]; files of finished
/// stages stay in place.
pub fn run_pipeline(stages: &[PipelineStage], cfg: &PipelineConfig, dir: &Path) -> Result<PipelineReport> {
    let data = PipelineData::generate(cfg)?;
    run_pipeline_on(stages, cfg, &data, dir)
}

pub fn run_pipeline_on(
    stages: &[PipelineStage],
    cfg: &PipelineConfig,
    data: &PipelineData,
    dir: &Path,
) -> Result<PipelineReport> {
    validate_stages(stages)?;
    if !(cfg.filter_keep > 0.0 && cfg.filter_keep <= 1.0) {
        return Err(Error::config(format!("filter_keep must be in (0, 1], got {}", cfg.filter_keep)));
    }
    if cfg.num_candidates == 0 || cfg.beam_size == 0 || cfg.nrr_keep == 0 {
        return Err(Error::config("beam_size, num_candidates and nrr_keep must be positive"));
    }
    cfg.sampling.validate()?;
    fs::create_dir_all(dir)?;
    write_json(cfg, &dir.join("config.json"))?;
    let has = |s: PipelineStage| stages.contains(&s);
    let gold = Some(&data.corpus.gold);
    let endpoint = cfg.scorer_url.as_deref();
    let mut run = Run {
        dir,
        records: Vec::new(),
    };

    data.write(&dir.join("data"))?;
    log::info!("data: {} train, {} dev, {} test", data.train.len(), data.dev.len(), data.test.len());

    let mut train = data.train.clone();
    if has(PipelineStage::Filter) {
        train = run.stage(PipelineStage::Filter, |d, rec| {
            let backend = cfg.filter_metric.build(gold, endpoint)?;
            let scored = score_corpus(&train.pairs, &backend, 256)?;
            let keep = ((train.len() as f64 * cfg.filter_keep).round() as usize).clamp(1, train.len());
            let chosen = select_subset(&scored, SubsetSpec::ByCount(keep))?;
            let indices: Vec<usize> = chosen.iter().map(|s| s.original_index).collect();
            let scores: Vec<(usize, f64)> = scored.iter().map(|s| (s.original_index, s.qe_score.value)).collect();
            let filtered = train.subset(&indices);
            let scores_path = d.join("scores.tsv");
            let subset_path = d.join("train.filtered.jsonl");
            write_scores_tsv(&scores, &scores_path)?;
            write_jsonl(&filtered.pairs, &subset_path)?;
            rec.artifacts = vec![scores_path, subset_path];
            note(rec, "kept", keep);
            note(rec, "clean_fraction", 1.0 - filtered.noisy_fraction());
            Ok(filtered)
        })?;
    }

    let mut policy = match &cfg.init_checkpoint {
        Some(path) => Policy::load(path)?,
        None => {
            let pc = cfg.policy.unwrap_or_else(|| PolicyConfig::for_task(&cfg.task));
            Policy::random(pc, Arc::new(Vocab::for_task(&cfg.task)), cfg.seed)?
        }
    };

    if has(PipelineStage::Mle) {
        policy = run.stage(PipelineStage::Mle, |d, rec| {
            let n = cfg.mle_max_pairs.map_or(train.len(), |m| m.min(train.len()));
            let tr = encode_pairs(&policy, &train.pairs[..n])?;
            let dv = encode_pairs(&policy, &data.dev.pairs)?;
            let (trained, report) = mle_train(&policy, &tr, &dv, &cfg.mle)?;
            let ckpt = d.join("policy.ckpt");
            let rep = d.join("report.json");
            trained.save(&ckpt)?;
            write_json(&report, &rep)?;
            rec.artifacts = vec![ckpt, rep];
            note(rec, "pairs", n);
            if let Some(best) = report.best_dev_loss() {
                note(rec, "dev_nll", best);
            }
            Ok(trained)
        })?;
    }

    if has(PipelineStage::Rl) {
        policy = run.stage(PipelineStage::Rl, |d, rec| {
            let reward = cfg.reward.build(gold, endpoint)?;
            let srcs: Vec<RolloutSource> = train.pairs.iter().map(RolloutSource::from).collect();
            let dev: Vec<RolloutSource> = data.dev.pairs.iter().map(RolloutSource::from).collect();
            let (trained, report) = rl_train(&policy, &srcs, &dev, &reward, &cfg.ppo)?;
            let ckpt = d.join("policy.ckpt");
            let stats = d.join("stats.csv");
            let rep = d.join("report.json");
            trained.save(&ckpt)?;
            write_stats_csv(&report.iterations, &stats)?;
            write_json(&report, &rep)?;
            rec.artifacts = vec![ckpt, stats, rep];
            note(rec, "start_dev_reward", report.start_dev_reward);
            note(rec, "best_dev_reward", report.best_dev_reward);
            Ok(trained)
        })?;
    }

    let srcs: Vec<String> = data.test.pairs.iter().map(|p| p.src.clone()).collect();
    let outputs = if has(PipelineStage::Nrr) || has(PipelineStage::Mbr) {
        let cands = sample_candidates(&policy, &srcs, cfg.num_candidates, &cfg.sampling, cfg.seed)?;
        let cand_path = dir.join("candidates.jsonl");
        write_candidates(&cands, &cand_path)?;
        let qe = if has(PipelineStage::Nrr) {
            Some(cfg.nrr_metric.build(gold, endpoint)?)
        } else {
            None
        };
        let util = if has(PipelineStage::Mbr) {
            Some(cfg.mbr_utility.build(gold, endpoint)?)
        } else {
            None
        };
        let mut selectors = Vec::new();
        if let Some(qe) = &qe {
            let keep = if util.is_some() { cfg.nrr_keep } else { 1 };
            selectors.push(Stage::NbestTopK { qe, keep: Some(keep) });
        }
        if let Some(u) = &util {
            selectors.push(Stage::Mbr { utility: as_utility(u)? });
        }
        let last = if util.is_some() { PipelineStage::Mbr } else { PipelineStage::Nrr };
        run.stage(last, |d, rec| {
            let picked = par::collect_ordered(par::map(&cands, |c| pipeline_select(c, &selectors)))?;
            let path = d.join("selections.jsonl");
            let lines: Vec<String> = picked
                .iter()
                .map(|p| serde_json::to_string(p).map_err(|e| Error::format("selections", e)))
                .collect::<Result<_>>()?;
            fs::write(&path, lines.join("\n") + "\n")?;
            rec.artifacts = vec![path];
            let calls = qe.as_ref().map_or(0, |b| b.cost()) + util.as_ref().map_or(0, |b| b.cost());
            note(rec, "metric_calls", calls);
            Ok(picked.into_iter().map(|p| p.selected).collect::<Vec<String>>())
        })?
    } else {
        beam_decode_all(&policy, &srcs, cfg.beam_size)?
    };

    let scores = run.stage(PipelineStage::Eval, |d, rec| {
        let out_path = d.join("outputs.txt");
        fs::write(&out_path, outputs.join("\n") + "\n")?;
        let scores = evaluate_outputs(&data.test.pairs, &outputs, &data.corpus.gold)?;
        let path = d.join("scores.json");
        write_json(&scores, &path)?;
        rec.artifacts = vec![out_path, path];
        Ok(scores)
    })?;

    let report = PipelineReport {
        stages: stages.to_vec(),
        records: run.records,
        test_pairs: data.test.len(),
        scores,
    };
    write_json(&report, &dir.join("report.json"))?;
    fs::write(dir.join("report.md"), report.markdown())?;
    Ok(report)
}
