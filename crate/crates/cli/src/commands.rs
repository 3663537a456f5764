use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;

use mtpref::bench::{run_bench, BenchConfig, BenchInputs};
use mtpref::evaluate::{beam_candidates, beam_decode_all, evaluate_outputs, mean_metric, sample_candidates, EvalScores};
use mtpref::filter::{
    read_scores_tsv, score_stream, select_indices, select_stream, select_subset, sweep_subsets, write_scores_tsv,
    ScoredPair, SubsetSpec,
};
use mtpref::pipeline::{parse_stages, run_pipeline, PipelineConfig};
use mtpref::rerank::{mbr_select_with, read_candidates, write_candidates, write_selections, SelectionRecord};
use mtpref::rltrain::{encode_pairs, mle_train, rl_train, write_stats_csv, MleConfig, PpoConfig, RolloutSource};
use mtpref::scoring::{as_utility, MetricChoice};
use mtpref::synthdata::{jsonl_reader, read_jsonl, write_jsonl, write_ledger, GoldOracle};
use mtpref::*;

use crate::args::*;

/// Bad flag combination that clap cannot express.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    set_threads(cli.global.threads)?;
    let g = &cli.global;
    match &cli.command {
        Command::Gen(a) => gen(g, a),
        Command::Filter(FilterCommand::Score(a)) => filter_score(g, a),
        Command::Filter(FilterCommand::Select(a)) => filter_select(g, a),
        Command::Filter(FilterCommand::Sweep(a)) => filter_sweep(g, a),
        Command::Train(TrainCommand::Mle(a)) => train_mle(g, a),
        Command::Train(TrainCommand::Rl(a)) => train_rl(g, a),
        Command::Decode(DecodeCommand::Beam(a)) => decode_beam(g, a),
        Command::Decode(DecodeCommand::Sample(a)) => decode_sample(g, a),
        Command::Rerank(RerankCommand::Nbest(a)) => rerank_nbest(g, a),
        Command::Rerank(RerankCommand::Mbr(a)) => rerank_mbr(g, a),
        Command::Pipeline(a) => pipeline(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Bench(a) => bench(g, a),
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        log::warn!("built without the parallel feature; --threads {n} has no effect");
    }
    Ok(())
}

#[derive(Serialize)]
struct Snapshot<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    threads: Option<usize>,
    scorer_url: Option<&'a str>,
    args: &'a T,
}

/// `dir/config.json` for directory outputs, `<file>.config.json` otherwise.
fn snapshot<T: Serialize>(g: &Global, command: &str, args: &T, out: &Path, is_dir: bool) -> Result<()> {
    let path = if is_dir {
        out.join("config.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".config.json");
        out.with_file_name(name)
    };
    let snap = Snapshot {
        command,
        version: env!("CARGO_PKG_VERSION"),
        threads: g.threads,
        scorer_url: g.scorer_url.as_deref(),
        args,
    };
    write_json(&snap, &path)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parent_dir(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn pairs(path: &Path) -> Result<Vec<SentencePair>> {
    read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn sources(path: &Path) -> Result<Vec<String>> {
    Ok(pairs(path)?.into_iter().map(|p| p.src).collect())
}

fn gold(path: Option<&Path>) -> Result<Option<Arc<GoldOracle>>> {
    path.map(|p| {
        GoldOracle::read_jsonl(p)
            .map(Arc::new)
            .with_context(|| format!("reading {}", p.display()))
    })
    .transpose()
}

fn load_policy(path: &Path) -> Result<Policy> {
    Policy::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn backend(choice: &MetricChoice, gold: Option<&Arc<GoldOracle>>, g: &Global) -> Result<MetricBackend> {
    Ok(choice.build(gold, g.scorer_url.as_deref())?)
}

fn task_spec(a: &TaskArgs) -> TaskSpec {
    TaskSpec {
        vocab_size: a.vocab,
        min_len: a.min_len,
        max_len: a.max_len,
        swap_rate: a.swap,
        noise_rate: a.noise,
        seed: a.seed,
    }
}

fn mle_config(a: &MleArgs) -> MleConfig {
    MleConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        early_stop_patience: a.patience,
        seed: a.seed,
        ..MleConfig::default()
    }
}

fn ppo_config(a: &PpoArgs) -> PpoConfig {
    PpoConfig {
        learning_rate: a.lr,
        gamma: a.gamma,
        trajectory_limit: a.trajectory_limit,
        rollout_beam_size: a.rollout_beam,
        batch_size: a.batch_size,
        ppo_epochs: a.ppo_epochs,
        clip_eps: a.clip,
        kl_coef: a.kl_coef,
        baseline: a.baseline.into(),
        rollouts_per_iteration: a.rollouts_per_iter,
        eval_every: a.eval_every,
        seed: a.seed,
    }
}

fn scores_table(label: &str, s: &EvalScores) -> String {
    format!(
        "| {label} | BLEU | chrF | mock-QE |\n|---|---|---|---|\n| test | {:.2} | {:.2} | {:.2} |",
        100.0 * s.bleu,
        100.0 * s.chrf,
        100.0 * s.mock_qe
    )
}

fn gen(g: &Global, a: &GenArgs) -> Result<()> {
    let spec = task_spec(&a.task);
    let corpus = gen_corpus(&spec, a.size)?;
    out_dir(&a.out)?;
    write_jsonl(&corpus.pairs, &a.out.join("corpus.jsonl"))?;
    corpus.gold.write_jsonl(&a.out.join("gold.jsonl"))?;
    write_ledger(&corpus.pairs, &a.out.join("ledger.tsv"))?;
    write_json(&spec, &a.out.join("task.json"))?;
    if let Some(fr) = &a.split {
        if fr.len() != 2 {
            return Err(usage("--split takes two fractions, TRAIN,DEV"));
        }
        let (train, dev, test) = split(&corpus, fr[0], fr[1], spec.seed)?;
        write_jsonl(&train.pairs, &a.out.join("train.jsonl"))?;
        write_jsonl(&dev.with_gold_references().pairs, &a.out.join("dev.jsonl"))?;
        write_jsonl(&test.with_gold_references().pairs, &a.out.join("test.jsonl"))?;
    }
    snapshot(g, "gen", a, &a.out, true)?;
    log::info!("{} pairs, noisy fraction {:.3}", corpus.len(), corpus.noisy_fraction());
    Ok(())
}

fn filter_score(g: &Global, a: &FilterScoreArgs) -> Result<()> {
    let gold = gold(a.gold.as_deref())?;
    let backend = backend(&a.metric, gold.as_ref(), g)?;
    let mut scores = Vec::new();
    let reader = jsonl_reader(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    score_stream(reader, &backend, a.batch_size, |i, v| {
        scores.push((i, v));
        Ok(())
    })?;
    parent_dir(&a.out)?;
    write_scores_tsv(&scores, &a.out)?;
    snapshot(g, "filter score", a, &a.out, false)?;
    log::info!("scored {} pairs with {}", scores.len(), a.metric);
    Ok(())
}

fn filter_select(g: &Global, a: &FilterSelectArgs) -> Result<()> {
    let scores = read_scores_tsv(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
    let spec = match (a.top_k, a.top_frac, a.threshold) {
        (Some(k), _, _) => SubsetSpec::ByCount(k),
        (_, Some(f), _) => SubsetSpec::ByCount(((scores.len() as f64 * f).round() as usize).max(1)),
        (_, _, Some(t)) => SubsetSpec::ByThreshold(t),
        _ => return Err(usage("one of --top-k, --top-frac or --threshold is required")),
    };
    let chosen = select_indices(&scores, spec)?;
    parent_dir(&a.out)?;
    let n = select_stream(&a.corpus, &chosen, &a.out)?;
    snapshot(g, "filter select", a, &a.out, false)?;
    log::info!("kept {n} of {} pairs", scores.len());
    Ok(())
}

fn filter_sweep(g: &Global, a: &FilterSweepArgs) -> Result<()> {
    let corpus = pairs(&a.corpus)?;
    let scores = read_scores_tsv(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
    if scores.len() != corpus.len() {
        return Err(usage(format!("{} scores for {} pairs", scores.len(), corpus.len())));
    }
    let dev = pairs(&a.dev)?;
    let spec: TaskSpec = read_json(&a.task)?;
    let scored: Vec<ScoredPair> = scores
        .iter()
        .map(|&(i, v)| {
            let pair = corpus
                .get(i)
                .cloned()
                .ok_or_else(|| Error::format("scores", format!("index {i} outside the corpus")))?;
            Ok(ScoredPair {
                pair,
                qe_score: MetricScore::new(
                    v,
                    MetricId::Custom {
                        name: "scores-tsv".into(),
                        reference_based: false,
                    },
                ),
                original_index: i,
            })
        })
        .collect::<mtpref::Result<_>>()?;
    let vocab = Arc::new(Vocab::for_task(&spec));
    let init = Policy::random(PolicyConfig::for_task(&spec), vocab, a.mle.seed)?;
    let dev_ex = encode_pairs(&init, &dev)?;
    let mle = mle_config(&a.mle);
    let chrf = MetricBackend::chrf();
    let dev_srcs: Vec<String> = dev.iter().map(|p| p.src.clone()).collect();
    let report = sweep_subsets(&scored, &a.sizes, "chrf", |_, subset| {
        let train = encode_pairs(&init, subset)?;
        let (policy, rep) = mle_train(&init, &train, &dev_ex, &mle)?;
        let outputs = beam_decode_all(&policy, &dev_srcs, a.beam)?;
        let mut m = BTreeMap::new();
        m.insert("chrf".to_string(), mean_metric(&chrf, &dev, &outputs)?);
        m.insert("dev_nll".to_string(), rep.dev_loss.iter().copied().fold(f64::INFINITY, f64::min));
        Ok(m)
    })?;
    out_dir(&a.out)?;
    write_json(&report, &a.out.join("sweep.json"))?;
    let best = select_subset(&scored, SubsetSpec::ByCount(report.chosen_size))?;
    let best: Vec<SentencePair> = best.into_iter().map(|s| s.pair).collect();
    write_jsonl(&best, &a.out.join("train.selected.jsonl"))?;
    snapshot(g, "filter sweep", a, &a.out, true)?;
    println!("| size | dev chrF |\n|---|---|");
    for e in &report.entries {
        match e.scores.get("chrf") {
            Some(v) => println!("| {} | {:.2} |", e.size, 100.0 * v),
            None => println!("| {} | failed |", e.size),
        }
    }
    println!("chosen size: {}", report.chosen_size);
    Ok(())
}

fn train_mle(g: &Global, a: &TrainMleArgs) -> Result<()> {
    let init = match (&a.init, &a.task) {
        (Some(p), _) => load_policy(p)?,
        (None, Some(t)) => {
            let spec: TaskSpec = read_json(t)?;
            let mut cfg = PolicyConfig::for_task(&spec);
            cfg.embed_dim = a.embed_dim.unwrap_or(cfg.embed_dim);
            cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
            Policy::random(cfg, Arc::new(Vocab::for_task(&spec)), a.mle.seed)?
        }
        (None, None) => return Err(usage("--task or --init is required")),
    };
    let mut train = pairs(&a.train)?;
    if let Some(n) = a.max_pairs {
        train.truncate(n);
    }
    let dev = pairs(&a.dev)?;
    let train = encode_pairs(&init, &train)?;
    let dev = encode_pairs(&init, &dev)?;
    let (policy, report) = mle_train(&init, &train, &dev, &mle_config(&a.mle))?;
    out_dir(&a.out)?;
    policy.save(&a.out.join("policy.ckpt"))?;
    write_json(&report, &a.out.join("report.json"))?;
    snapshot(g, "train mle", a, &a.out, true)?;
    println!(
        "best epoch {} dev nll {:.4}",
        report.best_epoch,
        report.best_dev_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_rl(g: &Global, a: &TrainRlArgs) -> Result<()> {
    let init = load_policy(&a.init)?;
    let gold = gold(a.gold.as_deref())?;
    let reward = backend(&a.reward, gold.as_ref(), g)?;
    let train: Vec<RolloutSource> = pairs(&a.train)?.iter().map(RolloutSource::from).collect();
    let dev: Vec<RolloutSource> = pairs(&a.dev)?.iter().map(RolloutSource::from).collect();
    let (policy, report) = rl_train(&init, &train, &dev, &reward, &ppo_config(&a.ppo))?;
    out_dir(&a.out)?;
    policy.save(&a.out.join("policy.ckpt"))?;
    write_stats_csv(&report.iterations, &a.out.join("stats.csv"))?;
    write_json(&report, &a.out.join("report.json"))?;
    snapshot(g, "train rl", a, &a.out, true)?;
    println!(
        "dev {} {:.2} -> {:.2} (iteration {}, {} trajectories)",
        a.reward,
        100.0 * report.start_dev_reward,
        100.0 * report.best_dev_reward,
        report.best_iteration,
        report.trajectories
    );
    Ok(())
}

fn decode_beam(g: &Global, a: &DecodeBeamArgs) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let srcs = sources(&a.input)?;
    parent_dir(&a.out)?;
    if a.candidates {
        write_candidates(&beam_candidates(&policy, &srcs, a.beam)?, &a.out)?;
    } else {
        let outputs = beam_decode_all(&policy, &srcs, a.beam)?;
        let mut text = outputs.join("\n");
        text.push('\n');
        fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    }
    snapshot(g, "decode beam", a, &a.out, false)
}

fn decode_sample(g: &Global, a: &DecodeSampleArgs) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let srcs = sources(&a.input)?;
    let cfg = SamplingConfig {
        top_k: a.top_k,
        top_p: a.top_p,
        temperature: a.temperature,
    };
    let sets = sample_candidates(&policy, &srcs, a.num, &cfg, a.seed)?;
    parent_dir(&a.out)?;
    write_candidates(&sets, &a.out)?;
    snapshot(g, "decode sample", a, &a.out, false)
}

fn candidates(path: &Path) -> Result<Vec<CandidateSet>> {
    read_candidates(path).with_context(|| format!("reading {}", path.display()))
}

fn write_records(records: Vec<mtpref::Result<SelectionRecord>>, out: &Path) -> Result<()> {
    let records = records
        .into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::at("source", k, e)))
        .collect::<mtpref::Result<Vec<_>>>()?;
    parent_dir(out)?;
    write_selections(&records, out)?;
    Ok(())
}

fn rerank_nbest(g: &Global, a: &RerankNbestArgs) -> Result<()> {
    let sets = candidates(&a.candidates)?;
    let gold = gold(a.gold.as_deref())?;
    let qe = backend(&a.metric, gold.as_ref(), g)?;
    let records = sets
        .iter()
        .map(|s| nbest_rerank(s, &qe).map(|sel| SelectionRecord::new(&s.src, sel)))
        .collect();
    write_records(records, &a.out)?;
    snapshot(g, "rerank nbest", a, &a.out, false)?;
    log::info!("{} scorer calls", qe.cost());
    Ok(())
}

fn rerank_mbr(g: &Global, a: &RerankMbrArgs) -> Result<()> {
    let sets = candidates(&a.candidates)?;
    let gold = gold(a.gold.as_deref())?;
    let backend = backend(&a.utility, gold.as_ref(), g)?;
    let utility = as_utility(&backend)?;
    let records = sets
        .iter()
        .map(|s| mbr_select_with(s, &utility, a.symmetric_cache).map(|sel| SelectionRecord::new(&s.src, sel)))
        .collect();
    write_records(records, &a.out)?;
    snapshot(g, "rerank mbr", a, &a.out, false)?;
    log::info!("{} utility calls", backend.cost());
    Ok(())
}

fn pipeline(g: &Global, a: &PipelineArgs) -> Result<()> {
    let stages = parse_stages(&a.stages)?;
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = a.size {
        cfg.corpus_size = v;
    }
    if let Some(v) = a.noise {
        cfg.task.noise_rate = v;
    }
    if let Some(v) = a.vocab {
        cfg.task.vocab_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
        cfg.task.seed = v;
    }
    if let Some(v) = a.keep {
        cfg.filter_keep = v;
    }
    if let Some(v) = a.mle_epochs {
        cfg.mle.epochs = v;
    }
    if a.mle_max_pairs.is_some() {
        cfg.mle_max_pairs = a.mle_max_pairs;
    }
    if let Some(v) = a.rl_lr {
        cfg.ppo.learning_rate = v;
    }
    if let Some(v) = a.trajectory_limit {
        cfg.ppo.trajectory_limit = v;
    }
    if let Some(v) = &a.reward {
        cfg.reward = v.clone();
    }
    if let Some(v) = a.candidates {
        cfg.num_candidates = v;
    }
    if g.scorer_url.is_some() {
        cfg.scorer_url = g.scorer_url.clone();
    }
    let report = run_pipeline(&stages, &cfg, &a.out)?;
    let names: Vec<&str> = stages.iter().map(|s| s.name()).collect();
    println!("{}", scores_table(&names.join(","), &report.scores));
    for r in &report.records {
        println!("{}: {:.1}s, {} artifacts", r.stage, r.seconds, r.artifacts.len());
    }
    Ok(())
}

/// Plain text, one output per line, or selection JSONL.
fn read_outputs(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(fs::File::open(path).with_context(|| format!("reading {}", path.display()))?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let jsonl = lines.iter().find(|l| !l.trim().is_empty()).is_some_and(|l| l.trim_start().starts_with('{'));
    if !jsonl {
        return Ok(lines);
    }
    lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str::<SelectionRecord>(l)
                .map(|r| r.selected)
                .map_err(|e| Error::format("selections", format!("line {}: {e}", k + 1)).into())
        })
        .collect()
}

fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let refs = pairs(&a.refs)?;
    let outputs = read_outputs(&a.hyps)?;
    if outputs.len() != refs.len() {
        return Err(usage(format!("{} outputs for {} references", outputs.len(), refs.len())));
    }
    let gold = gold(Some(&a.gold))?.expect("gold path given");
    let scores = evaluate_outputs(&refs, &outputs, &gold)?;
    println!("{}", scores_table("eval", &scores));
    if let Some(out) = &a.out {
        parent_dir(out)?;
        write_json(&scores, out)?;
        snapshot(g, "eval", a, out, false)?;
    }
    Ok(())
}

fn bench(g: &Global, a: &BenchArgs) -> Result<()> {
    let policy = load_policy(&a.policy)?;
    let file = |name: &str| -> PathBuf { a.data.join(name) };
    let train = pairs(&file("train.jsonl"))?;
    let dev = pairs(&file("dev.jsonl"))?;
    let test = pairs(&file("test.jsonl"))?;
    let gold = gold(Some(&file("gold.jsonl")))?;
    let mut cfg = BenchConfig {
        num_candidates: a.candidates,
        skip_training: a.skip_training,
        ..BenchConfig::default()
    };
    cfg.mle.epochs = a.mle_epochs;
    cfg.ppo.trajectory_limit = a.trajectory_limit;
    let inputs = BenchInputs {
        policy: &policy,
        train: &train,
        dev: &dev,
        test: &test,
        gold: gold.as_ref(),
        scorer_url: g.scorer_url.as_deref(),
    };
    let table = run_bench(&inputs, &cfg)?;
    let text = match a.format {
        TableFormat::Markdown => table.markdown(),
        TableFormat::Csv => table.csv(),
    };
    print!("{text}");
    if let Some(out) = &a.out {
        parent_dir(out)?;
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        snapshot(g, "bench", a, out, false)?;
    }
    Ok(())
}
