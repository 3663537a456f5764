//! Policy training: maximum likelihood and PPO with metric rewards.
//!
//! Rewards are terminal: a decoded sequence receives one score from the
//! reward backend, and token `t` of a length-`T` sequence is credited with
//! `γ^(T-t)·R`. Rollouts use beam search, and the rollout policy's own
//! log-probabilities of the beam output serve as the PPO "old" log-probs.
//! That makes the ratio estimator slightly off-policy, which is accepted.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{Hypothesis, Policy, StepTrace};
use crate::scoring::{MetricBackend, ScoreItem};
use crate::synthdata::SentencePair;

/// Source and target ids (target ends in EOS).
pub type Example = (Vec<usize>, Vec<usize>);

/// Examples per gradient work unit. Fixed so the summation order, and thus
/// the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

pub fn encode_pairs(policy: &Policy, pairs: &[SentencePair]) -> Result<Vec<Example>> {
    pairs
        .iter()
        .map(|p| -> Result<Example> {
            let src = policy.vocab().encode_src(&p.src)?;
            let tgt = policy.vocab().encode_tgt(&p.reference)?;
            if tgt.len() > policy.max_len(&src) {
                return Err(Error::invalid(format!("reference longer than max_len {}", policy.max_len(&src))));
            }
            Ok((src, tgt))
        })
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::at("pair", k, e)))
        .collect()
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends along `grad` (a loss gradient).
    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub early_stop_patience: usize,
    /// Learning-rate multiplier applied after every non-improving epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            epochs: 10,
            learning_rate: 5e-3,
            batch_size: 32,
            early_stop_patience: 2,
            lr_decay: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl MleReport {
    pub fn best_dev_loss(&self) -> Option<f64> {
        self.best_epoch.checked_sub(1).and_then(|e| self.dev_loss.get(e)).copied()
    }
}

/// Loss `(1/B) Σ_b -(1/L_b) log p(y_b | x_b)` and its gradient.
pub fn mle_loss_grad(policy: &Policy, batch: &[&Example]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let dim = policy.param_count();
    let parts = par::map_chunks(batch, GRAD_CHUNK, |_, chunk| -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; dim];
        let mut loss = 0.0;
        for (src, y) in chunk.iter().copied() {
            let scale = 1.0 / y.len() as f64;
            let trace = policy.trace(src, y);
            for (step, &tok) in trace.iter().zip(y) {
                loss -= scale * step.logp[tok];
                // d(-logp)/dz = p - onehot
                let mut dz: Vec<f64> = step.logp.iter().map(|lp| scale * lp.exp()).collect();
                dz[tok] -= scale;
                policy.backward_step(step, &dz, &mut grad);
            }
        }
        Ok((loss, grad))
    });
    let parts = par::collect_ordered(parts)?;
    let n = batch.len() as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let mut grad = par::sum_vectors(parts.into_iter().map(|p| p.1).collect(), dim);
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss, grad))
}

/// Adam on the length-normalized NLL with learning-rate decay on dev
/// plateaus and early stopping. Returns the parameters with the best dev loss.
pub fn mle_train(policy: &Policy, train: &[Example], dev: &[Example], cfg: &MleConfig) -> Result<(Policy, MleReport)> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("MLE needs non-empty train and dev data"));
    }
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(Error::config("MLE batch size and learning rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = policy.clone();
    let mut adam = Adam::new(current.param_count());
    let mut lr = cfg.learning_rate;
    let mut best = (current.mean_nll(dev)?, current.clone());
    let mut report = MleReport::default();
    let mut bad_epochs = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = batch_idx.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = mle_loss_grad(&current, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("MLE loss {loss} at epoch {epoch}")));
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut current.theta, &grad, lr);
        }
        let dev_loss = current.mean_nll(dev)?;
        if !dev_loss.is_finite() {
            return Err(Error::Diverged(format!("dev loss {dev_loss} at epoch {epoch}")));
        }
        report.train_loss.push(epoch_loss / train.len() as f64);
        report.dev_loss.push(dev_loss);
        log::debug!("mle epoch {epoch}: train {:.4} dev {dev_loss:.4} lr {lr:.2e}", epoch_loss / train.len() as f64);
        if dev_loss < best.0 {
            best = (dev_loss, current.clone());
            report.best_epoch = epoch + 1;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            lr *= cfg.lr_decay;
            if bad_epochs >= cfg.early_stop_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok((best.1, report))
}

/// One rollout: the beam-search output for a source and its reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub src: String,
    pub src_ids: Vec<usize>,
    pub hyp: Hypothesis,
    pub mt: String,
    pub reward: f64,
    /// Per-token log-probs under the rollout policy.
    pub old_logps: Vec<f64>,
}

/// A source with the reference used by reference-based rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSource {
    pub src: String,
    pub reference: Option<String>,
}

impl From<&SentencePair> for RolloutSource {
    fn from(p: &SentencePair) -> Self {
        RolloutSource {
            src: p.src.clone(),
            reference: Some(p.reference.clone()),
        }
    }
}

/// Beam-decodes every source, keeps the top hypothesis and scores it.
pub fn rollout(policy: &Policy, srcs: &[RolloutSource], reward: &MetricBackend, beam_size: usize) -> Result<Vec<Trajectory>> {
    if srcs.is_empty() {
        return Err(Error::invalid("no sources to roll out"));
    }
    let decoded = par::map(srcs, |s| -> Result<(Vec<usize>, Hypothesis, Vec<f64>)> {
        let ids = policy.vocab().encode_src(&s.src)?;
        let best = policy.beam_search(&ids, beam_size)?.remove(0);
        let old = policy.token_logprobs(&ids, &best.tokens)?;
        Ok((ids, best, old))
    });
    let decoded: Vec<_> = decoded
        .into_iter()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::at("source", k, e)))
        .collect::<Result<_>>()?;
    let items: Vec<ScoreItem> = srcs
        .iter()
        .zip(&decoded)
        .map(|(s, (_, hyp, _))| ScoreItem {
            src: s.src.clone(),
            mt: policy.vocab().decode_tgt(&hyp.tokens),
            reference: if reward.uses_reference() { s.reference.clone() } else { None },
        })
        .collect();
    let rewards = reward.score_values(&items).map_err(|e| match e {
        Error::At { index, source, .. } => Error::At {
            what: "source",
            index,
            source,
        },
        other => other,
    })?;
    Ok(srcs
        .iter()
        .zip(decoded)
        .zip(items)
        .zip(rewards)
        .map(|(((s, (src_ids, hyp, old_logps)), item), reward)| Trajectory {
            src: s.src.clone(),
            src_ids,
            hyp,
            mt: item.mt,
            reward,
            old_logps,
        })
        .collect())
}

/// `G_t = γ^(T-t)·R` for `t = 1..=T`.
pub fn compute_returns(len: usize, reward: f64, gamma: f64) -> Vec<f64> {
    (1..=len).map(|t| gamma.powi((len - t) as i32) * reward).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    /// Mean return over every token step of the update batch.
    BatchMean,
    /// Mean return per token position over the update batch.
    PerPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    /// Total trajectory budget of a training run.
    pub trajectory_limit: usize,
    pub rollout_beam_size: usize,
    /// Token steps per minibatch.
    pub batch_size: usize,
    pub ppo_epochs: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub baseline: Baseline,
    /// Sources rolled out between updates.
    pub rollouts_per_iteration: usize,
    /// Dev evaluation period, in iterations.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 2e-5,
            gamma: 0.99,
            trajectory_limit: 10_000,
            rollout_beam_size: 5,
            batch_size: 32,
            ppo_epochs: 4,
            clip_eps: 0.2,
            kl_coef: 0.0,
            baseline: Baseline::BatchMean,
            rollouts_per_iteration: 64,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("gamma", self.gamma),
            ("trajectory_limit", self.trajectory_limit as f64),
            ("rollout_beam_size", self.rollout_beam_size as f64),
            ("batch_size", self.batch_size as f64),
            ("ppo_epochs", self.ppo_epochs as f64),
            ("rollouts_per_iteration", self.rollouts_per_iteration as f64),
            ("eval_every", self.eval_every as f64),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("PPO {name} must be positive, got {v}")));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config(format!("clip epsilon must be in (0, 1), got {}", self.clip_eps)));
        }
        if self.kl_coef.is_nan() || self.kl_coef < 0.0 || self.gamma > 1.0 {
            return Err(Error::config("kl_coef must be >= 0 and gamma <= 1"));
        }
        Ok(())
    }
}

/// One action of one trajectory, ready for the surrogate objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStep {
    pub traj: usize,
    pub pos: usize,
    pub ret: f64,
    pub advantage: f64,
    pub old_logp: f64,
}

/// Flattens trajectories into token steps with discounted returns and
/// baseline-subtracted advantages.
pub fn token_steps(trajs: &[Trajectory], gamma: f64, baseline: Baseline) -> Vec<TokenStep> {
    let mut steps: Vec<TokenStep> = trajs
        .iter()
        .enumerate()
        .flat_map(|(b, tr)| {
            compute_returns(tr.hyp.tokens.len(), tr.reward, gamma)
                .into_iter()
                .enumerate()
                .map(move |(pos, ret)| TokenStep {
                    traj: b,
                    pos,
                    ret,
                    advantage: ret,
                    old_logp: tr.old_logps[pos],
                })
        })
        .collect();
    match baseline {
        Baseline::None => {}
        Baseline::BatchMean => {
            let mean = steps.iter().map(|s| s.ret).sum::<f64>() / steps.len().max(1) as f64;
            steps.iter_mut().for_each(|s| s.advantage = s.ret - mean);
        }
        Baseline::PerPosition => {
            let max_pos = steps.iter().map(|s| s.pos + 1).max().unwrap_or(0);
            let mut sums = vec![(0.0, 0usize); max_pos];
            for s in &steps {
                sums[s.pos].0 += s.ret;
                sums[s.pos].1 += 1;
            }
            steps
                .iter_mut()
                .for_each(|s| s.advantage = s.ret - sums[s.pos].0 / sums[s.pos].1 as f64);
        }
    }
    steps
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStats {
    pub objective: f64,
    pub unclipped_objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

fn kl_and_grad(new_logp: &[f64], old_logp: &[f64]) -> (f64, Vec<f64>) {
    let kl: f64 = new_logp
        .iter()
        .zip(old_logp)
        .filter(|(n, _)| n.is_finite())
        .map(|(n, o)| n.exp() * (n - o))
        .sum();
    let grad = new_logp
        .iter()
        .zip(old_logp)
        .map(|(n, o)| if n.is_finite() { n.exp() * (n - o - kl) } else { 0.0 })
        .collect();
    (kl, grad)
}

/// Clipped surrogate `J = mean_t min(r_t Â_t, clip(r_t, 1±ε) Â_t) - β·KL`
/// over a minibatch and its gradient with respect to `policy.theta`.
/// `rollout_policy` is only consulted when `kl_coef > 0`.
pub fn surrogate_grad(
    policy: &Policy,
    rollout_policy: &Policy,
    trajs: &[Trajectory],
    steps: &[&TokenStep],
    clip_eps: f64,
    kl_coef: f64,
) -> (SurrogateStats, Vec<f64>) {
    let dim = policy.param_count();
    let n = steps.len().max(1) as f64;
    let parts = par::map_chunks(steps, GRAD_CHUNK * 8, |_, chunk| {
        let mut grad = vec![0.0; dim];
        let mut acc = SurrogateStats::default();
        for step in chunk {
            let tr = &trajs[step.traj];
            let prefix = &tr.hyp.tokens[..step.pos];
            let tok = tr.hyp.tokens[step.pos];
            let trace: StepTrace = policy.step(&tr.src_ids, prefix);
            let ratio = (trace.logp[tok] - step.old_logp).exp();
            let adv = step.advantage;
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
            acc.objective += unclipped.min(clipped);
            acc.unclipped_objective += unclipped;
            acc.mean_ratio += ratio;
            if (ratio - 1.0).abs() > clip_eps {
                acc.clip_fraction += 1.0;
            }
            let mut dz = vec![0.0; trace.logp.len()];
            if unclipped <= clipped && adv != 0.0 {
                // d(r·Â)/dz = Â·r·(onehot - p)
                let w = adv * ratio / n;
                for (d, lp) in dz.iter_mut().zip(&trace.logp) {
                    *d = -w * lp.exp();
                }
                dz[tok] += w;
            }
            if kl_coef > 0.0 && !trace.forced {
                let old = rollout_policy.step_log_probs(&tr.src_ids, prefix);
                let (kl, kl_grad) = kl_and_grad(&trace.logp, &old);
                acc.kl += kl;
                acc.objective -= kl_coef * kl;
                for (d, g) in dz.iter_mut().zip(kl_grad) {
                    *d -= kl_coef * g / n;
                }
            }
            if dz.iter().any(|d| *d != 0.0) {
                policy.backward_step(&trace, &dz, &mut grad);
            }
        }
        (acc, grad)
    });
    let mut stats = SurrogateStats::default();
    let mut grads = Vec::with_capacity(parts.len());
    for (s, g) in parts {
        stats.objective += s.objective;
        stats.unclipped_objective += s.unclipped_objective;
        stats.mean_ratio += s.mean_ratio;
        stats.clip_fraction += s.clip_fraction;
        stats.kl += s.kl;
        grads.push(g);
    }
    stats.objective /= n;
    stats.unclipped_objective /= n;
    stats.mean_ratio /= n;
    stats.clip_fraction /= n;
    stats.kl /= n;
    (stats, par::sum_vectors(grads, dim))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub mean_reward: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_advantage: f64,
    pub objective: f64,
    pub token_steps: usize,
    pub minibatches: usize,
}

/// `cfg.ppo_epochs` passes of minibatch gradient ascent on the clipped
/// surrogate. `rng` shuffles token steps between epochs.
pub fn ppo_update(policy: &Policy, trajs: &[Trajectory], cfg: &PpoConfig, rng: &mut ChaCha8Rng) -> Result<(Policy, PpoStats)> {
    cfg.validate()?;
    if trajs.is_empty() {
        return Err(Error::invalid("PPO update needs at least one trajectory"));
    }
    let steps = token_steps(trajs, cfg.gamma, cfg.baseline);
    let mut stats = PpoStats {
        mean_reward: trajs.iter().map(|t| t.reward).sum::<f64>() / trajs.len() as f64,
        mean_advantage: steps.iter().map(|s| s.advantage).sum::<f64>() / steps.len() as f64,
        token_steps: steps.len(),
        ..PpoStats::default()
    };
    let mut current = policy.clone();
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut evaluated = 0.0;
    for epoch in 0..cfg.ppo_epochs {
        if epoch > 0 {
            order.shuffle(rng);
        }
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenStep> = idx.iter().map(|&i| &steps[i]).collect();
            let (s, grad) = surrogate_grad(&current, policy, trajs, &batch, cfg.clip_eps, cfg.kl_coef);
            if !s.objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "PPO objective {} (ratio {}) in epoch {epoch}",
                    s.objective, s.mean_ratio
                )));
            }
            let w = batch.len() as f64;
            stats.mean_ratio += s.mean_ratio * w;
            stats.clip_fraction += s.clip_fraction * w;
            stats.objective += s.objective * w;
            evaluated += w;
            stats.minibatches += 1;
            for (t, g) in current.theta.iter_mut().zip(&grad) {
                *t += cfg.learning_rate * g;
            }
        }
    }
    stats.mean_ratio /= evaluated;
    stats.clip_fraction /= evaluated;
    stats.objective /= evaluated;
    Ok((current, stats))
}

/// Mean reward of beam-decoded outputs, without updating anything.
pub fn mean_reward(policy: &Policy, srcs: &[RolloutSource], reward: &MetricBackend, beam_size: usize) -> Result<f64> {
    let trajs = rollout(policy, srcs, reward, beam_size)?;
    Ok(trajs.iter().map(|t| t.reward).sum::<f64>() / trajs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub trajectories: usize,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub dev_reward: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub iterations: Vec<IterationStats>,
    pub start_dev_reward: f64,
    pub best_dev_reward: f64,
    pub best_iteration: usize,
    pub trajectories: usize,
}

/// Alternates rollouts and PPO updates until the trajectory budget is
/// spent, returning the parameters with the best dev mean reward.
pub fn rl_train(
    policy: &Policy,
    train: &[RolloutSource],
    dev: &[RolloutSource],
    reward: &MetricBackend,
    cfg: &PpoConfig,
) -> Result<(Policy, RlReport)> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("RL needs non-empty train and dev sources"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut current = policy.clone();
    let start = mean_reward(&current, dev, reward, cfg.rollout_beam_size)?;
    let mut best = (start, current.clone(), 0);
    let mut report = RlReport {
        start_dev_reward: start,
        ..RlReport::default()
    };
    let mut iteration = 0;
    while report.trajectories < cfg.trajectory_limit {
        let n = cfg.rollouts_per_iteration.min(cfg.trajectory_limit - report.trajectories);
        let mut batch = Vec::with_capacity(n);
        while batch.len() < n {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let trajs = rollout(&current, &batch, reward, cfg.rollout_beam_size)?;
        let (next, stats) = ppo_update(&current, &trajs, cfg, &mut rng)?;
        current = next;
        report.trajectories += trajs.len();
        iteration += 1;

        let last = report.trajectories >= cfg.trajectory_limit;
        let dev_reward = if iteration % cfg.eval_every == 0 || last {
            let r = mean_reward(&current, dev, reward, cfg.rollout_beam_size)?;
            if r > best.0 {
                best = (r, current.clone(), iteration);
            }
            Some(r)
        } else {
            None
        };
        log::debug!(
            "rl iter {iteration}: reward {:.4} clip {:.3} dev {dev_reward:?}",
            stats.mean_reward,
            stats.clip_fraction
        );
        report.iterations.push(IterationStats {
            iteration,
            trajectories: report.trajectories,
            mean_reward: stats.mean_reward,
            clip_fraction: stats.clip_fraction,
            mean_ratio: stats.mean_ratio,
            dev_reward,
        });
    }
    report.best_dev_reward = best.0;
    report.best_iteration = best.2;
    Ok((best.1, report))
}

/// `iteration,trajectories,mean_reward,clip_fraction,mean_ratio,dev_reward`
pub fn write_stats_csv(rows: &[IterationStats], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "iteration,trajectories,mean_reward,clip_fraction,mean_ratio,dev_reward")?;
    for r in rows {
        let dev = r.dev_reward.map(|d| format!("{d:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{dev}",
            r.iteration, r.trajectories, r.mean_reward, r.clip_fraction, r.mean_ratio
        )?;
    }
    out.flush()?;
    Ok(())
}
