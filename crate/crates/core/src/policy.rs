//! A compact autoregressive transduction policy `p(y_t | x, y_<t)`.
//!
//! Each step looks at the previous `window` target tokens and the source
//! tokens within `src_radius` of the aligned position `t`. Their embeddings
//! are concatenated and fed through one tanh hidden layer into a softmax over
//! the target words plus EOS. At position `max_len - 1` the conditional is a
//! point mass on EOS, so every sequence terminates and the distribution over
//! complete outputs is normalized.
//!
//! Beam search scores by raw log-probability sums (no length normalization).

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::synthdata::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Source words (a padding id is added internally).
    pub src_vocab: usize,
    /// Target words, excluding EOS and BOS.
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    /// Previous target tokens visible at each step.
    pub window: usize,
    /// Source positions `t - r ..= t + r` visible at step `t`.
    pub src_radius: usize,
    pub hidden: usize,
    /// `max_len = |src| + extra_len`.
    pub extra_len: usize,
}

impl PolicyConfig {
    pub fn for_task(spec: &TaskSpec) -> Self {
        PolicyConfig {
            src_vocab: spec.vocab_size,
            tgt_vocab: spec.vocab_size,
            embed_dim: 16,
            window: 2,
            src_radius: 1,
            hidden: 64,
            extra_len: 8,
        }
    }

    /// Smallest configuration the finite-difference and enumeration checks use.
    pub fn reduced(vocab: usize) -> Self {
        PolicyConfig {
            src_vocab: vocab,
            tgt_vocab: vocab,
            embed_dim: 3,
            window: 2,
            src_radius: 1,
            hidden: 4,
            extra_len: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab == 0 || self.tgt_vocab == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::config(format!("degenerate policy config {self:?}")));
        }
        Ok(())
    }

    /// Output classes: target words plus EOS.
    pub fn n_out(&self) -> usize {
        self.tgt_vocab + 1
    }

    pub fn eos(&self) -> usize {
        self.tgt_vocab
    }

    pub fn bos(&self) -> usize {
        self.tgt_vocab + 1
    }

    fn src_pad(&self) -> usize {
        self.src_vocab
    }

    fn n_features(&self) -> usize {
        self.window + 2 * self.src_radius + 1
    }

    fn in_dim(&self) -> usize {
        self.n_features() * self.embed_dim
    }

    fn layout(&self) -> Layout {
        let d = self.embed_dim;
        let tgt_emb = 0;
        let src_emb = tgt_emb + (self.tgt_vocab + 2) * d;
        let w1 = src_emb + (self.src_vocab + 1) * d;
        let b1 = w1 + self.hidden * self.in_dim();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.n_out() * self.hidden;
        Layout {
            tgt_emb,
            src_emb,
            w1,
            b1,
            w2,
            b2,
            len: b2 + self.n_out(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    pub fn max_len(&self, src_len: usize) -> usize {
        (src_len + self.extra_len).max(1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    tgt_emb: usize,
    src_emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

/// Word lists for both sides; ids index into them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    src: Vec<String>,
    tgt: Vec<String>,
    #[serde(skip)]
    src_index: HashMap<String, usize>,
    #[serde(skip)]
    tgt_index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Self {
        let mut v = Vocab {
            src,
            tgt,
            src_index: HashMap::new(),
            tgt_index: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Words `s0..` / `t0..`, for tests that do not care about spelling.
    pub fn numbered(src: usize, tgt: usize) -> Self {
        Vocab::new(
            (0..src).map(|i| format!("s{i}")).collect(),
            (0..tgt).map(|i| format!("t{i}")).collect(),
        )
    }

    pub fn for_task(spec: &TaskSpec) -> Self {
        Vocab::new(spec.source_words(), spec.target_words())
    }

    fn reindex(&mut self) {
        self.src_index = self.src.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        self.tgt_index = self.tgt.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn src_len(&self) -> usize {
        self.src.len()
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt.len()
    }

    pub fn encode_src(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.src_index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("source word {w:?} not in vocabulary")))
            })
            .collect()
    }

    /// Target words to ids with EOS appended.
    pub fn encode_tgt(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                self.tgt_index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("target word {w:?} not in vocabulary")))
            })
            .collect::<Result<_>>()?;
        ids.push(self.tgt.len());
        Ok(ids)
    }

    /// Ids to text; EOS and anything after it is dropped.
    pub fn decode_tgt(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i < self.tgt.len())
            .map(|&i| self.tgt[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A generated output: token ids ending in EOS and their log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logp: f64,
}

/// Truncation parameters for ancestral sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    /// The candidate-generation setting used for reranking experiments.
    fn default() -> Self {
        SamplingConfig {
            top_k: 300,
            top_p: 0.6,
            temperature: 1.0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Activations of one decoding step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepTrace {
    offsets: Vec<usize>,
    x: Vec<f64>,
    h: Vec<f64>,
    pub(crate) logp: Vec<f64>,
    pub(crate) forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    vocab: Arc<Vocab>,
    /// Flat parameters in the order: target embeddings (BOS included),
    /// source embeddings (pad included), hidden weights and bias, output
    /// weights, output bias (the last `n_out` entries).
    pub theta: Vec<f64>,
}

impl Policy {
    /// All parameters zero: every free conditional is uniform.
    pub fn zeros(config: PolicyConfig, vocab: Arc<Vocab>) -> Result<Self> {
        Self::check(config, &vocab)?;
        Ok(Policy {
            theta: vec![0.0; config.param_count()],
            config,
            vocab,
        })
    }

    /// Small random initialization, deterministic in `seed`.
    pub fn random(config: PolicyConfig, vocab: Arc<Vocab>, seed: u64) -> Result<Self> {
        let mut policy = Self::zeros(config, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = config.layout();
        let mut fill = |range: std::ops::Range<usize>, scale: f64, theta: &mut [f64]| {
            for v in &mut theta[range] {
                *v = rng.gen_range(-scale..scale);
            }
        };
        let in_scale = (3.0 / config.in_dim() as f64).sqrt();
        let out_scale = (3.0 / config.hidden as f64).sqrt();
        fill(l.tgt_emb..l.w1, 1.0, &mut policy.theta);
        fill(l.w1..l.b1, in_scale, &mut policy.theta);
        fill(l.w2..l.b2, out_scale, &mut policy.theta);
        Ok(policy)
    }

    pub fn from_params(config: PolicyConfig, vocab: Arc<Vocab>, theta: Vec<f64>) -> Result<Self> {
        Self::check(config, &vocab)?;
        if theta.len() != config.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("policy parameters must be finite"));
        }
        Ok(Policy { config, vocab, theta })
    }

    fn check(config: PolicyConfig, vocab: &Vocab) -> Result<()> {
        config.validate()?;
        if vocab.src_len() != config.src_vocab || vocab.tgt_len() != config.tgt_vocab {
            return Err(Error::config(format!(
                "vocabulary sizes {}/{} do not match config {}/{}",
                vocab.src_len(),
                vocab.tgt_len(),
                config.src_vocab,
                config.tgt_vocab
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn max_len(&self, src: &[usize]) -> usize {
        self.config.max_len(src.len())
    }

    fn check_src(&self, src: &[usize]) -> Result<()> {
        if let Some(&bad) = src.iter().find(|&&s| s >= self.config.src_vocab) {
            return Err(Error::invalid(format!("source id {bad} out of vocabulary")));
        }
        Ok(())
    }

    fn check_target(&self, src: &[usize], y: &[usize]) -> Result<()> {
        self.check_src(src)?;
        let eos = self.config.eos();
        match y.last() {
            Some(&last) if last == eos => {}
            _ => return Err(Error::invalid("target must end with EOS")),
        }
        if let Some(&bad) = y.iter().find(|&&t| t > eos) {
            return Err(Error::invalid(format!("target id {bad} out of vocabulary")));
        }
        if y[..y.len() - 1].contains(&eos) {
            return Err(Error::invalid("EOS before the end of the target"));
        }
        if y.len() > self.max_len(src) {
            return Err(Error::invalid(format!(
                "target length {} exceeds max_len {}",
                y.len(),
                self.max_len(src)
            )));
        }
        Ok(())
    }

    /// Parameter offsets of the embedding rows feeding step `prefix.len()`.
    fn feature_offsets(&self, src: &[usize], prefix: &[usize]) -> Vec<usize> {
        let c = &self.config;
        let l = c.layout();
        let d = c.embed_dim;
        let t = prefix.len();
        let mut offsets = Vec::with_capacity(c.n_features());
        for back in 1..=c.window {
            let tok = if t >= back { prefix[t - back] } else { c.bos() };
            offsets.push(l.tgt_emb + tok * d);
        }
        let r = c.src_radius as isize;
        for delta in -r..=r {
            let pos = t as isize + delta;
            let tok = if pos >= 0 && (pos as usize) < src.len() {
                src[pos as usize]
            } else {
                c.src_pad()
            };
            offsets.push(l.src_emb + tok * d);
        }
        offsets
    }

    fn forward(&self, offsets: Vec<usize>) -> StepTrace {
        let c = &self.config;
        let l = c.layout();
        let (d, hid, n_out, in_dim) = (c.embed_dim, c.hidden, c.n_out(), c.in_dim());
        let th = &self.theta;

        let mut x = Vec::with_capacity(in_dim);
        for &off in &offsets {
            x.extend_from_slice(&th[off..off + d]);
        }
        let h: Vec<f64> = (0..hid)
            .map(|j| {
                let row = &th[l.w1 + j * in_dim..l.w1 + (j + 1) * in_dim];
                let a = th[l.b1 + j] + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
                a.tanh()
            })
            .collect();
        let z: Vec<f64> = (0..n_out)
            .map(|k| {
                let row = &th[l.w2 + k * hid..l.w2 + (k + 1) * hid];
                th[l.b2 + k] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        StepTrace {
            offsets,
            x,
            h,
            logp: log_softmax(&z),
            forced: false,
        }
    }

    fn forced_step(&self) -> StepTrace {
        let mut logp = vec![f64::NEG_INFINITY; self.config.n_out()];
        logp[self.config.eos()] = 0.0;
        StepTrace {
            offsets: Vec::new(),
            x: Vec::new(),
            h: Vec::new(),
            logp,
            forced: true,
        }
    }

    pub(crate) fn step(&self, src: &[usize], prefix: &[usize]) -> StepTrace {
        if prefix.len() + 1 >= self.max_len(src) {
            self.forced_step()
        } else {
            self.forward(self.feature_offsets(src, prefix))
        }
    }

    /// Full conditional `log p(. | src, prefix)` over target words and EOS.
    pub fn step_log_probs(&self, src: &[usize], prefix: &[usize]) -> Vec<f64> {
        self.step(src, prefix).logp
    }

    pub(crate) fn trace(&self, src: &[usize], y: &[usize]) -> Vec<StepTrace> {
        (0..y.len()).map(|t| self.step(src, &y[..t])).collect()
    }

    /// Adds `dL/dθ` for one step given `dL/dz` on that step's logits.
    pub(crate) fn backward_step(&self, step: &StepTrace, dz: &[f64], grad: &mut [f64]) {
        if step.forced {
            return;
        }
        let c = &self.config;
        let l = c.layout();
        let (d, hid, in_dim) = (c.embed_dim, c.hidden, c.in_dim());
        let th = &self.theta;

        let mut dh = vec![0.0; hid];
        for (k, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[l.b2 + k] += g;
            let row = l.w2 + k * hid;
            for j in 0..hid {
                grad[row + j] += g * step.h[j];
                dh[j] += g * th[row + j];
            }
        }
        let mut dx = vec![0.0; in_dim];
        for j in 0..hid {
            let da = dh[j] * (1.0 - step.h[j] * step.h[j]);
            if da == 0.0 {
                continue;
            }
            grad[l.b1 + j] += da;
            let row = l.w1 + j * in_dim;
            for i in 0..in_dim {
                grad[row + i] += da * step.x[i];
                dx[i] += da * th[row + i];
            }
        }
        for (f, &off) in step.offsets.iter().enumerate() {
            for e in 0..d {
                grad[off + e] += dx[f * d + e];
            }
        }
    }

    /// Per-token log-probabilities of `y`.
    pub fn token_logprobs(&self, src: &[usize], y: &[usize]) -> Result<Vec<f64>> {
        self.check_target(src, y)?;
        Ok(self
            .trace(src, y)
            .iter()
            .zip(y)
            .map(|(s, &tok)| s.logp[tok])
            .collect())
    }

    /// `Σ_t log p(y_t | src, y_<t)`.
    pub fn logprob(&self, src: &[usize], y: &[usize]) -> Result<f64> {
        Ok(self.token_logprobs(src, y)?.iter().sum())
    }

    /// Log-probability of target text given source text.
    pub fn logprob_text(&self, src: &str, y: &str) -> Result<f64> {
        let src = self.vocab.encode_src(src)?;
        let y = self.vocab.encode_tgt(y)?;
        self.logprob(&src, &y)
    }

    /// Gradient of [`logprob`](Self::logprob) with respect to `theta`.
    pub fn grad_logprob(&self, src: &[usize], y: &[usize]) -> Result<Vec<f64>> {
        self.check_target(src, y)?;
        let mut grad = vec![0.0; self.theta.len()];
        for (step, &tok) in self.trace(src, y).iter().zip(y) {
            self.backward_step(step, &onehot_minus_probs(&step.logp, tok), &mut grad);
        }
        Ok(grad)
    }

    /// Gradient of `log p(token | src, prefix)` for a single step.
    pub fn step_grad(&self, src: &[usize], prefix: &[usize], token: usize) -> Result<Vec<f64>> {
        self.check_src(src)?;
        if token >= self.config.n_out() || prefix.len() >= self.max_len(src) {
            return Err(Error::invalid("step outside the output space"));
        }
        let step = self.step(src, prefix);
        let mut grad = vec![0.0; self.theta.len()];
        self.backward_step(&step, &onehot_minus_probs(&step.logp, token), &mut grad);
        Ok(grad)
    }

    /// Length-capped beam search ranked by log-probability, ties broken by
    /// lexicographically smaller token ids.
    pub fn beam_search(&self, src: &[usize], beam_size: usize) -> Result<Vec<Hypothesis>> {
        if beam_size == 0 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        self.check_src(src)?;
        let eos = self.config.eos();
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            logp: 0.0,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();

        while !live.is_empty() {
            let mut cands = Vec::with_capacity(live.len() * self.config.n_out());
            for beam in &live {
                let logp = self.step_log_probs(src, &beam.tokens);
                for (tok, lp) in logp.iter().enumerate() {
                    if lp.is_finite() {
                        let mut tokens = beam.tokens.clone();
                        tokens.push(tok);
                        cands.push(Hypothesis {
                            tokens,
                            logp: beam.logp + lp,
                        });
                    }
                }
            }
            cands.sort_by(rank);
            cands.truncate(beam_size);
            live.clear();
            for c in cands {
                if c.tokens.last() == Some(&eos) {
                    finished.push(c);
                } else {
                    live.push(c);
                }
            }
            finished.sort_by(rank);
            finished.truncate(beam_size);
            // Scores only decrease as beams grow, so a full finished list whose
            // worst entry beats every live beam is final.
            if finished.len() == beam_size {
                let worst = finished[beam_size - 1].logp;
                if live.iter().all(|b| b.logp < worst) {
                    break;
                }
            }
        }
        Ok(finished)
    }

    /// Greedy decoding (beam size 1).
    pub fn greedy(&self, src: &[usize]) -> Result<Hypothesis> {
        Ok(self.beam_search(src, 1)?.remove(0))
    }

    /// Beam-decodes source text and returns the best output as text.
    pub fn translate(&self, src: &str, beam_size: usize) -> Result<String> {
        let ids = self.vocab.encode_src(src)?;
        let best = self.beam_search(&ids, beam_size)?.remove(0);
        Ok(self.vocab.decode_tgt(&best.tokens))
    }

    /// Draws `count` outputs with per-step top-k then top-p truncation.
    /// `logp` is recorded under the truncated distributions. Sample `i`
    /// uses its own RNG stream, so results do not depend on thread count.
    pub fn sample(&self, src: &[usize], count: usize, cfg: &SamplingConfig, seed: u64) -> Result<Vec<Hypothesis>> {
        cfg.validate()?;
        if count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        self.check_src(src)?;
        Ok(par::map_range(count, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            self.sample_one(src, cfg, &mut rng)
        }))
    }

    fn sample_one(&self, src: &[usize], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> Hypothesis {
        let eos = self.config.eos();
        let mut tokens = Vec::new();
        let mut logp = 0.0;
        loop {
            let support = truncated_support(&self.step_log_probs(src, &tokens), cfg);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = support[support.len() - 1];
            for &(tok, p) in &support {
                acc += p;
                if u < acc {
                    pick = (tok, p);
                    break;
                }
            }
            tokens.push(pick.0);
            logp += pick.1.ln();
            if pick.0 == eos {
                return Hypothesis { tokens, logp };
            }
        }
    }

    /// Mean over pairs of the length-normalized negative log-likelihood.
    pub fn mean_nll(&self, data: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("no data"));
        }
        let parts = par::map(data, |(src, y)| self.logprob(src, y).map(|lp| -lp / y.len() as f64));
        Ok(par::collect_ordered(parts)?.iter().sum::<f64>() / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Checkpoint layout: magic, format version (u32 LE), header length
    /// (u32 LE), JSON header with config and vocabulary, parameter count
    /// (u64 LE), then the parameters as little-endian f64.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config,
            vocab: (*self.vocab).clone(),
        })
        .map_err(|e| Error::format("checkpoint", e))?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.theta.len() as u64).to_le_bytes())?;
        for v in &self.theta {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        input.read_exact(&mut u32buf)?;
        let mut header = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        input.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| Error::format("checkpoint", e))?;
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let n = u64::from_le_bytes(u64buf) as usize;
        if n != header.config.param_count() {
            return Err(Error::format("checkpoint", format!("{n} parameters for a config needing {}", header.config.param_count())));
        }
        let mut theta = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut u64buf)?;
            theta.push(f64::from_le_bytes(u64buf));
        }
        let mut vocab = header.vocab;
        vocab.reindex();
        Policy::from_params(header.config, Arc::new(vocab), theta)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MTPOLICY";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: PolicyConfig,
    vocab: Vocab,
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logp
        .partial_cmp(&a.logp)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

pub(crate) fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `d log p_tok / dz = onehot(tok) - p`.
fn onehot_minus_probs(logp: &[f64], tok: usize) -> Vec<f64> {
    let mut g: Vec<f64> = logp.iter().map(|lp| -lp.exp()).collect();
    g[tok] += 1.0;
    g
}

/// The tokens that survive top-k then top-p truncation of a conditional,
/// with their renormalized probabilities, most probable first.
pub fn truncated_support(logp: &[f64], cfg: &SamplingConfig) -> Vec<(usize, f64)> {
    let scaled: Vec<f64> = logp.iter().map(|lp| lp / cfg.temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).iter().map(|lp| lp.exp()).collect();
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order.truncate(cfg.top_k.max(1));
    let top_k_mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &i in &order {
        kept.push(i);
        cum += probs[i] / top_k_mass;
        if cum >= cfg.top_p - 1e-12 {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (PolicyConfig, Arc<Vocab>) {
        let cfg = PolicyConfig::reduced(3);
        (cfg, Arc::new(Vocab::numbered(3, 3)))
    }

    #[test]
    fn uniform_logprob() {
        let (mut cfg, vocab) = tiny();
        cfg.extra_len = 8;
        let p = Policy::zeros(cfg, vocab).unwrap();
        let v = cfg.n_out() as f64;
        let src = [0, 1];
        let y = [2, 0, 1, cfg.eos()];
        assert!((p.logprob(&src, &y).unwrap() + 4.0 * v.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets() {
        let (cfg, vocab) = tiny();
        let p = Policy::zeros(cfg, vocab).unwrap();
        let eos = cfg.eos();
        assert!(p.logprob(&[0], &[0]).is_err());
        assert!(p.logprob(&[0], &[eos, 0, eos]).is_err());
        assert!(p.logprob(&[0], &[cfg.bos(), eos]).is_err());
        assert!(p.logprob(&[7], &[eos]).is_err());
        assert!(p.logprob(&[0], &[0, 0, 0, eos]).is_err());
        assert!(p.logprob(&[0], &[0, 0, eos]).is_ok());
    }

    #[test]
    fn conditionals_normalize() {
        let (cfg, vocab) = tiny();
        let p = Policy::random(cfg, vocab, 3).unwrap();
        for prefix in [vec![], vec![0], vec![2, 1]] {
            let s: f64 = p.step_log_probs(&[0, 1], &prefix).iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forced_step_has_zero_gradient() {
        let (mut cfg, vocab) = tiny();
        cfg.extra_len = 0;
        let p = Policy::random(cfg, vocab, 1).unwrap();
        let y = [cfg.eos()];
        assert_eq!(p.logprob(&[1], &y).unwrap(), 0.0);
        assert!(p.grad_logprob(&[1], &y).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn greedy_takes_argmax() {
        let (cfg, vocab) = tiny();
        let p = Policy::random(cfg, vocab, 9).unwrap();
        let src = [2, 0];
        let best = p.greedy(&src).unwrap();
        let mut prefix = Vec::new();
        for &tok in &best.tokens {
            let lp = p.step_log_probs(&src, &prefix);
            let arg = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
            assert_eq!(tok, arg);
            prefix.push(tok);
        }
    }

    #[test]
    fn beam_output_sorted() {
        let (cfg, vocab) = tiny();
        let p = Policy::random(cfg, vocab, 5).unwrap();
        let hyps = p.beam_search(&[0, 1, 2], 4).unwrap();
        assert_eq!(hyps.len(), 4);
        for w in hyps.windows(2) {
            assert!(w[0].logp >= w[1].logp);
        }
        for h in &hyps {
            assert!((p.logprob(&[0, 1, 2], &h.tokens).unwrap() - h.logp).abs() < 1e-12);
        }
        assert!(p.beam_search(&[0], 0).is_err());
    }

    #[test]
    fn top_k_one_is_greedy() {
        let (cfg, vocab) = tiny();
        let p = Policy::random(cfg, vocab, 4).unwrap();
        let greedy = p.greedy(&[1, 2]).unwrap();
        let cfg_s = SamplingConfig {
            top_k: 1,
            top_p: 1.0,
            temperature: 1.0,
        };
        for seed in 0..5 {
            for h in p.sample(&[1, 2], 3, &cfg_s, seed).unwrap() {
                assert_eq!(h.tokens, greedy.tokens);
                assert_eq!(h.logp, 0.0);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let (cfg, vocab) = tiny();
        let p = Policy::random(cfg, vocab, 4).unwrap();
        let s = SamplingConfig {
            top_k: 10,
            top_p: 1.0,
            temperature: 1.0,
        };
        let a = p.sample(&[1, 2], 20, &s, 7).unwrap();
        assert_eq!(a, p.sample(&[1, 2], 20, &s, 7).unwrap());
        assert_ne!(a, p.sample(&[1, 2], 20, &s, 8).unwrap());
        assert!(p.sample(&[1], 0, &s, 0).is_err());
        assert!(p.sample(&[1], 1, &SamplingConfig { top_p: 0.0, ..s }, 0).is_err());
        assert!(p.sample(&[1], 1, &SamplingConfig { top_k: 0, ..s }, 0).is_err());
    }

    #[test]
    fn truncation_prefix() {
        let logp: Vec<f64> = [0.5, 0.3, 0.15, 0.05].iter().map(|p: &f64| p.ln()).collect();
        let cfg = SamplingConfig {
            top_k: 4,
            top_p: 0.6,
            temperature: 1.0,
        };
        let s = truncated_support(&logp, &cfg);
        assert_eq!(s.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!((s[0].1 - 0.625).abs() < 1e-12);
        let s = truncated_support(&logp, &SamplingConfig { top_k: 1, ..cfg });
        assert_eq!(s, vec![(0, 1.0)]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (cfg, vocab) = tiny();
        let p = Policy::random(cfg, vocab, 2).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = Policy::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert!(p.theta.iter().zip(&q.theta).all(|(a, b)| a.to_bits() == b.to_bits()));
        buf[0] = b'X';
        assert!(Policy::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::numbered(3, 4);
        assert_eq!(v.encode_src("s2 s0").unwrap(), vec![2, 0]);
        assert_eq!(v.encode_tgt("t3 t1").unwrap(), vec![3, 1, 4]);
        assert_eq!(v.decode_tgt(&[3, 1, 4]), "t3 t1");
        assert!(v.encode_src("q").is_err());
    }
}
