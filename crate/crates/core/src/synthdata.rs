//! Synthetic transduction corpora with a hidden clean mapping.
//!
//! A source sentence is a random word sequence; its clean target maps every
//! word through a fixed bijection and then swaps adjacent pairs at random.
//! A fraction of pairs gets a corrupted reference, and the generator keeps a
//! ledger of which pairs those are so that filtering can be audited.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub swap_rate: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab_size: 24,
            min_len: 4,
            max_len: 10,
            swap_rate: 0.1,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=1000).contains(&self.vocab_size) {
            return Err(Error::invalid(format!(
                "vocab_size must be in 2..=1000, got {}",
                self.vocab_size
            )));
        }
        if self.min_len < 1 || self.min_len > self.max_len || self.max_len > 64 {
            return Err(Error::invalid(format!(
                "lengths must satisfy 1 <= min_len <= max_len <= 64, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        for (name, rate) in [("swap_rate", self.swap_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {rate}")));
            }
        }
        Ok(())
    }

    /// Source-side words, index-aligned with token ids.
    pub fn source_words(&self) -> Vec<String> {
        (0..self.vocab_size).map(|i| syllable_word(i, 0)).collect()
    }

    /// Target-side words, index-aligned with token ids.
    pub fn target_words(&self) -> Vec<String> {
        (0..self.vocab_size).map(|i| syllable_word(i, 1)).collect()
    }
}

const CONSONANTS: [char; 12] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const SOURCE_VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
const TARGET_VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'y'];

/// Deterministic pronounceable word for an index; `side` picks the vowel
/// inventory so source and target vocabularies differ.
fn syllable_word(index: usize, side: usize) -> String {
    let vowels = if side == 0 { SOURCE_VOWELS } else { TARGET_VOWELS };
    let base = CONSONANTS.len() * vowels.len();
    let mut word = String::new();
    let mut rest = index;
    // Two syllables minimum; 60^2 covers the whole vocabulary range.
    for _ in 0..2 {
        let syl = rest % base;
        rest /= base;
        word.push(CONSONANTS[syl / vowels.len()]);
        word.push(vowels[syl % vowels.len()]);
    }
    if side == 1 {
        word.push('n');
    }
    word
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: String,
    #[serde(rename = "ref")]
    pub reference: String,
    /// Generator-side ledger entry; never serialized into corpus files.
    #[serde(skip)]
    pub is_noisy: bool,
}

impl SentencePair {
    pub fn new(src: impl Into<String>, reference: impl Into<String>) -> Self {
        SentencePair {
            src: src.into(),
            reference: reference.into(),
            is_noisy: false,
        }
    }
}

/// Hidden clean mapping from source sentence to clean target.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldOracle {
    map: HashMap<String, String>,
}

impl GoldOracle {
    pub fn get(&self, src: &str) -> Option<&str> {
        self.map.get(src).map(String::as_str)
    }

    pub fn insert(&mut self, src: String, gold: String) {
        self.map.insert(src, gold);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<_> = self.map.iter().collect();
        entries.sort();
        let mut out = BufWriter::new(File::create(path)?);
        for (src, gold) in entries {
            let line = serde_json::to_string(&GoldLine { src, gold }).map_err(|e| Error::format("gold", e))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut oracle = GoldOracle::default();
        for (k, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: OwnedGoldLine =
                serde_json::from_str(&line).map_err(|e| Error::format("gold", format!("line {}: {e}", k + 1)))?;
            oracle.insert(entry.src, entry.gold);
        }
        Ok(oracle)
    }
}

#[derive(Serialize)]
struct GoldLine<'a> {
    src: &'a str,
    gold: &'a str,
}

#[derive(Deserialize)]
struct OwnedGoldLine {
    src: String,
    gold: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub gold: Arc<GoldOracle>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn noisy_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().filter(|p| p.is_noisy).count() as f64 / self.pairs.len() as f64
    }

    /// Same sources, references replaced by their clean targets.
    pub fn with_gold_references(&self) -> Corpus {
        let pairs = self
            .pairs
            .iter()
            .map(|p| SentencePair::new(p.src.clone(), self.gold.get(&p.src).unwrap_or(&p.reference)))
            .collect();
        Corpus {
            pairs,
            gold: Arc::clone(&self.gold),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            gold: Arc::clone(&self.gold),
        }
    }
}

/// The bijective word map and swap process behind a [`TaskSpec`].
#[derive(Debug, Clone)]
pub struct Transducer {
    source_words: Vec<String>,
    target_words: Vec<String>,
    mapping: Vec<usize>,
}

impl Transducer {
    fn new(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut mapping: Vec<usize> = (0..spec.vocab_size).collect();
        mapping.shuffle(rng);
        Transducer {
            source_words: spec.source_words(),
            target_words: spec.target_words(),
            mapping,
        }
    }

    /// Word-for-word image of a source id sequence, before swaps.
    pub fn map_ids(&self, src: &[usize]) -> Vec<usize> {
        src.iter().map(|&s| self.mapping[s]).collect()
    }
}

/// Generates `size` pairs. Deterministic given `spec.seed`.
pub fn gen_corpus(spec: &TaskSpec, size: usize) -> Result<Corpus> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let transducer = Transducer::new(spec, &mut rng);
    let mut gold = GoldOracle::default();
    let mut pairs = Vec::with_capacity(size);
    let vocab = spec.vocab_size;

    for _ in 0..size {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src_ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let src = join_words(&transducer.source_words, &src_ids);

        let clean_ids = match gold.get(&src) {
            Some(existing) => existing
                .split_whitespace()
                .map(|w| transducer.target_words.iter().position(|t| t == w).expect("gold word"))
                .collect(),
            None => {
                let mut ids = transducer.map_ids(&src_ids);
                let mut t = 0;
                while t + 1 < ids.len() {
                    if rng.gen_bool(spec.swap_rate) {
                        ids.swap(t, t + 1);
                        t += 2;
                    } else {
                        t += 1;
                    }
                }
                gold.insert(src.clone(), join_words(&transducer.target_words, &ids));
                ids
            }
        };

        let is_noisy = rng.gen_bool(spec.noise_rate);
        let ref_ids: Vec<usize> = if is_noisy {
            clean_ids
                .iter()
                .map(|&tok| {
                    if rng.gen_bool(0.5) {
                        // Uniform over the other words, so a replacement always changes the token.
                        let r = rng.gen_range(0..vocab - 1);
                        if r >= tok {
                            r + 1
                        } else {
                            r
                        }
                    } else {
                        tok
                    }
                })
                .collect()
        } else {
            clean_ids
        };
        pairs.push(SentencePair {
            src,
            reference: join_words(&transducer.target_words, &ref_ids),
            is_noisy,
        });
    }

    Ok(Corpus {
        pairs,
        gold: Arc::new(gold),
    })
}

fn join_words(words: &[String], ids: &[usize]) -> String {
    let mut out = String::new();
    for (k, &id) in ids.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        out.push_str(&words[id]);
    }
    out
}

/// Deterministic shuffled three-way split. Every part must be non-empty.
pub fn split(corpus: &Corpus, train_frac: f64, dev_frac: f64, seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    if !(train_frac > 0.0 && dev_frac > 0.0 && train_frac + dev_frac < 1.0) {
        return Err(Error::invalid(format!(
            "split fractions must be positive with sum < 1, got {train_frac}/{dev_frac}"
        )));
    }
    let n = corpus.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_dev = (n as f64 * dev_frac).round() as usize;
    if n_train == 0 || n_dev == 0 || n_train + n_dev >= n {
        return Err(Error::invalid(format!(
            "split {train_frac}/{dev_frac} of {n} pairs leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(n_train);
    let (dev, test) = rest.split_at(n_dev);
    Ok((corpus.subset(train), corpus.subset(dev), corpus.subset(test)))
}

pub fn write_jsonl(pairs: &[SentencePair], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for pair in pairs {
        let line = serde_json::to_string(pair).map_err(|e| Error::format("corpus", e))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Streams corpus JSONL one pair at a time.
pub fn jsonl_reader(path: &Path) -> Result<impl Iterator<Item = Result<SentencePair>>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(k, line)| {
            let line = line?;
            serde_json::from_str::<SentencePair>(&line)
                .map_err(|e| Error::format("corpus", format!("line {}: {e}", k + 1)))
        }))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SentencePair>> {
    jsonl_reader(path)?.collect()
}

/// `index<TAB>is_noisy` rows with a header line.
pub fn write_ledger(pairs: &[SentencePair], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "index\tis_noisy")?;
    for (k, pair) in pairs.iter().enumerate() {
        writeln!(out, "{k}\t{}", u8::from(pair.is_noisy))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> Result<Vec<bool>> {
    let reader = BufReader::new(File::open(path)?);
    let mut flags = Vec::new();
    for (k, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        let mut cols = line.split('\t');
        let (Some(idx), Some(flag)) = (cols.next(), cols.next()) else {
            return Err(Error::format("ledger", format!("line {}", k + 1)));
        };
        if idx.parse::<usize>().ok() != Some(flags.len()) {
            return Err(Error::format("ledger", format!("line {}: unexpected index {idx}", k + 1)));
        }
        flags.push(flag == "1");
    }
    Ok(flags)
}
