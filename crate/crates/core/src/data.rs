//! Synthetic source-constrained tasks and their text format.
//!
//! Every pair is one line: source ids, a tab, target ids, each
//! space-separated. All generators are pure functions of their arguments.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use substrate::rng::{indexed_stream, splitmix64};

use crate::error::{Error, Result};
use crate::vocab::{Token, FIRST_CONTENT};

/// Key of the hash that fixes the canonical order of the reorder task.
pub const REORDER_KEY: u64 = 0x6f72_6465_725f_6b65;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub src: Vec<Token>,
    pub tgt: Vec<Token>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reorder,
    Reverse,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reorder => "reorder",
            Task::Reverse => "reverse",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reorder" => Ok(Task::Reorder),
            "reverse" => Ok(Task::Reverse),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub pairs: Vec<Pair>,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_vocab(vocab: usize) -> Result<()> {
    if vocab < 10 {
        return Err(Error::Config(format!("vocabulary of {vocab} is below the minimum of 10")));
    }
    Ok(())
}

fn random_sequences(
    n: usize,
    lens: &RangeInclusive<usize>,
    vocab: usize,
    seed: u64,
    stream: &str,
) -> Vec<Vec<Token>> {
    let mut rng = indexed_stream(seed, stream, 0);
    (0..n)
        .map(|_| {
            let len = rng.random_range(lens.clone());
            (0..len)
                .map(|_| rng.random_range(FIRST_CONTENT..vocab as Token))
                .collect()
        })
        .collect()
}

fn dataset(name: &str, pairs: Vec<Pair>, vocab: usize, seed: u64) -> Dataset {
    Dataset {
        name: name.into(),
        split: Split::Train,
        pairs,
        vocab_size: vocab,
        seed,
    }
}

/// `tgt = src`, tokens uniform over the content ids.
pub fn gen_copy(n: usize, lens: RangeInclusive<usize>, vocab: usize, seed: u64) -> Result<Dataset> {
    check_vocab(vocab)?;
    let pairs = random_sequences(n, &lens, vocab, seed, "data/copy")
        .into_iter()
        .map(|s| Pair {
            src: s.clone(),
            tgt: s,
        })
        .collect();
    Ok(dataset("copy", pairs, vocab, seed))
}

/// `tgt = reverse(src)`.
pub fn gen_reverse(n: usize, lens: RangeInclusive<usize>, vocab: usize, seed: u64) -> Result<Dataset> {
    check_vocab(vocab)?;
    let pairs = random_sequences(n, &lens, vocab, seed, "data/reverse")
        .into_iter()
        .map(|s| {
            let mut t = s.clone();
            t.reverse();
            Pair { src: s, tgt: t }
        })
        .collect();
    Ok(dataset("reverse", pairs, vocab, seed))
}

/// Sorts tokens by a fixed keyed hash of their id (stable for duplicates).
pub fn canonical_order(tokens: &[Token]) -> Vec<Token> {
    let mut t = tokens.to_vec();
    t.sort_by_key(|&x| (splitmix64(u64::from(x) ^ REORDER_KEY), x));
    t
}

/// `tgt` in canonical order, `src` a uniform shuffle of it.
pub fn gen_reorder(n: usize, lens: RangeInclusive<usize>, vocab: usize, seed: u64) -> Result<Dataset> {
    check_vocab(vocab)?;
    let mut rng = indexed_stream(seed, "data/reorder/shuffle", 0);
    let pairs = random_sequences(n, &lens, vocab, seed, "data/reorder")
        .into_iter()
        .map(|s| {
            let tgt = canonical_order(&s);
            let mut src = tgt.clone();
            src.shuffle(&mut rng);
            Pair { src, tgt }
        })
        .collect();
    Ok(dataset("reorder", pairs, vocab, seed))
}

pub fn generate(task: Task, n: usize, lens: RangeInclusive<usize>, vocab: usize, seed: u64) -> Result<Dataset> {
    match task {
        Task::Copy => gen_copy(n, lens, vocab, seed),
        Task::Reorder => gen_reorder(n, lens, vocab, seed),
        Task::Reverse => gen_reverse(n, lens, vocab, seed),
    }
}

/// Sizes and length ranges of a train/dev/test triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub vocab_size: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub train_min_len: usize,
    pub train_max_len: usize,
    pub test_min_len: usize,
    pub test_max_len: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            train_size: 20_000,
            dev_size: 1_000,
            test_size: 1_000,
            train_min_len: 4,
            train_max_len: 16,
            test_min_len: 4,
            test_max_len: 24,
            seed: 0,
        }
    }
}

/// Train, dev and test sets drawn from separate seed streams. Dev shares
/// the training length range; test uses the (wider) test range.
pub fn make_splits(task: Task, cfg: &SplitConfig) -> Result<[Dataset; 3]> {
    let split_seed = |s: Split| splitmix64(cfg.seed ^ substrate::rng::fnv1a64(s.name().as_bytes()));
    let make = |split: Split, n: usize, lens: RangeInclusive<usize>| -> Result<Dataset> {
        let mut d = generate(task, n, lens, cfg.vocab_size, split_seed(split))?;
        d.split = split;
        Ok(d)
    };
    let train_lens = cfg.train_min_len..=cfg.train_max_len;
    Ok([
        make(Split::Train, cfg.train_size, train_lens.clone())?,
        make(Split::Dev, cfg.dev_size, train_lens)?,
        make(Split::Test, cfg.test_size, cfg.test_min_len..=cfg.test_max_len)?,
    ])
}

fn join(tokens: &[Token]) -> String {
    let mut s = String::with_capacity(tokens.len() * 3);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{t}");
    }
    s
}

pub fn save_pairs(pairs: &[Pair], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        writeln!(w, "{}\t{}", join(&p.src), join(&p.tgt))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_tokens(field: &str) -> std::result::Result<Vec<Token>, String> {
    field
        .split_whitespace()
        .map(|t| t.parse::<Token>().map_err(|_| format!("bad token `{t}`")))
        .collect()
}

/// Parses pairs; errors carry the 1-based line number.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (src, tgt) = line.split_once('\t').ok_or_else(|| err("missing tab".into()))?;
        pairs.push(Pair {
            src: parse_tokens(src).map_err(err)?,
            tgt: parse_tokens(tgt).map_err(err)?,
        });
    }
    Ok(pairs)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_pairs(&text, path)
}

/// One row per dataset: name, split, pair count, mean source and target length.
pub fn stats_table(sets: &[&Dataset]) -> String {
    let mut s = String::from("| dataset | split | pairs | mean src len | mean tgt len |\n|---|---|---|---|---|\n");
    for d in sets {
        let n = d.pairs.len().max(1) as f64;
        let ms = d.pairs.iter().map(|p| p.src.len()).sum::<usize>() as f64 / n;
        let mt = d.pairs.iter().map(|p| p.tgt.len()).sum::<usize>() as f64 / n;
        let _ = writeln!(s, "| {} | {} | {} | {ms:.2} | {mt:.2} |", d.name, d.split.name(), d.pairs.len());
    }
    s
}
