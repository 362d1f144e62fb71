//! Vocabulary construction, corpus loading with UNK mapping, and synthetic
//! transduction tasks (copy, reverse, lexical-substitution-with-shift) used
//! as desk-scale stand-ins for parallel corpora. Tokenization is whitespace
//! only.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Bidirectional token <-> id map with the four reserved entries pinned to
/// ids 0..4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from ordered non-reserved tokens.
    pub fn from_tokens<I: IntoIterator<Item = String>>(content: I) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Map a whitespace-tokenized line to ids; unknown tokens become UNK.
    pub fn map_ids(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Render ids back to a line, skipping reserved ids.
    pub fn render(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < RESERVED.len() {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            let _ = write!(out, "{}", self.token(id).unwrap_or("<unk>"));
        }
        out
    }

    /// One token per line, line number == id; reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocabulary {}: {e}", path.display())))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED.map(String::from) {
            return Err(Error::Data(format!(
                "vocabulary {} must start with the reserved tokens {:?}",
                path.display(),
                RESERVED
            )));
        }
        let mut v = Vocabulary { tokens, index: HashMap::new() };
        v.rebuild_index();
        Ok(v)
    }
}

/// Rank tokens by frequency (ties broken lexicographically) and keep the
/// most frequent ones, so the whole table including the reserved entries
/// has at most `max_size` rows.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], max_size: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for line in lines {
        for tok in line.as_ref().split_whitespace() {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("empty corpus: no tokens to build a vocabulary from".into()));
    }
    if max_size <= RESERVED.len() {
        return Err(Error::Data(format!(
            "vocabulary size {max_size} leaves no room beyond the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Ok(Vocabulary::from_tokens(
        ranked.into_iter().map(|(t, _)| t.to_string()),
    ))
}

/// Line-aligned sentence pairs as ids; every target ends with EOS.
pub type ParallelCorpus = Vec<(Vec<usize>, Vec<usize>)>;

/// Load two line-aligned text files into an id corpus. Empty lines are
/// rejected; the target side gets EOS appended.
pub fn load_corpus(
    src_path: &Path,
    tgt_path: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<ParallelCorpus> {
    let read = |p: &Path| -> Result<Vec<String>> {
        Ok(fs::read_to_string(p)
            .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", p.display())))?
            .lines()
            .map(str::to_string)
            .collect())
    };
    let src_lines = read(src_path)?;
    let tgt_lines = read(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src_lines.len(),
            tgt_path.display(),
            tgt_lines.len()
        )));
    }
    let mut corpus = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let src = src_vocab.map_ids(s);
        let mut tgt = tgt_vocab.map_ids(t);
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Data(format!("empty sentence at line {}", i + 1)));
        }
        tgt.push(EOS_ID);
        corpus.push((src, tgt));
    }
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    Ok(corpus)
}

/// Synthetic transduction tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthTask {
    /// Target equals source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Each token is substituted by (token + k) mod V' and adjacent pairs
    /// are randomly swapped, giving non-monotone gold alignments.
    LexSubShift,
}

impl SynthTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(SynthTask::Copy),
            "reverse" => Ok(SynthTask::Reverse),
            "lex-sub-shift" | "lex_sub_shift" => Ok(SynthTask::LexSubShift),
            other => Err(Error::Config(format!("unknown synthetic task `{other}`"))),
        }
    }
}

/// One generated pair: ids (target ends with EOS) plus the gold alignment
/// links (target_pos, source_pos), 1-based over content tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub alignment: Vec<(usize, usize)>,
}

/// Generate `n_pairs` pairs with content ids in [4, vocab_size) and lengths
/// uniform in `len_range` (inclusive). Deterministic under `seed`.
pub fn gen_synthetic(
    task: SynthTask,
    vocab_size: usize,
    len_range: (usize, usize),
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<SyntheticPair>> {
    if vocab_size < 5 {
        return Err(Error::Config(format!(
            "synthetic vocabulary needs at least 5 entries, got {vocab_size}"
        )));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("invalid length range {lo}..={hi}")));
    }
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }
    let content = vocab_size - RESERVED.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One substitution shift per corpus.
    let shift = if content > 1 { rng.random_range(1..content) } else { 0 };

    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.random_range(lo..=hi);
        let src: Vec<usize> = (0..len)
            .map(|_| RESERVED.len() + rng.random_range(0..content))
            .collect();

        // perm[t] = source position (0-based) aligned to target position t.
        let (tgt_content, perm): (Vec<usize>, Vec<usize>) = match task {
            SynthTask::Copy => (src.clone(), (0..len).collect()),
            SynthTask::Reverse => (
                src.iter().rev().copied().collect(),
                (0..len).rev().collect(),
            ),
            SynthTask::LexSubShift => {
                let subst: Vec<usize> = src
                    .iter()
                    .map(|&t| RESERVED.len() + ((t - RESERVED.len() + shift) % content))
                    .collect();
                let mut perm: Vec<usize> = (0..len).collect();
                let mut j = 0;
                while j + 1 < len {
                    if rng.random_bool(0.5) {
                        perm.swap(j, j + 1);
                    }
                    j += 2;
                }
                (perm.iter().map(|&p| subst[p]).collect(), perm)
            }
        };

        let alignment = perm.iter().enumerate().map(|(t, &i)| (t + 1, i + 1)).collect();
        let mut tgt = tgt_content;
        tgt.push(EOS_ID);
        pairs.push(SyntheticPair { src, tgt, alignment });
    }
    Ok(pairs)
}

/// Vocabulary whose content tokens are `w4..w{V-1}`, so token `w{i}` maps
/// to id i exactly. Synthetic corpora are written with this table.
pub fn synthetic_vocab(vocab_size: usize) -> Vocabulary {
    Vocabulary::from_tokens((RESERVED.len()..vocab_size).map(|i| format!("w{i}")))
}
