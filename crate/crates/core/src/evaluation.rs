//! Corpus BLEU (multi-bleu semantics, unsmoothed), alignment error rate
//! over sure/possible gold links, and automatic over-/under-translation
//! ratios for synthetic tasks where gold coverage is exact counting.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::path::Path;

use crate::data::SynthTask;
use crate::error::{Error, Result};

/// Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram
/// precisions (n = 1..=max_n, counts pooled over the corpus before the
/// ratio) times the brevity penalty. No smoothing: any zero precision gives
/// 0. Single reference per line.
pub fn corpus_bleu<S: AsRef<str>>(
    hyps: &[S],
    refs: &[S],
    max_n: usize,
    case_sensitive: bool,
) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypothesis lines vs {} reference lines",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let tokenize = |s: &str| -> Vec<String> {
        s.split_whitespace()
            .map(|t| {
                if case_sensitive {
                    t.to_string()
                } else {
                    t.to_lowercase()
                }
            })
            .collect()
    };

    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;

    for (h, r) in hyps.iter().zip(refs) {
        let h = tokenize(h.as_ref());
        let r = tokenize(r.as_ref());
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=max_n {
            if h.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            if r.len() >= n {
                for w in r.windows(n) {
                    *ref_counts.entry(w).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
            for w in h.windows(n) {
                *hyp_counts.entry(w).or_insert(0) += 1;
            }
            total[n - 1] += (h.len() - n + 1) as u64;
            for (gram, count) in hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    // Orders longer than any sentence in the corpus contribute no counts
    // and drop out of the mean; without this, a perfectly-matched corpus
    // of short sentences would score 0.
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Gold word alignments: per sentence, sure links S and possible links P
/// with S ⊆ P. Links are (target_pos, source_pos), 1-based.
#[derive(Debug, Clone, Default)]
pub struct AlignmentGold {
    pub sure: Vec<HashSet<(usize, usize)>>,
    pub possible: Vec<HashSet<(usize, usize)>>,
}

impl AlignmentGold {
    pub fn push(&mut self, sure: HashSet<(usize, usize)>, mut possible: HashSet<(usize, usize)>) {
        possible.extend(sure.iter().copied());
        self.sure.push(sure);
        self.possible.push(possible);
    }

    pub fn len(&self) -> usize {
        self.sure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sure.is_empty()
    }

    /// One line per sentence: `t-i` for sure links, `t?i` for possible-only
    /// links, 1-based.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read alignments {}: {e}", path.display())))?;
        let mut gold = AlignmentGold::default();
        for (lineno, line) in text.lines().enumerate() {
            let mut sure = HashSet::new();
            let mut possible = HashSet::new();
            for item in line.split_whitespace() {
                let (sep, is_sure) = if item.contains('-') {
                    ('-', true)
                } else if item.contains('?') {
                    ('?', false)
                } else {
                    return Err(Error::Data(format!(
                        "bad alignment item `{item}` at line {}",
                        lineno + 1
                    )));
                };
                let mut parts = item.splitn(2, sep);
                let parse = |s: Option<&str>| -> Result<usize> {
                    s.and_then(|v| v.parse().ok()).ok_or_else(|| {
                        Error::Data(format!(
                            "bad alignment item `{item}` at line {}",
                            lineno + 1
                        ))
                    })
                };
                let t = parse(parts.next())?;
                let i = parse(parts.next())?;
                if is_sure {
                    sure.insert((t, i));
                } else {
                    possible.insert((t, i));
                }
            }
            gold.push(sure, possible);
        }
        Ok(gold)
    }

    pub fn format_line(sure: &[(usize, usize)]) -> String {
        sure.iter()
            .map(|(t, i)| format!("{t}-{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Alignment error rate in [0, 100]:
/// 100·(1 − (|A∩S| + |A∩P|) / (|A| + |S|)), counts pooled over the corpus
/// before the ratio. Lower is better.
pub fn aer(pred: &[Vec<(usize, usize)>], gold: &AlignmentGold) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predicted alignment sentences vs {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut a_s, mut a_p, mut a_n, mut s_n) = (0usize, 0usize, 0usize, 0usize);
    for (links, (sure, possible)) in pred
        .iter()
        .zip(gold.sure.iter().zip(gold.possible.iter()))
    {
        let set: HashSet<(usize, usize)> = links.iter().copied().collect();
        a_s += set.intersection(sure).count();
        a_p += set.intersection(possible).count();
        a_n += set.len();
        s_n += sure.len();
    }
    if a_n + s_n == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 - (a_s + a_p) as f64 / (a_n + s_n) as f64))
}

/// Tasks for which every source token must appear exactly once in the
/// output, making coverage a counting exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoverageTask {
    Copy,
    PermutedCopy,
}

impl CoverageTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(CoverageTask::Copy),
            "permuted-copy" | "permuted_copy" => Ok(CoverageTask::PermutedCopy),
            other => Err(Error::Config(format!(
                "unsupported coverage task `{other}` (expected copy or permuted-copy)"
            ))),
        }
    }

    /// Coverage counting for a synthetic task. Substituted corpora have no
    /// direct source/hypothesis token correspondence, so coverage for them
    /// is measured against the reference side by the caller.
    pub fn for_synth(task: SynthTask) -> Result<Self> {
        match task {
            SynthTask::Copy => Ok(CoverageTask::Copy),
            SynthTask::Reverse => Ok(CoverageTask::PermutedCopy),
            SynthTask::LexSubShift => Err(Error::Config(
                "coverage counting is unsupported for lex-sub-shift sources; \
                 compare against the reference side as a permuted copy"
                    .into(),
            )),
        }
    }
}

/// Fraction of source positions whose token occurs more often in the
/// hypothesis than in the source (over-translated), and fewer times
/// (under-translated). Both tasks count the same way; the enum documents
/// the precondition that each source token belongs in the output exactly
/// once.
pub fn coverage_diagnostics<T: Eq + Hash>(
    src: &[T],
    hyp: &[T],
    _task: CoverageTask,
) -> (f64, f64) {
    if src.is_empty() {
        return (0.0, 0.0);
    }
    let mut src_counts: HashMap<&T, i64> = HashMap::new();
    for t in src {
        *src_counts.entry(t).or_insert(0) += 1;
    }
    let mut hyp_counts: HashMap<&T, i64> = HashMap::new();
    for t in hyp {
        *hyp_counts.entry(t).or_insert(0) += 1;
    }
    let (mut over, mut under) = (0usize, 0usize);
    for t in src {
        let sc = src_counts[t];
        let hc = hyp_counts.get(t).copied().unwrap_or(0);
        if hc > sc {
            over += 1;
        } else if hc < sc {
            under += 1;
        }
    }
    (over as f64 / src.len() as f64, under as f64 / src.len() as f64)
}

/// Corpus-level coverage: pooled position counts over all sentence pairs.
pub fn corpus_coverage<T: Eq + Hash>(
    pairs: &[(Vec<T>, Vec<T>)],
    task: CoverageTask,
) -> (f64, f64) {
    let mut over_positions = 0.0;
    let mut under_positions = 0.0;
    let mut total = 0usize;
    for (src, hyp) in pairs {
        let (o, u) = coverage_diagnostics(src, hyp, task);
        over_positions += o * src.len() as f64;
        under_positions += u * src.len() as f64;
        total += src.len();
    }
    if total == 0 {
        return (0.0, 0.0);
    }
    (over_positions / total as f64, under_positions / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_perfect_match_is_100() {
        let lines = ["a b c d e", "the quick fox"];
        let b = corpus_bleu(&lines, &lines, 4, true).unwrap();
        assert!((b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_no_shared_fourgram_is_zero() {
        let hyp = ["a b c d e"];
        let refs = ["a x c y e"];
        assert_eq!(corpus_bleu(&hyp, &refs, 4, true).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_derived_example() {
        // hyp "a b c d e" vs ref "a b c d f": precisions 4/5, 3/4, 2/3, 1/2,
        // BP = 1 -> 100·(4/5·3/4·2/3·1/2)^(1/4) ≈ 66.87.
        let b = corpus_bleu(&["a b c d e"], &["a b c d f"], 4, true).unwrap();
        assert!((b - 66.874_030_497_643_58).abs() < 0.01, "{b}");
    }

    #[test]
    fn bleu_perfect_match_is_100_for_short_sentences() {
        // No 4-grams exist anywhere; those orders drop out of the mean
        // instead of zeroing the score.
        let lines = ["x y", "a"];
        let b = corpus_bleu(&lines, &lines, 4, true).unwrap();
        assert_eq!(b, 100.0);
    }

    #[test]
    fn bleu_invariant_to_sentence_order() {
        let hyps = ["a b c d", "x y z w q"];
        let refs = ["a b d d", "x y z q q"];
        let fwd = corpus_bleu(&hyps, &refs, 4, true).unwrap();
        let rev_h = [hyps[1], hyps[0]];
        let rev_r = [refs[1], refs[0]];
        let bwd = corpus_bleu(&rev_h, &rev_r, 4, true).unwrap();
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn bleu_case_flag() {
        let b = corpus_bleu(&["A b C d"], &["a B c D"], 4, false).unwrap();
        assert!((b - 100.0).abs() < 1e-9);
        let strict = corpus_bleu(&["A b C d"], &["a B c D"], 4, true).unwrap();
        assert_eq!(strict, 0.0);
    }

    #[test]
    fn bleu_line_count_mismatch() {
        assert!(matches!(
            corpus_bleu(&["a"], &["a", "b"], 4, true),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn aer_perfect_and_disjoint() {
        let mut gold = AlignmentGold::default();
        let s: HashSet<_> = [(1, 1), (2, 2)].into_iter().collect();
        gold.push(s.clone(), s.clone());
        assert_eq!(aer(&[vec![(1, 1), (2, 2)]], &gold).unwrap(), 0.0);
        assert_eq!(aer(&[vec![(1, 3), (2, 4)]], &gold).unwrap(), 100.0);
    }

    #[test]
    fn aer_hand_derived_example() {
        // A = {(1,1),(2,2)}, S = {(1,1)}, P = {(1,1),(2,3)}:
        // 100·(1 − (1+1)/(2+1)) ≈ 33.33.
        let mut gold = AlignmentGold::default();
        gold.push(
            [(1, 1)].into_iter().collect(),
            [(1, 1), (2, 3)].into_iter().collect(),
        );
        let got = aer(&[vec![(1, 1), (2, 2)]], &gold).unwrap();
        assert!((got - 100.0 / 3.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn aer_counts_pool_over_corpus() {
        let mut gold = AlignmentGold::default();
        gold.push([(1, 1)].into_iter().collect(), [(1, 1)].into_iter().collect());
        gold.push([(1, 2)].into_iter().collect(), [(1, 2)].into_iter().collect());
        // First sentence perfect, second sentence wrong:
        // a_s = a_p = 1, |A| = 2, |S| = 2 -> 100·(1 − 2/4) = 50.
        let got = aer(&[vec![(1, 1)], vec![(1, 9)]], &gold).unwrap();
        assert!((got - 50.0).abs() < 1e-9);
    }

    #[test]
    fn coverage_identity_and_hand_case() {
        let src = ["a", "b", "c"];
        assert_eq!(
            coverage_diagnostics(&src, &src, CoverageTask::Copy),
            (0.0, 0.0)
        );
        let hyp = ["a", "a", "b"];
        let (over, under) = coverage_diagnostics(&src, &hyp, CoverageTask::Copy);
        assert!((over - 1.0 / 3.0).abs() < 1e-12);
        assert!((under - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_matches_multiset_difference_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let src: Vec<u32> = (0..rng.random_range(1..12))
                .map(|_| rng.random_range(0..6))
                .collect();
            let hyp: Vec<u32> = (0..rng.random_range(0..12))
                .map(|_| rng.random_range(0..6))
                .collect();
            let (over, under) =
                coverage_diagnostics(&src, &hyp, CoverageTask::PermutedCopy);

            let count = |xs: &[u32], v: u32| xs.iter().filter(|&&x| x == v).count();
            let over_oracle = src
                .iter()
                .filter(|&&t| count(&hyp, t) > count(&src, t))
                .count() as f64
                / src.len() as f64;
            let under_oracle = src
                .iter()
                .filter(|&&t| count(&hyp, t) < count(&src, t))
                .count() as f64
                / src.len() as f64;
            assert_eq!(over, over_oracle);
            assert_eq!(under, under_oracle);
        }
    }

    #[test]
    fn coverage_task_parsing_and_synth_mapping() {
        assert_eq!(CoverageTask::parse("copy").unwrap(), CoverageTask::Copy);
        assert!(matches!(CoverageTask::parse("bleu"), Err(Error::Config(_))));
        assert_eq!(
            CoverageTask::for_synth(SynthTask::Reverse).unwrap(),
            CoverageTask::PermutedCopy
        );
        assert!(matches!(
            CoverageTask::for_synth(SynthTask::LexSubShift),
            Err(Error::Config(_))
        ));
    }
}
