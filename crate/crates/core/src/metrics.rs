//! Translation quality scores over tokenized sentences, each hypothesis paired
//! with one or more references.
//!
//! All scores are in `[0, 1]` except CIDEr, which lies in `[0, 10]`. An empty
//! hypothesis scores 0 rather than failing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} reference sets")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("CIDEr needs at least 2 samples, got {0}")]
    CorpusTooSmall(usize),
    #[error("reference set is empty")]
    EmptyReferenceSet,
}

pub type Sentence = Vec<String>;

/// Whitespace tokenization.
pub fn tokenize(s: &str) -> Sentence {
    s.split_whitespace().map(str::to_string).collect()
}

/// One or more acceptable translations of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Sentence>", into = "Vec<Sentence>")]
pub struct ReferenceSet(Vec<Sentence>);

impl ReferenceSet {
    pub fn new(references: Vec<Sentence>) -> Result<Self, MetricError> {
        if references.is_empty() {
            return Err(MetricError::EmptyReferenceSet);
        }
        Ok(ReferenceSet(references))
    }

    pub fn single(reference: Sentence) -> Self {
        ReferenceSet(vec![reference])
    }

    pub fn from_strs<S: AsRef<str>>(refs: &[S]) -> Result<Self, MetricError> {
        ReferenceSet::new(refs.iter().map(|r| tokenize(r.as_ref())).collect())
    }

    pub fn references(&self) -> &[Sentence] {
        &self.0
    }

    pub fn push(&mut self, reference: Sentence) {
        self.0.push(reference);
    }
}

impl TryFrom<Vec<Sentence>> for ReferenceSet {
    type Error = MetricError;

    fn try_from(v: Vec<Sentence>) -> Result<Self, MetricError> {
        ReferenceSet::new(v)
    }
}

impl From<ReferenceSet> for Vec<Sentence> {
    fn from(r: ReferenceSet) -> Self {
        r.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sentence_accuracy: f64,
    pub word_accuracy: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub n_samples: usize,
}

impl MetricReport {
    /// Every metric at once. CIDEr needs at least two samples.
    pub fn compute(hyps: &[Sentence], refs: &[ReferenceSet]) -> Result<Self, MetricError> {
        Ok(MetricReport {
            sentence_accuracy: sentence_accuracy(hyps, refs)?,
            word_accuracy: word_accuracy(hyps, refs)?,
            bleu: bleu(hyps, refs, 4)?,
            rouge_l: rouge_l(hyps, refs)?,
            meteor: meteor(hyps, refs)?,
            cider: cider(hyps, refs)?,
            n_samples: hyps.len(),
        })
    }

    /// Display scale: accuracies and BLEU/ROUGE-L/METEOR ×100, CIDEr as is.
    pub fn scaled(&self) -> MetricReport {
        MetricReport {
            sentence_accuracy: self.sentence_accuracy * 100.0,
            word_accuracy: self.word_accuracy * 100.0,
            bleu: self.bleu * 100.0,
            rouge_l: self.rouge_l * 100.0,
            meteor: self.meteor * 100.0,
            cider: self.cider,
            n_samples: self.n_samples,
        }
    }
}

fn check(hyps: &[Sentence], refs: &[ReferenceSet]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    Ok(())
}

/// Mean over samples of the best per-reference score.
fn mean_of_best<F>(hyps: &[Sentence], refs: &[ReferenceSet], score: F) -> Result<f64, MetricError>
where
    F: Fn(&[String], &[String]) -> f64,
{
    check(hyps, refs)?;
    if hyps.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, rs)| {
            rs.references()
                .iter()
                .map(|r| score(h, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Fraction of hypotheses identical to at least one of their references.
pub fn sentence_accuracy(hyps: &[Sentence], refs: &[ReferenceSet]) -> Result<f64, MetricError> {
    mean_of_best(hyps, refs, |h, r| if h == r { 1.0 } else { 0.0 })
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − WER` against the closest reference, floored at 0.
pub fn word_accuracy(hyps: &[Sentence], refs: &[ReferenceSet]) -> Result<f64, MetricError> {
    mean_of_best(hyps, refs, |h, r| {
        if r.is_empty() {
            return if h.is_empty() { 1.0 } else { 0.0 };
        }
        (1.0 - edit_distance(h, r) as f64 / r.len() as f64).max(0.0)
    })
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with uniform weights over `1..=max_n`.
///
/// Clipping uses the per-n-gram maximum count over references; the brevity penalty uses
/// the reference length closest to each hypothesis (shorter on ties). When any order has
/// zero matches, orders `n ≥ 2` are smoothed with `(m + 1) / (t + 1)`.
pub fn bleu(hyps: &[Sentence], refs: &[ReferenceSet], max_n: usize) -> Result<f64, MetricError> {
    check(hyps, refs)?;
    let max_n = max_n.max(1);
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += rs
            .references()
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .unwrap_or(0);
        for n in 1..=max_n {
            let mut best: HashMap<&[String], usize> = HashMap::new();
            for r in rs.references() {
                for (g, c) in ngram_counts(r, n) {
                    let e = best.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(best.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let smooth = matched.contains(&0);
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if smooth && n > 0 {
            (matched[n] + 1) as f64 / (total[n] + 1) as f64
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (equal weight on precision and recall).
pub fn rouge_l(hyps: &[Sentence], refs: &[ReferenceSet]) -> Result<f64, MetricError> {
    mean_of_best(hyps, refs, |h, r| {
        let l = lcs_len(h, r);
        if l == 0 {
            return 0.0;
        }
        let (p, rc) = (l as f64 / h.len() as f64, l as f64 / r.len() as f64);
        2.0 * p * rc / (p + rc)
    })
}

/// Exact-match unigram alignment with the most matches, and among those the fewest chunks.
/// Returns `(matches, chunks)`.
pub fn meteor_alignment(hyp: &[String], reference: &[String]) -> (usize, usize) {
    let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, t) in reference.iter().enumerate() {
        positions.entry(t.as_str()).or_default().push(j);
    }
    // Each token can skip at most (hyp count − matchable count) occurrences while still
    // reaching the maximum number of matches.
    let mut skips: HashMap<&str, usize> = HashMap::new();
    for t in hyp {
        *skips.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut matches = 0;
    for (t, c) in skips.iter_mut() {
        let avail = positions.get(t).map_or(0, Vec::len);
        matches += (*c).min(avail);
        *c -= (*c).min(avail);
    }
    if matches == 0 {
        return (0, 0);
    }

    struct Search<'a> {
        hyp: &'a [String],
        positions: HashMap<&'a str, Vec<usize>>,
        used: Vec<bool>,
        skips: HashMap<&'a str, usize>,
        best: usize,
        budget: usize,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, last: Option<usize>, chunks: usize) {
            if chunks >= self.best || self.budget == 0 {
                return;
            }
            self.budget -= 1;
            if i == self.hyp.len() {
                self.best = chunks;
                return;
            }
            let tok = self.hyp[i].as_str();
            let cands = self.positions.get(tok).cloned().unwrap_or_default();
            // Continuing the current chunk first finds good bounds early.
            let mut order: Vec<usize> = cands.into_iter().filter(|&j| !self.used[j]).collect();
            order.sort_by_key(|&j| last.map_or(1, |l| usize::from(j != l + 1)));
            for j in order {
                self.used[j] = true;
                let extends = last.is_some_and(|l| j == l + 1);
                self.go(i + 1, Some(j), chunks + usize::from(!extends));
                self.used[j] = false;
            }
            let can_skip = self.skips.get(tok).copied().unwrap_or(0);
            if can_skip > 0 || !self.positions.contains_key(tok) {
                if can_skip > 0 {
                    *self.skips.get_mut(tok).expect("present") -= 1;
                }
                self.go(i + 1, None, chunks);
                if can_skip > 0 {
                    *self.skips.get_mut(tok).expect("present") += 1;
                }
            }
        }
    }

    let mut search = Search {
        hyp,
        positions,
        used: vec![false; reference.len()],
        skips,
        best: matches + 1,
        budget: 2_000_000,
    };
    search.go(0, None, 0);
    (matches, search.best.min(matches))
}

pub fn meteor_sentence(hyp: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = meteor_alignment(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let (p, r) = (
        m as f64 / hyp.len() as f64,
        m as f64 / reference.len() as f64,
    );
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

pub fn meteor(hyps: &[Sentence], refs: &[ReferenceSet]) -> Result<f64, MetricError> {
    mean_of_best(hyps, refs, meteor_sentence)
}

/// tf-idf cosine similarity over 1..4-grams, averaged over references and orders, ×10.
/// Document frequencies count samples whose reference set contains the n-gram.
pub fn cider(hyps: &[Sentence], refs: &[ReferenceSet]) -> Result<f64, MetricError> {
    check(hyps, refs)?;
    let n_docs = hyps.len();
    if n_docs < 2 {
        return Err(MetricError::CorpusTooSmall(n_docs));
    }
    let mut score = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for rs in refs {
            let mut seen: Vec<&[String]> =
                rs.references().iter().flat_map(|r| r.windows(n)).collect();
            seen.sort();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (h, rs) in hyps.iter().zip(refs) {
            let hv = tfidf(h, n, &df, n_docs);
            let sims: f64 = rs
                .references()
                .iter()
                .map(|r| cosine(&hv, &tfidf(r, n, &df, n_docs)))
                .sum();
            score += sims / rs.references().len() as f64;
        }
    }
    Ok(10.0 * score / (4.0 * n_docs as f64))
}

fn tfidf<'a>(
    tokens: &'a [String],
    n: usize,
    df: &HashMap<&[String], usize>,
    n_docs: usize,
) -> HashMap<&'a [String], f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| {
            let idf = (n_docs as f64 / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            (g, c as f64 / total as f64 * idf)
        })
        .collect()
}

fn cosine<K: Eq + std::hash::Hash>(a: &HashMap<K, f64>, b: &HashMap<K, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Sentence {
        tokenize(x)
    }

    fn one(hyp: &str, reference: &str) -> (Vec<Sentence>, Vec<ReferenceSet>) {
        (vec![s(hyp)], vec![ReferenceSet::single(s(reference))])
    }

    #[test]
    fn gloss_exact_match() {
        let (h, r) = one("FIRE SCAR", "FIRE SCAR");
        assert_eq!(sentence_accuracy(&h, &r).unwrap(), 1.0);
        let refs = vec![ReferenceSet::from_strs(&["a b", "c d", "help me", "e", "f"]).unwrap()];
        assert_eq!(sentence_accuracy(&[s("help me")], &refs).unwrap(), 1.0);
        assert_eq!(sentence_accuracy(&[s("help")], &refs).unwrap(), 0.0);
    }

    #[test]
    fn word_accuracy_examples() {
        let (h, r) = one("help me please", "help me");
        assert_eq!(word_accuracy(&h, &r).unwrap(), 0.5);
        let (h, r) = one("", "a b c");
        assert_eq!(word_accuracy(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn bleu_examples() {
        let (h, r) = one("the the the the", "the cat");
        assert_eq!(bleu(&h, &r, 1).unwrap(), 0.25);
        let (h, r) = one("a b c d e", "a b c d e");
        assert!((bleu(&h, &r, 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&[], &[], 4).unwrap(), 0.0);
        let (h, r) = one("", "a b");
        assert_eq!(bleu(&h, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn rouge_example() {
        let (h, r) = one("police gun", "the police found a gun");
        assert!((rouge_l(&h, &r).unwrap() - 0.571429).abs() < 1e-6);
    }

    #[test]
    fn meteor_examples() {
        let (h, r) = one("a b c", "a b c");
        let same = meteor(&h, &r).unwrap();
        assert!((same - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        let (h, r) = one("c b a", "a b c");
        assert!((meteor(&h, &r).unwrap() - 0.5).abs() < 1e-12);
        let (h, r) = one("x y", "a b c");
        assert_eq!(meteor(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn cider_examples() {
        let hyps = vec![s("a b c d"), s("e f g h"), s("i j k l")];
        let refs: Vec<_> = hyps.iter().cloned().map(ReferenceSet::single).collect();
        assert!((cider(&hyps, &refs).unwrap() - 10.0).abs() < 1e-12);
        assert!(matches!(
            cider(&hyps[..1], &refs[..1]),
            Err(MetricError::CorpusTooSmall(1))
        ));
        let miss = vec![s("z"), s("y"), s("x")];
        assert_eq!(cider(&miss, &refs).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_lengths() {
        let r = vec![ReferenceSet::single(s("a"))];
        assert!(matches!(
            bleu(&[], &r, 4),
            Err(MetricError::LengthMismatch { .. })
        ));
        assert!(ReferenceSet::new(vec![]).is_err());
    }
}
