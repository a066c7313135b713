//! Caption metrics: sentence BLEU-1..4, ROUGE-L and corpus CIDEr.
//!
//! Everything is generic over the token type and only uses token equality
//! and ordering, so scores do not depend on how words map to ids. N-gram
//! tables are ordered maps, which keeps floating-point summation order (and
//! hence every score) bit-reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AdcError, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;

/// Counts of all n-grams of one order in a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramCounts<'a, T> {
    pub n: usize,
    pub counts: BTreeMap<&'a [T], usize>,
}

impl<'a, T: Ord> NGramCounts<'a, T> {
    pub fn new(tokens: &'a [T], n: usize) -> Self {
        let mut counts = BTreeMap::new();
        if n > 0 && tokens.len() >= n {
            for w in tokens.windows(n) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        NGramCounts { n, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

fn require_refs<R>(references: &[R]) -> Result<()> {
    if references.is_empty() {
        return Err(AdcError::Validation("at least one reference is required".into()));
    }
    Ok(())
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure, maximized over references.
pub fn rouge_l<T: PartialEq, R: AsRef<[T]>>(candidate: &[T], references: &[R], beta: f64) -> Result<f64> {
    require_refs(references)?;
    if beta <= 0.0 {
        return Err(AdcError::Validation("ROUGE-L beta must be positive".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    let mut best: f64 = 0.0;
    for r in references {
        let r = r.as_ref();
        if r.is_empty() {
            continue;
        }
        let lcs = lcs_length(candidate, r) as f64;
        let p = lcs / candidate.len() as f64;
        let rec = lcs / r.len() as f64;
        let f = if p == 0.0 && rec == 0.0 {
            0.0
        } else {
            (1.0 + b2) * p * rec / (rec + b2 * p)
        };
        best = best.max(f);
    }
    Ok(best)
}

/// Sentence BLEU-n: geometric mean of clipped k-gram precisions for
/// `k = 1..=n` (add-one smoothing for `k >= 2`) times the brevity penalty
/// against the closest reference length.
pub fn bleu_n<T: Ord, R: AsRef<[T]>>(candidate: &[T], references: &[R], n: usize) -> Result<f64> {
    require_refs(references)?;
    if !(1..=4).contains(&n) {
        return Err(AdcError::Validation(format!("BLEU order {n} not in 1..=4")));
    }
    if candidate.len() < n {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand = NGramCounts::new(candidate, k);
        let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
        for r in references {
            for (g, c) in NGramCounts::new(r.as_ref(), k).counts {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand
            .counts
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = cand.total();
        let p = if k == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Document frequencies of n-grams (orders 1..=4) over the reference sets
/// of a corpus; idf = ln(N / df).
#[derive(Debug, Clone)]
pub struct IdfTable<T> {
    pub num_sets: usize,
    df: Vec<BTreeMap<Vec<T>, usize>>,
}

impl<T: Ord + Clone> IdfTable<T> {
    pub fn build<R: AsRef<[T]>>(reference_sets: &[Vec<R>]) -> Self {
        let mut df: Vec<BTreeMap<Vec<T>, usize>> = vec![BTreeMap::new(); CIDER_MAX_N];
        for set in reference_sets {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: BTreeMap<&[T], ()> = BTreeMap::new();
                for r in set {
                    for g in NGramCounts::new(r.as_ref(), n + 1).counts.into_keys() {
                        seen.insert(g, ());
                    }
                }
                for g in seen.into_keys() {
                    *table.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        IdfTable {
            num_sets: reference_sets.len(),
            df,
        }
    }

    /// N-grams never seen in a reference set are treated as df = 1.
    pub fn idf(&self, gram: &[T]) -> f64 {
        let n = gram.len();
        let df = if (1..=CIDER_MAX_N).contains(&n) {
            self.df[n - 1].get(gram).copied().unwrap_or(0).max(1)
        } else {
            1
        };
        (self.num_sets.max(1) as f64 / df as f64).ln().max(0.0)
    }
}

fn tfidf<'a, T: Ord + Clone>(tokens: &'a [T], n: usize, idf: &IdfTable<T>) -> BTreeMap<&'a [T], f64> {
    NGramCounts::new(tokens, n)
        .counts
        .into_iter()
        .map(|(g, c)| (g, c as f64 * idf.idf(g)))
        .collect()
}

fn sparse_cosine<T: Ord>(a: &BTreeMap<&[T], f64>, b: &BTreeMap<&[T], f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// CIDEr of one candidate: mean over orders and references of the tf-idf
/// cosine, times 10.
pub fn cider_single<T: Ord + Clone, R: AsRef<[T]>>(candidate: &[T], references: &[R], idf: &IdfTable<T>) -> Result<f64> {
    require_refs(references)?;
    let mut total = 0.0;
    for n in 1..=CIDER_MAX_N {
        let c = tfidf(candidate, n, idf);
        let mut s = 0.0;
        for r in references {
            s += sparse_cosine(&c, &tfidf(r.as_ref(), n, idf));
        }
        total += s / references.len() as f64;
    }
    Ok(10.0 * total / CIDER_MAX_N as f64)
}

/// Corpus CIDEr: mean of per-example scores.
pub fn cider<T: Ord + Clone, R: AsRef<[T]>>(candidates: &[Vec<T>], references: &[Vec<R>], idf: &IdfTable<T>) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(AdcError::Validation(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += cider_single(c, r, idf)?;
    }
    Ok(sum / candidates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricReport {
    /// Sentence scores averaged over the corpus; CIDEr idf comes from these
    /// references.
    pub fn score<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(AdcError::Validation("candidates and references are misaligned".into()));
        }
        if candidates.is_empty() {
            return Ok(MetricReport::default());
        }
        let k = candidates.len() as f64;
        let mut bleu = [0.0; 4];
        let mut rouge = 0.0;
        for (c, r) in candidates.iter().zip(references) {
            for (n, b) in bleu.iter_mut().enumerate() {
                *b += bleu_n(c, r, n + 1)?;
            }
            rouge += rouge_l(c, r, ROUGE_BETA)?;
        }
        let idf = IdfTable::build(references);
        Ok(MetricReport {
            bleu1: bleu[0] / k,
            bleu2: bleu[1] / k,
            bleu3: bleu[2] / k,
            bleu4: bleu[3] / k,
            rouge_l: rouge / k,
            cider: cider(candidates, references, &idf)?,
        })
    }

    pub fn table(&self) -> String {
        let rows = [
            ("BLEU-1", self.bleu1),
            ("BLEU-2", self.bleu2),
            ("BLEU-3", self.bleu3),
            ("BLEU-4", self.bleu4),
            ("ROUGE-L", self.rouge_l),
            ("CIDEr", self.cider),
        ];
        let mut out = String::new();
        for (name, v) in rows {
            out.push_str(&format!("{name:<8} {v:>8.5}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(text: &str) -> Vec<&str> {
        text.split_whitespace().collect()
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length(&s("a b c"), &s("a b c")), 3);
        assert_eq!(lcs_length(&s("a b c d"), &s("a c d")), 3);
        assert_eq!(lcs_length(&s("a b"), &s("c d")), 0);
        assert_eq!(lcs_length::<&str>(&[], &s("c d")), 0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&s("a b c"), &[s("a b c")], ROUGE_BETA).unwrap(), 1.0);
        let f = rouge_l(&s("a b c d"), &[s("a c d")], 1.2).unwrap();
        // P = 3/4, R = 1: 2.44 * 0.75 / (1 + 1.44 * 0.75)
        assert!((f - 2.44 * 0.75 / 2.08).abs() < 1e-12);
        assert!((f - 0.8798).abs() < 1e-4);
        assert_eq!(rouge_l(&[], &[s("a")], 1.2).unwrap(), 0.0);
        let none: Vec<Vec<&str>> = vec![];
        assert!(rouge_l(&s("a"), &none, 1.2).is_err());
    }

    #[test]
    fn bleu_examples() {
        for n in 1..=4 {
            assert_eq!(bleu_n(&s("a b c d e"), &[s("a b c d e")], n).unwrap(), 1.0);
        }
        let b = bleu_n(&s("a b c"), &[s("a b d")], 1).unwrap();
        assert!((b - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu_n(&s("a b"), &[s("a b")], 4).unwrap(), 0.0);
        let none: Vec<Vec<&str>> = vec![];
        assert!(bleu_n(&s("a"), &none, 1).is_err());
    }

    #[test]
    fn bleu_clips_and_penalizes_brevity() {
        // "the" x3 clipped to 1 of 3
        let b = bleu_n(&s("the the the"), &[s("the cat sat")], 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
        // closest reference length 4 vs candidate 2: BP = exp(1 - 4/2)
        let b = bleu_n(&s("a b"), &[s("a b c d"), s("a b c d e f g h")], 1).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn cider_identity_with_unique_ngrams() {
        let refs = vec![vec![s("a b c d")], vec![s("e f g h")]];
        let idf = IdfTable::build(&refs);
        let c = cider(&[s("a b c d"), s("e f g h")], &refs, &idf).unwrap();
        assert!((c - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cider_disjoint_is_zero() {
        let refs = vec![vec![s("a b c d")], vec![s("e f g h")]];
        let idf = IdfTable::build(&refs);
        assert_eq!(cider_single(&s("x y z w"), &refs[0], &idf).unwrap(), 0.0);
    }

    #[test]
    fn ngram_in_every_set_has_zero_idf() {
        let refs = vec![vec![s("river a")], vec![s("river b")], vec![s("river c")]];
        let idf = IdfTable::build(&refs);
        assert_eq!(idf.idf(&["river"]), 0.0);
        assert!((idf.idf(&["a"]) - 3f64.ln()).abs() < 1e-15);
        // "river" alone carries no weight, so it contributes nothing
        assert_eq!(cider_single(&s("river"), &refs[0], &idf).unwrap(), 0.0);
    }

    #[test]
    fn cider_misaligned_is_error() {
        let refs = vec![vec![s("a")]];
        let idf = IdfTable::build(&refs);
        assert!(cider(&[s("a"), s("b")], &refs, &idf).is_err());
    }

    fn sentence() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..6, 0..9)
    }

    proptest! {
        #[test]
        fn duplicate_reference_changes_nothing(c in sentence(), r in prop::collection::vec(sentence(), 1..4)) {
            let mut dup = r.clone();
            dup.push(r[0].clone());
            for n in 1..=4 {
                prop_assert_eq!(bleu_n(&c, &r, n).unwrap(), bleu_n(&c, &dup, n).unwrap());
            }
            prop_assert_eq!(rouge_l(&c, &r, ROUGE_BETA).unwrap(), rouge_l(&c, &dup, ROUGE_BETA).unwrap());
            let idf = IdfTable::build(&[r.clone()]);
            prop_assert_eq!(cider_single(&c, &r, &idf).unwrap(), cider_single(&c, &dup, &idf).unwrap());
        }

        #[test]
        fn relabeling_tokens_changes_nothing(c in sentence(), r in prop::collection::vec(sentence(), 1..4)) {
            let relabel = |v: &Vec<u8>| v.iter().map(|t| 100 - *t).collect::<Vec<u8>>();
            let c2 = relabel(&c);
            let r2: Vec<Vec<u8>> = r.iter().map(relabel).collect();
            let m1 = MetricReport::score(&[c], &[r]).unwrap();
            let m2 = MetricReport::score(&[c2], &[r2]).unwrap();
            let pairs = [
                (m1.bleu1, m2.bleu1), (m1.bleu2, m2.bleu2), (m1.bleu3, m2.bleu3),
                (m1.bleu4, m2.bleu4), (m1.rouge_l, m2.rouge_l), (m1.cider, m2.cider),
            ];
            for (a, b) in pairs {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn scores_in_range(c in sentence(), r in prop::collection::vec(sentence(), 1..4)) {
            let m = MetricReport::score(&[c], &[r]).unwrap();
            for v in [m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((0.0..=10.0).contains(&m.cider));
        }

        #[test]
        fn candidate_equal_to_reference_scores_one(r in prop::collection::vec(sentence(), 1..4), pick in 0usize..4) {
            let c = r[pick % r.len()].clone();
            prop_assume!(!c.is_empty());
            prop_assert_eq!(rouge_l(&c, &r, ROUGE_BETA).unwrap(), 1.0);
            for n in 1..=c.len().min(4) {
                prop_assert!((bleu_n(&c, &r, n).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
