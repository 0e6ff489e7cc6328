//! ROUGE-1/2/L with a deterministic tokenizer.
//!
//! Used twice: as the source of gold relevance labels (utterance vs. gold
//! summary) and as the extractor-quality metric. No stemming and no stopword
//! removal.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::order::argsort_desc;
use crate::{Error, Result};

/// Lowercased tokens with no whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Builds a sequence from raw tokens, lowercasing each and rejecting
    /// tokens that contain whitespace or are empty.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut out = Vec::with_capacity(tokens.len());
        for t in tokens {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid token {t:?}")));
            }
            out.push(t.to_lowercase());
        }
        Ok(TokenSequence(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }

    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self::from_pr(
            ratio(overlap, candidate_total),
            ratio(overlap, reference_total),
        )
    }
}

/// ROUGE-1, ROUGE-2 and ROUGE-L for one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

impl RougeTriple {
    pub fn mean_f1(&self) -> f64 {
        (self.rouge1.f1 + self.rouge2.f1 + self.rouge_l.f1) / 3.0
    }
}

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
    )
}

/// Multiset of contiguous n-grams.
pub fn ngram_counts(tokens: &TokenSequence, n: usize) -> Result<HashMap<&[String], usize>> {
    if n == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    let mut counts = HashMap::new();
    for gram in tokens.0.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    Ok(counts)
}

fn clipped_overlap(cand: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    cand.iter()
        .map(|(gram, &c)| reference.get(gram).map_or(0, |&r| c.min(r)))
        .sum()
}

pub fn rouge_n_tokens(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> Result<RougeScore> {
    let cand = ngram_counts(candidate, n)?;
    let refc = ngram_counts(reference, n)?;
    let overlap = clipped_overlap(&cand, &refc);
    let total = |len: usize| (len + 1).saturating_sub(n);
    Ok(RougeScore::from_counts(
        overlap,
        total(candidate.len()),
        total(reference.len()),
    ))
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<RougeScore> {
    rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n)
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) memory.
pub fn lcs_length(a: &TokenSequence, b: &TokenSequence) -> usize {
    lcs_slices(&a.0, &b.0)
}

fn lcs_slices<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_tokens(candidate: &TokenSequence, reference: &TokenSequence) -> RougeScore {
    let lcs = lcs_length(candidate, reference);
    RougeScore::from_counts(lcs, candidate.len(), reference.len())
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn rouge_triple_tokens(candidate: &TokenSequence, reference: &TokenSequence) -> RougeTriple {
    RougeTriple {
        rouge1: rouge_n_tokens(candidate, reference, 1).expect("n = 1"),
        rouge2: rouge_n_tokens(candidate, reference, 2).expect("n = 2"),
        rouge_l: rouge_l_tokens(candidate, reference),
    }
}

pub fn rouge_triple(candidate: &str, reference: &str) -> RougeTriple {
    rouge_triple_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Gold relevance label: mean of ROUGE-1, ROUGE-2 and ROUGE-L F1 against the
/// gold summary.
pub fn gold_relevance(utterance: &str, gold_summary: &str) -> f64 {
    rouge_triple(utterance, gold_summary).mean_f1()
}

pub fn gold_relevance_tokens(utterance: &TokenSequence, gold_summary: &TokenSequence) -> f64 {
    rouge_triple_tokens(utterance, gold_summary).mean_f1()
}

/// Utterance indices by gold relevance descending, ties by transcript index.
pub fn gold_order<S: AsRef<str>>(utterances: &[S], gold_summary: &str) -> Result<Vec<usize>> {
    if utterances.is_empty() {
        return Err(Error::invalid("gold order needs at least one utterance"));
    }
    let summary = tokenize(gold_summary);
    let relevance: Vec<f64> = utterances
        .iter()
        .map(|u| gold_relevance_tokens(&tokenize(u.as_ref()), &summary))
        .collect();
    Ok(argsort_desc(&relevance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> TokenSequence {
        TokenSequence::from_tokens(s).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    // Exponential LCS oracle: longest subsequence of `a` (by bitmask) that is
    // also a subsequence of `b`.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let is_subseq = |sub: &[u8]| {
            let mut it = b.iter();
            sub.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..(1 << a.len()))
            .filter_map(|mask| {
                let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
                is_subseq(&sub).then_some(sub.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("The cat sat.").tokens(), ["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("don't stop").tokens(), ["don", "t", "stop"]);
        assert_eq!(tokenize("Room 101, ÉTÉ").tokens(), ["room", "101", "été"]);
    }

    #[test]
    fn ngram_counting() {
        let t = toks(&["a", "b", "a"]);
        let uni = ngram_counts(&t, 1).unwrap();
        assert_eq!(uni.len(), 2);
        assert_eq!(uni[&["a".to_string()][..]], 2);
        assert_eq!(uni[&["b".to_string()][..]], 1);
        let bi = ngram_counts(&t, 2).unwrap();
        assert_eq!(bi.len(), 2);
        assert!(bi.values().all(|&c| c == 1));
        assert!(ngram_counts(&toks(&["a"]), 2).unwrap().is_empty());
        assert!(ngram_counts(&t, 0).is_err());
    }

    #[test]
    fn rouge_n_fixtures() {
        assert_eq!(rouge_n("the cat sat", "the cat sat", 1).unwrap().f1, 1.0);
        assert_eq!(rouge_n("a b", "c d", 1).unwrap().f1, 0.0);
        let s = rouge_n("the cat", "the cat sat", 1).unwrap();
        assert_eq!(s.precision, 1.0);
        assert!(close(s.recall, 2.0 / 3.0));
        assert!(close(s.f1, 0.8));
        assert_eq!(rouge_n("", "", 2).unwrap(), RougeScore::default());
    }

    #[test]
    fn clipping_limits_repeated_ngrams() {
        // candidate "the the the" vs reference "the cat": overlap clipped to 1.
        let s = rouge_n("the the the", "the cat", 1).unwrap();
        assert!(close(s.precision, 1.0 / 3.0));
        assert!(close(s.recall, 0.5));
    }

    #[test]
    fn lcs_fixtures() {
        let x = toks(&["a", "b", "c", "d", "e"]);
        assert_eq!(lcs_length(&x, &toks(&["a", "c", "e"])), 3);
        assert_eq!(brute_lcs(b"abcde", b"ace"), 3);
        assert_eq!(lcs_length(&x, &x), 5);
        assert_eq!(lcs_length(&x, &TokenSequence::default()), 0);
    }

    #[test]
    fn rouge_l_fixtures() {
        assert_eq!(rouge_l("x y z", "x y z").f1, 1.0);
        assert_eq!(rouge_l("x y", "p q").f1, 0.0);
        let s = rouge_l("a b c", "a c");
        assert!(close(s.precision, 2.0 / 3.0));
        assert_eq!(s.recall, 1.0);
        assert!(close(s.f1, 0.8));
    }

    #[test]
    fn gold_relevance_fixtures() {
        assert_eq!(gold_relevance("the cat sat", "the cat sat"), 1.0);
        assert_eq!(gold_relevance("a b", "c d"), 0.0);
        // Hand oracle for ("the cat sat", "the cat sat on the mat"):
        // R-1: overlap 3 of 3 / 6 -> F1 2/3
        // R-2: overlap 2 of 2 / 5 -> F1 2*(1*0.4)/1.4 = 4/7
        // R-L: LCS 3 of 3 / 6 -> F1 2/3
        let expected = (2.0 / 3.0 + 4.0 / 7.0 + 2.0 / 3.0) / 3.0;
        assert!(close(gold_relevance("the cat sat", "the cat sat on the mat"), expected));
    }

    #[test]
    fn gold_order_fixtures() {
        // Relevance [0.2, 0.9, 0.5] realized with texts of known overlap.
        let summary = "alpha beta gamma delta epsilon zeta eta theta iota kappa";
        let utts = ["alpha zzz yyy xxx www", "alpha beta gamma delta epsilon", "alpha beta qqq"];
        let rel: Vec<f64> = utts.iter().map(|u| gold_relevance(u, summary)).collect();
        assert!(rel[1] > rel[2] && rel[2] > rel[0]);
        assert_eq!(gold_order(&utts, summary).unwrap(), vec![1, 2, 0]);

        let same = ["q", "q", "q", "q"];
        assert_eq!(gold_order(&same, "q").unwrap(), vec![0, 1, 2, 3]);
        assert!(gold_order::<&str>(&[], "q").is_err());
    }

    #[test]
    fn gold_order_matches_sort_oracle() {
        let summary = "we agreed the remote should use a rubber case and a simple button layout";
        let utts = [
            "okay so the remote",
            "rubber case is nice",
            "I think simple",
            "button layout should be simple",
            "lunch",
            "we agreed on rubber",
            "the case and the button",
            "no idea",
        ];
        let rel: Vec<f64> = utts.iter().map(|u| gold_relevance(u, summary)).collect();
        // Independent selection-sort oracle.
        let mut remaining: Vec<usize> = (0..utts.len()).collect();
        let mut oracle = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for (pos, &i) in remaining.iter().enumerate() {
                let b = remaining[best];
                if rel[i] > rel[b] || (rel[i] == rel[b] && i < b) {
                    best = pos;
                }
            }
            oracle.push(remaining.remove(best));
        }
        assert_eq!(gold_order(&utts, summary).unwrap(), oracle);
    }

    #[test]
    fn lcs_matches_brute_force_exhaustively_small() {
        // All pairs over {a,b,c} with lengths <= 4 (full <= 8 sweep lives in
        // the acceptance suite).
        let mut seqs: Vec<Vec<u8>> = vec![vec![]];
        for len in 1..=4 {
            let mut idx = vec![0usize; len];
            loop {
                seqs.push(idx.iter().map(|&i| b"abc"[i]).collect());
                let mut p = 0;
                while p < len {
                    idx[p] += 1;
                    if idx[p] < 3 {
                        break;
                    }
                    idx[p] = 0;
                    p += 1;
                }
                if p == len {
                    break;
                }
            }
        }
        for a in &seqs {
            for b in &seqs {
                assert_eq!(lcs_slices(a, b), brute_lcs(a, b), "{a:?} {b:?}");
            }
        }
    }

    fn text() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "the", "x1"]), 0..12)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn f1_symmetry_and_range(a in text(), b in text(), n in 1usize..4) {
            let ab = rouge_n(&a, &b, n).unwrap();
            let ba = rouge_n(&b, &a, n).unwrap();
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
            prop_assert!((ab.precision - ba.recall).abs() < 1e-12);
            for v in [ab.precision, ab.recall, ab.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let lab = rouge_l(&a, &b);
            let lba = rouge_l(&b, &a);
            prop_assert!((lab.f1 - lba.f1).abs() < 1e-12);
            prop_assert!((lab.precision - lba.recall).abs() < 1e-12);
        }

        #[test]
        fn self_overlap_is_one(a in text(), n in 1usize..4) {
            prop_assume!(tokenize(&a).len() >= n);
            prop_assert_eq!(rouge_n(&a, &a, n).unwrap().f1, 1.0);
        }

        #[test]
        fn lcs_bounded(a in text(), b in text()) {
            let (ta, tb) = (tokenize(&a), tokenize(&b));
            prop_assert!(lcs_length(&ta, &tb) <= ta.len().min(tb.len()));
        }

        #[test]
        fn gold_order_is_sorted_permutation(utts in prop::collection::vec(text(), 1..10), summary in text()) {
            let order = gold_order(&utts, &summary).unwrap();
            prop_assert!(crate::order::is_permutation(&order, utts.len()));
            let rel: Vec<f64> = order.iter().map(|&i| gold_relevance(&utts[i], &summary)).collect();
            prop_assert!(rel.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
