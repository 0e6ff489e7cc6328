//! Ordering helpers shared by labeling, ranking and evaluation.

use std::cmp::Ordering;

/// Indices of `scores` sorted by score descending; equal scores keep
/// ascending index order.
///
/// NaN scores are ordered after every finite score.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| cmp_desc(scores[a], scores[b]).then(a.cmp(&b)));
    idx
}

/// Sorts `items` by their key descending, breaking ties by `tie` ascending.
pub fn sort_by_score_desc<T>(items: &mut [T], key: impl Fn(&T) -> f64, tie: impl Fn(&T) -> usize) {
    items.sort_by(|a, b| cmp_desc(key(a), key(b)).then(tie(a).cmp(&tie(b))));
}

fn cmp_desc(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => b.partial_cmp(&a).unwrap_or(Ordering::Equal),
    }
}

/// True when `perm` is a bijection on `0..n`.
pub fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}
