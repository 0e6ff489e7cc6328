//! Training objectives over a vector of predicted scores.
//!
//! Every loss returns its value together with the gradient with respect to
//! the score vector; the scorer's backward pass turns that into parameter
//! gradients.
//!
//! * [`pairwise_margin_loss`]: hinge over all gold-ordered pairs with a
//!   rank-distance margin `(j - i) * λ`.
//! * [`perm_prob`] / [`topk_perm_prob`] / [`topk_distribution`]: Plackett-Luce
//!   permutation probabilities with `φ = exp`.
//! * [`kl_listwise_loss`]: `Σ_i P*_i log(P*_i / P_i)` between the gold and
//!   predicted top-1..top-k distributions along the gold permutation.
//! * [`bce_locator_loss`] and [`mse_simulator_loss`]: the classification and
//!   regression baselines.

use serde::{Deserialize, Serialize};

use crate::order::{argsort_desc, is_permutation};
use crate::{Error, Result};

/// Default base margin for the pairwise loss.
pub const DEFAULT_BASE_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Items sorted by gold score descending (ties by position) with the gold
/// scores aligned to the original positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldOrder {
    pub permutation: Vec<usize>,
    pub gold_scores: Vec<f64>,
}

impl GoldOrder {
    pub fn from_scores(gold_scores: &[f64]) -> Self {
        GoldOrder {
            permutation: argsort_desc(gold_scores),
            gold_scores: gold_scores.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    /// `values` re-indexed into gold order.
    pub fn gather(&self, values: &[f64]) -> Vec<f64> {
        self.permutation.iter().map(|&i| values[i]).collect()
    }

    /// Inverse of [`GoldOrder::gather`]: maps a gold-ordered vector back to
    /// original positions.
    pub fn scatter(&self, in_gold_order: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; in_gold_order.len()];
        for (rank, &i) in self.permutation.iter().enumerate() {
            out[i] = in_gold_order[rank];
        }
        out
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// Pairwise margin ranking loss.
///
/// `scores[i]` is the predicted score of the item at gold rank `i`. The value
/// is `Σ_{i<j} max(0, s_j - s_i + (j - i)·λ)`. At the hinge kink the
/// subgradient is taken as 0.
pub fn pairwise_margin_loss(scores: &[f64], base_margin: f64) -> Result<LossResult> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::invalid("pairwise loss needs at least two scores"));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let h = scores[j] - scores[i] + (j - i) as f64 * base_margin;
            if h > 0.0 {
                value += h;
                grad[j] += 1.0;
                grad[i] -= 1.0;
            }
        }
    }
    Ok(LossResult { value, grad })
}

/// Natural-log factors `log φ(s_π(j)) - log Σ_{t≥j} φ(s_π(t))` for
/// `j < k`, plus the suffix softmax weights needed by the gradient.
struct PlackettLuce {
    /// `exp(s - max)` in permutation order.
    phi: Vec<f64>,
    /// `Σ_{t≥j} phi[t]`.
    suffix: Vec<f64>,
}

impl PlackettLuce {
    fn new(scores: &[f64], pi: &[usize]) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let phi: Vec<f64> = pi.iter().map(|&i| (scores[i] - max).exp()).collect();
        let mut suffix = vec![0.0; phi.len()];
        let mut acc = 0.0;
        for j in (0..phi.len()).rev() {
            acc += phi[j];
            suffix[j] = acc;
        }
        PlackettLuce { phi, suffix }
    }

    fn ratio(&self, j: usize) -> f64 {
        self.phi[j] / self.suffix[j]
    }

    fn log_ratio(&self, j: usize) -> f64 {
        self.phi[j].ln() - self.suffix[j].ln()
    }
}

fn check_perm(scores: &[f64], pi: &[usize]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("permutation probability needs at least one score"));
    }
    if !is_permutation(pi, scores.len()) {
        return Err(Error::invalid(format!(
            "{pi:?} is not a permutation of 0..{}",
            scores.len()
        )));
    }
    Ok(())
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} out of range 1..={n}")));
    }
    Ok(())
}

/// Probability of the full permutation `pi` under `φ = exp`.
pub fn perm_prob(scores: &[f64], pi: &[usize]) -> Result<f64> {
    topk_perm_prob(scores, pi, scores.len())
}

/// Probability that the first `k` positions of a Plackett-Luce draw equal
/// the first `k` entries of `pi`.
pub fn topk_perm_prob(scores: &[f64], pi: &[usize], k: usize) -> Result<f64> {
    check_perm(scores, pi)?;
    check_k(k, scores.len())?;
    let pl = PlackettLuce::new(scores, pi);
    Ok((0..k).fold(1.0, |p, j| p * pl.ratio(j)))
}

/// `(P^1, …, P^k)` where `P^j = topk_perm_prob(scores, reference_pi, j)`.
pub fn topk_distribution(scores: &[f64], reference_pi: &[usize], k: usize) -> Result<Vec<f64>> {
    check_perm(scores, reference_pi)?;
    check_k(k, scores.len())?;
    let pl = PlackettLuce::new(scores, reference_pi);
    let mut p = 1.0;
    Ok((0..k)
        .map(|j| {
            p *= pl.ratio(j);
            p
        })
        .collect())
}

/// Top-k listwise KL loss between gold and predicted distributions.
///
/// The reference permutation is the gold order (gold scores descending, ties
/// by position). Both `(P^1..P^k)` vectors are taken along it and compared
/// with `Σ_i P*_i · log(P*_i / P_i)`. The vectors are not normalized, so the
/// value can be negative; it is zero when the predictions equal the gold
/// scores up to an additive constant.
pub fn kl_listwise_loss(pred_scores: &[f64], gold_scores: &[f64], k: usize) -> Result<LossResult> {
    let n = pred_scores.len();
    check_len(n, gold_scores.len())?;
    if n < 2 {
        return Err(Error::invalid("listwise loss needs at least two scores"));
    }
    check_k(k, n)?;
    let pi = argsort_desc(gold_scores);
    let gold = PlackettLuce::new(gold_scores, &pi);
    let pred = PlackettLuce::new(pred_scores, &pi);

    // Work in log space: log P^i is a prefix sum of log ratios.
    let mut log_gold = 0.0;
    let mut log_pred = 0.0;
    let mut value = 0.0;
    let mut gold_mass = Vec::with_capacity(k);
    for j in 0..k {
        log_gold += gold.log_ratio(j);
        log_pred += pred.log_ratio(j);
        let p_gold = log_gold.exp();
        value += p_gold * (log_gold - log_pred);
        gold_mass.push(p_gold);
    }

    // ∂L/∂s_m = -Σ_{j<k} w_j (1{π(j)=m} - q_j(m)), with w_j = Σ_{i≥j} P*_i
    // and q_j(m) the softmax weight of m over the suffix starting at j.
    let mut w = vec![0.0; k];
    let mut acc = 0.0;
    for j in (0..k).rev() {
        acc += gold_mass[j];
        w[j] = acc;
    }
    // Accumulate in permutation order, then scatter.
    let mut grad_perm = vec![0.0; n];
    let mut coeff = 0.0; // Σ_{j ≤ t, j < k} w_j / suffix_j
    for t in 0..n {
        if t < k {
            coeff += w[t] / pred.suffix[t];
            grad_perm[t] -= w[t];
        }
        grad_perm[t] += pred.phi[t] * coeff;
    }
    let mut grad = vec![0.0; n];
    for (pos, &i) in pi.iter().enumerate() {
        grad[i] = grad_perm[pos];
    }
    Ok(LossResult { value, grad })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of `sigmoid(scores)` against `labels`.
pub fn bce_locator_loss(scores: &[f64], labels: &[bool]) -> Result<LossResult> {
    check_len(scores.len(), labels.len())?;
    if scores.is_empty() {
        return Err(Error::invalid("BCE loss needs at least one score"));
    }
    let n = scores.len() as f64;
    let mut value = 0.0;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let y = if y { 1.0 } else { 0.0 };
            // -[y log σ(s) + (1-y) log(1-σ(s))] = softplus(s) - y·s
            value += softplus(s) - y * s;
            (sigmoid(s) - y) / n
        })
        .collect();
    Ok(LossResult { value: value / n, grad })
}

/// Mean squared error against gold relevance.
pub fn mse_simulator_loss(scores: &[f64], gold_relevance: &[f64]) -> Result<LossResult> {
    check_len(scores.len(), gold_relevance.len())?;
    if scores.is_empty() {
        return Err(Error::invalid("MSE loss needs at least one score"));
    }
    let n = scores.len() as f64;
    let value = scores.iter().zip(gold_relevance).map(|(s, g)| (s - g) * (s - g)).sum::<f64>() / n;
    let grad = scores.iter().zip(gold_relevance).map(|(s, g)| 2.0 * (s - g) / n).collect();
    Ok(LossResult { value, grad })
}

/// Locator labels: the `positives` highest-relevance items are positive.
pub fn top_n_labels(gold_relevance: &[f64], positives: usize) -> Vec<bool> {
    let mut labels = vec![false; gold_relevance.len()];
    for &i in argsort_desc(gold_relevance).iter().take(positives) {
        labels[i] = true;
    }
    labels
}
