//! Training loops for the pairwise ranker, the listwise re-ranker and the
//! BCE/MSE baselines, plus a finite-difference gradient checker.
//!
//! Updates are applied once per sample (pairwise, BCE, MSE) or once per
//! candidate pool (listwise). Training is single-threaded and a pure function
//! of the prepared corpus and the configuration.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{partition_samples, RankSample};
use crate::pipeline::{pool_candidates, stage1_rank, PipelineConfig, PreparedInstance, ScoredOrder};
use crate::ranklosses::{
    bce_locator_loss, kl_listwise_loss, mse_simulator_loss, pairwise_margin_loss, top_n_labels, GoldOrder,
    LossResult, DEFAULT_BASE_MARGIN,
};
use crate::scorer::{init_model, ParameterGradient, ScoringModel, DEFAULT_HIDDEN, FEATURE_DIM};
use crate::{Error, Result};

/// Learning rate used by the reference transformer setup.
pub const TRANSFORMER_LEARNING_RATE: f64 = 5e-6;
/// Default learning rate for the feature scorer (1000x the transformer rate).
pub const DEFAULT_LEARNING_RATE: f64 = 5e-3;
pub const DEFAULT_EPOCHS: usize = 10;
/// Number of top-relevance utterances labeled positive for the BCE baseline.
pub const DEFAULT_LOCATOR_POSITIVES: usize = 8;
/// Gradient-check pass threshold on the maximum relative error.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;
/// Denominator floor of the grad-check relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Pairwise,
    Listwise,
    Bce,
    Mse,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Pairwise => "pairwise",
            Objective::Listwise => "listwise",
            Objective::Bce => "bce",
            Objective::Mse => "mse",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Objective::Pairwise),
            "listwise" => Ok(Objective::Listwise),
            "bce" | "locator" => Ok(Objective::Bce),
            "mse" | "simulator" => Ok(Objective::Mse),
            other => Err(Error::invalid(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub base_margin: f64,
    /// Listwise depth; `None` defers to the pipeline's `listwise_k`/`top_k`.
    pub listwise_k: Option<usize>,
    pub shuffle: bool,
    pub optimizer: OptimizerConfig,
    pub hidden_dims: Vec<usize>,
    pub locator_positives: usize,
    /// Label BCE positives from annotated relevant spans when present.
    pub locator_use_spans: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Pairwise,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            base_margin: DEFAULT_BASE_MARGIN,
            listwise_k: None,
            shuffle: true,
            optimizer: OptimizerConfig::Sgd,
            hidden_dims: vec![DEFAULT_HIDDEN],
            locator_positives: DEFAULT_LOCATOR_POSITIVES,
            locator_use_spans: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed: it leaves the initial model untouched.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be a finite non-negative number"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !self.base_margin.is_finite() || self.base_margin < 0.0 {
            return Err(Error::invalid("base_margin must be finite and non-negative"));
        }
        if self.listwise_k == Some(0) {
            return Err(Error::invalid("listwise_k must be at least 1"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden dimensions must be positive"));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![FEATURE_DIM];
        dims.extend(&self.hidden_dims);
        dims.push(1);
        dims
    }

    fn expect(&self, allowed: &[Objective]) -> Result<()> {
        if allowed.contains(&self.objective) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "objective {} cannot be trained here (expected one of {allowed:?})",
                self.objective
            )))
        }
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the epoch's updates, each measured before its update.
    pub mean_loss: f64,
    pub updates: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScoringModel,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    /// Loss history as CSV with an `epoch,mean_loss,updates` header.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,updates\n");
        for e in &self.history {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.updates));
        }
        out
    }
}

/// Which loss to assemble over a list of items.
#[derive(Debug, Clone, PartialEq)]
pub enum LossAssembly {
    /// Items are taken in gold order derived from the targets.
    Pairwise { base_margin: f64 },
    Listwise { k: usize },
    /// Targets ≥ 0.5 are positives.
    Bce,
    Mse,
}

impl LossAssembly {
    /// Scores `features` with `model`, evaluates the loss against `targets`
    /// and backpropagates into a parameter gradient.
    pub fn evaluate(
        &self,
        model: &ScoringModel,
        features: &[&[f64]],
        targets: &[f64],
    ) -> Result<(LossResult, ParameterGradient)> {
        if features.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                actual: targets.len(),
            });
        }
        let traces = features
            .iter()
            .map(|x| model.forward(x).map(|(_, t)| t))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = traces.iter().map(|t| t.score()).collect();
        let loss = match self {
            LossAssembly::Pairwise { base_margin } => {
                let gold = GoldOrder::from_scores(targets);
                let mut r = pairwise_margin_loss(&gold.gather(&scores), *base_margin)?;
                r.grad = gold.scatter(&r.grad);
                r
            }
            LossAssembly::Listwise { k } => kl_listwise_loss(&scores, targets, *k)?,
            LossAssembly::Bce => {
                let labels: Vec<bool> = targets.iter().map(|&t| t >= 0.5).collect();
                bce_locator_loss(&scores, &labels)?
            }
            LossAssembly::Mse => mse_simulator_loss(&scores, targets)?,
        };
        let mut grad = ParameterGradient::zeros_like(model);
        for (trace, &g) in traces.iter().zip(&loss.grad) {
            if g != 0.0 {
                model.backward_into(trace, g, &mut grad)?;
            }
        }
        Ok((loss, grad))
    }
}

struct Optimizer {
    config: OptimizerConfig,
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(config: OptimizerConfig, learning_rate: f64, n_params: usize) -> Self {
        Optimizer {
            config,
            learning_rate,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ScoringModel, grad: &ParameterGradient) -> Result<()> {
        if self.learning_rate == 0.0 {
            return Ok(());
        }
        let g = grad.flatten();
        let step: Vec<f64> = match self.config {
            OptimizerConfig::Sgd => g.iter().map(|x| self.learning_rate * x).collect(),
            OptimizerConfig::Adam { beta1, beta2, epsilon } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                g.iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * x;
                        self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * x * x;
                        let mhat = self.m[i] / bc1;
                        let vhat = self.v[i] / bc2;
                        self.learning_rate * mhat / (vhat.sqrt() + epsilon)
                    })
                    .collect()
            }
        };
        model.apply_update(&step)
    }
}

/// One unit of training work: a set of utterances of one instance and their
/// targets.
struct Batch {
    instance: usize,
    members: Vec<usize>,
    targets: Vec<f64>,
}

fn run_epochs(
    prepared: &[PreparedInstance<'_>],
    batches: &[Batch],
    assembly: impl Fn(&Batch) -> LossAssembly,
    config: &TrainConfig,
    mut model: ScoringModel,
) -> Result<TrainOutcome> {
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for &b in &order {
            let batch = &batches[b];
            let p = &prepared[batch.instance];
            let feats: Vec<&[f64]> = batch.members.iter().map(|&i| p.features[i].as_slice()).collect();
            let (loss, grad) = assembly(batch).evaluate(&model, &feats, &batch.targets)?;
            total += loss.value;
            optimizer.step(&mut model, &grad)?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / batches.len() as f64,
            updates: batches.len(),
        };
        debug!("{} epoch {epoch}: mean loss {:.6}", config.objective, stats.mean_loss);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}

fn sample_batches<'p>(
    prepared: &[PreparedInstance<'p>],
    sample_size: usize,
    targets_of: impl Fn(&PreparedInstance<'p>, &RankSample) -> Vec<f64>,
) -> Result<Vec<Batch>> {
    let mut batches = Vec::new();
    for (i, p) in prepared.iter().enumerate() {
        if p.len() < 2 {
            warn!("instance {} has fewer than 2 utterances; skipped", p.instance.instance_id);
            continue;
        }
        for s in partition_samples(p.instance, sample_size, &p.gold_relevance)? {
            batches.push(Batch {
                instance: i,
                targets: targets_of(p, &s),
                members: s.member_indices,
            });
        }
    }
    if batches.is_empty() {
        return Err(Error::validation("corpus yields no training samples"));
    }
    Ok(batches)
}

/// Trains the stage-1 ranker with the pairwise margin loss, one update per
/// sample.
pub fn train_ranker(
    prepared: &[PreparedInstance<'_>],
    config: &TrainConfig,
    pipeline: &PipelineConfig,
) -> Result<TrainOutcome> {
    config.expect(&[Objective::Pairwise])?;
    config.validate()?;
    pipeline.validate()?;
    let batches = sample_batches(prepared, pipeline.sample_size, |_, s| s.gold_relevance.clone())?;
    let margin = config.base_margin;
    run_epochs(prepared, &batches, |_| LossAssembly::Pairwise { base_margin: margin }, config, init_model(&config.layer_dims(), config.seed)?)
}

/// Seed used to initialize the re-ranker, distinct from the ranker's.
pub fn reranker_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Stage-1 candidate pools for every instance under a frozen ranker.
pub fn candidate_pools(
    prepared: &[PreparedInstance<'_>],
    ranker: &ScoringModel,
    pipeline: &PipelineConfig,
) -> Result<Vec<Vec<usize>>> {
    prepared
        .iter()
        .map(|p| {
            if p.len() < 2 {
                return Ok(Vec::new());
            }
            let samples = partition_samples(p.instance, pipeline.sample_size, &p.gold_relevance)?;
            let ranked = samples
                .iter()
                .map(|s| stage1_rank(s, ranker, p))
                .collect::<Result<Vec<ScoredOrder>>>()?;
            Ok(pool_candidates(&ranked, pipeline.per_sample_top).indices())
        })
        .collect()
}

/// Trains the stage-2 re-ranker with the top-k listwise loss on the pools
/// produced by a frozen stage-1 ranker, one update per pool.
pub fn train_reranker(
    prepared: &[PreparedInstance<'_>],
    stage1: &ScoringModel,
    config: &TrainConfig,
    pipeline: &PipelineConfig,
) -> Result<TrainOutcome> {
    config.expect(&[Objective::Listwise])?;
    config.validate()?;
    pipeline.validate()?;
    let depth = config.listwise_k.unwrap_or_else(|| pipeline.listwise_depth());
    let init = init_model(&config.layer_dims(), reranker_seed(config.seed))?;
    let pools = candidate_pools(prepared, stage1, pipeline)?;
    let mut batches = Vec::new();
    for (i, pool) in pools.into_iter().enumerate() {
        if pool.len() < 2 {
            warn!(
                "instance {}: candidate pool of {} is too small for listwise training; skipped",
                prepared[i].instance.instance_id,
                pool.len()
            );
            continue;
        }
        batches.push(Batch {
            instance: i,
            targets: pool.iter().map(|&u| prepared[i].gold_relevance[u]).collect(),
            members: pool,
        });
    }
    if batches.is_empty() {
        return Err(Error::validation("no candidate pool has at least 2 members"));
    }
    run_epochs(
        prepared,
        &batches,
        |b| LossAssembly::Listwise { k: depth.min(b.members.len()) },
        config,
        init,
    )
}

/// Trains a BCE (locator) or MSE (simulator) baseline, one update per sample.
pub fn train_baseline(
    prepared: &[PreparedInstance<'_>],
    config: &TrainConfig,
    pipeline: &PipelineConfig,
) -> Result<TrainOutcome> {
    config.expect(&[Objective::Bce, Objective::Mse])?;
    config.validate()?;
    pipeline.validate()?;
    let (batches, assembly) = match config.objective {
        Objective::Bce => {
            let positives = config.locator_positives;
            let use_spans = config.locator_use_spans;
            let batches = sample_batches(prepared, pipeline.sample_size, |p, s| {
                let labels = match (use_spans, p.instance.relevant_mask()) {
                    (true, Some(mask)) => mask,
                    _ => top_n_labels(&p.gold_relevance, positives),
                };
                s.member_indices.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect()
            })?;
            (batches, LossAssembly::Bce)
        }
        _ => (
            sample_batches(prepared, pipeline.sample_size, |_, s| s.gold_relevance.clone())?,
            LossAssembly::Mse,
        ),
    };
    run_epochs(prepared, &batches, |_| assembly.clone(), config, init_model(&config.layer_dims(), config.seed)?)
}

/// Dispatches to the trainer matching `config.objective`. The listwise
/// objective needs a stage-1 model.
pub fn train(
    prepared: &[PreparedInstance<'_>],
    config: &TrainConfig,
    pipeline: &PipelineConfig,
    stage1: Option<&ScoringModel>,
) -> Result<TrainOutcome> {
    match config.objective {
        Objective::Pairwise => train_ranker(prepared, config, pipeline),
        Objective::Listwise => {
            let stage1 = stage1.ok_or_else(|| Error::invalid("listwise training needs a stage-1 ranker"))?;
            train_reranker(prepared, stage1, config, pipeline)
        }
        Objective::Bce | Objective::Mse => train_baseline(prepared, config, pipeline),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter: Vec<f64>,
    pub threshold: f64,
    pub pass: bool,
}

/// Compares the analytic parameter gradient produced by `assembly` with
/// central finite differences over every parameter.
///
/// Relative error per parameter is `|a - n| / max(GRAD_CHECK_FLOOR, |a| + |n|)`.
pub fn grad_check<F>(model: &ScoringModel, epsilon: f64, assembly: F) -> Result<GradCheckReport>
where
    F: Fn(&ScoringModel) -> Result<(f64, ParameterGradient)>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::invalid("epsilon must be in (0, 1e-3]"));
    }
    let (_, analytic) = assembly(model)?;
    let analytic = analytic.flatten();
    let base = model.params();
    let mut probe = model.clone();
    let mut per_parameter = Vec::with_capacity(base.len());
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + epsilon;
        probe.set_params(&p)?;
        let plus = assembly(&probe)?.0;
        p[i] = base[i] - epsilon;
        probe.set_params(&p)?;
        let minus = assembly(&probe)?.0;
        let numeric = (plus - minus) / (2.0 * epsilon);
        per_parameter.push((a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR));
    }
    let max_relative_error = per_parameter.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_parameter,
        threshold: GRAD_CHECK_THRESHOLD,
        pass: max_relative_error <= GRAD_CHECK_THRESHOLD,
    })
}

/// Convenience wrapper: grad-checks a [`LossAssembly`] over fixed inputs.
pub fn grad_check_assembly(
    model: &ScoringModel,
    assembly: &LossAssembly,
    features: &[Vec<f64>],
    targets: &[f64],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let feats: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    grad_check(model, epsilon, |m| {
        assembly.evaluate(m, &feats, targets).map(|(l, g)| (l.value, g))
    })
}


/// Inputs for one gradient check.
#[derive(Debug, Clone)]
pub struct CheckPoint {
    pub model: ScoringModel,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

const KINK_CLEARANCE: f64 = 1e-3;

/// Draws a random model, features in `[0, 1)` and targets in `[0, 1)`,
/// redrawing until every pairwise hinge argument is at least `1e-3` from
/// its kink so finite differences never straddle one.
pub fn random_check_point(assembly: &LossAssembly, layer_dims: &[usize], items: usize, seed: u64) -> Result<CheckPoint> {
    if items < 2 {
        return Err(Error::invalid("a gradient check point needs at least 2 items"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let model = init_model(layer_dims, rng.random())?;
        let features: Vec<Vec<f64>> = (0..items)
            .map(|_| (0..model.input_dim()).map(|_| rng.random::<f64>()).collect())
            .collect();
        let targets: Vec<f64> = (0..items).map(|_| rng.random::<f64>()).collect();
        if let LossAssembly::Pairwise { base_margin } = assembly {
            let gold = GoldOrder::from_scores(&targets);
            let scores = gold.gather(
                &features.iter().map(|x| model.score(x)).collect::<Result<Vec<f64>>>()?,
            );
            let near_kink = (0..items).any(|i| {
                (i + 1..items).any(|j| (scores[j] - scores[i] + (j - i) as f64 * base_margin).abs() < KINK_CLEARANCE)
            });
            if near_kink {
                continue;
            }
        }
        return Ok(CheckPoint { model, features, targets });
    }
    Err(Error::invalid("could not draw a point away from the hinge kinks"))
}

impl LossAssembly {
    /// The assembly used to train `objective`.
    pub fn for_objective(objective: Objective, base_margin: f64, listwise_k: usize) -> Self {
        match objective {
            Objective::Pairwise => LossAssembly::Pairwise { base_margin },
            Objective::Listwise => LossAssembly::Listwise { k: listwise_k },
            Objective::Bce => LossAssembly::Bce,
            Objective::Mse => LossAssembly::Mse,
        }
    }
}
