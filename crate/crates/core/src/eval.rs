//! Ranking metrics and the extractor comparison harness.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::QueryInstance;
use crate::order::argsort_desc;
use crate::par::*;
use crate::pipeline::{
    prepare_all, run_pipeline_detailed, select_topk, ExtractionResult, PipelineConfig, PreparedInstance,
    ScoredOrder,
};
use crate::rouge::{rouge_triple, RougeTriple};
use crate::scorer::ScoringModel;
use crate::trainer::{train_baseline, train_ranker, train_reranker, Objective, OptimizerConfig, TrainConfig};

/// Re-ranker learning rate used with Adam by default.
pub const DEFAULT_RERANK_LEARNING_RATE: f64 = 1e-2;
use crate::{Error, Result};

/// Normalized DCG of the first `k` items of `predicted_order`, with gain
/// equal to gold relevance and discount `1 / log2(rank + 1)`. An all-zero
/// ideal DCG yields 1.
pub fn ndcg_at_k(predicted_order: &[usize], gold_relevance: &[f64], k: usize) -> f64 {
    let dcg = |gains: &mut dyn Iterator<Item = f64>| -> f64 {
        gains
            .take(k)
            .enumerate()
            .map(|(r, g)| g / ((r + 2) as f64).log2())
            .sum()
    };
    let actual = dcg(&mut predicted_order.iter().map(|&i| gold_relevance[i]));
    let ideal = dcg(&mut argsort_desc(gold_relevance).into_iter().map(|i| gold_relevance[i]));
    if ideal <= 0.0 {
        return 1.0;
    }
    (actual / ideal).clamp(0.0, 1.0)
}

fn positions(order: &[usize]) -> Result<HashMap<usize, usize>> {
    let mut pos = HashMap::with_capacity(order.len());
    for (p, &item) in order.iter().enumerate() {
        if pos.insert(item, p).is_some() {
            return Err(Error::invalid(format!("item {item} appears twice in an order")));
        }
    }
    Ok(pos)
}

fn aligned_ranks(order_a: &[usize], order_b: &[usize]) -> Result<Vec<(usize, usize)>> {
    let pa = positions(order_a)?;
    let pb = positions(order_b)?;
    if pa.len() != pb.len() || pa.keys().any(|k| !pb.contains_key(k)) {
        return Err(Error::invalid("orders must rank the same set of items"));
    }
    Ok(order_a.iter().map(|item| (pa[item], pb[item])).collect())
}

/// Kendall's tau between two orderings of the same items:
/// `(concordant - discordant) / C(n, 2)`. Fewer than two items give 1.
pub fn kendall_tau(order_a: &[usize], order_b: &[usize]) -> Result<f64> {
    let ranks = aligned_ranks(order_a, order_b)?;
    let n = ranks.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut net: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            let da = ranks[i].0 as i64 - ranks[j].0 as i64;
            let db = ranks[i].1 as i64 - ranks[j].1 as i64;
            net += (da * db).signum();
        }
    }
    Ok(net as f64 / (n * (n - 1) / 2) as f64)
}

/// Spearman's rho between two orderings of the same items.
pub fn spearman(order_a: &[usize], order_b: &[usize]) -> Result<f64> {
    let ranks = aligned_ranks(order_a, order_b)?;
    let n = ranks.len() as f64;
    if ranks.len() < 2 {
        return Ok(1.0);
    }
    let d2: f64 = ranks.iter().map(|&(a, b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub ndcg_at_k: f64,
    pub kendall_tau: f64,
    pub spearman: f64,
}

impl RankingMetrics {
    /// Metrics of `predicted` (a total order) against the gold order.
    pub fn compute(predicted: &[usize], gold_relevance: &[f64], k: usize) -> Result<Self> {
        let gold = argsort_desc(gold_relevance);
        Ok(RankingMetrics {
            ndcg_at_k: ndcg_at_k(predicted, gold_relevance, k),
            kendall_tau: kendall_tau(predicted, &gold)?,
            spearman: spearman(predicted, &gold)?,
        })
    }
}

/// ROUGE of the top-`k` selected utterances (concatenated in transcript
/// order) against the gold summary, for each `k`. When fewer than `k`
/// utterances were selected, all of them are used.
pub fn topk_rouge_overlap(
    extraction: &ExtractionResult,
    instance: &QueryInstance,
    k_values: &[usize],
) -> Vec<(usize, RougeTriple)> {
    k_values
        .iter()
        .map(|&k| {
            let mut top: Vec<usize> = extraction.selected_indices.iter().take(k).copied().collect();
            top.sort_unstable();
            let text: Vec<&str> = top.iter().map(|&i| instance.utterances[i].text.as_str()).collect();
            (k, rouge_triple(&text.join(" "), &instance.gold_summary))
        })
        .collect()
}

/// Rows of the extractor comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extractor {
    /// Pairwise ranker followed by the listwise re-ranker.
    PairwiseListwise,
    /// Pairwise ranker with re-ranking disabled.
    PairwiseOnly,
    /// Locator baseline.
    Bce,
    /// Simulator baseline.
    Mse,
    /// Transcript order.
    Lead,
    /// Oracle order by gold relevance.
    Gold,
}

impl Extractor {
    pub const ALL: [Extractor; 6] = [
        Extractor::Gold,
        Extractor::Lead,
        Extractor::Bce,
        Extractor::Mse,
        Extractor::PairwiseOnly,
        Extractor::PairwiseListwise,
    ];

    pub fn is_trainable(self) -> bool {
        !matches!(self, Extractor::Lead | Extractor::Gold)
    }
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Extractor::PairwiseListwise => "pairwise+listwise",
            Extractor::PairwiseOnly => "pairwise-only",
            Extractor::Bce => "bce",
            Extractor::Mse => "mse",
            Extractor::Lead => "lead",
            Extractor::Gold => "gold",
        })
    }
}

impl FromStr for Extractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise+listwise" | "ranker" | "full" => Ok(Extractor::PairwiseListwise),
            "pairwise-only" | "pairwise" => Ok(Extractor::PairwiseOnly),
            "bce" | "locator" => Ok(Extractor::Bce),
            "mse" | "simulator" => Ok(Extractor::Mse),
            "lead" => Ok(Extractor::Lead),
            "gold" => Ok(Extractor::Gold),
            other => Err(Error::invalid(format!("unknown extractor {other:?}"))),
        }
    }
}

/// Everything `run_comparison` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonConfig {
    pub pipeline: PipelineConfig,
    /// Shared training settings; the objective and seed are set per row.
    pub train: TrainConfig,
    /// Re-ranker training settings; `None` reuses `train`.
    pub rerank_train: Option<TrainConfig>,
    pub seeds: Vec<u64>,
    pub rouge_k: Vec<usize>,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            rerank_train: Some(TrainConfig {
                objective: Objective::Listwise,
                learning_rate: DEFAULT_RERANK_LEARNING_RATE,
                optimizer: OptimizerConfig::adam(),
                ..TrainConfig::default()
            }),
            seeds: vec![0],
            rouge_k: vec![5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub extractor: Extractor,
    /// Mean ROUGE triple per `k` in `rouge_k`.
    pub topk_rouge: Vec<(usize, RougeTriple)>,
    pub mean_ndcg: f64,
    pub mean_tau: f64,
    pub mean_spearman: f64,
    /// Per-instance values (averaged over seeds), for external significance
    /// testing.
    pub per_instance_ndcg: Vec<f64>,
    pub per_instance_tau: Vec<f64>,
}

impl ComparisonRow {
    pub fn rouge_at(&self, k: usize) -> Option<&RougeTriple> {
        self.topk_rouge.iter().find(|(kk, _)| *kk == k).map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub corpus_id: String,
    pub config: ComparisonConfig,
    pub test_instances: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, extractor: Extractor) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.extractor == extractor)
    }

    /// Plain-text aligned table.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<18}", "extractor");
        for k in &self.config.rouge_k {
            for m in ["R-1", "R-2", "R-L"] {
                header.push_str(&format!(" {:>8}", format!("{m}@{k}")));
            }
        }
        header.push_str(&format!(" {:>8} {:>8}", format!("NDCG@{}", self.config.pipeline.top_k), "tau"));
        let mut out = String::new();
        let _ = writeln!(out, "corpus: {} ({} test instances, seeds {:?})", self.corpus_id, self.test_instances, self.config.seeds);
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{}", "-".repeat(header.len()));
        for row in &self.rows {
            let mut line = format!("{:<18}", row.extractor.to_string());
            for (_, r) in &row.topk_rouge {
                for v in [r.rouge1.f1, r.rouge2.f1, r.rouge_l.f1] {
                    line.push_str(&format!(" {:>8.2}", 100.0 * v));
                }
            }
            line.push_str(&format!(" {:>8.4} {:>8.4}", row.mean_ndcg, row.mean_tau));
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

/// Per-instance outcome of one extractor.
#[derive(Debug, Clone)]
struct InstanceEval {
    rouge: Vec<(usize, RougeTriple)>,
    metrics: RankingMetrics,
}

fn evaluate_order(
    prepared: &PreparedInstance<'_>,
    full_ranking: &[usize],
    extraction: &ExtractionResult,
    config: &ComparisonConfig,
) -> Result<InstanceEval> {
    Ok(InstanceEval {
        rouge: topk_rouge_overlap(extraction, prepared.instance, &config.rouge_k),
        metrics: RankingMetrics::compute(full_ranking, &prepared.gold_relevance, config.pipeline.top_k)?,
    })
}

/// Ranks every instance with a fixed order (gold or lead) and selects from it.
fn evaluate_fixed(
    prepared: &[PreparedInstance<'_>],
    extractor: Extractor,
    config: &ComparisonConfig,
) -> Result<Vec<InstanceEval>> {
    prepared
        .par_iter()
        .map(|p| {
            let order = match extractor {
                Extractor::Gold => ScoredOrder::from_pairs(p.gold_relevance.iter().copied().enumerate().collect()),
                _ => ScoredOrder {
                    indices: (0..p.len()).collect(),
                    scores: (0..p.len()).map(|i| -(i as f64)).collect(),
                },
            };
            let extraction = select_topk(&order, config.pipeline.top_k, config.pipeline.token_budget, p.instance);
            evaluate_order(p, &order.indices, &extraction, config)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Runs the pipeline with the given models on every test instance.
pub fn evaluate_models(
    prepared: &[PreparedInstance<'_>],
    ranker: &ScoringModel,
    reranker: Option<&ScoringModel>,
    pipeline: &PipelineConfig,
    rouge_k: &[usize],
) -> Result<Vec<(Vec<(usize, RougeTriple)>, RankingMetrics)>> {
    prepared
        .par_iter()
        .map(|p| {
            let run = run_pipeline_detailed(p, ranker, reranker, pipeline)?;
            Ok((
                topk_rouge_overlap(&run.extraction, p.instance, rouge_k),
                RankingMetrics::compute(&run.full_ranking(), &p.gold_relevance, pipeline.top_k)?,
            ))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn evaluate_trained(
    test: &[PreparedInstance<'_>],
    models: &TrainedModels,
    extractor: Extractor,
    config: &ComparisonConfig,
) -> Result<Vec<InstanceEval>> {
    let (ranker, reranker, rerank) = match extractor {
        Extractor::PairwiseListwise => (&models.ranker, models.reranker.as_ref(), true),
        Extractor::PairwiseOnly => (&models.ranker, None, false),
        Extractor::Bce => (models.bce.as_ref().expect("trained"), None, false),
        Extractor::Mse => (models.mse.as_ref().expect("trained"), None, false),
        _ => unreachable!("fixed extractors are evaluated separately"),
    };
    let pipeline = PipelineConfig {
        rerank_enabled: rerank,
        ..config.pipeline.clone()
    };
    Ok(evaluate_models(test, ranker, reranker, &pipeline, &config.rouge_k)?
        .into_iter()
        .map(|(rouge, metrics)| InstanceEval { rouge, metrics })
        .collect())
}

struct TrainedModels {
    ranker: ScoringModel,
    reranker: Option<ScoringModel>,
    bce: Option<ScoringModel>,
    mse: Option<ScoringModel>,
}

fn train_for_seed(
    train: &[PreparedInstance<'_>],
    extractors: &[Extractor],
    config: &ComparisonConfig,
    seed: u64,
) -> Result<TrainedModels> {
    let with = |objective: Objective, base: &TrainConfig| TrainConfig {
        objective,
        seed,
        ..base.clone()
    };
    let needs = |e: Extractor| extractors.contains(&e);
    let ranker = train_ranker(train, &with(Objective::Pairwise, &config.train), &config.pipeline)?.model;
    let reranker = if needs(Extractor::PairwiseListwise) {
        let base = config.rerank_train.as_ref().unwrap_or(&config.train);
        Some(train_reranker(train, &ranker, &with(Objective::Listwise, base), &config.pipeline)?.model)
    } else {
        None
    };
    let baseline = |e: Extractor, o: Objective| -> Result<Option<ScoringModel>> {
        if needs(e) {
            Ok(Some(train_baseline(train, &with(o, &config.train), &config.pipeline)?.model))
        } else {
            Ok(None)
        }
    };
    Ok(TrainedModels {
        ranker,
        reranker,
        bce: baseline(Extractor::Bce, Objective::Bce)?,
        mse: baseline(Extractor::Mse, Objective::Mse)?,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn summarize(extractor: Extractor, runs: &[Vec<InstanceEval>], rouge_k: &[usize]) -> ComparisonRow {
    let n_inst = runs.first().map_or(0, Vec::len);
    let per_instance = |f: &dyn Fn(&InstanceEval) -> f64| -> Vec<f64> {
        (0..n_inst).map(|i| mean(runs.iter().map(|r| f(&r[i])))).collect()
    };
    let ndcg = per_instance(&|e| e.metrics.ndcg_at_k);
    let tau = per_instance(&|e| e.metrics.kendall_tau);
    let rho = per_instance(&|e| e.metrics.spearman);
    let topk_rouge = rouge_k
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let avg = |f: &dyn Fn(&RougeTriple) -> (f64, f64, f64)| -> (f64, f64, f64) {
                let all: Vec<(f64, f64, f64)> = runs.iter().flatten().map(|e| f(&e.rouge[ki].1)).collect();
                (
                    mean(all.iter().map(|t| t.0)),
                    mean(all.iter().map(|t| t.1)),
                    mean(all.iter().map(|t| t.2)),
                )
            };
            let score = |sel: fn(&RougeTriple) -> &crate::rouge::RougeScore| {
                let (p, r, f) = avg(&|t| {
                    let s = sel(t);
                    (s.precision, s.recall, s.f1)
                });
                crate::rouge::RougeScore { precision: p, recall: r, f1: f }
            };
            (
                k,
                RougeTriple {
                    rouge1: score(|t| &t.rouge1),
                    rouge2: score(|t| &t.rouge2),
                    rouge_l: score(|t| &t.rouge_l),
                },
            )
        })
        .collect();
    ComparisonRow {
        extractor,
        topk_rouge,
        mean_ndcg: mean(ndcg.iter().copied()),
        mean_tau: mean(tau.iter().copied()),
        mean_spearman: mean(rho.iter().copied()),
        per_instance_ndcg: ndcg,
        per_instance_tau: tau,
    }
}

/// Trains every requested extractor on `train` for each seed, runs the
/// pipeline on `test` and reports ROUGE overlap and rank metrics. Trainable
/// rows average over seeds; Gold and Lead rows are seed-independent.
pub fn run_comparison(
    corpus_id: &str,
    train: &[QueryInstance],
    test: &[QueryInstance],
    extractors: &[Extractor],
    config: &ComparisonConfig,
) -> Result<ComparisonReport> {
    config.pipeline.validate()?;
    config.train.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    if test.is_empty() {
        return Err(Error::validation("test split is empty"));
    }
    let train_p = prepare_all(train);
    let test_p = prepare_all(test);

    let trainable: Vec<Extractor> = extractors.iter().copied().filter(|e| e.is_trainable()).collect();
    let per_seed: Vec<TrainedModels> = if trainable.is_empty() {
        Vec::new()
    } else {
        config
            .seeds
            .par_iter()
            .map(|&seed| train_for_seed(&train_p, &trainable, config, seed))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?
    };

    let mut rows = Vec::new();
    for &extractor in Extractor::ALL.iter().filter(|e| extractors.contains(e)) {
        let runs = if extractor.is_trainable() {
            per_seed
                .iter()
                .map(|m| evaluate_trained(&test_p, m, extractor, config))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![evaluate_fixed(&test_p, extractor, config)?]
        };
        rows.push(summarize(extractor, &runs, &config.rouge_k));
    }
    Ok(ComparisonReport {
        corpus_id: corpus_id.to_string(),
        config: config.clone(),
        test_instances: test.len(),
        rows,
    })
}
