//! Two-stage extraction: rank each sample, pool the per-sample leaders,
//! re-rank the pool globally, then pick the top utterances under a token
//! budget and assemble the generator input.

use serde::{Deserialize, Serialize};

use crate::corpus::{partition_samples, QueryInstance, RankSample, DEFAULT_SAMPLE_SIZE};
use crate::order::sort_by_score_desc;
use crate::par::*;
use crate::ranklosses::DEFAULT_BASE_MARGIN;
use crate::rouge::{gold_relevance_tokens, tokenize};
use crate::scorer::{featurize_instance, FeatureVector, ScoringModel};
use crate::{Error, Result};

/// Default generator input budget, in whitespace-delimited tokens.
pub const DEFAULT_TOKEN_BUDGET: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sample_size: usize,
    pub per_sample_top: usize,
    pub top_k: usize,
    /// Depth of the listwise objective; `None` means `top_k`.
    pub listwise_k: Option<usize>,
    pub base_margin: f64,
    pub token_budget: usize,
    pub rerank_enabled: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sample_size: DEFAULT_SAMPLE_SIZE,
            per_sample_top: 4,
            top_k: 10,
            listwise_k: None,
            base_margin: DEFAULT_BASE_MARGIN,
            token_budget: DEFAULT_TOKEN_BUDGET,
            rerank_enabled: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 2 {
            return Err(Error::invalid("sample_size must be at least 2"));
        }
        if self.per_sample_top == 0 || self.per_sample_top > self.sample_size {
            return Err(Error::invalid(format!(
                "per_sample_top must be in 1..={}, got {}",
                self.sample_size, self.per_sample_top
            )));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        if self.listwise_k == Some(0) {
            return Err(Error::invalid("listwise_k must be at least 1"));
        }
        if self.token_budget == 0 {
            return Err(Error::invalid("token_budget must be at least 1"));
        }
        if !self.base_margin.is_finite() || self.base_margin < 0.0 {
            return Err(Error::invalid("base_margin must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn listwise_depth(&self) -> usize {
        self.listwise_k.unwrap_or(self.top_k)
    }
}

/// An instance with its features, gold labels and line token counts
/// precomputed.
#[derive(Debug, Clone)]
pub struct PreparedInstance<'a> {
    pub instance: &'a QueryInstance,
    pub features: Vec<FeatureVector>,
    pub gold_relevance: Vec<f64>,
    /// Whitespace token count of each `SPEAKER: text` line.
    pub line_tokens: Vec<usize>,
}

impl<'a> PreparedInstance<'a> {
    pub fn new(instance: &'a QueryInstance) -> Self {
        let summary = tokenize(&instance.gold_summary);
        PreparedInstance {
            features: featurize_instance(instance),
            gold_relevance: instance
                .utterances
                .iter()
                .map(|u| gold_relevance_tokens(&tokenize(&u.text), &summary))
                .collect(),
            line_tokens: instance
                .utterances
                .iter()
                .map(|u| count_tokens(&utterance_line(&u.speaker, &u.text)))
                .collect(),
            instance,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Prepares every instance, fanning out across threads when available.
pub fn prepare_all(instances: &[QueryInstance]) -> Vec<PreparedInstance<'_>> {
    instances.par_iter().map(PreparedInstance::new).collect()
}

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn utterance_line(speaker: &str, text: &str) -> String {
    format!("{}: {}", normalize_ws(speaker), normalize_ws(text))
}

/// Items in rank order with their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOrder {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoredOrder {
    /// Sorts `(index, score)` pairs by score descending, ties by index.
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        sort_by_score_desc(&mut pairs, |p| p.1, |p| p.0);
        let (indices, scores) = pairs.into_iter().unzip();
        ScoredOrder { indices, scores }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Scores the given utterances of `prepared` with `model`.
pub fn score_utterances(model: &ScoringModel, prepared: &PreparedInstance<'_>, indices: &[usize]) -> Result<Vec<f64>> {
    indices.iter().map(|&i| model.score(&prepared.features[i])).collect()
}

/// Orders the members of one sample by predicted score.
pub fn stage1_rank(sample: &RankSample, ranker: &ScoringModel, prepared: &PreparedInstance<'_>) -> Result<ScoredOrder> {
    let scores = score_utterances(ranker, prepared, &sample.member_indices)?;
    Ok(ScoredOrder::from_pairs(
        sample.member_indices.iter().copied().zip(scores).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub utterance_index: usize,
    /// Which sample the candidate came from.
    pub sample: usize,
    /// Zero-based rank within that sample.
    pub stage1_rank: usize,
    pub stage1_score: f64,
}

/// Pooled candidates, ascending by utterance index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn indices(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.utterance_index).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// The pool ordered by stage-1 scores: the re-ranking-disabled path.
    pub fn stage1_order(&self) -> ScoredOrder {
        ScoredOrder::from_pairs(self.candidates.iter().map(|c| (c.utterance_index, c.stage1_score)).collect())
    }
}

/// Union of the top `per_sample_top` members of each ranked sample. An
/// utterance seen in more than one sample keeps its first occurrence.
pub fn pool_candidates(ranked: &[ScoredOrder], per_sample_top: usize) -> CandidatePool {
    let mut candidates: Vec<Candidate> = Vec::new();
    for (sample, order) in ranked.iter().enumerate() {
        for (rank, (&idx, &score)) in order.indices.iter().zip(&order.scores).take(per_sample_top).enumerate() {
            if candidates.iter().all(|c| c.utterance_index != idx) {
                candidates.push(Candidate {
                    utterance_index: idx,
                    sample,
                    stage1_rank: rank,
                    stage1_score: score,
                });
            }
        }
    }
    candidates.sort_by_key(|c| c.utterance_index);
    CandidatePool { candidates }
}

/// Global order of the pool under the re-ranker.
pub fn stage2_rerank(pool: &CandidatePool, reranker: &ScoringModel, prepared: &PreparedInstance<'_>) -> Result<ScoredOrder> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot re-rank an empty candidate pool"));
    }
    let idx = pool.indices();
    let scores = score_utterances(reranker, prepared, &idx)?;
    Ok(ScoredOrder::from_pairs(idx.into_iter().zip(scores).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub instance_id: String,
    /// Selected utterances in rank order.
    pub selected_indices: Vec<usize>,
    pub selection_scores: Vec<f64>,
    /// Query, a blank separator line, then the selected utterances in
    /// transcript order as `SPEAKER: text` lines.
    pub generator_input: String,
    /// Set when the first candidate alone exceeded the budget and was cut.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage1_orders: Vec<Vec<usize>>,
}

impl ExtractionResult {
    /// Selected indices re-sorted into transcript order.
    pub fn transcript_order(&self) -> Vec<usize> {
        let mut v = self.selected_indices.clone();
        v.sort_unstable();
        v
    }
}

/// Greedy walk down `order`: keep utterances while fewer than `top_k` are
/// selected and the running token count (query plus `SPEAKER: text` lines)
/// stays within `token_budget`. Stops at the first utterance that does not
/// fit. If that is the very first one, it is truncated to fit and the result
/// is flagged.
pub fn select_topk(
    order: &ScoredOrder,
    top_k: usize,
    token_budget: usize,
    instance: &QueryInstance,
) -> ExtractionResult {
    let mut query_line = normalize_ws(&instance.query);
    let mut used = count_tokens(&query_line);
    let mut picked: Vec<(usize, f64)> = Vec::new();
    let mut truncated_line: Option<(usize, String)> = None;

    for (&idx, &score) in order.indices.iter().zip(&order.scores) {
        if picked.len() >= top_k {
            break;
        }
        let u = &instance.utterances[idx];
        let line = utterance_line(&u.speaker, &u.text);
        let t = count_tokens(&line);
        if used + t <= token_budget {
            used += t;
            picked.push((idx, score));
            continue;
        }
        if picked.is_empty() {
            let room = token_budget.saturating_sub(used);
            if room > 0 {
                let cut: Vec<&str> = line.split_whitespace().take(room).collect();
                truncated_line = Some((idx, cut.join(" ")));
                picked.push((idx, score));
            } else {
                let cut: Vec<&str> = query_line.split_whitespace().take(token_budget).collect();
                query_line = cut.join(" ");
            }
        }
        break;
    }

    let mut lines: Vec<(usize, String)> = picked
        .iter()
        .map(|&(idx, _)| match &truncated_line {
            Some((t, cut)) if *t == idx => (idx, cut.clone()),
            _ => {
                let u = &instance.utterances[idx];
                (idx, utterance_line(&u.speaker, &u.text))
            }
        })
        .collect();
    lines.sort_by_key(|l| l.0);
    let body: Vec<String> = lines.into_iter().map(|l| l.1).collect();
    let generator_input = format!("{query_line}\n\n{}", body.join("\n"));
    let exceeded = truncated_line.is_some() || (picked.is_empty() && !order.is_empty() && top_k > 0);

    let (selected_indices, selection_scores) = picked.into_iter().unzip();
    ExtractionResult {
        instance_id: instance.instance_id.clone(),
        selected_indices,
        selection_scores,
        generator_input,
        truncated: exceeded,
        stage1_orders: Vec::new(),
    }
}

/// Everything a pipeline run produced, for evaluation and audit.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub samples: Vec<RankSample>,
    pub stage1: Vec<ScoredOrder>,
    pub pool: CandidatePool,
    /// Pool order that fed selection (stage 2, or stage 1 when disabled).
    pub pool_order: ScoredOrder,
    pub extraction: ExtractionResult,
}

impl PipelineRun {
    /// A total order over the instance: the ordered pool followed by the
    /// remaining utterances by stage-1 score.
    pub fn full_ranking(&self) -> Vec<usize> {
        let mut order = self.pool_order.indices.clone();
        let in_pool: std::collections::HashSet<usize> = order.iter().copied().collect();
        let rest: Vec<(usize, f64)> = self
            .stage1
            .iter()
            .flat_map(|s| s.indices.iter().copied().zip(s.scores.iter().copied()))
            .filter(|(i, _)| !in_pool.contains(i))
            .collect();
        order.extend(ScoredOrder::from_pairs(rest).indices);
        order
    }
}

pub fn run_pipeline_detailed(
    prepared: &PreparedInstance<'_>,
    ranker: &ScoringModel,
    reranker: Option<&ScoringModel>,
    config: &PipelineConfig,
) -> Result<PipelineRun> {
    config.validate()?;
    let samples = partition_samples(prepared.instance, config.sample_size, &prepared.gold_relevance)?;
    let stage1: Vec<ScoredOrder> = samples
        .iter()
        .map(|s| stage1_rank(s, ranker, prepared))
        .collect::<Result<_>>()?;
    let pool = pool_candidates(&stage1, config.per_sample_top);
    let pool_order = if config.rerank_enabled {
        let reranker = reranker.ok_or_else(|| Error::invalid("re-ranking is enabled but no re-ranker was given"))?;
        stage2_rerank(&pool, reranker, prepared)?
    } else {
        pool.stage1_order()
    };
    let mut extraction = select_topk(&pool_order, config.top_k, config.token_budget, prepared.instance);
    extraction.stage1_orders = stage1.iter().map(|s| s.indices.clone()).collect();
    Ok(PipelineRun {
        samples,
        stage1,
        pool,
        pool_order,
        extraction,
    })
}

/// partition → stage-1 rank → pool → (stage-2 re-rank) → select.
pub fn run_pipeline(
    prepared: &PreparedInstance<'_>,
    ranker: &ScoringModel,
    reranker: Option<&ScoringModel>,
    config: &PipelineConfig,
) -> Result<ExtractionResult> {
    run_pipeline_detailed(prepared, ranker, reranker, config).map(|r| r.extraction)
}

/// Runs the pipeline over many instances; results keep input order.
pub fn extract_all(
    prepared: &[PreparedInstance<'_>],
    ranker: &ScoringModel,
    reranker: Option<&ScoringModel>,
    config: &PipelineConfig,
) -> Result<Vec<ExtractionResult>> {
    prepared
        .par_iter()
        .map(|p| run_pipeline(p, ranker, reranker, config))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}
