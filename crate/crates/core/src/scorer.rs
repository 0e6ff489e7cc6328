//! Query-relevance scoring: hand-built (query, utterance) features feeding a
//! small tanh MLP with an exact analytic backward pass.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{QueryInstance, Utterance};
use crate::rouge::{rouge_n_tokens, tokenize, TokenSequence};
use crate::{Error, Result};

/// Number of features produced by [`featurize`].
pub const FEATURE_DIM: usize = 7;
/// Bumped whenever the feature set or its order changes.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;
/// Default hidden width of the scorer.
pub const DEFAULT_HIDDEN: usize = 16;

// Words ignored when measuring query coverage (feature 6).
const STOPWORDS: &[&str] = &[
    "a", "about", "all", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can",
    "could", "did", "do", "does", "for", "from", "had", "has", "have", "how", "i", "if", "in",
    "into", "is", "it", "its", "of", "on", "or", "said", "say", "should", "so", "summarize",
    "that", "the", "their", "them", "then", "there", "they", "this", "to", "was", "we", "were",
    "what", "when", "where", "which", "who", "why", "will", "with", "would", "you",
];

pub type FeatureVector = Vec<f64>;

/// Per-instance statistics needed by [`featurize`].
#[derive(Debug, Clone)]
pub struct InstanceStats {
    /// Number of utterances that contain each term.
    pub document_frequency: HashMap<String, usize>,
    pub transcript_len: usize,
}

impl InstanceStats {
    pub fn from_instance(instance: &QueryInstance) -> Self {
        let token_lists: Vec<TokenSequence> = instance.utterances.iter().map(|u| tokenize(&u.text)).collect();
        Self::from_tokens(&token_lists)
    }

    pub fn from_tokens(utterances: &[TokenSequence]) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for toks in utterances {
            let unique: HashSet<&String> = toks.tokens().iter().collect();
            for t in unique {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        InstanceStats {
            document_frequency: df,
            transcript_len: utterances.len(),
        }
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.document_frequency.get(term).copied().unwrap_or(0) as f64;
        ((self.transcript_len as f64 + 1.0) / (df + 1.0)).ln() + 1.0
    }
}

/// Query-side tokens and derived sets, computed once per instance.
#[derive(Debug, Clone)]
pub struct QueryContext {
    pub tokens: TokenSequence,
    content_words: HashSet<String>,
}

impl QueryContext {
    pub fn new(query: &str) -> Self {
        let tokens = tokenize(query);
        let mut content: HashSet<String> = tokens
            .tokens()
            .iter()
            .filter(|t| !STOPWORDS.contains(&t.as_str()))
            .cloned()
            .collect();
        // A query made only of stopwords is measured on all of its words.
        if content.is_empty() {
            content = tokens.tokens().iter().cloned().collect();
        }
        QueryContext {
            tokens,
            content_words: content,
        }
    }
}

fn tfidf_vector(tokens: &TokenSequence, stats: &InstanceStats) -> HashMap<String, f64> {
    let mut tf: HashMap<String, f64> = HashMap::new();
    for t in tokens.tokens() {
        *tf.entry(t.clone()).or_insert(0.0) += 1.0;
    }
    for (term, w) in tf.iter_mut() {
        *w *= stats.idf(term);
    }
    tf
}

fn cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
    let norm = |v: &HashMap<String, f64>| {
        let mut terms: Vec<_> = v.iter().collect();
        terms.sort_by(|x, y| x.0.cmp(y.0));
        terms.iter().map(|(_, w)| *w * *w).sum::<f64>().sqrt()
    };
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // Sum in a fixed order so the value does not depend on hash iteration.
    let mut shared: Vec<(&String, f64)> = a.iter().filter_map(|(t, w)| b.get(t).map(|v| (t, w * v))).collect();
    shared.sort_by(|x, y| x.0.cmp(y.0));
    let dot: f64 = shared.iter().map(|(_, p)| p).sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Fixed feature set, in order:
///
/// 1. unigram-overlap F1 between query and utterance
/// 2. bigram-overlap F1
/// 3. tf-idf cosine similarity (idf from the instance's utterances)
/// 4. utterance token count / 100, capped at 1
/// 5. relative transcript position in [0, 1]
/// 6. fraction of query content words present in the utterance
/// 7. 1 if the speaker's name appears in the query, else 0
pub fn featurize(query: &QueryContext, utterance: &Utterance, stats: &InstanceStats) -> FeatureVector {
    featurize_tokens(query, &tokenize(&utterance.text), &utterance.speaker, utterance.index, stats)
}

pub fn featurize_tokens(
    query: &QueryContext,
    utt: &TokenSequence,
    speaker: &str,
    index: usize,
    stats: &InstanceStats,
) -> FeatureVector {
    let uni = rouge_n_tokens(&query.tokens, utt, 1).expect("n = 1").f1;
    let bi = rouge_n_tokens(&query.tokens, utt, 2).expect("n = 2").f1;
    let cos = cosine(&tfidf_vector(&query.tokens, stats), &tfidf_vector(utt, stats));
    let length = (utt.len() as f64 / 100.0).min(1.0);
    let position = if stats.transcript_len > 1 {
        index as f64 / (stats.transcript_len - 1) as f64
    } else {
        0.0
    };
    let utt_words: HashSet<&String> = utt.tokens().iter().collect();
    let coverage = if query.content_words.is_empty() {
        0.0
    } else {
        query.content_words.iter().filter(|w| utt_words.contains(w)).count() as f64
            / query.content_words.len() as f64
    };
    let speaker_tokens = tokenize(speaker);
    let speaker_hit = if contains_run(query.tokens.tokens(), speaker_tokens.tokens()) { 1.0 } else { 0.0 };
    vec![uni, bi, cos, length, position, coverage, speaker_hit]
}

/// Features for every utterance of an instance, in transcript order.
pub fn featurize_instance(instance: &QueryInstance) -> Vec<FeatureVector> {
    let tokens: Vec<TokenSequence> = instance.utterances.iter().map(|u| tokenize(&u.text)).collect();
    let stats = InstanceStats::from_tokens(&tokens);
    let query = QueryContext::new(&instance.query);
    instance
        .utterances
        .iter()
        .zip(&tokens)
        .map(|(u, t)| featurize_tokens(&query, t, &u.speaker, u.index, &stats))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// Feed-forward scorer: tanh on hidden layers, identity on the scalar output.
///
/// Every mutation changes the model's version stamp, which is how
/// [`ScoringModel::backward`] detects a trace from an older forward pass.
#[derive(Debug)]
pub struct ScoringModel {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
    seed: u64,
    stamp: u64,
}

impl Clone for ScoringModel {
    fn clone(&self) -> Self {
        ScoringModel {
            layer_dims: self.layer_dims.clone(),
            layers: self.layers.clone(),
            seed: self.seed,
            stamp: fresh_id(),
        }
    }
}

impl PartialEq for ScoringModel {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims && self.layers == other.layers && self.seed == other.seed
    }
}

/// Activations retained by [`ScoringModel::forward`]; `activations[0]` is the
/// input and `activations[l]` the output of layer `l - 1`.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    activations: Vec<Vec<f64>>,
    stamp: u64,
}

impl ActivationTrace {
    pub fn score(&self) -> f64 {
        self.activations.last().expect("trace has output")[0]
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

/// Gradient with the same shape as a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient {
    pub layers: Vec<DenseLayer>,
}

impl ParameterGradient {
    pub fn zeros_like(model: &ScoringModel) -> Self {
        ParameterGradient {
            layers: model.layers.iter().map(|l| DenseLayer::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn add_assign(&mut self, other: &ParameterGradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

fn flatten_layers(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.biases);
    }
    out
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid("layer_dims needs an input and an output dimension"));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid("layer dimensions must be positive"));
    }
    if *layer_dims.last().expect("len >= 2") != 1 {
        return Err(Error::invalid(format!(
            "final layer dimension must be 1, got {}",
            layer_dims.last().expect("len >= 2")
        )));
    }
    Ok(())
}

/// Default architecture: features → 16 tanh units → score.
pub fn default_layer_dims() -> Vec<usize> {
    vec![FEATURE_DIM, DEFAULT_HIDDEN, 1]
}

/// Glorot-uniform weights, zero biases, reproducible from `seed`.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<ScoringModel> {
    validate_dims(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut layer = DenseLayer::zeros(fan_in, fan_out);
            for v in &mut layer.weights {
                *v = rng.random_range(-s..=s);
            }
            layer
        })
        .collect();
    Ok(ScoringModel {
        layer_dims: layer_dims.to_vec(),
        layers,
        seed,
        stamp: fresh_id(),
    })
}

impl ScoringModel {
    /// Builds a model from explicit layers (input dimension first).
    pub fn from_layers(layers: Vec<DenseLayer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a model needs at least one layer"));
        }
        let mut dims = vec![layers[0].in_dim];
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim != *dims.last().expect("non-empty") {
                return Err(Error::invalid(format!("layer {i} input dimension does not chain")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.biases.len() != l.out_dim {
                return Err(Error::invalid(format!("layer {i} parameter shape mismatch")));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
            dims.push(l.out_dim);
        }
        validate_dims(&dims)?;
        Ok(ScoringModel {
            layer_dims: dims,
            layers,
            seed,
            stamp: fresh_id(),
        })
    }

    /// Zero-parameter model of the given shape.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect();
        Self::from_layers(layers, 0)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        self.stamp = fresh_id();
        Ok(())
    }

    /// `params -= step ⊙ grad`, elementwise. Rejects updates that would make
    /// any parameter non-finite.
    pub fn apply_update(&mut self, step: &[f64]) -> Result<()> {
        let current = self.params();
        if step.len() != current.len() {
            return Err(Error::DimensionMismatch {
                expected: current.len(),
                actual: step.len(),
            });
        }
        let next: Vec<f64> = current.iter().zip(step).map(|(p, s)| p - s).collect();
        self.set_params(&next)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(f64, ActivationTrace)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let input = activations.last().expect("non-empty");
            let out: Vec<f64> = (0..layer.out_dim)
                .map(|o| {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let z = row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>() + layer.biases[o];
                    if li == last { z } else { z.tanh() }
                })
                .collect();
            activations.push(out);
        }
        let trace = ActivationTrace {
            activations,
            stamp: self.stamp,
        };
        Ok((trace.score(), trace))
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.forward(x).map(|(s, _)| s)
    }

    pub fn backward(&self, trace: &ActivationTrace, upstream: f64) -> Result<ParameterGradient> {
        let mut grad = ParameterGradient::zeros_like(self);
        self.backward_into(trace, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Adds `upstream · ∂score/∂params` into `grad`.
    pub fn backward_into(&self, trace: &ActivationTrace, upstream: f64, grad: &mut ParameterGradient) -> Result<()> {
        if trace.stamp != self.stamp {
            return Err(Error::StaleTrace);
        }
        let mut delta = vec![upstream];
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &trace.activations[li];
            let g = &mut grad.layers[li];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(gw, a)| *gw += d * a);
            }
            if li > 0 {
                // input[i] = tanh(z), so dtanh/dz = 1 - input[i]^2.
                delta = (0..layer.in_dim)
                    .map(|i| {
                        let back: f64 = delta
                            .iter()
                            .enumerate()
                            .map(|(o, d)| d * layer.weights[o * layer.in_dim + i])
                            .sum();
                        back * (1.0 - input[i] * input[i])
                    })
                    .collect();
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layer_dims: self.layer_dims.clone(),
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
            seed: self.seed,
            feature_schema_version: FEATURE_SCHEMA_VERSION,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.feature_schema_version != FEATURE_SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "checkpoint feature schema v{} does not match v{FEATURE_SCHEMA_VERSION}",
                ckpt.feature_schema_version
            )));
        }
        validate_dims(&ckpt.layer_dims)?;
        let n_layers = ckpt.layer_dims.len() - 1;
        if ckpt.weights.len() != n_layers || ckpt.biases.len() != n_layers {
            return Err(Error::validation("checkpoint layer count does not match layer_dims"));
        }
        let layers = ckpt
            .layer_dims
            .windows(2)
            .zip(ckpt.weights.iter().zip(&ckpt.biases))
            .map(|(w, (weights, biases))| DenseLayer {
                in_dim: w[0],
                out_dim: w[1],
                weights: weights.clone(),
                biases: biases.clone(),
            })
            .collect();
        Self::from_layers(layers, ckpt.seed).map_err(|e| Error::validation(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

/// On-disk model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    /// One flattened row-major weight matrix per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    pub feature_schema_version: u32,
}
