//! Planted-order synthetic corpora.
//!
//! Every utterance gets a latent target
//!
//! ```text
//! r = clamp(0.75 * d + 0.15 * (1 - position) + 0.10 * speaker_hit + N(0, noise), 0, 1)
//! ```
//!
//! where `d ~ U(0,1)^2` is a topical-density draw, `position` is the relative
//! transcript position and `speaker_hit` is 1 when the query names the
//! utterance's speaker. The utterance text is a contiguous excerpt of the
//! gold summary of length `round(12 * r)` padded with filler words from a
//! vocabulary disjoint from the summary, so ROUGE against the summary (the
//! gold relevance) follows `r` and the query-overlap features follow it too.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QueryInstance, Split, Utterance};
use crate::par::*;
use crate::{Error, Result};

const ROLES: [&str; 4] = ["Project Manager", "Marketing", "Industrial Designer", "User Interface"];
const TOPIC_ONSETS: &[u8] = b"bdgkmprt";
const TOPIC_VOWELS: &[u8] = b"aiou";
const FILLER_ONSETS: &[u8] = b"fhlnsvwz";
const FILLER_VOWELS: &[u8] = b"ey";

const TOPIC_WORDS: usize = 10;
const SUMMARY_LEN: usize = 24;
const MAX_EXCERPT: usize = 12;
const QUERY_WORD_SHARE: f64 = 0.75;
const SPEAKER_QUERY_PROB: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Utterances per instance.
    pub utterances: usize,
    /// Standard deviation of the Gaussian noise on the latent target.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 200,
            validation: 50,
            test: 50,
            utterances: 40,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.utterances < 2 {
            return Err(Error::invalid("synthetic instances need at least 2 utterances"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

impl SynthCorpus {
    pub fn split(&self, split: Split) -> &Corpus {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Writes `train.jsonl`, `validation.jsonl` and `test.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        [Split::Train, Split::Validation, Split::Test]
            .iter()
            .map(|&s| {
                let path = dir.join(format!("{s}.jsonl"));
                self.split(s).write(&path)?;
                Ok(path)
            })
            .collect()
    }
}

fn word(rng: &mut ChaCha8Rng, onsets: &[u8], vowels: &[u8], syllables: usize) -> String {
    let mut w = String::with_capacity(2 * syllables);
    for _ in 0..syllables {
        w.push(onsets[rng.random_range(0..onsets.len())] as char);
        w.push(vowels[rng.random_range(0..vowels.len())] as char);
    }
    w
}

fn filler_vocabulary() -> Vec<String> {
    let syllables: Vec<String> = FILLER_ONSETS
        .iter()
        .flat_map(|&c| FILLER_VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect()
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Validation => 2,
        Split::Test => 3,
    }
}

fn latent_target(rng: &mut ChaCha8Rng, noise: &Normal<f64>, position: f64, speaker_hit: bool) -> f64 {
    let d: f64 = rng.random::<f64>().powi(2);
    let spk = if speaker_hit { 1.0 } else { 0.0 };
    (0.75 * d + 0.15 * (1.0 - position) + 0.10 * spk + noise.sample(rng)).clamp(0.0, 1.0)
}

fn generate_instance(config: &SynthConfig, split: Split, idx: usize, filler: &[String]) -> QueryInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((split_stream(split) << 32) | idx as u64);
    let noise = Normal::new(0.0, config.noise).expect("validated noise");

    let mut topic: Vec<String> = Vec::with_capacity(TOPIC_WORDS);
    while topic.len() < TOPIC_WORDS {
        let w = word(&mut rng, TOPIC_ONSETS, TOPIC_VOWELS, 3);
        if !topic.contains(&w) {
            topic.push(w);
        }
    }
    let n_query = rng.random_range(3..=4);
    let (query_words, other_words) = topic.split_at(n_query);
    let mentioned = rng.random_bool(SPEAKER_QUERY_PROB).then(|| ROLES[rng.random_range(0..ROLES.len())]);
    let query = match mentioned {
        Some(role) => format!("what did the {} say about {}", role.to_lowercase(), query_words.join(" ")),
        None => format!("what was discussed about {}", query_words.join(" ")),
    };
    let summary: Vec<&str> = (0..SUMMARY_LEN)
        .map(|_| {
            let pool = if rng.random_bool(QUERY_WORD_SHARE) { query_words } else { other_words };
            pool[rng.random_range(0..pool.len())].as_str()
        })
        .collect();

    let meeting_id = format!("synth-{split}-{idx:04}");
    let n = config.utterances;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let utterances = (0..n)
        .map(|i| {
            let speaker = ROLES[rng.random_range(0..ROLES.len())];
            let position = i as f64 / (n - 1) as f64;
            let r = latent_target(&mut rng, &noise, position, mentioned == Some(speaker));
            if r >= 0.5 {
                match spans.last_mut() {
                    Some(last) if last.1 + 1 == i => last.1 = i,
                    _ => spans.push((i, i)),
                }
            }
            let len = (r * MAX_EXCERPT as f64).round() as usize;
            let start = rng.random_range(0..=SUMMARY_LEN - len);
            let n_fill = rng.random_range(4..=12);
            let before = rng.random_range(0..=n_fill);
            let mut words: Vec<&str> = (0..n_fill).map(|_| filler[rng.random_range(0..filler.len())].as_str()).collect();
            let tail = words.split_off(before);
            words.extend_from_slice(&summary[start..start + len]);
            words.extend(tail);
            Utterance {
                meeting_id: meeting_id.clone(),
                index: i,
                speaker: speaker.to_string(),
                text: words.join(" "),
            }
        })
        .collect();

    QueryInstance {
        instance_id: format!("{split}-{idx:04}"),
        meeting_id,
        query,
        utterances,
        gold_summary: summary.join(" "),
        relevant_spans: Some(spans),
    }
}

/// Generates one split. Each instance draws from its own ChaCha stream, so
/// the output does not depend on thread count or on the other splits' sizes.
pub fn generate_split(config: &SynthConfig, split: Split, count: usize) -> Result<Corpus> {
    config.validate()?;
    let filler = filler_vocabulary();
    let instances: Vec<QueryInstance> = (0..count)
        .into_par_iter()
        .map(|i| generate_instance(config, split, i, &filler))
        .collect();
    Corpus::new(instances, split)
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    Ok(SynthCorpus {
        train: generate_split(config, Split::Train, config.train)?,
        validation: generate_split(config, Split::Validation, config.validation)?,
        test: generate_split(config, Split::Test, config.test)?,
    })
}
