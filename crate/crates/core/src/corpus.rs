//! Query-focused meeting corpora: one JSON object per line, one query over
//! one meeting per object.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rouge::tokenize;
use crate::{Error, Result};

/// Default number of utterances per ranking sample.
pub const DEFAULT_SAMPLE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub meeting_id: String,
    pub index: usize,
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryInstance {
    pub instance_id: String,
    pub meeting_id: String,
    pub query: String,
    pub utterances: Vec<Utterance>,
    pub gold_summary: String,
    /// Inclusive `(start, end)` utterance index ranges.
    pub relevant_spans: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub instances: Vec<QueryInstance>,
    pub split: Split,
}

/// A contiguous window of utterances: the unit of pairwise training.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSample {
    pub instance_id: String,
    pub member_indices: Vec<usize>,
    pub gold_relevance: Vec<f64>,
}

// Wire format. Kept separate from the domain types so the domain types can
// carry the denormalized meeting id on every utterance.
#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    instance_id: String,
    meeting_id: String,
    query: String,
    gold_summary: String,
    utterances: Vec<UtteranceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relevant_spans: Option<Vec<[usize; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    index: usize,
    speaker: String,
    text: String,
}

impl QueryInstance {
    /// Checks the per-instance invariants.
    pub fn validate(&self) -> Result<()> {
        let id = &self.instance_id;
        if self.query.trim().is_empty() {
            return Err(Error::validation(format!("instance {id}: empty query")));
        }
        if self.gold_summary.trim().is_empty() {
            return Err(Error::validation(format!("instance {id}: empty gold summary")));
        }
        for (pos, u) in self.utterances.iter().enumerate() {
            if u.meeting_id != self.meeting_id {
                return Err(Error::validation(format!(
                    "instance {id}: utterance {} belongs to meeting {:?}, expected {:?}",
                    u.index, u.meeting_id, self.meeting_id
                )));
            }
            if u.index != pos {
                let what = if u.index > pos { "skips" } else { "repeats or reorders" };
                return Err(Error::validation(format!(
                    "instance {id}: utterance index {} at position {pos} {what} the sequence 0..n-1",
                    u.index
                )));
            }
            if tokenize(&u.text).is_empty() {
                return Err(Error::validation(format!(
                    "instance {id}: utterance {} has no tokens",
                    u.index
                )));
            }
        }
        if let Some(spans) = &self.relevant_spans {
            for &(start, end) in spans {
                if start > end || end >= self.utterances.len() {
                    return Err(Error::validation(format!(
                        "instance {id}: relevant span [{start}, {end}] out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn utterance_texts(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.text.as_str()).collect()
    }

    /// Per-utterance membership in the relevant-span annotation, if present.
    pub fn relevant_mask(&self) -> Option<Vec<bool>> {
        self.relevant_spans.as_ref().map(|spans| {
            let mut mask = vec![false; self.utterances.len()];
            for &(s, e) in spans {
                for m in &mut mask[s..=e] {
                    *m = true;
                }
            }
            mask
        })
    }

    fn from_record(rec: InstanceRecord) -> Self {
        let meeting_id = rec.meeting_id;
        QueryInstance {
            instance_id: rec.instance_id,
            query: rec.query,
            gold_summary: rec.gold_summary,
            utterances: rec
                .utterances
                .into_iter()
                .map(|u| Utterance {
                    meeting_id: meeting_id.clone(),
                    index: u.index,
                    speaker: u.speaker,
                    text: u.text,
                })
                .collect(),
            relevant_spans: rec
                .relevant_spans
                .map(|v| v.into_iter().map(|[s, e]| (s, e)).collect()),
            meeting_id,
        }
    }

    fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            instance_id: self.instance_id.clone(),
            meeting_id: self.meeting_id.clone(),
            query: self.query.clone(),
            gold_summary: self.gold_summary.clone(),
            utterances: self
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    index: u.index,
                    speaker: u.speaker.clone(),
                    text: u.text.clone(),
                })
                .collect(),
            relevant_spans: self
                .relevant_spans
                .as_ref()
                .map(|v| v.iter().map(|&(s, e)| [s, e]).collect()),
        }
    }
}

impl Corpus {
    pub fn new(instances: Vec<QueryInstance>, split: Split) -> Result<Self> {
        let corpus = Corpus { instances, split };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for inst in &self.instances {
            if !seen.insert(inst.instance_id.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate instance_id {:?}",
                    inst.instance_id
                )));
            }
            inst.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Parses JSONL text. `origin` is only used in error messages.
    pub fn from_jsonl(text: &str, split: Split, origin: &Path) -> Result<Self> {
        let mut instances = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: InstanceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            instances.push(QueryInstance::from_record(rec));
        }
        Corpus::new(instances, split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            out.push_str(&serde_json::to_string(&inst.to_record()).expect("corpus records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a JSONL corpus file.
pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_jsonl(&text, split, path)
}

/// Splits an instance into contiguous windows of `sample_size` utterances.
///
/// A trailing window of one utterance is merged into the window before it,
/// so every sample admits at least one pair.
pub fn partition_samples(
    instance: &QueryInstance,
    sample_size: usize,
    gold_relevance: &[f64],
) -> Result<Vec<RankSample>> {
    let n = instance.utterances.len();
    if sample_size < 2 {
        return Err(Error::invalid("sample_size must be at least 2"));
    }
    if n < 2 {
        return Err(Error::invalid(format!(
            "instance {} has {n} utterance(s); at least 2 are needed to form a sample",
            instance.instance_id
        )));
    }
    if gold_relevance.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: gold_relevance.len(),
        });
    }
    let mut bounds: Vec<(usize, usize)> = (0..n)
        .step_by(sample_size)
        .map(|start| (start, (start + sample_size).min(n)))
        .collect();
    if bounds.len() > 1 && bounds.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, end) = bounds.pop().expect("non-empty");
        bounds.last_mut().expect("at least one window").1 = end;
    }
    Ok(bounds
        .into_iter()
        .map(|(s, e)| RankSample {
            instance_id: instance.instance_id.clone(),
            member_indices: (s..e).collect(),
            gold_relevance: gold_relevance[s..e].to_vec(),
        })
        .collect())
}


#[cfg(test)]
mod tests {
    use super::fixtures::instance;
    use super::*;
    use proptest::prelude::*;

    fn windows(n: usize, size: usize) -> Vec<Vec<usize>> {
        let inst = instance("w", n);
        partition_samples(&inst, size, &vec![0.0; n])
            .unwrap()
            .into_iter()
            .map(|s| s.member_indices)
            .collect()
    }

    #[test]
    fn windowing_examples() {
        assert_eq!(
            windows(10, 4),
            vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]
        );
        assert_eq!(windows(9, 4), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7, 8]]);
        assert_eq!(windows(4, 8), vec![vec![0, 1, 2, 3]]);
        assert_eq!(windows(2, 2), vec![vec![0, 1]]);
        assert_eq!(windows(3, 2), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn windowing_errors() {
        let one = instance("one", 1);
        assert!(partition_samples(&one, 4, &[0.0]).is_err());
        let five = instance("five", 5);
        assert!(partition_samples(&five, 1, &[0.0; 5]).is_err());
        assert!(partition_samples(&five, 2, &[0.0; 4]).is_err());
    }

    #[test]
    fn relevance_follows_members() {
        let inst = instance("r", 5);
        let rel = [0.1, 0.2, 0.3, 0.4, 0.5];
        let samples = partition_samples(&inst, 3, &rel).unwrap();
        assert_eq!(samples[1].member_indices, vec![3, 4]);
        assert_eq!(samples[1].gold_relevance, vec![0.4, 0.5]);
    }

    #[test]
    fn jsonl_errors_cite_line_and_id() {
        let good = Corpus::new(vec![instance("a", 3)], Split::Train).unwrap().to_jsonl();
        let text = format!("{good}{{not json\n");
        let err = Corpus::from_jsonl(&text, Split::Train, Path::new("c.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let dup = format!("{good}{good}");
        let err = Corpus::from_jsonl(&dup, Split::Train, Path::new("c.jsonl")).unwrap_err();
        assert!(err.to_string().contains("\"a\""), "{err}");
    }

    #[test]
    fn validation_catches_gaps_and_empty_text() {
        let mut gap = instance("g", 4);
        gap.utterances.remove(2);
        gap.utterances[2].index = 3;
        assert!(matches!(gap.validate(), Err(Error::Validation(m)) if m.contains("skips")));

        let mut empty = instance("e", 3);
        empty.utterances[1].text = " ... ".to_string();
        assert!(empty.validate().is_err());

        let mut span = instance("s", 3);
        span.relevant_spans = Some(vec![(1, 3)]);
        assert!(span.validate().is_err());
        span.relevant_spans = Some(vec![(1, 2)]);
        assert_eq!(span.relevant_mask().unwrap(), vec![false, true, true]);
    }

    #[test]
    fn split_parsing() {
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
        assert_eq!("validation".parse::<Split>().unwrap().to_string(), "validation");
        assert!("holdout".parse::<Split>().is_err());
    }

    proptest! {
        #[test]
        fn windows_cover_and_are_disjoint(n in 2usize..200, extra in 0usize..1000) {
            let size = 2 + extra % (n + 4);
            let inst = instance("p", n);
            let samples = partition_samples(&inst, size, &vec![0.0; n]).unwrap();
            let mut all: Vec<usize> = samples.iter().flat_map(|s| s.member_indices.clone()).collect();
            prop_assert!(samples.iter().all(|s| s.member_indices.len() >= 2));
            prop_assert!(samples.iter().all(|s| s.member_indices.windows(2).all(|w| w[1] == w[0] + 1)));
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn jsonl_round_trip(
            n in 1usize..6,
            spans in prop::option::of(prop::collection::vec((0usize..3, 0usize..3), 0..3)),
            query in "[a-z ]{1,20}[a-z]",
        ) {
            let mut a = instance("a", n);
            a.query = query;
            a.relevant_spans = spans.map(|v| v.into_iter().map(|(s, l)| (s.min(n - 1), (s + l).min(n - 1))).collect());
            let corpus = Corpus::new(vec![a, instance("b", 2)], Split::Validation).unwrap();
            let back = Corpus::from_jsonl(&corpus.to_jsonl(), Split::Validation, Path::new("mem")).unwrap();
            prop_assert_eq!(back, corpus);
        }
    }
}
