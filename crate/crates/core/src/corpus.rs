//! Conversation data model, JSONL ingestion, dataset statistics and
//! windowed encoder inputs.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker_id: String,
    pub text: String,
    #[serde(rename = "label")]
    pub gold_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Distinct speakers in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.utterances
            .iter()
            .map(|u| u.speaker_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    /// Speaker of each utterance, in utterance order.
    pub fn speaker_sequence(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.speaker_id.as_str()).collect()
    }

    pub fn has_speaker(&self, speaker: &str) -> bool {
        self.utterances.iter().any(|u| u.speaker_id == speaker)
    }

    /// Checks structural invariants and canonicalises labels against `vocab`.
    pub fn validate(&mut self, vocab: &LabelVocabulary) -> Result<()> {
        self.check_structure()?;
        for u in &mut self.utterances {
            if let Some(label) = &u.gold_label {
                let canonical = canonical_label(label);
                if vocab.index_of(&canonical).is_none() {
                    return Err(Error::Validation {
                        conversation_id: self.conversation_id.clone(),
                        message: format!("unknown label {label:?} at utterance {}", u.index),
                    });
                }
                u.gold_label = Some(canonical);
            }
        }
        Ok(())
    }

    /// Non-empty, contiguous indices, non-empty texts and speaker ids.
    pub fn check_structure(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            conversation_id: self.conversation_id.clone(),
            message,
        };
        if self.utterances.is_empty() {
            return Err(fail("conversation has no utterances".into()));
        }
        for (pos, u) in self.utterances.iter().enumerate() {
            if u.index != pos {
                return Err(fail(format!(
                    "utterance indices must be contiguous from 0; found {} at position {pos}",
                    u.index
                )));
            }
            if u.text.trim().is_empty() {
                return Err(fail(format!("utterance {pos} has empty text")));
            }
            if u.speaker_id.is_empty() {
                return Err(fail(format!("utterance {pos} has an empty speaker id")));
            }
        }
        Ok(())
    }
}

pub fn canonical_label(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    dataset_name: String,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    dataset_name: String,
    labels: Vec<String>,
}

impl LabelVocabulary {
    pub fn new<S: AsRef<str>>(dataset_name: impl Into<String>, labels: &[S]) -> Result<Self> {
        let dataset_name = dataset_name.into();
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary {dataset_name:?} needs at least two labels"
            )));
        }
        let mut index = HashMap::new();
        let mut canonical = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            let c = canonical_label(l.as_ref());
            if c.is_empty() || index.insert(c.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "vocabulary {dataset_name:?}: empty or duplicate label {:?}",
                    l.as_ref()
                )));
            }
            canonical.push(c);
        }
        Ok(Self {
            dataset_name,
            labels: canonical,
            index,
        })
    }

    /// Reads `{"dataset_name": ..., "labels": [...]}`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())?;
        let raw: VocabularyFile = serde_json::from_reader(BufReader::new(file))?;
        Self::new(raw.dataset_name, &raw.labels)
    }

    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw = VocabularyFile {
            dataset_name: self.dataset_name.clone(),
            labels: self.labels.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&raw)? + "\n")?;
        Ok(())
    }

    pub fn dataset_name(&self) -> &str {
        &self.dataset_name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }
}

/// Loads a JSONL dataset, one conversation per line, in file order.
pub fn load_dataset(path: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_dataset(BufReader::new(file), path, vocab)
}

/// Loads conversations checking structure only; labels are left as written.
pub fn load_conversations(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    parse_lines(BufReader::new(File::open(path)?), path, None)
}

pub fn parse_dataset<R: BufRead>(
    reader: R,
    path: &Path,
    vocab: &LabelVocabulary,
) -> Result<Vec<Conversation>> {
    parse_lines(reader, path, Some(vocab))
}

fn parse_lines<R: BufRead>(reader: R, path: &Path, vocab: Option<&LabelVocabulary>) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut conv: Conversation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        match vocab {
            Some(v) => conv.validate(v)?,
            None => conv.check_structure()?,
        }
        if !ids.insert(conv.conversation_id.clone()) {
            return Err(Error::Validation {
                conversation_id: conv.conversation_id,
                message: format!("duplicate conversation id at line {}", lineno + 1),
            });
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, data: &[Conversation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for conv in data {
        serde_json::to_writer(&mut w, conv)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_dialogues: usize,
    pub n_utterances: usize,
    pub avg_speakers: f64,
}

pub fn dataset_stats(data: &[Conversation]) -> Result<DatasetStats> {
    if data.is_empty() {
        return Err(Error::Empty("dataset has no conversations"));
    }
    let n_utterances = data.iter().map(Conversation::len).sum();
    let speakers: usize = data.iter().map(|c| c.speakers().len()).sum();
    Ok(DatasetStats {
        n_dialogues: data.len(),
        n_utterances,
        avg_speakers: speakers as f64 / data.len() as f64,
    })
}

/// Per-split dialogue and utterance counts plus the overall mean speaker count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub dataset: String,
    pub dialogues: [usize; 3],
    pub utterances: [usize; 3],
    pub avg_speakers: f64,
}

impl SplitSummary {
    pub fn from_conversations(dataset: impl Into<String>, data: &[Conversation]) -> Result<Self> {
        let overall = dataset_stats(data)?;
        let mut dialogues = [0; 3];
        let mut utterances = [0; 3];
        for conv in data {
            let k = conv.split as usize;
            dialogues[k] += 1;
            utterances[k] += conv.len();
        }
        Ok(Self {
            dataset: dataset.into(),
            dialogues,
            utterances,
            avg_speakers: overall.avg_speakers,
        })
    }

    pub const TSV_HEADER: &'static str =
        "dataset\ttrain_dialogues\tdev_dialogues\ttest_dialogues\ttrain_utterances\tdev_utterances\ttest_utterances\tavg_speakers";

    pub fn tsv_row(&self) -> String {
        let [d0, d1, d2] = self.dialogues;
        let [u0, u1, u2] = self.utterances;
        format!(
            "{}\t{d0}\t{d1}\t{d2}\t{u0}\t{u1}\t{u2}\t{:.2}",
            self.dataset, self.avg_speakers
        )
    }
}

/// Sentinel strings placed around the target utterance of a window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentinels {
    pub cls: String,
    pub sep: String,
}

impl Default for Sentinels {
    fn default() -> Self {
        Self {
            cls: "[CLS]".into(),
            sep: "</s>".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedInput {
    pub target_index: usize,
    pub token_text: String,
    /// Byte range of the target utterance inside `token_text`.
    pub target_span: (usize, usize),
}

impl WindowedInput {
    pub fn target_text(&self) -> &str {
        &self.token_text[self.target_span.0..self.target_span.1]
    }
}

/// `[CLS] u_{i-w} .. </s> u_i </s> .. u_{i+w}`, clamped to the conversation.
pub fn build_window(
    conv: &Conversation,
    i: usize,
    w: usize,
    sentinels: &Sentinels,
) -> Result<WindowedInput> {
    let n = conv.len();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    let lo = i.saturating_sub(w);
    let hi = (i + w).min(n - 1);

    let mut text = sentinels.cls.clone();
    let push = |piece: &str, text: &mut String| -> usize {
        text.push(' ');
        let start = text.len();
        text.push_str(piece);
        start
    };
    for u in &conv.utterances[lo..i] {
        push(&u.text, &mut text);
    }
    push(&sentinels.sep, &mut text);
    let start = push(&conv.utterances[i].text, &mut text);
    let end = text.len();
    push(&sentinels.sep, &mut text);
    for u in &conv.utterances[i + 1..=hi] {
        push(&u.text, &mut text);
    }
    Ok(WindowedInput {
        target_index: i,
        token_text: text,
        target_span: (start, end),
    })
}

/// Labels that occur in `data`, sorted.
pub fn observed_labels(data: &[Conversation]) -> BTreeSet<String> {
    data.iter()
        .flat_map(|c| c.utterances.iter().filter_map(|u| u.gold_label.clone()))
        .collect()
}

pub mod synthetic {
    //! Small generated corpora where each label has its own cue words.

    use rand::seq::IndexedRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub const LABELS: [&str; 4] = ["neutral", "joy", "anger", "sadness"];

    const CUES: [&[&str]; 4] = [
        &["okay", "fine", "sure", "noted", "alright"],
        &["great", "wonderful", "yay", "awesome", "love"],
        &["furious", "hate", "stop", "ridiculous", "unacceptable"],
        &["miss", "sorry", "lonely", "cry", "lost"],
    ];

    const FILLER: [&str; 12] = [
        "the", "dinner", "tonight", "really", "we", "should", "talk", "about", "that", "car",
        "today", "again",
    ];

    pub fn vocabulary() -> LabelVocabulary {
        LabelVocabulary::new("synthetic", &LABELS).expect("static labels are valid")
    }

    /// `n_conversations` conversations of `turns` utterances between 2-3 speakers.
    pub fn generate(n_conversations: usize, turns: usize, split: Split, seed: u64) -> Vec<Conversation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_conversations)
            .map(|c| {
                let n_speakers = rng.random_range(2..=3usize);
                let utterances = (0..turns.max(1))
                    .map(|i| {
                        let speaker = if i < n_speakers { i } else { rng.random_range(0..n_speakers) };
                        let label = rng.random_range(0..LABELS.len());
                        let mut words: Vec<&str> = (0..rng.random_range(2..5usize))
                            .map(|_| *FILLER.choose(&mut rng).unwrap())
                            .collect();
                        let cue = CUES[label].choose(&mut rng).unwrap();
                        let at = rng.random_range(0..=words.len());
                        words.insert(at, cue);
                        Utterance {
                            index: i,
                            speaker_id: format!("SPEAKER_{speaker}"),
                            text: words.join(" "),
                            gold_label: Some(LABELS[label].to_string()),
                        }
                    })
                    .collect();
                Conversation {
                    conversation_id: format!("{}-{c}", split.as_str()),
                    split,
                    utterances,
                }
            })
            .collect()
    }
}
