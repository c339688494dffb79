//! Speaker biography extraction: prompt rendering, completion calls and an
//! append-only JSONL cache.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Conversation;
use crate::error::{Error, Result};
use crate::llm::{CompletionRequest, LlmClient};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiographyPrompt {
    pub conversation_id: String,
    pub speaker_id: String,
    pub rendered_text: String,
}

impl BiographyPrompt {
    pub fn hash(&self) -> String {
        prompt_hash(&self.rendered_text)
    }
}

/// `{speaker_id}: {text}` per utterance, newline separated.
pub fn render_conversation(conv: &Conversation) -> String {
    conv.utterances
        .iter()
        .map(|u| format!("{}: {}", u.speaker_id, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_bio_prompt(conv: &Conversation, speaker: &str) -> Result<BiographyPrompt> {
    if !conv.has_speaker(speaker) {
        return Err(Error::UnknownSpeaker {
            conversation_id: conv.conversation_id.clone(),
            speaker: speaker.into(),
        });
    }
    let rendered_text = format!(
        "Given this conversation between speakers:\n{}\nIn overall above conversation, what do you think about the characteristics of speaker {speaker}? (Note: provide an answer within 250 words)",
        render_conversation(conv)
    );
    Ok(BiographyPrompt {
        conversation_id: conv.conversation_id.clone(),
        speaker_id: speaker.into(),
        rendered_text,
    })
}

/// Hex SHA-256 of the rendered prompt.
pub fn prompt_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn fallback_text(speaker: &str) -> String {
    format!("SPEAKER {speaker} participates in the conversation.")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerBiography {
    pub conversation_id: String,
    pub speaker_id: String,
    pub text: String,
    pub source_model: String,
    pub prompt_hash: String,
    /// Set when `text` is the fallback rather than a model answer.
    #[serde(default)]
    pub degraded: bool,
}

type StoreKey = (String, String, String, String);

fn key_of(b: &SpeakerBiography) -> StoreKey {
    (
        b.conversation_id.clone(),
        b.speaker_id.clone(),
        b.prompt_hash.clone(),
        b.source_model.clone(),
    )
}

/// Write-once biography cache keyed by (conversation, speaker, prompt hash, model).
/// When opened on a file, every insert is appended to it immediately.
#[derive(Debug, Default)]
pub struct BiographyStore {
    entries: BTreeMap<StoreKey, SpeakerBiography>,
    order: Vec<StoreKey>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl BiographyStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists and appends new entries to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut store = Self::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let bio: SpeakerBiography = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
                store.insert_entry(bio);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.sink = Some((path.to_path_buf(), BufWriter::new(file)));
        Ok(store)
    }

    /// Read-only load of a biography file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut store = Self::open(path)?;
        store.sink = None;
        Ok(store)
    }

    fn insert_entry(&mut self, bio: SpeakerBiography) -> bool {
        let key = key_of(&bio);
        if self.entries.contains_key(&key) {
            return false;
        }
        self.order.push(key.clone());
        self.entries.insert(key, bio);
        true
    }

    /// Returns `false` without writing when the key is already present.
    pub fn insert(&mut self, bio: SpeakerBiography) -> Result<bool> {
        if self.entries.contains_key(&key_of(&bio)) {
            return Ok(false);
        }
        if let Some((_, w)) = &mut self.sink {
            serde_json::to_writer(&mut *w, &bio)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(self.insert_entry(bio))
    }

    pub fn get(&self, conversation_id: &str, speaker: &str, hash: &str, model: &str) -> Option<&SpeakerBiography> {
        self.entries
            .get(&(conversation_id.into(), speaker.into(), hash.into(), model.into()))
    }

    /// Exact-key lookup, else the most recent entry for (conversation, speaker, model).
    pub fn find(&self, conversation_id: &str, speaker: &str, hash: &str, model: &str) -> Option<&SpeakerBiography> {
        self.get(conversation_id, speaker, hash, model).or_else(|| {
            self.order
                .iter()
                .rev()
                .find(|(c, s, _, m)| c == conversation_id && s == speaker && m == model)
                .and_then(|k| self.entries.get(k))
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &SpeakerBiography> {
        self.order.iter().filter_map(|k| self.entries.get(k))
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|(p, _)| p.as_path())
    }

    /// Biographies of every speaker in `conv` produced by `model`.
    pub fn for_conversation(&self, conv: &Conversation, model: &str) -> Result<HashMap<String, SpeakerBiography>> {
        conv.speakers()
            .into_iter()
            .map(|s| {
                let hash = render_bio_prompt(conv, s)?.hash();
                self.find(&conv.conversation_id, s, &hash, model)
                    .cloned()
                    .map(|b| (s.to_string(), b))
                    .ok_or_else(|| Error::MissingBiography {
                        conversation_id: conv.conversation_id.clone(),
                        speaker: s.into(),
                    })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOptions {
    pub model_name: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub max_in_flight: usize,
}

impl ExtractOptions {
    pub fn new(model_name: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            max_tokens: 400,
            temperature: 0.0,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    /// One biography per speaker, in first-appearance order.
    pub biographies: Vec<SpeakerBiography>,
    pub client_calls: usize,
    /// Speakers whose completion call failed; their fallback is returned but not cached.
    pub failures: Vec<(String, String)>,
}

/// Biographies for every speaker of `conv`, served from `store` when cached.
pub fn extract_biographies(
    conv: &Conversation,
    client: &LlmClient,
    store: &mut BiographyStore,
    options: &ExtractOptions,
) -> Result<Extraction> {
    let prompts = conv
        .speakers()
        .into_iter()
        .map(|s| render_bio_prompt(conv, s))
        .collect::<Result<Vec<_>>>()?;

    let pending: Vec<&BiographyPrompt> = prompts
        .iter()
        .filter(|p| {
            store
                .get(&p.conversation_id, &p.speaker_id, &p.hash(), &options.model_name)
                .is_none()
        })
        .collect();

    let mut answers: HashMap<String, Result<String>> = HashMap::new();
    for chunk in pending.chunks(options.max_in_flight.max(1)) {
        let results: Vec<(String, Result<String>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|p| {
                    scope.spawn(move || {
                        let mut req = CompletionRequest::new(p.rendered_text.clone(), options.model_name.clone());
                        req.max_tokens = options.max_tokens;
                        req.temperature = options.temperature;
                        (p.speaker_id.clone(), client.complete(&req).map(|r| r.text))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("completion thread panicked"))
                .collect()
        });
        answers.extend(results);
    }

    let mut out = Vec::with_capacity(prompts.len());
    let mut failures = Vec::new();
    for p in &prompts {
        let hash = p.hash();
        if let Some(cached) = store.get(&p.conversation_id, &p.speaker_id, &hash, &options.model_name) {
            out.push(cached.clone());
            continue;
        }
        let mut bio = SpeakerBiography {
            conversation_id: p.conversation_id.clone(),
            speaker_id: p.speaker_id.clone(),
            text: String::new(),
            source_model: options.model_name.clone(),
            prompt_hash: hash,
            degraded: false,
        };
        match answers.remove(&p.speaker_id) {
            Some(Ok(text)) if !text.trim().is_empty() => {
                bio.text = text.trim().to_string();
                store.insert(bio.clone())?;
            }
            Some(Ok(_)) => {
                bio.text = fallback_text(&p.speaker_id);
                bio.degraded = true;
                store.insert(bio.clone())?;
            }
            Some(Err(e)) => {
                bio.text = fallback_text(&p.speaker_id);
                bio.degraded = true;
                failures.push((p.speaker_id.clone(), e.to_string()));
            }
            None => unreachable!("every pending speaker was queried"),
        }
        out.push(bio);
    }
    Ok(Extraction {
        biographies: out,
        client_calls: pending.len(),
        failures,
    })
}

/// Deterministic stand-in for a biography model: summarises the target
/// speaker's own lines from the prompt. Used by the mock transport.
pub fn mock_biography(prompt: &str) -> String {
    const ASK: &str = "what do you think about the characteristics of speaker ";
    let speaker = prompt
        .rfind(ASK)
        .map(|i| &prompt[i + ASK.len()..])
        .and_then(|rest| rest.split("? (Note:").next())
        .unwrap_or("")
        .to_string();
    let prefix = format!("{speaker}: ");
    let lines: Vec<&str> = prompt
        .lines()
        .filter_map(|l| l.strip_prefix(prefix.as_str()))
        .collect();
    if lines.is_empty() {
        return String::new();
    }
    let words: Vec<&str> = lines.iter().flat_map(|l| l.split_whitespace()).collect();
    let mut distinct: Vec<&str> = Vec::new();
    for w in &words {
        if !distinct.contains(w) {
            distinct.push(w);
        }
    }
    distinct.truncate(12);
    format!(
        "{speaker} speaks {} time(s) and often uses words like {}.",
        lines.len(),
        distinct.join(", ")
    )
}
