//! Text encoders and utterance pooling.
//!
//! A backend maps text to per-token vectors plus a first-position vector.
//! The toy backend (hashed embedding table followed by one residual
//! self-attention mixer) is pure in-crate math and fully deterministic for a
//! given seed; [`ExternalEncoder`] bridges to a pretrained checkpoint served
//! by another process.

use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_in, AttentionParams, AttentionVars};
use crate::autodiff::{Graph, Var};
use crate::bios::SpeakerBiography;
use crate::corpus::WindowedInput;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Output of one encoder call.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding<T> {
    /// Vector at the first position (`[CLS]` / `<s>`).
    pub first: Matrix<T>,
    /// One row per token.
    pub tokens: Matrix<T>,
    /// Byte span of each token in the input text.
    pub spans: Vec<(usize, usize)>,
}

pub trait EncoderBackend<T: Scalar>: Send + Sync {
    fn hidden_dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Encoding<T>>;

    /// Token embeddings before the trainable layer, for backends that can be
    /// fine-tuned in-graph.
    fn embed(&self, _text: &str) -> Result<Option<(Matrix<T>, Vec<(usize, usize)>)>> {
        Ok(None)
    }

    /// Weights of the fine-tunable mixer layer, if any.
    fn mixer(&self) -> Option<&AttentionParams<T>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            vocab_size: 2048,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyEncoder<T> {
    config: ToyEncoderConfig,
    embedding: Matrix<T>,
    mixer: AttentionParams<T>,
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn new(config: ToyEncoderConfig) -> Result<Self> {
        if config.hidden_dim == 0 || config.vocab_size == 0 {
            return Err(Error::Config("toy encoder needs positive hidden_dim and vocab_size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let data = (0..config.vocab_size * d)
            .map(|_| T::of(rng.random_range(-1.0..=1.0)))
            .collect();
        let embedding = Matrix::from_vec(config.vocab_size, d, data)?;
        let mixer = AttentionParams::init(d, 1, d, &mut rng)?;
        Ok(Self {
            config,
            embedding,
            mixer,
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    fn token_id(&self, token: &str) -> usize {
        (fnv1a(normalize_token(token).as_bytes()) % self.config.vocab_size as u64) as usize
    }

    fn embed_tokens(&self, text: &str) -> Result<(Matrix<T>, Vec<(usize, usize)>)> {
        let spans = whitespace_spans(text);
        if spans.is_empty() {
            return Err(Error::Encoding("text has no tokens".into()));
        }
        let ids: Vec<usize> = spans.iter().map(|&(s, e)| self.token_id(&text[s..e])).collect();
        Ok((self.embedding.select_rows(&ids), spans))
    }
}

/// Residual self-attention mixer: `x + MultiHead(x, global)`.
pub fn mix_in_graph<T: Scalar>(g: &mut Graph<T>, x: Var, mixer: &AttentionVars) -> Result<Var> {
    let mixed = multi_head_in(g, x, None, mixer)?;
    g.add(x, mixed)
}

impl<T: Scalar> EncoderBackend<T> for ToyEncoder<T> {
    fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn encode(&self, text: &str) -> Result<Encoding<T>> {
        let (x, spans) = self.embed_tokens(text)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = self.mixer.bind(&mut g, false);
        let out = mix_in_graph(&mut g, xv, &vars)?;
        let tokens = g.value(out).clone();
        Ok(Encoding {
            first: tokens.select_rows(&[0]),
            tokens,
            spans,
        })
    }

    fn embed(&self, text: &str) -> Result<Option<(Matrix<T>, Vec<(usize, usize)>)>> {
        self.embed_tokens(text).map(Some)
    }

    fn mixer(&self) -> Option<&AttentionParams<T>> {
        Some(&self.mixer)
    }
}

fn normalize_token(token: &str) -> String {
    let trimmed = token.trim_matches(|c: char| c.is_ascii_punctuation());
    if trimmed.is_empty() {
        token.to_lowercase()
    } else {
        trimmed.to_lowercase()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn whitespace_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Tokens whose spans lie inside `target`.
pub fn target_token_range(spans: &[(usize, usize)], target: (usize, usize)) -> Result<Range<usize>> {
    let inside: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s >= target.0 && e <= target.1 && e > s)
        .map(|(i, _)| i)
        .collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(&b)) if b - a + 1 == inside.len() => Ok(a..b + 1),
        (Some(_), Some(_)) => Err(Error::Encoding("target tokens are not contiguous".into())),
        _ => Err(Error::Encoding(format!(
            "no tokens fall inside target span {}..{}",
            target.0, target.1
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEncoding<T> {
    pub cls: Matrix<T>,
    pub words: Matrix<T>,
    pub target_tokens: Range<usize>,
}

impl<T: Scalar> WindowEncoding<T> {
    pub fn target_rows(&self) -> Matrix<T> {
        let idx: Vec<usize> = self.target_tokens.clone().collect();
        self.words.select_rows(&idx)
    }
}

pub fn encode_window<T: Scalar>(
    win: &WindowedInput,
    backend: &dyn EncoderBackend<T>,
) -> Result<WindowEncoding<T>> {
    let enc = backend.encode(&win.token_text)?;
    if enc.tokens.rows() != enc.spans.len() {
        return Err(Error::Encoding(format!(
            "backend returned {} token rows for {} spans",
            enc.tokens.rows(),
            enc.spans.len()
        )));
    }
    let target_tokens = target_token_range(&enc.spans, win.target_span)?;
    Ok(WindowEncoding {
        cls: enc.first,
        words: enc.tokens,
        target_tokens,
    })
}

/// `tanh(mean(rows) · W_u)` on the graph.
pub fn pool_in<T: Scalar>(g: &mut Graph<T>, rows: Var, w_u: Var) -> Result<Var> {
    let mean = g.mean_rows(rows)?;
    let proj = g.matmul(mean, w_u)?;
    Ok(g.tanh(proj))
}

pub fn pool_utterance<T: Scalar>(h_words_target: &Matrix<T>, w_u: &Matrix<T>) -> Result<Matrix<T>> {
    if h_words_target.rows() == 0 {
        return Err(Error::Empty("no word vectors to pool"));
    }
    let mut g = Graph::new();
    let rows = g.constant(h_words_target.clone());
    let w = g.constant(w_u.clone());
    let out = pool_in(&mut g, rows, w)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBiography<T> {
    pub speaker_id: String,
    pub vector: Matrix<T>,
}

/// First-position output of the backend on the biography text.
pub fn encode_biography<T: Scalar>(
    bio: &SpeakerBiography,
    backend: &dyn EncoderBackend<T>,
) -> Result<EncodedBiography<T>> {
    if bio.text.trim().is_empty() {
        return Err(Error::Encoding(format!(
            "biography for {} is empty",
            bio.speaker_id
        )));
    }
    let enc = backend.encode(&bio.text)?;
    Ok(EncodedBiography {
        speaker_id: bio.speaker_id.clone(),
        vector: enc.first,
    })
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ExternalResponse {
    first: Vec<f64>,
    tokens: Vec<Vec<f64>>,
    spans: Vec<(usize, usize)>,
}

/// Adapter for an encoder served by a child process speaking line-delimited
/// JSON: `{"text": ...}` in, `{"first": [..], "tokens": [[..]], "spans": [[s, e]]}` out.
pub struct ExternalEncoder {
    hidden_dim: usize,
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl ExternalEncoder {
    pub fn spawn(command: &[String], hidden_dim: usize) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("pretrained-adapter needs a command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Encoding("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::Encoding("no stdout".into()))?;
        Ok(Self {
            hidden_dim,
            io: Mutex::new((child, stdin, BufReader::new(stdout))),
        })
    }
}

impl Drop for ExternalEncoder {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            let _ = io.0.kill();
            let _ = io.0.wait();
        }
    }
}

impl<T: Scalar> EncoderBackend<T> for ExternalEncoder {
    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn encode(&self, text: &str) -> Result<Encoding<T>> {
        let mut io = self
            .io
            .lock()
            .map_err(|_| Error::Encoding("encoder process lock poisoned".into()))?;
        let (_, stdin, stdout) = &mut *io;
        serde_json::to_writer(&mut *stdin, &ExternalRequest { text })?;
        stdin.write_all(b"\n")?;
        stdin.flush()?;
        let mut line = String::new();
        if stdout.read_line(&mut line)? == 0 {
            return Err(Error::Encoding("encoder process closed its output".into()));
        }
        let resp: ExternalResponse = serde_json::from_str(&line)?;
        let d = self.hidden_dim;
        if resp.first.len() != d || resp.tokens.iter().any(|r| r.len() != d) {
            return Err(Error::Encoding(format!("encoder process returned vectors not of width {d}")));
        }
        let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        let rows: Vec<Vec<T>> = resp.tokens.iter().map(|r| cast(r)).collect();
        Ok(Encoding {
            first: Matrix::row_vector(&cast(&resp.first)),
            tokens: Matrix::from_rows(&rows)?,
            spans: resp.spans,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_window, Conversation, Sentinels, Split, Utterance};

    fn toy(d: usize) -> ToyEncoder<f64> {
        ToyEncoder::new(ToyEncoderConfig {
            hidden_dim: d,
            vocab_size: 97,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn window_encoding_shape() {
        let conv = Conversation {
            conversation_id: "c".into(),
            split: Split::Test,
            utterances: ["hi", "yo"]
                .iter()
                .enumerate()
                .map(|(i, t)| Utterance {
                    index: i,
                    speaker_id: "A".into(),
                    text: t.to_string(),
                    gold_label: None,
                })
                .collect(),
        };
        let win = build_window(&conv, 1, 1, &Sentinels::default()).unwrap();
        assert_eq!(win.token_text, "[CLS] hi </s> yo </s>");
        let enc = encode_window(&win, &toy(4)).unwrap();
        assert_eq!(enc.words.shape(), (5, 4));
        assert_eq!(enc.target_tokens, 3..4);
        assert_eq!(enc, encode_window(&win, &toy(4)).unwrap());
    }

    #[test]
    fn missing_target_is_encoding_error() {
        let win = WindowedInput {
            target_index: 0,
            token_text: "[CLS] </s> hi </s>".into(),
            target_span: (100, 120),
        };
        assert!(matches!(encode_window(&win, &toy(4)), Err(Error::Encoding(_))));
    }

    #[test]
    fn pool_examples() {
        let rows = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let out = pool_utterance(&rows, &Matrix::identity(2)).unwrap();
        assert!((out[(0, 0)] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((out[(0, 0)] - 0.462_117_157_260_009_7).abs() < 1e-12);
        let zero = pool_utterance(&rows, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(zero.as_slice(), &[0.0, 0.0]);
        assert!(pool_utterance(&Matrix::<f64>::zeros(0, 2), &Matrix::identity(2)).is_err());
    }

    #[test]
    fn spans_cover_tokens() {
        assert_eq!(whitespace_spans(" ab  c "), vec![(1, 3), (5, 6)]);
        assert!(whitespace_spans("   ").is_empty());
    }
}
