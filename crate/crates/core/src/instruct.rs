//! Instruction fine-tuning path: prompt rendering, training examples,
//! low-rank adapters, the causal-LM objective and label parsing, with a small
//! in-repo causal LM behind the [`CausalLm`] interface.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{masked_softmax_rows, Graph, Var};
use crate::bios::{render_conversation, BiographyStore};
use crate::corpus::{Conversation, LabelVocabulary};
use crate::error::{Error, Result};
use crate::params::{OptimizerKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, MatrixRecord};

/// Renders the fine-tuning prompt for utterance `i` of `conv`.
///
/// `biography` is the target speaker's description, or `None` when
/// biographies are disabled. With `label` the prompt ends with the label text
/// (training), otherwise with an empty assistant turn (inference).
pub fn render_ft_prompt(conv: &Conversation, i: usize, biography: Option<&str>, label: Option<&str>) -> Result<String> {
    let u = conv.utterances.get(i).ok_or(Error::IndexOutOfRange {
        index: i,
        len: conv.len(),
    })?;
    let speaker = &u.speaker_id;
    let mut out = String::from(
        "system\n### You are an expert at analyzing the emotion of utterances among speakers in a conversation.\n",
    );
    if let Some(bio) = biography {
        out.push_str(&format!("### Given the characteristic of this speaker, {speaker}:\n{bio}\n"));
    }
    out.push_str("### Given the following conversation as a context\n");
    out.push_str(&render_conversation(conv));
    out.push_str(&format!(
        "\nuser\nBased on the above conversation and characteristics of the speakers, which emotional label of {speaker} in the utterance {} ?\nassistant\n",
        u.text
    ));
    if let Some(label) = label {
        out.push_str(label);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub speaker_id: String,
    pub with_biography: bool,
}

/// One prompt/completion pair; serialised as `{prompt, completion, meta}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub prompt: String,
    pub completion: String,
    pub meta: ExampleMeta,
}

#[derive(Debug, Clone, Copy)]
pub struct BiographySource<'a> {
    pub store: &'a BiographyStore,
    pub model_name: &'a str,
}

/// One example per utterance, in corpus order.
pub fn build_training_examples(
    data: &[Conversation],
    biographies: Option<BiographySource<'_>>,
    vocab: &LabelVocabulary,
) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for conv in data {
        let bios = biographies
            .map(|src| src.store.for_conversation(conv, src.model_name))
            .transpose()?;
        for (i, u) in conv.utterances.iter().enumerate() {
            let label = u
                .gold_label
                .as_deref()
                .ok_or_else(|| Error::Validation {
                    conversation_id: conv.conversation_id.clone(),
                    message: format!("utterance {i} has no label"),
                })?;
            let label = vocab
                .index_of(label)
                .and_then(|k| vocab.label(k))
                .ok_or_else(|| Error::Validation {
                    conversation_id: conv.conversation_id.clone(),
                    message: format!("label {label:?} not in vocabulary"),
                })?;
            let bio = match &bios {
                Some(map) => Some(
                    map.get(&u.speaker_id)
                        .ok_or_else(|| Error::MissingBiography {
                            conversation_id: conv.conversation_id.clone(),
                            speaker: u.speaker_id.clone(),
                        })?
                        .text
                        .as_str(),
                ),
                None => None,
            };
            out.push(InstructionExample {
                prompt: render_ft_prompt(conv, i, bio, None)?,
                completion: label.to_string(),
                meta: ExampleMeta {
                    conversation_id: conv.conversation_id.clone(),
                    utterance_index: i,
                    speaker_id: u.speaker_id.clone(),
                    with_biography: bio.is_some(),
                },
            });
        }
    }
    Ok(out)
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[InstructionExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<InstructionExample>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Maps generated text to a label: trimmed, case-insensitive and stripped of
/// surrounding punctuation, else the longest label contained in the text.
pub fn parse_label(generated: &str, vocab: &LabelVocabulary) -> Result<String> {
    let norm = generated
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase();
    if let Some(k) = vocab.index_of(&norm) {
        return Ok(vocab.label(k).expect("index from vocabulary").to_string());
    }
    let lowered = generated.to_lowercase();
    vocab
        .labels()
        .iter()
        .filter(|l| lowered.contains(l.to_lowercase().as_str()))
        .max_by_key(|l| l.len())
        .cloned()
        .ok_or_else(|| Error::Unparseable(generated.to_string()))
}

/// Mean `-ln p` over `span`, with probabilities clamped at `1e-12`.
pub fn causal_lm_loss(token_probs: &[f64], span: Range<usize>) -> Result<f64> {
    if span.is_empty() || span.end > token_probs.len() {
        return Err(Error::Shape(format!(
            "loss span {span:?} outside sequence of {} predictions",
            token_probs.len()
        )));
    }
    let probs = &token_probs[span];
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(Error::Numeric(format!("token probability {p} outside [0, 1]")));
    }
    let total: f64 = probs.iter().map(|p| -p.max(1e-12).ln()).sum();
    Ok((total / probs.len() as f64).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            alpha: 4.0,
            targets: vec![MIX.into(), HEAD.into()],
        }
    }
}

/// Low-rank update `(alpha / r) B A` for a base matrix of shape `m x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Gaussian `A` (std `1/sqrt(n)`), zero `B`.
    pub fn init(m: usize, n: usize, config: &LoraConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, 1.0 / (n.max(1) as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let a = (0..config.rank * n).map(|_| T::of(normal.sample(rng))).collect();
        Ok(Self {
            a: Matrix::from_vec(config.rank, n, a)?,
            b: Matrix::zeros(m, config.rank),
            alpha: config.alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> T {
        T::of(self.alpha / self.rank() as f64)
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

pub fn lora_effective_weight<T: Scalar>(base: &Matrix<T>, adapter: &LoraAdapter<T>) -> Result<Matrix<T>> {
    if adapter.b.cols() != adapter.a.rows() || (adapter.b.rows(), adapter.a.cols()) != base.shape() {
        return Err(Error::Shape(format!(
            "adapter B {:?} A {:?} does not fit base {:?}",
            adapter.b.shape(),
            adapter.a.shape(),
            base.shape()
        )));
    }
    base.add(&adapter.b.matmul(&adapter.a)?.scale(adapter.scale()))
}

/// `r (m + n)` for a base matrix of shape `m x n`.
pub fn lora_parameter_count(m: usize, n: usize, rank: usize) -> usize {
    rank * (m + n)
}

/// Next-token distributions given a prefix of token ids.
pub trait CausalLm {
    fn vocab(&self) -> &TokenVocab;

    fn next_token_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// `P(x_z | x_<z)` for `z = 1..len`.
    fn token_probs(&self, seq: &[usize]) -> Result<Vec<f64>> {
        (1..seq.len())
            .map(|z| {
                let p = self.next_token_probs(&seq[..z])?;
                p.get(seq[z]).copied().ok_or(Error::IndexOutOfRange {
                    index: seq[z],
                    len: p.len(),
                })
            })
            .collect()
    }
}

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Whitespace word vocabulary with reserved ids for `<s>`, `</s>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = [BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for t in texts {
            seen.extend(t.split_whitespace().map(String::from));
        }
        tokens.extend(seen.into_iter().filter(|t| ![BOS, EOS, UNK].contains(&t.as_str())));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(2)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }
}

/// Which predicted positions contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpan {
    #[default]
    Completion,
    Full,
}

/// Token ids of `<s> prompt completion </s>` and the loss span over
/// [`CausalLm::token_probs`] positions.
pub fn encode_example(vocab: &TokenVocab, ex: &InstructionExample, span: LossSpan) -> (Vec<usize>, Range<usize>) {
    let mut seq = vec![vocab.bos()];
    seq.extend(vocab.encode(&ex.prompt));
    let prompt_len = seq.len() - 1;
    seq.extend(vocab.encode(&ex.completion));
    seq.push(vocab.eos());
    let n = seq.len() - 1;
    let range = match span {
        LossSpan::Completion => prompt_len..n,
        LossSpan::Full => 0..n,
    };
    (seq, range)
}

pub const MIX: &str = "mix";
pub const HEAD: &str = "head";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self { hidden_dim: 16, seed: 23 }
    }
}

/// `h = tanh((E[x_{z-1}] + mean E[x_<z]) W_mix)`, `logits = h W_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCausalLm<T> {
    config: ToyLmConfig,
    vocab: TokenVocab,
    embed: Matrix<T>,
    base: BTreeMap<String, Matrix<T>>,
    adapters: BTreeMap<String, LoraAdapter<T>>,
}

impl<T: Scalar> ToyCausalLm<T> {
    pub fn new(config: ToyLmConfig, vocab: TokenVocab) -> Result<Self> {
        if config.hidden_dim == 0 || vocab.is_empty() {
            return Err(Error::Config("toy LM needs a positive width and a vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let embed = Matrix::<T>::uniform_fan_in(1, vocab.len() * d, &mut rng);
        let embed = Matrix::from_vec(vocab.len(), d, embed.as_slice().to_vec())?;
        let mut base = BTreeMap::new();
        base.insert(MIX.to_string(), Matrix::uniform_fan_in(d, d, &mut rng));
        base.insert(HEAD.to_string(), Matrix::uniform_fan_in(d, vocab.len(), &mut rng));
        Ok(Self {
            config,
            vocab,
            embed,
            base,
            adapters: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn base_weight(&self, name: &str) -> Result<&Matrix<T>> {
        self.base
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown target matrix {name:?}")))
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter<T>> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut BTreeMap<String, LoraAdapter<T>> {
        &mut self.adapters
    }

    /// Attaches fresh adapters to every configured target.
    pub fn attach_lora(&mut self, config: &LoraConfig, seed: u64) -> Result<()> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = BTreeMap::new();
        for name in &config.targets {
            let (m, n) = self.base_weight(name)?.shape();
            adapters.insert(name.clone(), LoraAdapter::init(m, n, config, &mut rng)?);
        }
        self.adapters = adapters;
        Ok(())
    }

    pub fn full_parameter_count(&self) -> usize {
        self.embed.len() + self.base.values().map(Matrix::len).sum::<usize>()
    }

    pub fn adapter_parameter_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::trainable_count).sum()
    }

    fn effective(&self, name: &str) -> Result<Matrix<T>> {
        let w = self.base_weight(name)?;
        match self.adapters.get(name) {
            Some(a) => lora_effective_weight(w, a),
            None => Ok(w.clone()),
        }
    }

    /// Input features for predicting each of `positions` in `seq`.
    fn features(&self, seq: &[usize], positions: Range<usize>) -> Result<Matrix<T>> {
        let d = self.config.hidden_dim;
        let mut out = Matrix::zeros(positions.len(), d);
        let mut running = vec![T::zero(); d];
        let mut z_done = 0;
        for (r, z) in positions.enumerate() {
            while z_done < z {
                let id = *seq.get(z_done).ok_or(Error::IndexOutOfRange {
                    index: z_done,
                    len: seq.len(),
                })?;
                if id >= self.vocab.len() {
                    return Err(Error::IndexOutOfRange {
                        index: id,
                        len: self.vocab.len(),
                    });
                }
                for (acc, &e) in running.iter_mut().zip(self.embed.row(id)) {
                    *acc += e;
                }
                z_done += 1;
            }
            let last = self.embed.row(seq[z - 1]);
            let count = T::of(z as f64);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = last[j] + running[j] / count;
            }
        }
        Ok(out)
    }

    fn logits_in(&self, g: &mut Graph<T>, feats: Var, mix: Var, head: Var) -> Result<Var> {
        let pre = g.matmul(feats, mix)?;
        let h = g.tanh(pre);
        g.matmul(h, head)
    }

    /// Mean cross-entropy over `span` with adapter matrices tracked; the map
    /// holds each target's `(A, B)` variables.
    #[allow(clippy::type_complexity)]
    pub fn adapter_loss_graph(
        &self,
        seq: &[usize],
        span: Range<usize>,
    ) -> Result<(Graph<T>, BTreeMap<String, (Var, Var)>, Var)> {
        let mut g = Graph::new();
        let feats = self.features(seq, span.start + 1..span.end + 1)?;
        let feats = g.constant(feats);
        let mut vars = BTreeMap::new();
        let mut weights = Vec::new();
        for name in [MIX, HEAD] {
            let base = g.constant(self.base_weight(name)?.clone());
            let w = match self.adapters.get(name) {
                Some(ad) => {
                    let a = g.param(ad.a.clone());
                    let b = g.param(ad.b.clone());
                    let ba = g.matmul(b, a)?;
                    let delta = g.scale(ba, ad.scale());
                    vars.insert(name.to_string(), (a, b));
                    g.add(base, delta)?
                }
                None => base,
            };
            weights.push(w);
        }
        let logits = self.logits_in(&mut g, feats, weights[0], weights[1])?;
        let targets: Vec<usize> = (span.start + 1..span.end + 1).map(|z| seq[z]).collect();
        let loss = g.cross_entropy(logits, &targets)?;
        Ok((g, vars, loss))
    }

    /// Greedy decoding after `<s> prompt`, stopping at `</s>`.
    pub fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        let mut seq = vec![self.vocab.bos()];
        seq.extend(self.vocab.encode(prompt));
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            let probs = self.next_token_probs(&seq)?;
            let next = crate::model::argmax(&probs);
            if next == self.vocab.eos() {
                break;
            }
            out.push(self.vocab.token(next).to_string());
            seq.push(next);
        }
        Ok(out.join(" "))
    }

    pub fn to_checkpoint(&self, lora: Option<&LoraConfig>, meta: serde_json::Value) -> LmCheckpoint {
        let mut base: BTreeMap<String, MatrixRecord> =
            self.base.iter().map(|(k, v)| (k.clone(), v.into())).collect();
        base.insert("embed".into(), (&self.embed).into());
        let adapters = self
            .adapters
            .iter()
            .map(|(k, a)| {
                (
                    k.clone(),
                    AdapterRecord {
                        rank: a.rank(),
                        alpha: a.alpha,
                        a: (&a.a).into(),
                        b: (&a.b).into(),
                    },
                )
            })
            .collect();
        LmCheckpoint {
            format_version: LM_CHECKPOINT_VERSION,
            config: self.config.clone(),
            tokens: self.vocab.tokens.clone(),
            lora: lora.cloned(),
            base,
            adapters,
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: &LmCheckpoint) -> Result<Self> {
        if ckpt.format_version != LM_CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported LM checkpoint version {}", ckpt.format_version)));
        }
        let mut base = BTreeMap::new();
        let mut embed = None;
        for (k, rec) in &ckpt.base {
            let m = rec.to_matrix()?;
            if k == "embed" {
                embed = Some(m);
            } else {
                base.insert(k.clone(), m);
            }
        }
        let adapters = ckpt
            .adapters
            .iter()
            .map(|(k, r)| {
                Ok((
                    k.clone(),
                    LoraAdapter {
                        a: r.a.to_matrix()?,
                        b: r.b.to_matrix()?,
                        alpha: r.alpha,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: ckpt.config.clone(),
            vocab: TokenVocab::from_tokens(ckpt.tokens.clone()),
            embed: embed.ok_or_else(|| Error::Config("checkpoint lacks embeddings".into()))?,
            base,
            adapters,
        })
    }
}

impl<T: Scalar> CausalLm for ToyCausalLm<T> {
    fn vocab(&self) -> &TokenVocab {
        &self.vocab
    }

    fn next_token_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Empty("prefix"));
        }
        let z = prefix.len();
        let feats = self.features(prefix, z..z + 1)?;
        let h = feats.matmul(&self.effective(MIX)?)?.map(|v| v.tanh());
        let logits = h.matmul(&self.effective(HEAD)?)?;
        Ok(masked_softmax_rows(&logits, None)
            .as_slice()
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

pub const LM_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub rank: usize,
    pub alpha: f64,
    pub a: MatrixRecord,
    pub b: MatrixRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmCheckpoint {
    pub format_version: u32,
    pub config: ToyLmConfig,
    pub tokens: Vec<String>,
    pub lora: Option<LoraConfig>,
    pub base: BTreeMap<String, MatrixRecord>,
    pub adapters: BTreeMap<String, AdapterRecord>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss_span: LossSpan,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for FtOptions {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 0.1,
            seed: 0,
            loss_span: LossSpan::Completion,
            optimizer: OptimizerKind::Sgd,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtLogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Trains only the attached adapters, one example per step.
pub fn train_adapters<T: Scalar>(
    lm: &mut ToyCausalLm<T>,
    examples: &[InstructionExample],
    options: &FtOptions,
) -> Result<Vec<FtLogRow>> {
    if lm.adapters.is_empty() {
        return Err(Error::Config("no adapters attached".into()));
    }
    if examples.is_empty() {
        return Err(Error::Empty("fine-tuning examples"));
    }
    let encoded: Vec<_> = examples
        .iter()
        .map(|ex| encode_example(&lm.vocab, ex, options.loss_span))
        .collect();
    let mut store = ParamStore::new();
    let mut opt = options.optimizer.build(T::of(options.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let max_steps = options.max_steps.unwrap_or(usize::MAX);
    let mut log = Vec::new();
    let mut step = 0;
    'outer: for epoch in 1..=options.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (seq, span) = &encoded[i];
            let (g, vars, loss) = lm.adapter_loss_graph(seq, span.clone())?;
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: step + 1,
                    message: format!("loss is {value}"),
                });
            }
            let grads = g.backward(loss)?;
            let mut named = BTreeMap::new();
            for (name, (a, b)) in &vars {
                let ad = &lm.adapters[name];
                store.insert(format!("{name}.a"), ad.a.clone());
                store.insert(format!("{name}.b"), ad.b.clone());
                if let Some(ga) = grads.get(*a) {
                    named.insert(format!("{name}.a"), ga.clone());
                }
                if let Some(gb) = grads.get(*b) {
                    named.insert(format!("{name}.b"), gb.clone());
                }
            }
            opt.step(&mut store, &named);
            for (name, ad) in lm.adapters.iter_mut() {
                ad.a = store.require(&format!("{name}.a"))?.clone();
                ad.b = store.require(&format!("{name}.b"))?.clone();
            }
            step += 1;
            log.push(FtLogRow { step, epoch, loss: value });
            if step >= max_steps {
                break 'outer;
            }
        }
    }
    Ok(log)
}

/// Generated text and parsed label for one example; unparseable output keeps
/// `label = None` and is scored as wrong.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtPrediction {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub generated: String,
    pub label: Option<String>,
}

pub const UNPARSEABLE: &str = "<unparseable>";

impl FtPrediction {
    pub fn label_or_sentinel(&self) -> &str {
        self.label.as_deref().unwrap_or(UNPARSEABLE)
    }
}

pub fn predict_labels<L: Generate + ?Sized>(
    lm: &L,
    examples: &[InstructionExample],
    vocab: &LabelVocabulary,
    max_new_tokens: usize,
) -> Result<Vec<FtPrediction>> {
    examples
        .iter()
        .map(|ex| {
            let generated = lm.generate_text(&ex.prompt, max_new_tokens)?;
            Ok(FtPrediction {
                conversation_id: ex.meta.conversation_id.clone(),
                utterance_index: ex.meta.utterance_index,
                label: parse_label(&generated, vocab).ok(),
                generated,
            })
        })
        .collect()
}

/// Text generation for a prompt.
pub trait Generate {
    fn generate_text(&self, prompt: &str, max_new_tokens: usize) -> Result<String>;
}

impl<T: Scalar> Generate for ToyCausalLm<T> {
    fn generate_text(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        self.generate(prompt, max_new_tokens)
    }
}

/// Mean causal-LM loss of `examples` under `lm`.
pub fn mean_example_loss<L: CausalLm + ?Sized>(lm: &L, examples: &[InstructionExample], span: LossSpan) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        let (seq, range) = encode_example(lm.vocab(), ex, span);
        total += causal_lm_loss(&lm.token_probs(&seq)?, range)?;
    }
    Ok(total / examples.len() as f64)
}
