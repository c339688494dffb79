//! Utterance classifier: pooled utterance vectors, global-context attention,
//! and a speaker vector from either intra/inter-speaker attention (baseline)
//! or encoded speaker biographies (MLP or attention injection).

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, multi_head_in, AttentionParams, AttentionVars, RelationKind, RelationMask};
use crate::autodiff::{masked_softmax_rows, Graph, Var};
use crate::bios::SpeakerBiography;
use crate::corpus::{build_window, Conversation, LabelVocabulary, Sentinels};
use crate::encoder::{encode_window, mix_in_graph, pool_in, target_token_range, EncoderBackend};
use crate::error::{Error, Result};
use crate::params::{Bound, OptimizerKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, MatrixRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Intra/inter-speaker attention.
    Baseline,
    /// Biography vector through a linear layer.
    BiosMlp,
    /// Biography vectors read by attention from an utterance/biography fusion.
    BiosAttention,
}

impl Variant {
    pub fn uses_biographies(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BiosMlp => "bios_mlp",
            Variant::BiosAttention => "bios_attention",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "bios_mlp" | "bios-mlp" => Ok(Variant::BiosMlp),
            "bios_attention" | "bios-attention" => Ok(Variant::BiosAttention),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub window: usize,
    pub num_labels: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Stops after this many updates even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// 0 keeps the encoder frozen; 1 fine-tunes the toy encoder's mixer layer.
    #[serde(default)]
    pub trainable_encoder_layers: usize,
    #[serde(default)]
    pub sentinels: Sentinels,
}

impl ModelConfig {
    pub fn new(variant: Variant, hidden_dim: usize, num_labels: usize) -> Self {
        Self {
            variant,
            hidden_dim,
            heads: 2,
            head_dim: hidden_dim.div_ceil(2).max(1),
            window: 2,
            num_labels,
            learning_rate: 0.5,
            dropout: 0.2,
            epochs: 30,
            max_steps: None,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            trainable_encoder_layers: 0,
            sentinels: Sentinels::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {}", self.num_labels)));
        }
        if self.hidden_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("hidden_dim, heads and head_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.trainable_encoder_layers > 1 {
            return Err(Error::Config(format!(
                "trainable_encoder_layers = {}; the toy encoder has a single trainable layer",
                self.trainable_encoder_layers
            )));
        }
        Ok(())
    }
}

pub mod names {
    pub const POOL: &str = "pool.w_u";
    pub const CTX: &str = "ctx";
    pub const INTRA: &str = "intra";
    pub const INTER: &str = "inter";
    pub const W_A: &str = "speaker.w_a";
    pub const W_R: &str = "speaker.w_r";
    pub const W_DESC: &str = "bios.w_desc";
    pub const B_DESC: &str = "bios.b_desc";
    pub const W_P: &str = "bios.w_p";
    pub const CLS_U: &str = "cls.w_u";
    pub const CLS_G: &str = "cls.w_g";
    pub const CLS_S: &str = "cls.w_s";
    pub const MIXER: &str = "encoder.mixer";
}

/// Per-utterance class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_index: usize,
    pub distribution: Vec<f64>,
    pub predicted_label: String,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Encoder output for one piece of text, frozen or ready for in-graph fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub enum TextFeatures<T> {
    /// Rows to use as-is (target word vectors, or the first-position vector).
    Encoded(Matrix<T>),
    /// Embeddings before the mixer layer and the rows to keep after it.
    Embedded { x: Matrix<T>, rows: Range<usize> },
}

/// Everything the model needs about one conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationInputs<T> {
    pub conversation_id: String,
    pub speaker_of: Vec<String>,
    /// Distinct speakers in first-appearance order.
    pub speakers: Vec<String>,
    pub utterances: Vec<TextFeatures<T>>,
    /// Aligned with `speakers`; present for biography variants.
    pub biographies: Option<Vec<TextFeatures<T>>>,
    pub gold: Option<Vec<usize>>,
}

impl<T> ConversationInputs<T> {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    fn speaker_indices(&self) -> Vec<usize> {
        self.speaker_of
            .iter()
            .map(|s| self.speakers.iter().position(|x| x == s).expect("speaker listed"))
            .collect()
    }
}

/// Graph nodes of one forward pass; `speaker` is d-dimensional.
#[derive(Debug, Clone, Copy)]
pub struct ForwardParts {
    pub h_utt: Var,
    pub context: Var,
    pub speaker: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErcModel<T> {
    config: ModelConfig,
    labels: Vec<String>,
    params: ParamStore<T>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub labels: Vec<String>,
    pub params: BTreeMap<String, MatrixRecord>,
    /// Run configuration echo for provenance.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl<T: Scalar> ErcModel<T> {
    /// Seeded initialisation; parameter groups depend on the variant.
    pub fn init(config: ModelConfig, vocab: &LabelVocabulary, encoder: &dyn EncoderBackend<T>) -> Result<Self> {
        config.validate()?;
        if config.num_labels != vocab.len() {
            return Err(Error::Config(format!(
                "num_labels {} does not match vocabulary of {}",
                config.num_labels,
                vocab.len()
            )));
        }
        let d = config.hidden_dim;
        if encoder.hidden_dim() != d {
            return Err(Error::Config(format!(
                "encoder width {} differs from model hidden_dim {d}",
                encoder.hidden_dim()
            )));
        }
        let k = config.num_labels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        p.insert(names::POOL, Matrix::uniform_fan_in(d, d, &mut rng));
        AttentionParams::init(d, config.heads, config.head_dim, &mut rng)?.insert_into(&mut p, names::CTX);
        match config.variant {
            Variant::Baseline => {
                AttentionParams::init(d, config.heads, config.head_dim, &mut rng)?.insert_into(&mut p, names::INTRA);
                AttentionParams::init(d, config.heads, config.head_dim, &mut rng)?.insert_into(&mut p, names::INTER);
                p.insert(names::W_A, Matrix::uniform_fan_in(d, d, &mut rng));
                p.insert(names::W_R, Matrix::uniform_fan_in(d, d, &mut rng));
            }
            Variant::BiosMlp => {
                p.insert(names::W_DESC, Matrix::uniform_fan_in(d, d, &mut rng));
                p.insert(names::B_DESC, Matrix::zeros(1, d));
            }
            Variant::BiosAttention => {
                p.insert(names::W_P, Matrix::uniform_fan_in(d, d, &mut rng));
            }
        }
        p.insert(names::CLS_U, Matrix::uniform_fan_in(d, k, &mut rng));
        p.insert(names::CLS_G, Matrix::uniform_fan_in(d, k, &mut rng));
        p.insert(names::CLS_S, Matrix::uniform_fan_in(d, k, &mut rng));
        if config.trainable_encoder_layers == 1 {
            let mixer = encoder
                .mixer()
                .ok_or_else(|| Error::Config("encoder backend has no fine-tunable layer".into()))?;
            mixer.insert_into(&mut p, names::MIXER);
        }
        Ok(Self {
            config,
            labels: vocab.labels().to_vec(),
            params: p,
        })
    }

    pub fn from_parts(config: ModelConfig, labels: Vec<String>, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, labels, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            labels: self.labels.clone(),
            params: self.params.to_records(),
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        Self::from_parts(ckpt.config.clone(), ckpt.labels.clone(), ParamStore::from_records(&ckpt.params)?)
    }

    fn fine_tunes_encoder(&self) -> bool {
        self.config.trainable_encoder_layers == 1
    }

    /// Encodes windows (and biographies for biography variants) of `conv`.
    pub fn prepare(
        &self,
        conv: &Conversation,
        encoder: &dyn EncoderBackend<T>,
        biographies: Option<&HashMap<String, SpeakerBiography>>,
        vocab: &LabelVocabulary,
    ) -> Result<ConversationInputs<T>> {
        let trainable = self.fine_tunes_encoder();
        let mut utterances = Vec::with_capacity(conv.len());
        for i in 0..conv.len() {
            let win = build_window(conv, i, self.config.window, &self.config.sentinels)?;
            if trainable {
                let (x, spans) = encoder
                    .embed(&win.token_text)?
                    .ok_or_else(|| Error::Config("encoder backend has no fine-tunable layer".into()))?;
                let rows = target_token_range(&spans, win.target_span)?;
                utterances.push(TextFeatures::Embedded { x, rows });
            } else {
                utterances.push(TextFeatures::Encoded(encode_window(&win, encoder)?.target_rows()));
            }
        }
        let speakers: Vec<String> = conv.speakers().into_iter().map(String::from).collect();
        let biographies = if self.config.variant.uses_biographies() {
            let bios = biographies.ok_or_else(|| {
                Error::Config(format!("variant {} requires speaker biographies", self.config.variant.as_str()))
            })?;
            let feats = speakers
                .iter()
                .map(|s| {
                    let bio = bios.get(s).ok_or_else(|| Error::MissingBiography {
                        conversation_id: conv.conversation_id.clone(),
                        speaker: s.clone(),
                    })?;
                    if bio.text.trim().is_empty() {
                        return Err(Error::Encoding(format!("biography of {s} is empty")));
                    }
                    if trainable {
                        let (x, _) = encoder
                            .embed(&bio.text)?
                            .ok_or_else(|| Error::Config("encoder backend has no fine-tunable layer".into()))?;
                        Ok(TextFeatures::Embedded { x, rows: 0..1 })
                    } else {
                        Ok(TextFeatures::Encoded(encoder.encode(&bio.text)?.first))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Some(feats)
        } else {
            None
        };
        let gold = conv
            .utterances
            .iter()
            .map(|u| u.gold_label.as_deref().and_then(|l| vocab.index_of(l)))
            .collect::<Option<Vec<usize>>>();
        Ok(ConversationInputs {
            conversation_id: conv.conversation_id.clone(),
            speaker_of: conv.speaker_sequence().into_iter().map(String::from).collect(),
            speakers,
            utterances,
            biographies,
            gold,
        })
    }

    /// Builds the forward pass on `g`, returning `n x K` logits.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        inputs: &ConversationInputs<T>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        Ok(self.forward_parts(g, bound, inputs, dropout)?.logits)
    }

    /// Forward pass keeping the intermediate representations.
    pub fn forward_parts(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        inputs: &ConversationInputs<T>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardParts> {
        if inputs.is_empty() {
            return Err(Error::Empty("conversation without utterances"));
        }
        let cfg = &self.config;
        let mixer = if self.fine_tunes_encoder() {
            Some(AttentionVars::from_bound(bound, names::MIXER, 1)?)
        } else {
            None
        };
        let w_pool = bound.var(names::POOL)?;
        let mut pooled = Vec::with_capacity(inputs.len());
        for feat in &inputs.utterances {
            let rows = text_rows(g, feat, mixer.as_ref())?;
            pooled.push(pool_in(g, rows, w_pool)?);
        }
        let h_utt = g.concat_rows(&pooled)?;
        let h_utt = apply_dropout(g, h_utt, cfg.dropout, dropout.as_deref_mut())?;

        let global = RelationMask::build(RelationKind::Global, &inputs.speaker_of)?;
        let ctx_vars = AttentionVars::from_bound(bound, names::CTX, cfg.heads)?;
        let ctx = multi_head_in(g, h_utt, Some(global.allowed()), &ctx_vars)?;
        let ctx = apply_dropout(g, ctx, cfg.dropout, dropout.as_deref_mut())?;

        let speaker = match cfg.variant {
            Variant::Baseline => {
                let intra_mask = RelationMask::build(RelationKind::Intra, &inputs.speaker_of)?;
                let inter_mask = RelationMask::build(RelationKind::Inter, &inputs.speaker_of)?;
                let intra_vars = AttentionVars::from_bound(bound, names::INTRA, cfg.heads)?;
                let inter_vars = AttentionVars::from_bound(bound, names::INTER, cfg.heads)?;
                let intra = multi_head_in(g, h_utt, Some(intra_mask.allowed()), &intra_vars)?;
                let intra = apply_dropout(g, intra, cfg.dropout, dropout.as_deref_mut())?;
                let inter = multi_head_in(g, h_utt, Some(inter_mask.allowed()), &inter_vars)?;
                let inter = apply_dropout(g, inter, cfg.dropout, dropout.as_deref_mut())?;
                baseline_speaker_in(g, intra, inter, bound.var(names::W_A)?, bound.var(names::W_R)?)?
            }
            Variant::BiosMlp | Variant::BiosAttention => {
                let feats = inputs.biographies.as_ref().ok_or_else(|| {
                    Error::Config(format!("variant {} requires speaker biographies", cfg.variant.as_str()))
                })?;
                let rows = feats
                    .iter()
                    .map(|f| text_rows(g, f, mixer.as_ref()))
                    .collect::<Result<Vec<_>>>()?;
                let desc = g.concat_rows(&rows)?;
                let per_utt = g.select_rows(desc, &inputs.speaker_indices())?;
                if cfg.variant == Variant::BiosMlp {
                    mlp_speaker_in(g, per_utt, bound.var(names::W_DESC)?, bound.var(names::B_DESC)?)?
                } else {
                    attention_speaker_in(g, per_utt, h_utt, desc, bound.var(names::W_P)?)?
                }
            }
        };
        let logits = logits_in(
            g,
            h_utt,
            ctx,
            speaker,
            bound.var(names::CLS_U)?,
            bound.var(names::CLS_G)?,
            bound.var(names::CLS_S)?,
        )?;
        Ok(ForwardParts {
            h_utt,
            context: ctx,
            speaker,
            logits,
        })
    }

    /// `(h_utt, h_contxt, h_speaker)` rows for every utterance, without dropout.
    pub fn representations(&self, inputs: &ConversationInputs<T>) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let parts = self.forward_parts(&mut g, &bound, inputs, None)?;
        Ok((
            g.value(parts.h_utt).clone(),
            g.value(parts.context).clone(),
            g.value(parts.speaker).clone(),
        ))
    }

    /// Mean cross-entropy over one conversation, with every parameter tracked.
    pub fn loss_graph(
        &self,
        inputs: &ConversationInputs<T>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Graph<T>, Bound, Var)> {
        let gold = inputs.gold.as_ref().ok_or_else(|| Error::Validation {
            conversation_id: inputs.conversation_id.clone(),
            message: "training requires gold labels on every utterance".into(),
        })?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| true);
        let logits = self.forward(&mut g, &bound, inputs, dropout)?;
        let loss = g.cross_entropy(logits, gold)?;
        Ok((g, bound, loss))
    }

    pub fn logits(&self, inputs: &ConversationInputs<T>) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let logits = self.forward(&mut g, &bound, inputs, None)?;
        Ok(g.value(logits).clone())
    }

    /// One prediction per utterance, in order.
    pub fn predict(&self, inputs: &ConversationInputs<T>) -> Result<Vec<Prediction>> {
        let logits = self.logits(inputs)?;
        (0..logits.rows())
            .map(|i| self.prediction_from_logits(i, logits.row(i)))
            .collect()
    }

    fn prediction_from_logits(&self, index: usize, logits: &[T]) -> Result<Prediction> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits for utterance {index}")));
        }
        let probs = masked_softmax_rows(&Matrix::row_vector(logits), None);
        let distribution: Vec<f64> = probs.as_slice().iter().map(|v| v.as_f64()).collect();
        let best = argmax(logits);
        Ok(Prediction {
            utterance_index: index,
            distribution,
            predicted_label: self.labels[best].clone(),
        })
    }

    fn require_variant(&self, wanted: Variant, op: &str) -> Result<()> {
        if self.config.variant != wanted {
            return Err(Error::Config(format!(
                "{op} is only defined for the {} variant, model is {}",
                wanted.as_str(),
                self.config.variant.as_str()
            )));
        }
        Ok(())
    }

    fn eval_graph<F>(&self, build: F) -> Result<Matrix<T>>
    where
        F: FnOnce(&mut Graph<T>, &Bound) -> Result<Var>,
    {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let out = build(&mut g, &bound)?;
        Ok(g.value(out).clone())
    }

    /// `h_intra W_a + h_inter W_r` (d-dimensional).
    pub fn baseline_speaker_vector(&self, h_intra: &Matrix<T>, h_inter: &Matrix<T>) -> Result<Matrix<T>> {
        self.require_variant(Variant::Baseline, "baseline_speaker_vector")?;
        self.eval_graph(|g, b| {
            let (a, r) = (g.constant(h_intra.clone()), g.constant(h_inter.clone()));
            baseline_speaker_in(g, a, r, b.var(names::W_A)?, b.var(names::W_R)?)
        })
    }

    /// `h_desc[p(u_i)] W_desc + b_desc`.
    pub fn bios_mlp_speaker_vector(
        &self,
        conv: &Conversation,
        i: usize,
        biographies: &HashMap<String, Matrix<T>>,
    ) -> Result<Matrix<T>> {
        self.require_variant(Variant::BiosMlp, "bios_mlp_speaker_vector")?;
        let desc = speaker_description(conv, i, biographies)?;
        self.eval_graph(|g, b| {
            let d = g.constant(desc.clone());
            mlp_speaker_in(g, d, b.var(names::W_DESC)?, b.var(names::B_DESC)?)
        })
    }

    /// Single-head attention from `h_desc[p(u_i)] W_p + h_utt_i` over all
    /// speakers' description vectors, without masking.
    pub fn bios_attention_speaker_vector(
        &self,
        conv: &Conversation,
        i: usize,
        h_utt_i: &Matrix<T>,
        biographies: &HashMap<String, Matrix<T>>,
    ) -> Result<Matrix<T>> {
        self.require_variant(Variant::BiosAttention, "bios_attention_speaker_vector")?;
        let own = speaker_description(conv, i, biographies)?;
        let all = conv
            .speakers()
            .into_iter()
            .map(|s| {
                biographies.get(s).cloned().ok_or_else(|| Error::MissingBiography {
                    conversation_id: conv.conversation_id.clone(),
                    speaker: s.into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.eval_graph(|g, b| {
            let own = g.constant(own.clone());
            let h = g.constant(h_utt_i.clone());
            let rows: Vec<Var> = all.iter().map(|m| g.constant(m.clone())).collect();
            let desc = g.concat_rows(&rows)?;
            attention_speaker_in(g, own, h, desc, b.var(names::W_P)?)
        })
    }

    /// Projects a d-dimensional speaker vector into label space.
    pub fn project_speaker(&self, h_speaker: &Matrix<T>) -> Result<Matrix<T>> {
        self.eval_graph(|g, b| {
            let s = g.constant(h_speaker.clone());
            g.matmul(s, b.var(names::CLS_S)?)
        })
    }

    /// `softmax(h_utt W_u + h_contxt W_g + h_speaker)` with `h_speaker`
    /// already in label space.
    pub fn classify(
        &self,
        index: usize,
        h_utt_i: &Matrix<T>,
        h_contxt_i: &Matrix<T>,
        h_speaker_k: &Matrix<T>,
    ) -> Result<Prediction> {
        let logits = self.eval_graph(|g, b| {
            let (u, c, s) = (
                g.constant(h_utt_i.clone()),
                g.constant(h_contxt_i.clone()),
                g.constant(h_speaker_k.clone()),
            );
            classify_in(g, u, c, s, b.var(names::CLS_U)?, b.var(names::CLS_G)?)
        })?;
        self.prediction_from_logits(index, logits.row(0))
    }
}

fn speaker_description<T: Scalar>(
    conv: &Conversation,
    i: usize,
    biographies: &HashMap<String, Matrix<T>>,
) -> Result<Matrix<T>> {
    let u = conv.utterances.get(i).ok_or(Error::IndexOutOfRange {
        index: i,
        len: conv.len(),
    })?;
    biographies.get(&u.speaker_id).cloned().ok_or_else(|| Error::MissingBiography {
        conversation_id: conv.conversation_id.clone(),
        speaker: u.speaker_id.clone(),
    })
}

fn text_rows<T: Scalar>(g: &mut Graph<T>, feat: &TextFeatures<T>, mixer: Option<&AttentionVars>) -> Result<Var> {
    match (feat, mixer) {
        (TextFeatures::Encoded(m), _) => Ok(g.constant(m.clone())),
        (TextFeatures::Embedded { x, rows }, Some(mixer)) => {
            let xv = g.constant(x.clone());
            let mixed = mix_in_graph(g, xv, mixer)?;
            let idx: Vec<usize> = rows.clone().collect();
            g.select_rows(mixed, &idx)
        }
        (TextFeatures::Embedded { .. }, None) => Err(Error::Config(
            "embedded features need a fine-tunable encoder layer".into(),
        )),
    }
}

fn apply_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let (r, c) = g.value(x).shape();
    let keep = T::of(1.0 / (1.0 - p));
    let mask = (0..r * c)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    g.mul_const(x, Matrix::from_vec(r, c, mask)?)
}

pub fn baseline_speaker_in<T: Scalar>(g: &mut Graph<T>, intra: Var, inter: Var, w_a: Var, w_r: Var) -> Result<Var> {
    let a = g.matmul(intra, w_a)?;
    let r = g.matmul(inter, w_r)?;
    g.add(a, r)
}

pub fn mlp_speaker_in<T: Scalar>(g: &mut Graph<T>, desc: Var, w_desc: Var, b_desc: Var) -> Result<Var> {
    let proj = g.matmul(desc, w_desc)?;
    g.add_row(proj, b_desc)
}

pub fn attention_speaker_in<T: Scalar>(
    g: &mut Graph<T>,
    own_desc: Var,
    h_utt: Var,
    all_desc: Var,
    w_p: Var,
) -> Result<Var> {
    let proj = g.matmul(own_desc, w_p)?;
    let fusion = g.add(proj, h_utt)?;
    attend(g, fusion, all_desc, all_desc, None)
}

pub fn classify_in<T: Scalar>(
    g: &mut Graph<T>,
    h_utt: Var,
    ctx: Var,
    speaker_k: Var,
    w_u: Var,
    w_g: Var,
) -> Result<Var> {
    let u = g.matmul(h_utt, w_u)?;
    let c = g.matmul(ctx, w_g)?;
    g.sum(&[u, c, speaker_k])
}

pub fn logits_in<T: Scalar>(
    g: &mut Graph<T>,
    h_utt: Var,
    ctx: Var,
    speaker: Var,
    w_u: Var,
    w_g: Var,
    w_s: Var,
) -> Result<Var> {
    let s = g.matmul(speaker, w_s)?;
    classify_in(g, h_utt, ctx, s, w_u, w_g)
}

/// Mean `-ln p(gold)` over predictions.
pub fn nll_loss(predictions: &[Prediction], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("loss over no predictions"));
    }
    let total = predictions
        .iter()
        .zip(gold)
        .map(|(p, &g)| {
            p.distribution
                .get(g)
                .map(|&q| -q.max(1e-300).ln())
                .ok_or(Error::IndexOutOfRange {
                    index: g,
                    len: p.distribution.len(),
                })
        })
        .sum::<Result<f64>>()?;
    Ok((total / predictions.len() as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ToyEncoder, ToyEncoderConfig};

    fn vocab() -> LabelVocabulary {
        LabelVocabulary::new("t", &["a", "b", "c"]).unwrap()
    }

    fn toy(d: usize) -> ToyEncoder<f64> {
        ToyEncoder::new(ToyEncoderConfig {
            hidden_dim: d,
            vocab_size: 64,
            seed: 5,
        })
        .unwrap()
    }

    fn model(variant: Variant) -> ErcModel<f64> {
        ErcModel::init(ModelConfig::new(variant, 4, 3), &vocab(), &toy(4)).unwrap()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn parameter_groups_follow_variant() {
        let b = model(Variant::Baseline);
        assert!(b.params().contains(names::W_A) && !b.params().contains(names::W_DESC));
        let m = model(Variant::BiosMlp);
        assert!(!m.params().contains(names::W_A) && m.params().contains(names::B_DESC));
        let a = model(Variant::BiosAttention);
        assert!(a.params().contains(names::W_P) && !a.params().contains(names::W_R));
    }

    #[test]
    fn baseline_vector_under_bios_variant_is_config_error() {
        let m = model(Variant::BiosMlp);
        let z = Matrix::zeros(1, 4);
        assert!(matches!(m.baseline_speaker_vector(&z, &z), Err(Error::Config(_))));
    }

    #[test]
    fn classify_uniform_when_projections_zero() {
        let mut m = model(Variant::Baseline);
        for name in [names::CLS_U, names::CLS_G] {
            *m.params_mut().get_mut(name).unwrap() = Matrix::zeros(4, 3);
        }
        let x = Matrix::filled(1, 4, 0.3);
        let p = m.classify(0, &x, &x, &Matrix::zeros(1, 3)).unwrap();
        for q in &p.distribution {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p.predicted_label, "a");

        let boosted = m.classify(0, &x, &x, &Matrix::from_rows(&[[0.0, 10.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(boosted.predicted_label, "b");
        assert!((boosted.distribution[1] - 0.999_909_208_384_340_9).abs() < 1e-12);
    }

    #[test]
    fn nll_examples() {
        let uniform = Prediction {
            utterance_index: 0,
            distribution: vec![1.0 / 7.0; 7],
            predicted_label: "x".into(),
        };
        assert!((nll_loss(&[uniform], &[3]).unwrap() - 7f64.ln()).abs() < 1e-12);
        let half = Prediction {
            utterance_index: 0,
            distribution: vec![0.5, 0.5],
            predicted_label: "x".into(),
        };
        assert!((nll_loss(&[half.clone()], &[0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let onehot = Prediction {
            utterance_index: 0,
            distribution: vec![0.0, 1.0],
            predicted_label: "x".into(),
        };
        assert_eq!(nll_loss(&[onehot], &[1]).unwrap(), 0.0);
        assert!(nll_loss(&[half], &[0, 1]).is_err());
    }
}
