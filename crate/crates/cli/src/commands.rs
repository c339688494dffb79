use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use bioserc::bios::{extract_biographies, mock_biography, BiographyStore, ExtractOptions, SpeakerBiography};
use bioserc::corpus::{load_conversations, load_dataset, Conversation, LabelVocabulary, SplitSummary};
use bioserc::encoder::{EncoderBackend, ExternalEncoder};
use bioserc::eval::{
    aggregate_runs, bucket_curve, length_bucket_f1, significance_test, write_bucket_curve, Comparison,
    ConfusionCounts, EvalReport, RunScore,
};
use bioserc::instruct::{
    build_training_examples, predict_labels, train_adapters, write_examples, BiographySource, FtOptions,
    InstructionExample, LmCheckpoint, LoraConfig, ToyCausalLm, ToyLmConfig, TokenVocab,
};
use bioserc::llm::mock::FnTransport;
use bioserc::llm::{EndpointConfig, LlmClient, RetryPolicy};
use bioserc::model::{Checkpoint, ConversationInputs, ErcModel, ModelConfig, Variant};
use bioserc::train::{train, write_run_log};
use bioserc::{CompletionRequest, ToyEncoder, ToyEncoderConfig};
use serde::{Deserialize, Serialize};

use crate::config::{EncoderKind, LlmBackend, Loaded};

pub const FT_VARIANT: &str = "ft-llm";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Tsv,
    Json,
}

pub fn stats(files: &[PathBuf], names: &[String], format: Format) -> Result<String> {
    if files.is_empty() {
        bail!("no dataset files given");
    }
    let mut rows = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| {
            f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        });
        let data = load_conversations(f).with_context(|| format!("loading {}", f.display()))?;
        rows.push(SplitSummary::from_conversations(name, &data).with_context(|| format!("{}", f.display()))?);
    }
    Ok(match format {
        Format::Tsv => {
            let mut out = String::from(SplitSummary::TSV_HEADER);
            out.push('\n');
            for r in &rows {
                out.push_str(&r.tsv_row());
                out.push('\n');
            }
            out
        }
        Format::Json => serde_json::to_string_pretty(&rows)? + "\n",
    })
}

struct Corpus {
    vocab: LabelVocabulary,
    train: Vec<Conversation>,
    dev: Vec<Conversation>,
    test: Vec<Conversation>,
}

impl Corpus {
    fn load(cfg: &Loaded) -> Result<Self> {
        let d = &cfg.config.data;
        let vocab = LabelVocabulary::from_file(cfg.resolve(&d.labels))
            .with_context(|| format!("label vocabulary {}", d.labels))?;
        let load = |p: &str| {
            let path = cfg.resolve(p);
            load_dataset(&path, &vocab).with_context(|| format!("loading {}", path.display()))
        };
        Ok(Self {
            train: load(&d.train)?,
            dev: load(&d.dev)?,
            test: load(&d.test)?,
            vocab,
        })
    }

    fn split(&self, name: &str) -> Result<&[Conversation]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => bail!("unknown split {other:?}"),
        }
    }

    fn all(&self) -> impl Iterator<Item = &Conversation> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

fn encoder(cfg: &Loaded) -> Result<Box<dyn EncoderBackend<f64>>> {
    let e = &cfg.config.encoder;
    Ok(match e.backend {
        EncoderKind::Toy => Box::new(ToyEncoder::<f64>::new(ToyEncoderConfig {
            hidden_dim: e.hidden_dim,
            vocab_size: e.vocab_size,
            seed: e.seed,
        })?),
        EncoderKind::PretrainedAdapter => Box::new(ExternalEncoder::spawn(&e.command, e.hidden_dim)?),
    })
}

fn llm_client(cfg: &Loaded) -> Result<LlmClient> {
    let l = &cfg.config.llm;
    let mut endpoint = if l.url.is_empty() && l.backend == LlmBackend::Http {
        EndpointConfig::from_env()?
    } else {
        let mut e = EndpointConfig::new(l.url.clone());
        e.token = std::env::var(bioserc::llm::TOKEN_ENV).ok().filter(|t| !t.is_empty());
        e
    };
    endpoint.timeout = Duration::from_secs(l.timeout_s);
    endpoint.retry = RetryPolicy {
        max_retries: l.max_retries,
        backoff_base: Duration::from_millis(l.backoff_ms),
    };
    Ok(match l.backend {
        LlmBackend::Http => LlmClient::http(endpoint),
        LlmBackend::Mock => {
            let t = FnTransport::new(|req: &CompletionRequest| Ok(mock_biography(&req.prompt)));
            LlmClient::new(Arc::new(t), endpoint)
        }
    })
}

fn bios_path(cfg: &Loaded) -> PathBuf {
    cfg.resolve(&cfg.config.bios.path)
}

pub fn extract_bios(cfg: &Loaded) -> Result<String> {
    let corpus = Corpus::load(cfg)?;
    let client = llm_client(cfg)?;
    let path = bios_path(cfg);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut store = BiographyStore::open(&path)?;
    let l = &cfg.config.llm;
    let opts = ExtractOptions {
        model_name: l.model_name.clone(),
        max_tokens: l.max_tokens,
        temperature: l.temperature,
        max_in_flight: l.max_in_flight,
    };
    let (mut conversations, mut speakers, mut calls) = (0, 0, 0);
    let mut failures = Vec::new();
    for conv in corpus.all() {
        let ex = extract_biographies(conv, &client, &mut store, &opts)?;
        conversations += 1;
        speakers += ex.biographies.len();
        calls += ex.client_calls;
        failures.extend(ex.failures.into_iter().map(|(s, e)| format!("{}/{s}: {e}", conv.conversation_id)));
    }
    let new = calls - failures.len();
    let summary = format!(
        "extract-bios: conversations={conversations} speakers={speakers} new={new} cached={} failures={}",
        speakers - calls,
        failures.len()
    );
    if !failures.is_empty() {
        bail!("{summary}\n{}", failures.join("\n"));
    }
    Ok(summary)
}

fn variant_dir(cfg: &Loaded) -> PathBuf {
    cfg.output_dir().join(&cfg.config.model.variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub name: String,
    pub window: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
    pub steps: usize,
    pub best_epoch: usize,
    pub dev_weighted_f1: f64,
    /// Relative to the variant directory.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub runs: Vec<GridRun>,
    /// Best-on-dev grid point for each seed, in seed order.
    pub selected: Vec<GridRun>,
    pub config: serde_json::Value,
}

fn select_per_seed(runs: &[GridRun], seeds: &[u64]) -> Vec<GridRun> {
    seeds
        .iter()
        .filter_map(|&s| {
            runs.iter()
                .filter(|r| r.seed == s)
                .fold(None::<&GridRun>, |best, r| match best {
                    Some(b) if b.dev_weighted_f1 >= r.dev_weighted_f1 => Some(b),
                    _ => Some(r),
                })
                .cloned()
        })
        .collect()
}

fn biographies_for(
    store: &BiographyStore,
    convs: &[Conversation],
    model_name: &str,
) -> Result<Vec<HashMap<String, SpeakerBiography>>> {
    convs
        .iter()
        .map(|c| {
            store.for_conversation(c, model_name).map_err(|e| {
                anyhow!("{e}; run `bioserc extract-bios` with the same llm.model_name first")
            })
        })
        .collect()
}

fn load_store(cfg: &Loaded) -> Result<BiographyStore> {
    let path = bios_path(cfg);
    if !path.exists() {
        bail!(
            "biography file {} not found; run `bioserc extract-bios` first",
            path.display()
        );
    }
    Ok(BiographyStore::load(&path)?)
}

fn prepare_all(
    model: &ErcModel<f64>,
    convs: &[Conversation],
    bios: Option<&[HashMap<String, SpeakerBiography>]>,
    enc: &dyn EncoderBackend<f64>,
    vocab: &LabelVocabulary,
) -> Result<Vec<ConversationInputs<f64>>> {
    convs
        .iter()
        .enumerate()
        .map(|(i, c)| Ok(model.prepare(c, enc, bios.map(|b| &b[i]), vocab)?))
        .collect()
}

fn model_config(cfg: &Loaded, variant: Variant, hidden_dim: usize, n_labels: usize, w: usize, lr: f64, seed: u64) -> ModelConfig {
    let m = &cfg.config.model;
    let mut mc = ModelConfig::new(variant, hidden_dim, n_labels);
    mc.heads = m.heads;
    mc.head_dim = m.head_dim;
    mc.window = w;
    mc.learning_rate = lr;
    mc.dropout = m.dropout;
    mc.epochs = m.epochs;
    mc.max_steps = m.max_steps;
    mc.seed = seed;
    mc.optimizer = m.optimizer;
    mc.trainable_encoder_layers = m.trainable_encoder_layers;
    mc
}

pub fn train_cmd(cfg: &Loaded) -> Result<String> {
    if cfg.config.model.variant == FT_VARIANT {
        return train_ft(cfg);
    }
    let variant: Variant = cfg.config.model.variant.parse()?;
    let corpus = Corpus::load(cfg)?;
    let enc = encoder(cfg)?;
    let (train_bios, dev_bios) = if variant.uses_biographies() {
        let store = load_store(cfg)?;
        let name = &cfg.config.llm.model_name;
        (
            Some(biographies_for(&store, &corpus.train, name)?),
            Some(biographies_for(&store, &corpus.dev, name)?),
        )
    } else {
        (None, None)
    };
    let m = &cfg.config.model;
    let dir = variant_dir(cfg);
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    for &w in &m.windows {
        let mut cached: Option<(Vec<ConversationInputs<f64>>, Vec<ConversationInputs<f64>>)> = None;
        for &lr in &m.learning_rates {
            for &seed in &m.seeds {
                let mc = model_config(cfg, variant, enc.hidden_dim(), corpus.vocab.len(), w, lr, seed);
                let model = ErcModel::init(mc, &corpus.vocab, enc.as_ref())?;
                if cached.is_none() {
                    cached = Some((
                        prepare_all(&model, &corpus.train, train_bios.as_deref(), enc.as_ref(), &corpus.vocab)?,
                        prepare_all(&model, &corpus.dev, dev_bios.as_deref(), enc.as_ref(), &corpus.vocab)?,
                    ));
                }
                let (train_in, dev_in) = cached.as_ref().expect("prepared above");
                let out = train(model, train_in, dev_in)?;
                let name = format!("{}-w{w}-lr{lr}-s{seed}", variant.as_str());
                let run_dir = dir.join("runs").join(&name);
                let meta = serde_json::json!({
                    "config": cfg.echo(),
                    "grid": {"window": w, "learning_rate": lr, "seed": seed},
                });
                write_json(&run_dir.join("checkpoint.json"), &out.best.to_checkpoint(meta))?;
                write_run_log(&run_dir.join("run_log.csv"), &out.log)?;
                lines.push(format!("{name}\tdev_weighted_f1={:.4}\tsteps={}", out.best_score, out.steps));
                runs.push(GridRun {
                    name: name.clone(),
                    window: Some(w),
                    learning_rate: lr,
                    seed,
                    steps: out.steps,
                    best_epoch: out.best_epoch,
                    dev_weighted_f1: out.best_score,
                    checkpoint: format!("runs/{name}/checkpoint.json"),
                });
            }
        }
    }
    finish_training(cfg, &dir, runs, &m.seeds, lines)
}

fn finish_training(cfg: &Loaded, dir: &Path, runs: Vec<GridRun>, seeds: &[u64], mut lines: Vec<String>) -> Result<String> {
    let selected = select_per_seed(&runs, seeds);
    for s in &selected {
        lines.push(format!("selected seed={} run={} dev_weighted_f1={:.4}", s.seed, s.name, s.dev_weighted_f1));
    }
    let summary = TrainSummary {
        variant: cfg.config.model.variant.clone(),
        runs,
        selected,
        config: cfg.echo(),
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    Ok(lines.join("\n"))
}

fn ft_examples(cfg: &Loaded, corpus: &Corpus, split: &str, store: Option<&BiographyStore>) -> Result<Vec<InstructionExample>> {
    let src = store.map(|s| BiographySource {
        store: s,
        model_name: &cfg.config.llm.model_name,
    });
    build_training_examples(corpus.split(split)?, src, &corpus.vocab)
        .map_err(|e| anyhow!("{e}; biographies come from `bioserc extract-bios`"))
}

fn ft_store(cfg: &Loaded) -> Result<Option<BiographyStore>> {
    if cfg.config.ft.use_biographies {
        Ok(Some(load_store(cfg)?))
    } else {
        Ok(None)
    }
}

fn train_ft(cfg: &Loaded) -> Result<String> {
    let corpus = Corpus::load(cfg)?;
    let store = ft_store(cfg)?;
    let train_ex = ft_examples(cfg, &corpus, "train", store.as_ref())?;
    let dev_ex = ft_examples(cfg, &corpus, "dev", store.as_ref())?;
    let test_ex = ft_examples(cfg, &corpus, "test", store.as_ref())?;
    let dir = variant_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    write_examples(dir.join("train_examples.jsonl"), &train_ex)?;
    let texts = train_ex
        .iter()
        .map(|e| e.prompt.as_str())
        .chain(train_ex.iter().map(|e| e.completion.as_str()))
        .chain(dev_ex.iter().chain(&test_ex).map(|e| e.prompt.as_str()))
        .chain(corpus.vocab.labels().iter().map(String::as_str));
    let tokens = TokenVocab::build(texts);
    let ft = &cfg.config.ft;
    let lora = LoraConfig {
        rank: ft.rank,
        alpha: ft.alpha,
        targets: ft.targets.clone(),
    };
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    for &lr in &ft.learning_rates {
        for &seed in &ft.seeds {
            let mut lm = ToyCausalLm::<f64>::new(
                ToyLmConfig {
                    hidden_dim: ft.hidden_dim,
                    seed: ft.base_seed,
                },
                tokens.clone(),
            )?;
            lm.attach_lora(&lora, seed)?;
            let opts = FtOptions {
                epochs: ft.epochs,
                learning_rate: lr,
                seed,
                loss_span: ft.loss_span,
                optimizer: cfg.config.model.optimizer,
                max_steps: cfg.config.model.max_steps,
            };
            let log = train_adapters(&mut lm, &train_ex, &opts)?;
            let preds = predict_labels(&lm, &dev_ex, &corpus.vocab, ft.max_new_tokens)?;
            let gold: Vec<&str> = dev_ex.iter().map(|e| e.completion.as_str()).collect();
            let pred: Vec<&str> = preds.iter().map(|p| p.label_or_sentinel()).collect();
            let dev_f1 = bioserc::weighted_f1(&gold, &pred)?;
            let name = format!("{FT_VARIANT}-lr{lr}-s{seed}");
            let run_dir = dir.join("runs").join(&name);
            let meta = serde_json::json!({
                "config": cfg.echo(),
                "grid": {"learning_rate": lr, "seed": seed},
                "labels": corpus.vocab.labels(),
            });
            write_json(&run_dir.join("adapter.json"), &lm.to_checkpoint(Some(&lora), meta))?;
            let mut w = csv_writer(&run_dir.join("run_log.csv"))?;
            for row in &log {
                w.serialize(row)?;
            }
            w.flush()?;
            lines.push(format!("{name}\tdev_weighted_f1={dev_f1:.4}\tsteps={}", log.len()));
            runs.push(GridRun {
                name: name.clone(),
                window: None,
                learning_rate: lr,
                seed,
                steps: log.len(),
                best_epoch: ft.epochs,
                dev_weighted_f1: dev_f1,
                checkpoint: format!("runs/{name}/adapter.json"),
            });
        }
    }
    finish_training(cfg, &dir, runs, &ft.seeds, lines)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Predicted label strings per conversation of `split` for one selected run.
struct RunPredictions {
    labels: Vec<Vec<String>>,
    rows: Vec<PredictionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub conversation_id: String,
    pub utterance_index: usize,
    pub speaker_id: String,
    pub text: String,
    pub gold: Option<String>,
    pub predicted: String,
    pub distribution: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
}

fn load_summary(cfg: &Loaded) -> Result<TrainSummary> {
    let path = variant_dir(cfg).join("train_summary.json");
    if !path.exists() {
        bail!("{} not found; run `bioserc train` first", path.display());
    }
    read_json(&path)
}

fn run_predictions(cfg: &Loaded, corpus: &Corpus, run: &GridRun, split: &str) -> Result<RunPredictions> {
    let path = variant_dir(cfg).join(&run.checkpoint);
    let convs = corpus.split(split)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    if cfg.config.model.variant == FT_VARIANT {
        let ckpt: LmCheckpoint = read_json(&path)?;
        let lm = ToyCausalLm::<f64>::from_checkpoint(&ckpt)?;
        let store = ft_store(cfg)?;
        let examples = ft_examples(cfg, corpus, split, store.as_ref())?;
        let preds = predict_labels(&lm, &examples, &corpus.vocab, cfg.config.ft.max_new_tokens)?;
        let mut it = preds.into_iter();
        for conv in convs {
            let mut conv_labels = Vec::new();
            for u in &conv.utterances {
                let p = it.next().ok_or_else(|| anyhow!("prediction count mismatch"))?;
                conv_labels.push(p.label_or_sentinel().to_string());
                rows.push(PredictionRow {
                    conversation_id: conv.conversation_id.clone(),
                    utterance_index: u.index,
                    speaker_id: u.speaker_id.clone(),
                    text: u.text.clone(),
                    gold: u.gold_label.clone(),
                    predicted: p.label_or_sentinel().to_string(),
                    distribution: None,
                    generated: Some(p.generated),
                });
            }
            labels.push(conv_labels);
        }
    } else {
        let ckpt: Checkpoint = read_json(&path)?;
        let model = ErcModel::<f64>::from_checkpoint(&ckpt)?;
        let enc = encoder(cfg)?;
        let bios = if model.variant().uses_biographies() {
            Some(biographies_for(&load_store(cfg)?, convs, &cfg.config.llm.model_name)?)
        } else {
            None
        };
        let inputs = prepare_all(&model, convs, bios.as_deref(), enc.as_ref(), &corpus.vocab)?;
        for (conv, x) in convs.iter().zip(&inputs) {
            let preds = model.predict(x)?;
            labels.push(preds.iter().map(|p| p.predicted_label.clone()).collect());
            for (u, p) in conv.utterances.iter().zip(preds) {
                rows.push(PredictionRow {
                    conversation_id: conv.conversation_id.clone(),
                    utterance_index: u.index,
                    speaker_id: u.speaker_id.clone(),
                    text: u.text.clone(),
                    gold: u.gold_label.clone(),
                    predicted: p.predicted_label,
                    distribution: Some(model.labels().iter().cloned().zip(p.distribution).collect()),
                    generated: None,
                });
            }
        }
    }
    Ok(RunPredictions { labels, rows })
}

fn score_run(convs: &[Conversation], preds: &[Vec<String>]) -> Result<ConfusionCounts<String>> {
    let mut counts = ConfusionCounts::default();
    for (c, p) in convs.iter().zip(preds) {
        for (u, l) in c.utterances.iter().zip(p) {
            let gold = u
                .gold_label
                .as_ref()
                .ok_or_else(|| anyhow!("{} has unlabeled utterances", c.conversation_id))?;
            counts.record(gold, l);
        }
    }
    Ok(counts)
}

pub fn evaluate_cmd(cfg: &Loaded, split: &str, baseline: Option<&Path>) -> Result<String> {
    let corpus = Corpus::load(cfg)?;
    let summary = load_summary(cfg)?;
    let convs = corpus.split(split)?;
    let mut runs = Vec::new();
    let mut all_preds = Vec::new();
    let mut primary = None;
    for run in &summary.selected {
        let preds = run_predictions(cfg, &corpus, run, split)?;
        let counts = score_run(convs, &preds.labels)?;
        runs.push(RunScore {
            seed: run.seed,
            weighted_f1: counts.weighted_f1(),
        });
        if primary.is_none() {
            primary = Some((run.seed, counts, preds.labels.clone()));
        }
        all_preds.push(preds.labels);
    }
    let (primary_seed, counts, primary_preds) = primary.ok_or_else(|| anyhow!("no selected runs"))?;
    let n_buckets = cfg.config.eval.n_buckets;
    let scores: Vec<f64> = runs.iter().map(|r| r.weighted_f1).collect();
    let aggregate = aggregate_runs(&scores)?;
    let comparison = match baseline {
        Some(path) => {
            let base: EvalReport = read_json(path)?;
            let base_scores: Vec<f64> = base.runs.iter().map(|r| r.weighted_f1).collect();
            let test = significance_test(&scores, &base_scores, cfg.config.eval.ttest)?;
            Some(Comparison {
                baseline_mean: base.aggregate.mean,
                marker: test.marker().to_string(),
                test,
            })
        }
        None => None,
    };
    let report = EvalReport {
        split: split.to_string(),
        primary_seed,
        weighted_f1: counts.weighted_f1(),
        per_class_f1: counts.per_class_f1(),
        n_scored: counts.n() as usize,
        length_buckets: length_bucket_f1(convs, &primary_preds, n_buckets)?,
        runs,
        aggregate,
        comparison,
        config: cfg.echo(),
    };
    let dir = variant_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("eval_{split}.json")), report.to_json()?)?;
    std::fs::write(dir.join(format!("eval_{split}.tsv")), report.to_tsv())?;
    write_bucket_curve(
        dir.join(format!("length_curve_{split}.csv")),
        &bucket_curve(convs, &all_preds, n_buckets)?,
    )?;
    let mut line = format!(
        "evaluate: variant={} split={split} runs={} mean={:.4} min={:.4} max={:.4}",
        summary.variant, aggregate.n, aggregate.mean, aggregate.min, aggregate.max
    );
    if let Some(c) = &report.comparison {
        line.push_str(&format!(" p={:.4}{}", c.test.p_value, c.marker));
    }
    Ok(line)
}

pub fn predict_cmd(cfg: &Loaded, split: &str, seed: Option<u64>, out: Option<&Path>) -> Result<String> {
    let corpus = Corpus::load(cfg)?;
    let summary = load_summary(cfg)?;
    let run = match seed {
        Some(s) => summary
            .selected
            .iter()
            .find(|r| r.seed == s)
            .ok_or_else(|| anyhow!("no selected run for seed {s}"))?,
        None => summary.selected.first().ok_or_else(|| anyhow!("no selected runs"))?,
    };
    let preds = run_predictions(cfg, &corpus, run, split)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| variant_dir(cfg).join(format!("predictions_{split}_s{}.jsonl", run.seed)));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for row in &preds.rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    std::fs::write(&path, text)?;
    Ok(format!("predict: {} rows -> {}", preds.rows.len(), path.display()))
}
