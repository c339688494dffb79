//! Run configuration: one TOML document, with `BIOSERC__SECTION__KEY`
//! environment variables overriding individual keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bioserc::eval::TTestKind;
use bioserc::instruct::LossSpan;
use bioserc::OptimizerKind;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "BIOSERC__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub bios: BiosConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub ft: FtSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: String,
    pub dev: String,
    pub test: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Toy,
    /// An external encoder process wrapping a pretrained checkpoint.
    PretrainedAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backend: EncoderKind,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Program and arguments of an external encoder process.
    pub command: Vec<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: EncoderKind::Toy,
            hidden_dim: 16,
            vocab_size: 2048,
            seed: 17,
            command: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackend {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub backend: LlmBackend,
    pub model_name: String,
    /// Falls back to `BIOSERC_LLM_URL` when empty.
    pub url: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: LlmBackend::Mock,
            model_name: "mock".into(),
            url: String::new(),
            max_tokens: 400,
            temperature: 0.0,
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 500,
            timeout_s: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiosConfig {
    pub path: String,
}

impl Default for BiosConfig {
    fn default() -> Self {
        Self {
            path: "biographies.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `baseline`, `bios_mlp`, `bios_attention` or `ft-llm`.
    pub variant: String,
    pub heads: usize,
    pub head_dim: usize,
    pub windows: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub dropout: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerKind,
    pub trainable_encoder_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: "bios_attention".into(),
            heads: 2,
            head_dim: 8,
            windows: vec![2, 4],
            learning_rates: vec![0.5],
            dropout: 0.2,
            epochs: 30,
            max_steps: None,
            seeds: (0..10).collect(),
            optimizer: OptimizerKind::Sgd,
            trainable_encoder_layers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtSection {
    pub use_biographies: bool,
    pub hidden_dim: usize,
    pub base_seed: u64,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub loss_span: LossSpan,
    pub epochs: usize,
    pub learning_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_new_tokens: usize,
}

impl Default for FtSection {
    fn default() -> Self {
        let lora = bioserc::instruct::LoraConfig::default();
        Self {
            use_biographies: true,
            hidden_dim: 16,
            base_seed: 23,
            rank: lora.rank,
            alpha: lora.alpha,
            targets: lora.targets,
            loss_span: LossSpan::Completion,
            epochs: 3,
            learning_rates: vec![0.1],
            seeds: (0..5).collect(),
            max_new_tokens: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_buckets: usize,
    pub ttest: TTestKind,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_buckets: 4,
            ttest: TTestKind::Welch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

/// A loaded configuration and the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output.dir)
    }

    /// The configuration as written, for embedding in artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serialises")
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let mut overrides: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    overrides.sort();
    for (key, value) in overrides {
        apply_override(&mut table, &key[ENV_PREFIX.len()..], &value)?;
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("invalid config {}", path.display()))?;
    validate(&config)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Loaded { config, base_dir })
}

/// `SECTION__KEY=value`; the value is read as a TOML literal when it parses
/// as one, else as a string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<String> = key.split("__").map(str::to_lowercase).collect();
    if parts.iter().any(String::is_empty) {
        bail!("malformed override key {ENV_PREFIX}{key}");
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {ENV_PREFIX}{key}: {p} is not a section"))?;
    }
    cur.insert(last.clone(), parsed);
    Ok(())
}

fn validate(c: &RunConfig) -> Result<()> {
    let m = &c.model;
    if !matches!(m.variant.as_str(), "baseline" | "bios_mlp" | "bios_attention" | "ft-llm") {
        bail!("unknown model.variant {:?}", m.variant);
    }
    if m.seeds.is_empty() || c.ft.seeds.is_empty() {
        bail!("seed lists must be non-empty");
    }
    if m.windows.is_empty() || m.learning_rates.is_empty() || c.ft.learning_rates.is_empty() {
        bail!("grid lists must be non-empty");
    }
    if c.encoder.backend == EncoderKind::PretrainedAdapter && c.encoder.command.is_empty() {
        bail!("encoder.backend = \"pretrained-adapter\" needs encoder.command");
    }
    Ok(())
}
