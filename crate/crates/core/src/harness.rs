//! Config-driven experiment runs.
//!
//! A run loads and normalizes the data, trains one model, predicts the test
//! split and writes everything into `<out>/<timestamp>-<seed>/`:
//!
//! | file               | contents                                            |
//! |--------------------|-----------------------------------------------------|
//! | `config.json`      | the input config, byte for byte                     |
//! | `predictions.tsv`  | `id<TAB>gold<TAB>pred`, test order                  |
//! | `report.json`      | metrics on the test split (no timestamps)           |
//! | `run.json`         | effective seed, wall time, test-set fingerprint     |
//! | `model.json`       | naive Bayes runs                                    |
//! | `weights.bin`, `vocab.txt`, `history.jsonl` | encoder runs               |
//!
//! `<out>/latest` names the most recent run directory. Relative paths in a
//! config file are resolved against the file's directory.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    load_dataset_with, stratified_split, CorpusError, Dataset, Label, NormalizeOptions, SentimentScale, Subtask,
};
use crate::encoder::{self, EncoderConfig, EncoderError, EncoderModel, EpochRecord, PretrainConfig, TrainConfig};
use crate::fixtures;
use crate::metrics::{compute_metrics, confusion, render_table, MetricsError, MetricsReport, Summary};
use crate::nb::{train_nb, NbError, NbModel, DEFAULT_ALPHA};
use crate::tokenizer::{
    build_vocab, encode_dataset, EncodeOptions, TokenizerError, Vocab, DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "TWEETBENCH_OUT";
pub const DEFAULT_OUTPUT: &str = "runs";
const DEV_FRACTION: f64 = 0.1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Tokenize,
    Pretrain,
    Train,
    Predict,
    Evaluate,
    Persist,
    Compare,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("[{stage}] {source}")]
    Corpus { stage: Stage, source: CorpusError },
    #[error("[{stage}] {source}")]
    Tokenizer { stage: Stage, source: TokenizerError },
    #[error("[{stage}] {source}")]
    Encoder { stage: Stage, source: EncoderError },
    #[error("[{stage}] {source}")]
    Nb { stage: Stage, source: NbError },
    #[error("[{stage}] {source}")]
    Metrics { stage: Stage, source: MetricsError },
    #[error("[{stage}] {}: {source}", path.display())]
    Io {
        stage: Stage,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("[{stage}] {message}")]
    Invalid { stage: Stage, message: String },
}

impl HarnessError {
    pub fn stage(&self) -> Stage {
        match self {
            Self::Corpus { stage, .. }
            | Self::Tokenizer { stage, .. }
            | Self::Encoder { stage, .. }
            | Self::Nb { stage, .. }
            | Self::Metrics { stage, .. }
            | Self::Io { stage, .. }
            | Self::Invalid { stage, .. } => *stage,
        }
    }

    /// Failures of the optimization itself, as opposed to bad input.
    pub fn is_training_failure(&self) -> bool {
        matches!(self.stage(), Stage::Train | Stage::Pretrain)
    }

    fn invalid(stage: Stage, message: impl Into<String>) -> Self {
        Self::Invalid {
            stage,
            message: message.into(),
        }
    }

    fn io(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            stage,
            path: path.to_path_buf(),
            source,
        }
    }
}

fn at<E, F: FnOnce(Stage, E) -> HarnessError>(stage: Stage, wrap: F) -> impl FnOnce(E) -> HarnessError {
    move |e| wrap(stage, e)
}

fn corpus_err(stage: Stage, source: CorpusError) -> HarnessError {
    HarnessError::Corpus { stage, source }
}
fn tok_err(stage: Stage, source: TokenizerError) -> HarnessError {
    HarnessError::Tokenizer { stage, source }
}
fn enc_err(stage: Stage, source: EncoderError) -> HarnessError {
    HarnessError::Encoder { stage, source }
}
fn nb_err(stage: Stage, source: NbError) -> HarnessError {
    HarnessError::Nb { stage, source }
}
fn metrics_err(stage: Stage, source: MetricsError) -> HarnessError {
    HarnessError::Metrics { stage, source }
}

/// Architecture of the encoder; vocabulary size, class count, sequence
/// length and seed come from the rest of the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderArch {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderArch {
    fn default() -> Self {
        let d = EncoderConfig::desk(1, 1);
        Self {
            num_layers: d.num_layers,
            hidden_size: d.hidden_size,
            num_heads: d.num_heads,
            ffn_size: d.ffn_size,
            dropout_rate: d.dropout_rate,
        }
    }
}

impl EncoderArch {
    pub fn config(
        &self,
        vocab_size: usize,
        max_len: usize,
        num_classes: usize,
        seed: u64,
        mlm_head: bool,
    ) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            vocab_size,
            max_len,
            num_classes,
            dropout_rate: self.dropout_rate,
            seed,
            mlm_head,
        }
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

/// Seeds inside `train` and `pretrain` are replaced by the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    NaiveBayes {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Encoder {
        #[serde(default)]
        arch: EncoderArch,
        #[serde(default)]
        train: TrainConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pretrain: Option<PretrainConfig>,
    },
}

impl ModelConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::NaiveBayes { .. } => "naive_bayes",
            Self::Encoder { .. } => "encoder",
        }
    }
}

fn default_split_name() -> String {
    "test".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    /// Without it, encoder runs hold out a stratified tenth of `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    pub test: PathBuf,
    /// Name of the evaluated split, echoed in every report.
    #[serde(default = "default_split_name")]
    pub test_split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub vocab_size: usize,
    pub min_freq: u64,
    pub max_len: usize,
    /// Pack the topic as a second segment (subtasks B and C).
    pub use_topic: bool,
    pub lowercase: bool,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            min_freq: 2,
            max_len: DEFAULT_MAX_LEN,
            use_topic: true,
            lowercase: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub subtask: Subtask,
    pub model: ModelConfig,
    pub data: DataPaths,
    #[serde(default)]
    pub tokenizer: TokenizerSettings,
    pub seed: u64,
    /// Output root; falls back to `$TWEETBENCH_OUT`, then `runs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::invalid(Stage::Config, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::invalid(Stage::Config, m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        if self.name.contains(['\t', '\n']) {
            return bad("name must not contain tabs or newlines".into());
        }
        let t = &self.tokenizer;
        if t.max_len < 4 {
            return bad(format!("tokenizer.max_len {} is below 4", t.max_len));
        }
        match &self.model {
            ModelConfig::NaiveBayes { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return bad(format!("alpha must be positive, got {alpha}"));
                }
            }
            ModelConfig::Encoder { arch, train, pretrain } => {
                arch.config(
                    t.vocab_size.max(1),
                    t.max_len,
                    self.subtask.scale().len(),
                    self.seed,
                    false,
                )
                .validate()
                .map_err(at(Stage::Config, enc_err))?;
                train.validate().map_err(at(Stage::Config, enc_err))?;
                if let Some(p) = pretrain {
                    p.train.validate().map_err(at(Stage::Config, enc_err))?;
                }
            }
        }
        Ok(())
    }
}

/// A config plus the exact text it came from and the directory relative
/// paths resolve against.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub raw: String,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(HarnessError::io(Stage::Config, path))?;
        let config = ExperimentConfig::from_json(&raw)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, raw, base_dir })
    }

    pub fn from_config(config: ExperimentConfig, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            raw: config.to_json(),
            config,
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_root(&self) -> PathBuf {
        match &self.config.output_dir {
            Some(p) => self.resolve(p),
            None => std::env::var_os(OUTPUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub name: String,
    pub subtask: Subtask,
    pub model: String,
    pub split: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub name: String,
    pub seed: u64,
    pub started_at: String,
    pub wall_time_seconds: f64,
    /// SHA-256 over the test split's (id, gold) pairs.
    pub test_fingerprint: String,
    pub test_size: usize,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub run_dir: PathBuf,
    pub config_snapshot: String,
    pub config: ExperimentConfig,
    pub report: ReportFile,
    pub info: RunInfo,
    pub history: Vec<EpochRecord>,
}

impl RunResult {
    pub fn artifact_paths(&self) -> Vec<PathBuf> {
        self.info.artifacts.iter().map(|a| self.run_dir.join(a)).collect()
    }

    /// Reads a finished run back from its directory.
    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let run_dir = run_dir.as_ref();
        let read = |name: &str| {
            let p = run_dir.join(name);
            fs::read_to_string(&p).map_err(HarnessError::io(Stage::Load, &p))
        };
        let json_err = |name: &str, e: serde_json::Error| {
            HarnessError::invalid(Stage::Load, format!("{}: {e}", run_dir.join(name).display()))
        };
        let config_snapshot = read("config.json")?;
        let config = ExperimentConfig::from_json(&config_snapshot)?;
        let report = serde_json::from_str(&read("report.json")?).map_err(|e| json_err("report.json", e))?;
        let info = serde_json::from_str(&read("run.json")?).map_err(|e| json_err("run.json", e))?;
        let history = match fs::read_to_string(run_dir.join("history.jsonl")) {
            Ok(text) => text
                .lines()
                .map(|l| serde_json::from_str::<HistoryLine>(l).map(|h| h.record))
                .collect::<Result<_, _>>()
                .map_err(|e| json_err("history.jsonl", e))?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            config_snapshot,
            config,
            report,
            info,
            history,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HistoryLine {
    #[serde(flatten)]
    record: EpochRecord,
    wall_seconds: f64,
}

/// Predicted and gold labels of a test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub gold: Vec<Label>,
    pub pred: Vec<Label>,
}

impl Predictions {
    pub fn to_tsv(&self, scale: SentimentScale) -> String {
        let mut out = String::new();
        for ((id, g), p) in self.ids.iter().zip(&self.gold).zip(&self.pred) {
            out.push_str(&format!("{id}\t{}\t{}\n", scale.token(*g), scale.token(*p)));
        }
        out
    }

    pub fn from_tsv(text: &str, scale: SentimentScale) -> Result<Self, HarnessError> {
        let mut p = Predictions {
            ids: Vec::new(),
            gold: Vec::new(),
            pred: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let parse = |t: &str| {
                scale.parse(t).ok_or_else(|| {
                    HarnessError::invalid(Stage::Evaluate, format!("predictions line {}: bad label {t:?}", n + 1))
                })
            };
            if cols.len() != 3 {
                return Err(HarnessError::invalid(
                    Stage::Evaluate,
                    format!("predictions line {}: expected 3 columns", n + 1),
                ));
            }
            p.ids.push(cols[0].to_string());
            p.gold.push(parse(cols[1])?);
            p.pred.push(parse(cols[2])?);
        }
        Ok(p)
    }

    pub fn metrics(&self, scale: SentimentScale) -> Result<MetricsReport, MetricsError> {
        compute_metrics(&confusion(&self.gold, &self.pred, scale)?)
    }
}

pub fn test_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for ex in &ds.examples {
        h.update(ex.id.as_bytes());
        h.update([0]);
        h.update(ds.scale.token(ex.label).as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the model artifacts into a run directory, returning their names.
type ArtifactWriter = Box<dyn FnOnce(&Path) -> Result<Vec<String>, HarnessError>>;

struct Trained {
    pred: Vec<Label>,
    history: Vec<(EpochRecord, f64)>,
    best_epoch: Option<usize>,
    write: ArtifactWriter,
}

fn load_split(loaded: &LoadedConfig, path: &Path) -> Result<Dataset, HarnessError> {
    let cfg = &loaded.config;
    let opts = NormalizeOptions {
        lowercase: cfg.tokenizer.lowercase,
    };
    load_dataset_with(loaded.resolve(path), cfg.subtask, &opts).map_err(at(Stage::Load, corpus_err))
}

fn run_nb(alpha: f64, train: &Dataset, test: &Dataset) -> Result<Trained, HarnessError> {
    let model = train_nb(train, alpha).map_err(at(Stage::Train, nb_err))?;
    let pred = test
        .examples
        .iter()
        .map(|e| model.predict_label(&e.norm_text))
        .collect();
    Ok(Trained {
        pred,
        history: Vec::new(),
        best_epoch: None,
        write: Box::new(move |dir: &Path| {
            model.save(dir.join("model.json")).map_err(at(Stage::Persist, nb_err))?;
            Ok(vec!["model.json".into()])
        }),
    })
}

/// Training corpus for the vocabulary: texts plus topics.
fn vocab_corpus(ds: &Dataset, use_topic: bool) -> Vec<String> {
    let mut corpus: Vec<String> = ds.examples.iter().map(|e| e.norm_text.clone()).collect();
    if use_topic {
        let opts = NormalizeOptions::default();
        corpus.extend(
            ds.examples
                .iter()
                .filter_map(|e| e.topic.as_deref())
                .map(|t| crate::corpus::normalize_with(t, &opts)),
        );
    }
    corpus
}

#[allow(clippy::too_many_arguments)]
fn run_encoder(
    cfg: &ExperimentConfig,
    arch: &EncoderArch,
    train_cfg: &TrainConfig,
    pretrain: Option<&PretrainConfig>,
    train: &Dataset,
    dev: &Dataset,
    test: &Dataset,
) -> Result<Trained, HarnessError> {
    let t = &cfg.tokenizer;
    let use_topic = t.use_topic && cfg.subtask.has_topic();
    let vocab =
        build_vocab(&vocab_corpus(train, use_topic), t.vocab_size, t.min_freq).map_err(at(Stage::Tokenize, tok_err))?;
    let enc_opts = EncodeOptions {
        max_len: t.max_len,
        use_topic,
    };
    let ecfg = arch.config(
        vocab.len(),
        t.max_len,
        cfg.subtask.scale().len(),
        cfg.seed,
        pretrain.is_some(),
    );
    let mut model = EncoderModel::init(&ecfg).map_err(at(Stage::Config, enc_err))?;
    if let Some(p) = pretrain {
        let seqs = encode_dataset(&vocab, train, &enc_opts).map_err(at(Stage::Tokenize, tok_err))?;
        let mut p = p.clone();
        p.train.seed = cfg.seed;
        model = encoder::pretrain_mlm(model, &seqs, &p)
            .map_err(at(Stage::Pretrain, enc_err))?
            .model;
    }
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..train_cfg.clone()
    };
    let outcome =
        encoder::train_classifier(model, train, dev, &tcfg, &vocab, &enc_opts).map_err(at(Stage::Train, enc_err))?;
    let test_seqs = encode_dataset(&vocab, test, &enc_opts).map_err(at(Stage::Tokenize, tok_err))?;
    let classes = encoder::predict_classes(&outcome.model, &test_seqs).map_err(at(Stage::Predict, enc_err))?;
    let scale = test.scale;
    let pred = classes
        .iter()
        .map(|&c| scale.label_at(c).expect("class index on scale"))
        .collect();
    let history = outcome
        .history
        .iter()
        .cloned()
        .zip(outcome.wall_times.iter().copied())
        .collect();
    let model = outcome.model;
    Ok(Trained {
        pred,
        history,
        best_epoch: Some(outcome.best_epoch),
        write: Box::new(move |dir: &Path| {
            encoder::save_weights(&model, dir.join("weights.bin")).map_err(at(Stage::Persist, enc_err))?;
            vocab.save(dir.join("vocab.txt")).map_err(at(Stage::Persist, tok_err))?;
            Ok(vec!["weights.bin".into(), "vocab.txt".into()])
        }),
    })
}

fn create_run_dir(root: &Path, seed: u64, stamp: &str) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(root).map_err(HarnessError::io(Stage::Persist, root))?;
    for n in 1.. {
        let name = if n == 1 {
            format!("{stamp}-{seed}")
        } else {
            format!("{stamp}-{seed}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(HarnessError::io(Stage::Persist, &dir)(e)),
        }
    }
    unreachable!()
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(HarnessError::io(Stage::Persist, path))
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Runs one experiment end to end under its configured output root.
pub fn run_experiment(loaded: &LoadedConfig) -> Result<RunResult, HarnessError> {
    run_experiment_in(loaded, &loaded.output_root())
}

/// As [`run_experiment`], writing below `out_root`. On failure nothing is
/// left behind in `out_root` apart from directories it already had.
pub fn run_experiment_in(loaded: &LoadedConfig, out_root: &Path) -> Result<RunResult, HarnessError> {
    let started = Instant::now();
    let started_at = chrono::Utc::now();
    let cfg = &loaded.config;
    cfg.validate()?;
    for p in [Some(&cfg.data.train), cfg.data.dev.as_ref(), Some(&cfg.data.test)]
        .into_iter()
        .flatten()
    {
        let full = loaded.resolve(p);
        if !full.is_file() {
            return Err(HarnessError::invalid(
                Stage::Config,
                format!("data file {} does not exist", full.display()),
            ));
        }
    }
    let train_full = load_split(loaded, &cfg.data.train)?;
    let test = load_split(loaded, &cfg.data.test)?;
    if train_full.is_empty() || test.is_empty() {
        return Err(HarnessError::invalid(
            Stage::Load,
            "train and test splits must be nonempty",
        ));
    }

    let trained = match &cfg.model {
        ModelConfig::NaiveBayes { alpha } => run_nb(*alpha, &train_full, &test)?,
        ModelConfig::Encoder { arch, train, pretrain } => {
            let (train_set, dev) = match &cfg.data.dev {
                Some(p) => (train_full, load_split(loaded, p)?),
                None => {
                    stratified_split(&train_full, 1.0 - DEV_FRACTION, cfg.seed).map_err(at(Stage::Load, corpus_err))?
                }
            };
            run_encoder(cfg, arch, train, pretrain.as_ref(), &train_set, &dev, &test)?
        }
    };

    let predictions = Predictions {
        ids: test.examples.iter().map(|e| e.id.clone()).collect(),
        gold: test.examples.iter().map(|e| e.label).collect(),
        pred: trained.pred,
    };
    let metrics = predictions
        .metrics(test.scale)
        .map_err(at(Stage::Evaluate, metrics_err))?;
    let report = ReportFile {
        name: cfg.name.clone(),
        subtask: cfg.subtask,
        model: cfg.model.kind_name().into(),
        split: cfg.data.test_split.clone(),
        metrics,
    };

    let stamp = started_at.format("%Y%m%dT%H%M%SZ").to_string();
    let run_dir = create_run_dir(out_root, cfg.seed, &stamp)?;
    let persisted = (|| {
        write_file(&run_dir.join("config.json"), &loaded.raw)?;
        let pred_path = run_dir.join("predictions.tsv");
        write_file(&pred_path, &predictions.to_tsv(test.scale))?;
        write_file(&run_dir.join("report.json"), &to_pretty_json(&report))?;
        let mut artifacts = (trained.write)(&run_dir)?;
        if !trained.history.is_empty() {
            let lines: String = trained
                .history
                .iter()
                .map(|(r, w)| {
                    let line = HistoryLine {
                        record: r.clone(),
                        wall_seconds: *w,
                    };
                    serde_json::to_string(&line).expect("serializable") + "\n"
                })
                .collect();
            write_file(&run_dir.join("history.jsonl"), &lines)?;
            artifacts.push("history.jsonl".into());
        }

        // Metrics must be recomputable from what was persisted.
        let text = fs::read_to_string(&pred_path).map_err(HarnessError::io(Stage::Evaluate, &pred_path))?;
        let reloaded = Predictions::from_tsv(&text, test.scale)?;
        let recomputed = reloaded.metrics(test.scale).map_err(at(Stage::Evaluate, metrics_err))?;
        if recomputed != report.metrics {
            return Err(HarnessError::invalid(
                Stage::Evaluate,
                "metrics recomputed from predictions.tsv differ from the report",
            ));
        }

        let info = RunInfo {
            name: cfg.name.clone(),
            seed: cfg.seed,
            started_at: started_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            wall_time_seconds: started.elapsed().as_secs_f64(),
            test_fingerprint: test_fingerprint(&test),
            test_size: test.len(),
            artifacts,
            best_epoch: trained.best_epoch,
        };
        write_file(&run_dir.join("run.json"), &to_pretty_json(&info))?;
        let name = run_dir.file_name().expect("named").to_string_lossy().into_owned();
        write_file(&out_root.join("latest"), &format!("{name}\n"))?;
        Ok(info)
    })();
    let info = match persisted {
        Ok(info) => info,
        Err(e) => {
            let _ = fs::remove_dir_all(&run_dir);
            return Err(e);
        }
    };
    log::info!("run written to {}", run_dir.display());
    Ok(RunResult {
        run_dir,
        config_snapshot: loaded.raw.clone(),
        config: cfg.clone(),
        report,
        info,
        history: trained.history.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Resolves `<root>/latest`.
pub fn latest_run(root: &Path) -> Result<PathBuf, HarnessError> {
    let p = root.join("latest");
    let name = fs::read_to_string(&p).map_err(HarnessError::io(Stage::Load, &p))?;
    Ok(root.join(name.trim()))
}

/// Re-evaluates a persisted run's model on another file of the same subtask.
pub fn evaluate_run(run_dir: &Path, data: &Path) -> Result<(Predictions, MetricsReport), HarnessError> {
    let run = RunResult::load(run_dir)?;
    let cfg = &run.config;
    let opts = NormalizeOptions {
        lowercase: cfg.tokenizer.lowercase,
    };
    let ds = load_dataset_with(data, cfg.subtask, &opts).map_err(at(Stage::Load, corpus_err))?;
    let pred: Vec<Label> = match &cfg.model {
        ModelConfig::NaiveBayes { .. } => {
            let model = NbModel::load(run_dir.join("model.json")).map_err(at(Stage::Load, nb_err))?;
            ds.examples.iter().map(|e| model.predict_label(&e.norm_text)).collect()
        }
        ModelConfig::Encoder { .. } => {
            let model = encoder::load_weights(run_dir.join("weights.bin")).map_err(at(Stage::Load, enc_err))?;
            let vocab = Vocab::load(run_dir.join("vocab.txt")).map_err(at(Stage::Load, tok_err))?;
            let opts = EncodeOptions {
                max_len: cfg.tokenizer.max_len,
                use_topic: cfg.tokenizer.use_topic && cfg.subtask.has_topic(),
            };
            let seqs = encode_dataset(&vocab, &ds, &opts).map_err(at(Stage::Tokenize, tok_err))?;
            encoder::predict_classes(&model, &seqs)
                .map_err(at(Stage::Predict, enc_err))?
                .into_iter()
                .map(|c| ds.scale.label_at(c).expect("class index on scale"))
                .collect()
        }
    };
    let predictions = Predictions {
        ids: ds.examples.iter().map(|e| e.id.clone()).collect(),
        gold: ds.examples.iter().map(|e| e.label).collect(),
        pred,
    };
    let report = predictions
        .metrics(ds.scale)
        .map_err(at(Stage::Evaluate, metrics_err))?;
    Ok((predictions, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<(String, Summary)>,
    /// Each later run minus the first.
    pub deltas: Vec<(String, Summary)>,
    pub split: String,
}

impl Comparison {
    pub fn render(&self) -> String {
        render_table(self.rows.iter().chain(&self.deltas).map(|(n, s)| (n.as_str(), *s)))
    }
}

/// Table of runs evaluated on one test set, with deltas against the first.
pub fn compare_runs(results: &[RunResult]) -> Result<Comparison, HarnessError> {
    let first = results
        .first()
        .filter(|_| results.len() >= 2)
        .ok_or_else(|| HarnessError::invalid(Stage::Compare, "need at least two runs to compare"))?;
    for r in &results[1..] {
        if r.report.subtask != first.report.subtask {
            return Err(HarnessError::invalid(
                Stage::Compare,
                format!(
                    "{} is subtask {} but {} is subtask {}",
                    r.report.name, r.report.subtask, first.report.name, first.report.subtask
                ),
            ));
        }
        if r.info.test_fingerprint != first.info.test_fingerprint {
            return Err(HarnessError::invalid(
                Stage::Compare,
                format!(
                    "{} and {} were evaluated on different test sets",
                    first.report.name, r.report.name
                ),
            ));
        }
    }
    let mut seen: IndexMap<String, usize> = IndexMap::new();
    let rows: Vec<(String, Summary)> = results
        .iter()
        .map(|r| {
            let n = seen.entry(r.report.name.clone()).or_insert(0);
            *n += 1;
            let name = if *n == 1 {
                r.report.name.clone()
            } else {
                format!("{} #{}", r.report.name, n)
            };
            (name, Summary::from(&r.report.metrics))
        })
        .collect();
    let deltas = rows[1..]
        .iter()
        .map(|(n, s)| (format!("delta {n} - {}", rows[0].0), s.minus(&rows[0].1)))
        .collect();
    Ok(Comparison {
        rows,
        deltas,
        split: first.report.split.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct StudyOptions {
    /// Every tweet gets the same label.
    pub collapse: bool,
    pub naive_bayes: bool,
    pub encoder: bool,
    pub arch: EncoderArch,
    pub train: TrainConfig,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            collapse: false,
            naive_bayes: true,
            encoder: true,
            arch: EncoderArch::default(),
            train: TrainConfig {
                epochs: 15,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub model: String,
    pub binary_accuracy: f64,
    pub five_class_accuracy: f64,
}

impl StudyRow {
    pub fn holds(&self) -> bool {
        self.binary_accuracy >= self.five_class_accuracy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyReport {
    pub seed: u64,
    pub collapsed: bool,
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(StudyRow::holds)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<12} | {:>9} | {:>10} | binary >= 5-class\n",
            "model", "binary", "five-class"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} | {:>9} | {:>10} | {}\n",
                r.model,
                crate::metrics::format_fixed(r.binary_accuracy, 4),
                crate::metrics::format_fixed(r.five_class_accuracy, 4),
                if r.holds() { "yes" } else { "NO" }
            ));
        }
        out
    }
}

fn accuracy_of(gold: &[Label], pred: &[Label]) -> f64 {
    gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64
}

fn study_encoder(
    train: &Dataset,
    test: &Dataset,
    vocab: &Vocab,
    seed: u64,
    opts: &StudyOptions,
) -> Result<f64, HarnessError> {
    let enc = EncodeOptions {
        max_len: DEFAULT_MAX_LEN,
        use_topic: false,
    };
    let seqs = encode_dataset(vocab, train, &enc).map_err(at(Stage::Tokenize, tok_err))?;
    let test_seqs = encode_dataset(vocab, test, &enc).map_err(at(Stage::Tokenize, tok_err))?;
    let cfg = opts
        .arch
        .config(vocab.len(), DEFAULT_MAX_LEN, train.scale.len(), seed, false);
    let model = EncoderModel::init(&cfg).map_err(at(Stage::Config, enc_err))?;
    let tcfg = TrainConfig {
        seed,
        ..opts.train.clone()
    };
    let out = encoder::train_on_sequences(model, (&seqs, &train.label_indices()), None, &tcfg)
        .map_err(at(Stage::Train, enc_err))?;
    encoder::accuracy(&out.model, &test_seqs, &test.label_indices()).map_err(at(Stage::Predict, enc_err))
}

/// Trains matched models on the binary and five-class views of the same
/// tweets and reports test accuracy for each.
pub fn binary_vs_multiclass_study(seed: u64, opts: &StudyOptions) -> Result<StudyReport, HarnessError> {
    let data = if opts.collapse {
        fixtures::study_data(seed, true)
    } else {
        fixtures::bundled_study()
    };
    let [bin_train, bin_test] = &data.binary;
    let [five_train, five_test] = &data.five;
    let mut rows = Vec::new();
    if opts.naive_bayes {
        let mut acc = [0.0; 2];
        for (k, (train, test)) in [(bin_train, bin_test), (five_train, five_test)].into_iter().enumerate() {
            let model = train_nb(train, DEFAULT_ALPHA).map_err(at(Stage::Train, nb_err))?;
            let pred: Vec<Label> = test
                .examples
                .iter()
                .map(|e| model.predict_label(&e.norm_text))
                .collect();
            let gold: Vec<Label> = test.examples.iter().map(|e| e.label).collect();
            acc[k] = accuracy_of(&gold, &pred);
        }
        rows.push(StudyRow {
            model: "naive_bayes".into(),
            binary_accuracy: acc[0],
            five_class_accuracy: acc[1],
        });
    }
    if opts.encoder {
        let corpus = vocab_corpus(bin_train, false);
        let vocab = build_vocab(&corpus, DEFAULT_VOCAB_SIZE, 1).map_err(at(Stage::Tokenize, tok_err))?;
        rows.push(StudyRow {
            model: "encoder".into(),
            binary_accuracy: study_encoder(bin_train, bin_test, &vocab, seed, opts)?,
            five_class_accuracy: study_encoder(five_train, five_test, &vocab, seed, opts)?,
        });
    }
    Ok(StudyReport {
        seed,
        collapsed: opts.collapse,
        rows,
    })
}

/// Writes `name` into the fixture config layout used by the CLI and tests.
pub fn fixture_config_path(name: &str) -> PathBuf {
    fixtures::fixture_root().join("configs").join(name)
}

pub fn write_json_line<W: Write>(mut w: W, value: &impl Serialize) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")
}
