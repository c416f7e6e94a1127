//! Command-line front end.
//!
//! Output layout (all files in `--out`):
//!
//! | command    | files                                                              |
//! |------------|--------------------------------------------------------------------|
//! | `gen`      | `spec.json`, `tokenizer.json`, `pretrain.jsonl`, `train.jsonl`, `eval.jsonl`, `questions.jsonl` |
//! | `init`     | `model.plck`                                                       |
//! | `pretrain` | `model.plck`, `pretrain_report.json`                               |
//! | `capture`  | `<lang>.pltr` per language                                         |
//! | `analyze`  | `stats.json`                                                       |
//! | `select`   | `selection.json`                                                   |
//! | `train`    | `model.plck`, `train_report.json`                                  |
//! | `lens`     | `lens.json`, `attn.json`                                           |
//!
//! Every command also writes `resolved_config.json`. Failures print a JSON
//! object `{"error": kind, "message": text}` on stderr and exit with status 1.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::corpus::{self, Item, QuestionRecord, SyntheticSpec, Tokenizer};
use crate::error::{Error, Result};
use crate::lens;
use crate::model::{ModelConfig, ToyLvlm};
use crate::selection::{self, LayerSelection, SelectionOptions};
use crate::stats::{self, MaskOptions, StatsReport, ENGLISH};
use crate::trace;
use crate::trainer::{self, PretrainConfig, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "plast", version, about = "Language-specific layer analysis and selective fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with configuration overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the resolved configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Write a freshly initialised model sized for a corpus.
    Init {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain every parameter on the corpus' monolingual and copy data.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint; a fresh model when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Record activation traces, one PLTR file per language.
    Capture {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus directory, or a `questions.jsonl` file next to `tokenizer.json`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Activation ratios and English overlap from a trace directory.
    Analyze {
        #[arg(long)]
        traces: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Boundary layer, MSD and selected layers from `stats.json`.
    Select {
        #[arg(long)]
        stats: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the selected layers on question translation.
    Train {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "layers")]
        selection: Option<PathBuf>,
        /// Explicit comma-separated layer list instead of a selection file.
        #[arg(long, value_delimiter = ',', conflicts_with = "selection")]
        layers: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
    /// Logit lens and attention-to-vision mass for one monitoring question.
    Lens {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainRun {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

impl Default for PretrainRun {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureRun {
    pub mask: MaskOptions,
    /// Prepend `<bos>` to every question.
    pub bos: bool,
    /// Feed the image with the question.
    pub with_image: bool,
}

impl Default for CaptureRun {
    fn default() -> Self {
        Self {
            mask: MaskOptions::default(),
            bos: true,
            with_image: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeRun {
    pub english: String,
}

impl Default for AnalyzeRun {
    fn default() -> Self {
        Self {
            english: ENGLISH.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LensRun {
    /// Index into `questions.jsonl` after filtering by `language`.
    pub index: usize,
    pub language: String,
    pub k: usize,
    pub bos: bool,
}

impl Default for LensRun {
    fn default() -> Self {
        Self {
            index: 0,
            language: ENGLISH.into(),
            k: 5,
            bos: true,
        }
    }
}

/// Deep-merges `overrides` into `base`.
fn merge(base: &mut Value, overrides: Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then the `--config` file, then `--seed` on every `seed` key.
fn resolve<T: Serialize + DeserializeOwned + Default>(common: &Common) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        merge(&mut value, serde_json::from_str(&text)?);
    }
    if let Some(seed) = common.seed {
        set_seeds(&mut value, seed);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

fn set_seeds(v: &mut Value, seed: u64) {
    if let Value::Object(map) = v {
        for (k, child) in map.iter_mut() {
            if k == "seed" {
                *child = json!(seed);
            } else {
                set_seeds(child, seed);
            }
        }
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn prepare_out(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

fn log_config<T: Serialize>(
    out: &Path,
    command: &str,
    paths: BTreeMap<&str, &Path>,
    config: &T,
) -> Result<()> {
    let paths: BTreeMap<&str, String> =
        paths.into_iter().map(|(k, p)| (k, p.display().to_string())).collect();
    write_json(
        &out.join("resolved_config.json"),
        &json!({ "command": command, "paths": paths, "config": config }),
    )
}

/// `dir/name` when `path` is a directory, otherwise `path` itself.
fn in_dir(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn data_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn model_config_for(data: &Path, base: &ModelConfig) -> Result<ModelConfig> {
    let spec: SyntheticSpec = read_json(&data.join("spec.json"))?;
    Ok(ModelConfig {
        vocab_size: spec.vocab_size(),
        n_images: spec.n_images,
        ..base.clone()
    })
}

pub fn cmd_gen(common: &Common) -> Result<()> {
    let spec: SyntheticSpec = resolve(common)?;
    let out = prepare_out(common)?;
    let c = corpus::generate(&spec)?;
    write_json(&out.join("spec.json"), &spec)?;
    c.tokenizer.save(out.join("tokenizer.json"))?;
    corpus::write_jsonl(out.join("pretrain.jsonl"), &c.pretrain)?;
    trainer::write_pairs(out.join("train.jsonl"), &c.train, &c.tokenizer)?;
    trainer::write_pairs(out.join("eval.jsonl"), &c.eval, &c.tokenizer)?;
    corpus::write_jsonl(out.join("questions.jsonl"), &c.monitor_records()?)?;
    log_config(out, "gen", BTreeMap::from([("out", out)]), &spec)
}

pub fn cmd_init(data: &Path, common: &Common) -> Result<()> {
    let run: PretrainRun = resolve(common)?;
    let out = prepare_out(common)?;
    let config = model_config_for(data, &run.model)?;
    let model = ToyLvlm::new(config.clone())?;
    checkpoint::save(&model, out.join("model.plck"))?;
    log_config(out, "init", BTreeMap::from([("data", data), ("out", out)]), &config)
}

pub fn cmd_pretrain(data: &Path, ckpt: Option<&Path>, common: &Common) -> Result<()> {
    let mut run: PretrainRun = resolve(common)?;
    let out = prepare_out(common)?;
    let mut model = match ckpt {
        Some(p) => checkpoint::load(p)?,
        None => ToyLvlm::new(model_config_for(data, &run.model)?)?,
    };
    run.model = model.config().clone();
    let tok = Tokenizer::load(data.join("tokenizer.json"))?;
    let items: Vec<Item> = corpus::read_jsonl(data.join("pretrain.jsonl"))?;
    let curve = trainer::pretrain(&mut model, &tok, &items, &run.pretrain)?;
    checkpoint::save(&model, out.join("model.plck"))?;
    write_json(
        &out.join("pretrain_report.json"),
        &json!({ "steps": curve.len(), "loss_curve": curve }),
    )?;
    let mut paths = BTreeMap::from([("data", data), ("out", out)]);
    if let Some(p) = ckpt {
        paths.insert("ckpt", p);
    }
    log_config(out, "pretrain", paths, &run)
}

pub fn cmd_capture(ckpt: &Path, data: &Path, common: &Common) -> Result<()> {
    let run: CaptureRun = resolve(common)?;
    let out = prepare_out(common)?;
    let model = checkpoint::load(ckpt)?;
    let tok = Tokenizer::load(data_dir(data).join("tokenizer.json"))?;
    let records: Vec<QuestionRecord> = corpus::read_jsonl(in_dir(data, "questions.jsonl"))?;
    let bos = tok.special("<bos>")?;
    let mut by_lang: BTreeMap<String, Vec<(Option<u32>, Vec<u32>)>> = BTreeMap::new();
    for r in &records {
        let mut tokens = if run.bos { vec![bos] } else { Vec::new() };
        tokens.extend(tok.encode(&r.text)?);
        let image = run.with_image.then_some(r.image_id);
        by_lang.entry(r.lang.clone()).or_default().push((image, tokens));
    }
    if by_lang.is_empty() {
        return Err(Error::Empty("question file"));
    }
    for (lang, questions) in &by_lang {
        let t = stats::capture_trace(&model, lang, questions, &run.mask)?;
        trace::write_trace(&t, out.join(format!("{lang}.pltr")))?;
    }
    log_config(
        out,
        "capture",
        BTreeMap::from([("ckpt", ckpt), ("data", data), ("out", out)]),
        &run,
    )
}

pub fn cmd_analyze(traces: &Path, common: &Common) -> Result<()> {
    let run: AnalyzeRun = resolve(common)?;
    let out = prepare_out(common)?;
    let files = trace::read_trace_dir(traces)?;
    let report = stats::aggregate(&files, &run.english)?;
    write_json(&out.join("stats.json"), &report)?;
    log_config(out, "analyze", BTreeMap::from([("traces", traces), ("out", out)]), &run)
}

pub fn cmd_select(stats_path: &Path, common: &Common) -> Result<()> {
    let opts: SelectionOptions = resolve(common)?;
    let out = prepare_out(common)?;
    let report: StatsReport = read_json(stats_path)?;
    let sel = selection::run_selection(&report, &opts)?;
    write_json(&out.join("selection.json"), &sel)?;
    log_config(out, "select", BTreeMap::from([("stats", stats_path), ("out", out)]), &opts)
}

pub fn cmd_train(
    ckpt: &Path,
    data: &Path,
    selection_path: Option<&Path>,
    layers: Option<&[usize]>,
    common: &Common,
) -> Result<()> {
    let mut cfg: TrainConfig = resolve(common)?;
    let out = prepare_out(common)?;
    match (selection_path, layers) {
        (_, Some(l)) => cfg.selected_layers = l.iter().copied().collect::<BTreeSet<_>>(),
        (Some(p), None) => cfg.selected_layers = read_json::<LayerSelection>(p)?.selected,
        (None, None) => {}
    }
    let mut model = checkpoint::load(ckpt)?;
    let tok = Tokenizer::load(data.join("tokenizer.json"))?;
    let train_pairs = trainer::read_pairs(data.join("train.jsonl"), &tok)?;
    let eval_path = data.join("eval.jsonl");
    let eval_pairs = if eval_path.exists() {
        trainer::read_pairs(&eval_path, &tok)?
    } else {
        Vec::new()
    };
    let report = trainer::train(&mut model, &tok, &train_pairs, &eval_pairs, &cfg)?;
    checkpoint::save(&model, out.join("model.plck"))?;
    write_json(&out.join("train_report.json"), &report)?;
    let mut paths = BTreeMap::from([("ckpt", ckpt), ("data", data), ("out", out)]);
    if let Some(p) = selection_path {
        paths.insert("selection", p);
    }
    log_config(out, "train", paths, &cfg)
}

pub fn cmd_lens(ckpt: &Path, data: &Path, common: &Common) -> Result<()> {
    let run: LensRun = resolve(common)?;
    let out = prepare_out(common)?;
    let model = checkpoint::load(ckpt)?;
    let tok = Tokenizer::load(data_dir(data).join("tokenizer.json"))?;
    let records: Vec<QuestionRecord> = corpus::read_jsonl(in_dir(data, "questions.jsonl"))?;
    let rec = records
        .iter()
        .filter(|r| r.lang == run.language)
        .nth(run.index)
        .ok_or_else(|| {
            Error::Config(format!("no question {} in language {:?}", run.index, run.language))
        })?;
    let mut tokens = if run.bos { vec![tok.special("<bos>")?] } else { Vec::new() };
    tokens.extend(tok.encode(&rec.text)?);
    let (_, cap) = model.forward(&tokens, Some(rec.image_id), true)?;
    let cap = cap.expect("capture requested");
    write_json(&out.join("lens.json"), &lens::logit_lens(&model, &cap, run.k)?)?;
    write_json(&out.join("attn.json"), &lens::vision_attention_mass(&cap)?)?;
    log_config(out, "lens", BTreeMap::from([("ckpt", ckpt), ("data", data), ("out", out)]), &run)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { common } => cmd_gen(common),
        Command::Init { data, common } => cmd_init(data, common),
        Command::Pretrain { data, ckpt, common } => cmd_pretrain(data, ckpt.as_deref(), common),
        Command::Capture { ckpt, data, common } => cmd_capture(ckpt, data, common),
        Command::Analyze { traces, common } => cmd_analyze(traces, common),
        Command::Select { stats, common } => cmd_select(stats, common),
        Command::Train {
            ckpt,
            data,
            selection,
            layers,
            common,
        } => cmd_train(ckpt, data, selection.as_deref(), layers.as_deref(), common),
        Command::Lens { ckpt, data, common } => cmd_lens(ckpt, data, common),
    }
}

/// Machine-readable error object printed on failure.
pub fn error_json(e: &Error) -> Value {
    json!({ "error": e.kind(), "message": e.to_string() })
}

/// Sizes the global worker pool from `PLAST_THREADS` when set.
pub fn init_threads() -> Result<()> {
    match std::env::var("PLAST_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("PLAST_THREADS={v:?} is not a number")))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))
        }
        Err(_) => Ok(()),
    }
}
