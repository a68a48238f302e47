//! Command-line entry points: experiment configuration files, the train /
//! eval / analyze commands, and the finite-difference gradient check.
//!
//! Experiments are described by flat `key = value` files with `#` comments.
//! Every key has a documented default, so a minimal file needs only `task`
//! and `model`; the fully resolved key set is echoed to a manifest in the
//! run directory and embedded in every checkpoint, making each artifact
//! self-describing: `eval` and `analyze` rebuild the experiment from the
//! checkpoint alone.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analyze::{analyze_thalnet, export_analysis, DEFAULT_PROBE_COUNT, DEFAULT_TAU};
use crate::cells::{Design, ModuleSpec};
use crate::checkpoint;
use crate::data::{
    cifar::load_cifar10, mnist::load_mnist, text8::load_text8, Dataset, Split,
};
use crate::error::{Error, Result};
use crate::model::{
    small_thalnet, BaselineConfig, LossSpec, NetworkConfig, NetworkParams, ThalNetConfig,
};
use crate::numerics::{check, Tape, Tensor};
use crate::params::ParamSet;
use crate::routing::ReaderVariant;
use crate::train::{
    budget_search, budget_search_baseline, evaluate_checkpoint, restore, train_experiment,
    Experiment, OptimizerKind, METRICS_HEADER,
};

/// Environment variable overriding the dataset location (weaker than the
/// `--data-dir` flag, stronger than the config file).
pub const DATA_DIR_ENV: &str = "THALNET_DATA_DIR";

pub const DEFAULT_BUDGET: usize = 50_000;
const DEFAULT_MODULES: usize = 4;
const DEFAULT_CONTEXT: usize = 32;
const DEFAULT_LEARNING_RATE: f64 = 1e-3;
const DEFAULT_BATCH_SIZE: usize = 50;
const DEFAULT_EPOCHS: usize = 1;
const DEFAULT_SEQ_LEN: usize = 50;
const DEFAULT_SEED: u64 = 1;
const DEFAULT_PERMUTATION_SEED: u64 = 99;

// ── Tasks and model kinds ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    SeqMnist,
    PermMnist,
    SeqCifar,
    Text8,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::SeqMnist, Task::PermMnist, Task::SeqCifar, Task::Text8];

    pub fn name(self) -> &'static str {
        match self {
            Task::SeqMnist => "seq_mnist",
            Task::PermMnist => "perm_mnist",
            Task::SeqCifar => "seq_cifar",
            Task::Text8 => "text8",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task '{s}' (expected seq_mnist, perm_mnist, seq_cifar, or text8)"
                ))
            })
    }

    pub fn is_language_model(self) -> bool {
        self == Task::Text8
    }

    /// (input features per step, output classes), fixed by the task: MNIST
    /// rows are 28 pixels, CIFAR rows are 32 pixels times 3 channels, and
    /// byte-level language modeling is 256-way.
    pub fn dimensions(self) -> (usize, usize) {
        match self {
            Task::SeqMnist | Task::PermMnist => (28, 10),
            Task::SeqCifar => (96, 10),
            Task::Text8 => (256, 256),
        }
    }

    /// Default dataset location relative to the working directory. For
    /// `text8` this is the corpus file itself, not a directory.
    pub fn default_data_dir(self) -> &'static str {
        match self {
            Task::SeqMnist | Task::PermMnist => "data/mnist",
            Task::SeqCifar => "data/cifar-10-batches-bin",
            Task::Text8 => "data/text8",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ThalNet,
    StackedGru,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ThalNet => "thalnet",
            ModelKind::StackedGru => "stacked_gru",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "thalnet" => Ok(ModelKind::ThalNet),
            "stacked_gru" => Ok(ModelKind::StackedGru),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected thalnet or stacked_gru)"
            ))),
        }
    }
}

/// How layer widths are chosen: an explicit uniform scale, explicit sizes,
/// or the largest scale fitting a parameter budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sizing {
    Width(usize),
    LayerSizes(Vec<usize>),
    Budget(usize),
}

// ── Config file parsing ──────────────────────────────────────────────────

/// Parse flat `key = value` text into (line, key, value) triples. `#` starts
/// a comment anywhere on a line; blank lines are skipped.
pub fn parse_config_text(origin: &str, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(Error::Config(format!(
                "{origin}:{line}: expected 'key = value', got '{body}'"
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "{origin}:{line}: empty key or value"
            )));
        }
        if let Some((prev, _, _)) = out.iter().find(|(_, k, _)| *k == key) {
            return Err(Error::Config(format!(
                "{origin}:{line}: duplicate key '{key}' (first set on line {prev})"
            )));
        }
        out.push((line, key, value));
    }
    Ok(out)
}

/// One config entry being consumed during validation.
struct Pairs<'a> {
    origin: &'a str,
    entries: Vec<(usize, String, String)>,
}

impl<'a> Pairs<'a> {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        let pos = self.entries.iter().position(|(_, k, _)| k == key)?;
        let (line, _, value) = self.entries.remove(pos);
        Some((line, value))
    }

    fn typed<T, F>(&mut self, key: &str, what: &str, parse: F) -> Result<Option<T>>
    where
        F: FnOnce(&str) -> Option<T>,
    {
        match self.take(key) {
            None => Ok(None),
            Some((line, value)) => {
                let parsed = parse(&value).ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{line}: {key} expects {what}, got '{value}'",
                        self.origin
                    ))
                })?;
                Ok(Some(parsed))
            }
        }
    }

    /// Error naming the key when it survived to the end unconsumed.
    fn reject_leftovers(&self) -> Result<()> {
        if let Some((line, key, _)) = self.entries.first() {
            return Err(Error::Config(format!(
                "{}:{line}: unknown key '{key}'",
                self.origin
            )));
        }
        Ok(())
    }

    fn reject(&mut self, key: &str, reason: &str) -> Result<()> {
        if let Some((line, _)) = self.take(key) {
            return Err(Error::Config(format!(
                "{}:{line}: {key} {reason}",
                self.origin
            )));
        }
        Ok(())
    }
}

fn parse_usize(v: &str) -> Option<usize> {
    v.parse().ok()
}

fn parse_u64(v: &str) -> Option<u64> {
    v.parse().ok()
}

fn parse_f64(v: &str) -> Option<f64> {
    v.parse().ok()
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_size_list(v: &str) -> Option<Vec<usize>> {
    let sizes: Option<Vec<usize>> = v.split(',').map(|s| s.trim().parse().ok()).collect();
    sizes.filter(|s| !s.is_empty())
}

// ── Experiment configuration ─────────────────────────────────────────────

/// A fully resolved experiment description: the parse of a config file with
/// every default filled in. `build` turns it into a runnable experiment by
/// loading data and sizing the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub model: ModelKind,
    pub design: Design,
    pub reader: ReaderVariant,
    pub modules: usize,
    pub sizing: Sizing,
    pub context_size: usize,
    pub steps_per_token: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seq_len: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub carry_state: bool,
    pub standardize: bool,
    pub permutation_seed: Option<u64>,
    pub train_frac: f64,
    pub eval_frac: f64,
    pub max_train_batches: Option<usize>,
    pub max_eval_batches: Option<usize>,
    pub target_eval_accuracy: Option<f64>,
    pub target_eval_bpc: Option<f64>,
}

impl ExperimentConfig {
    /// Validate parsed (line, key, value) triples into a config with all
    /// defaults resolved. Unknown keys, type mismatches, and keys that do
    /// not apply to the chosen task or model are rejected with their line.
    pub fn from_pairs(
        default_name: &str,
        origin: &str,
        pairs: &[(usize, String, String)],
    ) -> Result<ExperimentConfig> {
        let mut p = Pairs {
            origin,
            entries: pairs.to_vec(),
        };

        let task = match p.take("task") {
            Some((line, v)) => Task::parse(&v)
                .map_err(|e| Error::Config(format!("{origin}:{line}: {e}")))?,
            None => return Err(Error::Config(format!("{origin}: missing required key 'task'"))),
        };
        let model = match p.take("model") {
            Some((line, v)) => ModelKind::parse(&v)
                .map_err(|e| Error::Config(format!("{origin}:{line}: {e}")))?,
            None => {
                return Err(Error::Config(format!(
                    "{origin}: missing required key 'model'"
                )))
            }
        };
        let name = p
            .take("name")
            .map_or_else(|| default_name.to_string(), |(_, v)| v);

        let design = match p.take("design") {
            Some((line, v)) => {
                if model == ModelKind::StackedGru {
                    return Err(Error::Config(format!(
                        "{origin}:{line}: design applies only to thalnet models"
                    )));
                }
                Design::parse(&v).map_err(|e| Error::Config(format!("{origin}:{line}: {e}")))?
            }
            None => Design::FfGruFf,
        };
        let reader = match p.take("reader") {
            Some((line, v)) => {
                if model == ModelKind::StackedGru {
                    return Err(Error::Config(format!(
                        "{origin}:{line}: reader applies only to thalnet models"
                    )));
                }
                ReaderVariant::parse(&v)
                    .map_err(|e| Error::Config(format!("{origin}:{line}: {e}")))?
            }
            None => ReaderVariant::WeightNorm,
        };
        if model == ModelKind::StackedGru {
            p.reject("context_size", "applies only to thalnet models")?;
        }
        let context_size = p
            .typed("context_size", "a positive integer", |v| {
                parse_usize(v).filter(|&n| n > 0)
            })?
            .unwrap_or(DEFAULT_CONTEXT);

        let modules = p
            .typed("modules", "a positive integer", |v| {
                parse_usize(v).filter(|&n| n > 0)
            })?
            .unwrap_or(DEFAULT_MODULES);
        let width = p.typed("width", "a positive integer", |v| {
            parse_usize(v).filter(|&n| n > 0)
        })?;
        let layer_sizes = p.typed("layer_sizes", "comma-separated positive integers", |v| {
            parse_size_list(v).filter(|s| s.iter().all(|&n| n > 0))
        })?;
        let budget = p.typed("budget", "a positive integer", |v| {
            parse_usize(v).filter(|&n| n > 0)
        })?;
        let sizing = match (width, layer_sizes, budget) {
            (Some(w), None, None) => Sizing::Width(w),
            (None, Some(s), None) => Sizing::LayerSizes(s),
            (None, None, Some(b)) => Sizing::Budget(b),
            (None, None, None) => Sizing::Budget(DEFAULT_BUDGET),
            _ => {
                return Err(Error::Config(format!(
                    "{origin}: width, layer_sizes, and budget are mutually exclusive"
                )))
            }
        };
        if let Sizing::LayerSizes(sizes) = &sizing {
            if model == ModelKind::ThalNet && sizes.len() != design.stages().len() {
                return Err(Error::Config(format!(
                    "{origin}: layer_sizes has {} entries but design {} has {} stages",
                    sizes.len(),
                    design.name(),
                    design.stages().len()
                )));
            }
        }

        let steps_per_token = p
            .typed("steps_per_token", "a positive integer", |v| {
                parse_usize(v).filter(|&n| n > 0)
            })?
            .unwrap_or(1);
        let optimizer = match p.take("optimizer") {
            Some((line, v)) => OptimizerKind::parse(&v)
                .map_err(|e| Error::Config(format!("{origin}:{line}: {e}")))?,
            None => OptimizerKind::Adam,
        };
        let learning_rate = p
            .typed("learning_rate", "a positive number", |v| {
                parse_f64(v).filter(|&x| x > 0.0 && x.is_finite())
            })?
            .unwrap_or(DEFAULT_LEARNING_RATE);
        let batch_size = p
            .typed("batch_size", "a positive integer", |v| {
                parse_usize(v).filter(|&n| n > 0)
            })?
            .unwrap_or(DEFAULT_BATCH_SIZE);
        let epochs = p
            .typed("epochs", "a positive integer", |v| {
                parse_usize(v).filter(|&n| n > 0)
            })?
            .unwrap_or(DEFAULT_EPOCHS);

        if !task.is_language_model() {
            for key in ["seq_len", "carry_state", "train_frac", "eval_frac"] {
                p.reject(key, "applies only to the text8 task")?;
            }
        } else {
            p.reject("standardize", "applies only to classification tasks")?;
        }
        if task != Task::PermMnist {
            p.reject("permutation_seed", "applies only to perm_mnist")?;
        }
        let seq_len = p
            .typed("seq_len", "a positive integer", |v| {
                parse_usize(v).filter(|&n| n > 0)
            })?
            .unwrap_or(DEFAULT_SEQ_LEN);
        let carry_state = p
            .typed("carry_state", "true or false", parse_bool)?
            .unwrap_or(false);
        let train_frac = p
            .typed("train_frac", "a fraction in (0, 1]", |v| {
                parse_f64(v).filter(|&x| x > 0.0 && x <= 1.0)
            })?
            .unwrap_or(crate::data::text8::DEFAULT_TRAIN_FRAC);
        let eval_frac = p
            .typed("eval_frac", "a fraction in (0, 1]", |v| {
                parse_f64(v).filter(|&x| x > 0.0 && x <= 1.0)
            })?
            .unwrap_or(crate::data::text8::DEFAULT_EVAL_FRAC);
        if train_frac + eval_frac > 1.0 {
            return Err(Error::Config(format!(
                "{origin}: train_frac + eval_frac exceeds 1 ({train_frac} + {eval_frac})"
            )));
        }
        let standardize = p
            .typed("standardize", "true or false", parse_bool)?
            .unwrap_or(false);
        let permutation_seed = match task {
            Task::PermMnist => Some(
                p.typed("permutation_seed", "an integer", parse_u64)?
                    .unwrap_or(DEFAULT_PERMUTATION_SEED),
            ),
            _ => None,
        };

        let clip_norm = p.typed("clip_norm", "a positive number", |v| {
            parse_f64(v).filter(|&x| x > 0.0 && x.is_finite())
        })?;
        let seed = p
            .typed("seed", "an integer", parse_u64)?
            .unwrap_or(DEFAULT_SEED);
        let data_dir = p
            .take("data_dir")
            .map_or_else(|| PathBuf::from(task.default_data_dir()), |(_, v)| v.into());
        let out_dir = p
            .take("out_dir")
            .map_or_else(|| PathBuf::from("runs").join(&name), |(_, v)| v.into());
        let max_train_batches = p.typed("max_train_batches", "a positive integer", |v| {
            parse_usize(v).filter(|&n| n > 0)
        })?;
        let max_eval_batches = p.typed("max_eval_batches", "a positive integer", |v| {
            parse_usize(v).filter(|&n| n > 0)
        })?;
        let target_eval_accuracy = p.typed("target_eval_accuracy", "a fraction", |v| {
            parse_f64(v).filter(|&x| (0.0..=1.0).contains(&x))
        })?;
        let target_eval_bpc = p.typed("target_eval_bpc", "a positive number", |v| {
            parse_f64(v).filter(|&x| x > 0.0 && x.is_finite())
        })?;

        p.reject_leftovers()?;
        Ok(ExperimentConfig {
            name,
            task,
            model,
            design,
            reader,
            modules,
            sizing,
            context_size,
            steps_per_token,
            optimizer,
            learning_rate,
            batch_size,
            epochs,
            seq_len,
            clip_norm,
            seed,
            data_dir,
            out_dir,
            carry_state,
            standardize,
            permutation_seed,
            train_frac,
            eval_frac,
            max_train_batches,
            max_eval_batches,
            target_eval_accuracy,
            target_eval_bpc,
        })
    }

    /// Rebuild a config from the key-value echo embedded in a checkpoint.
    pub fn from_echo(pairs: &[(String, String)]) -> Result<ExperimentConfig> {
        let with_lines: Vec<(usize, String, String)> = pairs
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (i + 1, k.clone(), v.clone()))
            .collect();
        ExperimentConfig::from_pairs("experiment", "checkpoint", &with_lines)
    }

    /// Every setting with its final value, in a stable order. Writing these
    /// as `key = value` lines and parsing them back yields the same config.
    pub fn resolved_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("name", self.name.clone());
        push("task", self.task.name().to_string());
        push("model", self.model.name().to_string());
        if self.model == ModelKind::ThalNet {
            push("design", self.design.name().to_string());
            push("reader", self.reader.name().to_string());
            push("context_size", self.context_size.to_string());
        }
        push("modules", self.modules.to_string());
        match &self.sizing {
            Sizing::Width(w) => push("width", w.to_string()),
            Sizing::LayerSizes(s) => push(
                "layer_sizes",
                s.iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            Sizing::Budget(b) => push("budget", b.to_string()),
        }
        push("steps_per_token", self.steps_per_token.to_string());
        push("optimizer", self.optimizer.name().to_string());
        push("learning_rate", self.learning_rate.to_string());
        push("batch_size", self.batch_size.to_string());
        push("epochs", self.epochs.to_string());
        if self.task.is_language_model() {
            push("seq_len", self.seq_len.to_string());
            push("carry_state", self.carry_state.to_string());
            push("train_frac", self.train_frac.to_string());
            push("eval_frac", self.eval_frac.to_string());
        } else {
            push("standardize", self.standardize.to_string());
        }
        if let Some(s) = self.permutation_seed {
            push("permutation_seed", s.to_string());
        }
        if let Some(c) = self.clip_norm {
            push("clip_norm", c.to_string());
        }
        push("seed", self.seed.to_string());
        push("data_dir", self.data_dir.to_string_lossy().into_owned());
        push("out_dir", self.out_dir.to_string_lossy().into_owned());
        if let Some(n) = self.max_train_batches {
            push("max_train_batches", n.to_string());
        }
        if let Some(n) = self.max_eval_batches {
            push("max_eval_batches", n.to_string());
        }
        if let Some(t) = self.target_eval_accuracy {
            push("target_eval_accuracy", t.to_string());
        }
        if let Some(t) = self.target_eval_bpc {
            push("target_eval_bpc", t.to_string());
        }
        out
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        Ok(match self.task {
            Task::SeqMnist | Task::PermMnist => {
                Dataset::Classification(load_mnist(&self.data_dir)?)
            }
            Task::SeqCifar => Dataset::Classification(load_cifar10(&self.data_dir)?),
            Task::Text8 => Dataset::LanguageModel(load_text8(
                &self.data_dir,
                self.train_frac,
                self.eval_frac,
            )?),
        })
    }

    /// Size the network for the given task dimensions without loading data.
    pub fn network_for(&self, input_size: usize, classes: usize) -> Result<NetworkConfig> {
        match self.model {
            ModelKind::ThalNet => {
                let cfg: ThalNetConfig = match &self.sizing {
                    Sizing::Width(w) => small_thalnet(
                        self.design,
                        self.reader,
                        self.modules,
                        *w,
                        self.context_size,
                        input_size,
                        classes,
                        self.steps_per_token,
                    ),
                    Sizing::LayerSizes(sizes) => ThalNetConfig {
                        modules: (0..self.modules)
                            .map(|i| ModuleSpec {
                                design: self.design,
                                layer_sizes: sizes.clone(),
                                context_size: self.context_size,
                                input_size: if i == 0 { input_size } else { 0 },
                            })
                            .collect(),
                        reader: self.reader,
                        steps_per_token: self.steps_per_token,
                        classes,
                    },
                    Sizing::Budget(b) => budget_search(
                        self.design,
                        self.reader,
                        self.modules,
                        self.context_size,
                        input_size,
                        classes,
                        self.steps_per_token,
                        *b,
                    )?,
                };
                Ok(NetworkConfig::ThalNet(cfg))
            }
            ModelKind::StackedGru => {
                let cfg: BaselineConfig = match &self.sizing {
                    Sizing::Width(w) => BaselineConfig {
                        layer_sizes: vec![*w; self.modules],
                        steps_per_token: self.steps_per_token,
                        classes,
                        input_size,
                    },
                    Sizing::LayerSizes(sizes) => BaselineConfig {
                        layer_sizes: sizes.clone(),
                        steps_per_token: self.steps_per_token,
                        classes,
                        input_size,
                    },
                    Sizing::Budget(b) => budget_search_baseline(
                        self.modules,
                        input_size,
                        classes,
                        self.steps_per_token,
                        *b,
                    )?,
                };
                Ok(NetworkConfig::Baseline(cfg))
            }
        }
    }

    /// Load the dataset, size the network, and assemble the experiment.
    pub fn build(&self) -> Result<Experiment> {
        let dataset = self.load_dataset()?;
        let network = self.network_for(dataset.input_features(), dataset.classes())?;
        let mut exp = Experiment::new(&self.name, network, dataset, &self.out_dir);
        exp.optimizer = self.optimizer;
        exp.learning_rate = self.learning_rate;
        exp.batch_size = self.batch_size;
        exp.epochs = self.epochs;
        exp.seq_len = self.seq_len;
        exp.clip_norm = self.clip_norm;
        exp.seed = self.seed;
        exp.carry_state = self.carry_state;
        exp.standardize = self.standardize;
        exp.permutation_seed = self.permutation_seed;
        exp.max_train_batches = self.max_train_batches;
        exp.max_eval_batches = self.max_eval_batches;
        exp.target_eval_accuracy = self.target_eval_accuracy;
        exp.target_eval_bpc = self.target_eval_bpc;
        exp.config_echo = self.resolved_pairs();
        exp.validate()?;
        Ok(exp)
    }
}

/// Parse a config file; the experiment name defaults to the file stem.
pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let origin = path.display().to_string();
    let pairs = parse_config_text(&origin, &text)?;
    let default_name = path
        .file_stem()
        .map_or_else(|| "experiment".to_string(), |s| s.to_string_lossy().into_owned());
    ExperimentConfig::from_pairs(&default_name, &origin, &pairs)
}

/// Apply command-line and environment overrides. Precedence for the data
/// directory: `--data-dir` flag, then the environment variable, then the
/// config file.
pub fn apply_overrides(
    cfg: &mut ExperimentConfig,
    seed: Option<u64>,
    data_dir: Option<&Path>,
    env_data_dir: Option<&OsStr>,
    out_dir: Option<&Path>,
) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d.to_path_buf();
    } else if let Some(d) = env_data_dir {
        cfg.data_dir = PathBuf::from(d);
    }
    if let Some(o) = out_dir {
        cfg.out_dir = o.to_path_buf();
    }
}

/// Write the resolved key set as a reparseable config file.
pub fn write_manifest(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut text = String::from("# resolved experiment configuration\n");
    for (k, v) in cfg.resolved_pairs() {
        text.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

// ── Commands ─────────────────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(
    name = "thalnet",
    version,
    about = "Recurrent modules communicating through a learned routing center"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model described by a config file.
    Train {
        /// Flat `key = value` experiment file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the dataset location.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Override the run directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Suppress per-epoch metric rows.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on its eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the dataset location.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Export reading-weight images and the deduced connectivity graph.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory receiving module-<i>.pgm files and connectivity.dot.
        #[arg(long)]
        out: PathBuf,
        /// Edge threshold multiplier over 1/module-count.
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Number of recorded feature rows probing the dynamic readers.
        #[arg(long, default_value_t = DEFAULT_PROBE_COUNT)]
        probe_batch: usize,
        /// Override the dataset location (probe source).
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences for
    /// every reader and module design.
    Gradcheck,
}

pub fn run(cli: Cli) -> Result<()> {
    let env_data_dir = std::env::var_os(DATA_DIR_ENV);
    match cli.command {
        Command::Train {
            config,
            seed,
            data_dir,
            out_dir,
            quiet,
        } => cmd_train(
            &config,
            seed,
            data_dir.as_deref(),
            env_data_dir.as_deref(),
            out_dir.as_deref(),
            quiet,
        ),
        Command::Eval {
            checkpoint,
            data_dir,
        } => cmd_eval(&checkpoint, data_dir.as_deref(), env_data_dir.as_deref()),
        Command::Analyze {
            checkpoint,
            out,
            tau,
            probe_batch,
            data_dir,
        } => cmd_analyze(
            &checkpoint,
            &out,
            tau,
            probe_batch,
            data_dir.as_deref(),
            env_data_dir.as_deref(),
        ),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    data_dir: Option<&Path>,
    env_data_dir: Option<&OsStr>,
    out_dir: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let mut cfg = parse_config_file(config_path)?;
    apply_overrides(&mut cfg, seed, data_dir, env_data_dir, out_dir);
    let mut exp = cfg.build()?;
    exp.verbose = !quiet;
    fs::create_dir_all(&exp.out_dir)?;
    write_manifest(&exp.out_dir.join("manifest.conf"), &cfg)?;

    let (train_items, eval_items, unit) = match &exp.dataset {
        Dataset::Classification(c) => (c.count(Split::Train), c.count(Split::Eval), "images"),
        Dataset::LanguageModel(l) => (
            l.window_count(Split::Train, exp.seq_len),
            l.window_count(Split::Eval, exp.seq_len),
            "windows",
        ),
    };
    println!(
        "{}: {} parameters, {train_items} train / {eval_items} eval {unit}, seed {}",
        exp.name,
        exp.network.total_param_count(),
        exp.seed
    );
    if !quiet {
        println!("{METRICS_HEADER}");
    }
    let report = train_experiment(&exp)?;
    let last = report.metrics.last().expect("at least one epoch");
    println!(
        "finished after {} steps{}: eval loss {:.6}, best epoch {}",
        report.steps,
        if report.stopped_early {
            " (target reached early)"
        } else {
            ""
        },
        last.loss,
        report.best_epoch
    );
    println!(
        "metrics: {} | final: {} | best: {}",
        report.metrics_path.display(),
        report.final_checkpoint.display(),
        report.best_checkpoint.display()
    );
    Ok(())
}

/// Rebuild the experiment a checkpoint was trained with, honoring data-dir
/// overrides.
fn experiment_from_checkpoint(
    ckpt_config: &[(String, String)],
    data_dir: Option<&Path>,
    env_data_dir: Option<&OsStr>,
) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::from_echo(ckpt_config)?;
    apply_overrides(&mut cfg, None, data_dir, env_data_dir, None);
    cfg.build()
}

pub fn cmd_eval(
    ckpt_path: &Path,
    data_dir: Option<&Path>,
    env_data_dir: Option<&OsStr>,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let exp = experiment_from_checkpoint(&ckpt.config, data_dir, env_data_dir)?;
    let metrics = evaluate_checkpoint(&exp, ckpt_path)?;
    println!("{METRICS_HEADER}");
    println!("{}", metrics.csv_row());
    Ok(())
}

pub fn cmd_analyze(
    ckpt_path: &Path,
    out: &Path,
    tau: f64,
    probe_batch: usize,
    data_dir: Option<&Path>,
    env_data_dir: Option<&OsStr>,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let exp = experiment_from_checkpoint(&ckpt.config, data_dir, env_data_dir)?;
    let NetworkConfig::ThalNet(tcfg) = &exp.network else {
        return Err(Error::Config(
            "connectivity analysis applies only to thalnet checkpoints".into(),
        ));
    };
    let (pset, nparams) = restore(&exp.network, &ckpt)?;
    let NetworkParams::ThalNet(tp) = &nparams else {
        unreachable!("restore returns params matching the network kind");
    };

    let available = match &exp.dataset {
        Dataset::Classification(c) => c.count(Split::Eval),
        Dataset::LanguageModel(l) => l.window_count(Split::Eval, exp.seq_len),
    };
    let rows = exp.batch_size.min(available).max(1);
    let indices: Vec<usize> = (0..rows).collect();
    let perm = exp.pixel_permutation();
    let batch = exp.make_batch(perm.as_ref(), Split::Eval, &indices)?;
    let inputs = batch.token_tensors();

    let report = analyze_thalnet(tcfg, tp, &pset, Some(&inputs), tau, probe_batch)?;
    export_analysis(out, &report)?;
    println!(
        "wrote {} reading images and connectivity.dot to {}",
        report.images.len(),
        out.display()
    );
    let threshold = tau / report.graph.modules as f64;
    println!("block shares (threshold {threshold:.3}):");
    for (i, row) in report.graph.shares.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|s| format!("{s:.3}")).collect();
        println!("  reader {}: [{}]", i + 1, cells.join(", "));
    }
    if report.graph.edges.is_empty() {
        println!("no block shares cleared the threshold");
    }
    for e in &report.graph.edges {
        println!(
            "  module {} -> module {} (share {:.2})",
            e.from + 1,
            e.to + 1,
            e.strength
        );
    }
    Ok(())
}

// ── Gradient check ───────────────────────────────────────────────────────

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub design: Design,
    pub reader: ReaderVariant,
    pub modules: usize,
    pub max_rel_err: f64,
}

impl GradCheckRow {
    pub fn pass(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

/// Worst relative error between backward gradients and central finite
/// differences on a toy model: `modules` modules of the given design and
/// reader, widths ≤ 6, batch 2, three tokens at two sub-steps each.
pub fn gradcheck_combo(design: Design, reader: ReaderVariant, modules: usize, seed: u64) -> Result<f64> {
    let base = match design {
        Design::Ff | Design::Gru => 3,
        _ => 2,
    };
    let network = NetworkConfig::ThalNet(small_thalnet(design, reader, modules, base, 3, 2, 3, 2));
    let mut pset = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nparams = network.init(&mut pset, &mut rng)?;
    let inputs: Vec<Tensor> = (0..3)
        .map(|_| {
            let data: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[2, 2], data)
        })
        .collect::<Result<_>>()?;
    let spec = LossSpec::ClassifyLast(vec![seed as usize % 3, (seed as usize + 1) % 3]);

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let initial = network.fresh_state(2);
        let out = network.unroll(&mut tape, &bound, &nparams, &initial, &inputs, &spec)?;
        Ok(tape.value(out.loss).item())
    };

    let mut tape = Tape::new();
    let bound = pset.bind(&mut tape);
    let initial = network.fresh_state(2);
    let out = network.unroll(&mut tape, &bound, &nparams, &initial, &inputs, &spec)?;
    let grads = tape.backward(out.loss)?;
    let analytic: Vec<Tensor> = bound.iter().map(|&id| grads.wrt(&tape, id)).collect();
    let numeric = check::central_difference(&mut pset, eval, 1e-5)?;
    let (err, _, _) = check::max_relative_error(&analytic, &numeric);
    Ok(err)
}

/// All 20 reader × design combinations, module counts cycling through 2–4.
pub fn gradcheck_suite() -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::with_capacity(20);
    for (di, design) in Design::ALL.into_iter().enumerate() {
        for (ri, reader) in ReaderVariant::ALL.into_iter().enumerate() {
            let modules = 2 + (di + ri) % 3;
            let max_rel_err =
                gradcheck_combo(design, reader, modules, (di * 4 + ri) as u64 + 1)?;
            rows.push(GradCheckRow {
                design,
                reader,
                modules,
                max_rel_err,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_gradcheck() -> Result<()> {
    println!(
        "{:<10} {:<14} {:>7} {:>13}   result",
        "design", "reader", "modules", "max rel err"
    );
    let rows = gradcheck_suite()?;
    let mut failures = 0;
    for row in &rows {
        println!(
            "{:<10} {:<14} {:>7} {:>13.3e}   {}",
            row.design.name(),
            row.reader.name(),
            row.modules,
            row.max_rel_err,
            if row.pass() { "pass" } else { "FAIL" }
        );
        if !row.pass() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Domain {
            op: "gradcheck",
            msg: format!(
                "{failures} of {} combinations exceeded {GRADCHECK_TOLERANCE:e}",
                rows.len()
            ),
        });
    }
    println!(
        "all {} combinations pass (tolerance {GRADCHECK_TOLERANCE:e})",
        rows.len()
    );
    Ok(())
}
