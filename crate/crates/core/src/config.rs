//! Flat `key = value` run configuration with typed parsing and
//! unknown-key rejection.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::BYTE_VOCAB;
use crate::error::{Error, Result};
use crate::network::{Arch, ModelSpec};
use crate::training::{EarlyStopMetric, OptimizerKind, TrainConfig};

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            msg: format!("expected a boolean, got `{value}`"),
        }),
    }
}

fn parse_opt<V: FromStr>(key: &str, value: &str) -> Result<Option<V>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_text<V: fmt::Display>(v: &Option<V>) -> String {
    v.as_ref().map_or_else(|| "none".into(), |x| x.to_string())
}

/// Model-spec keys, in the order they are written.
pub const SPEC_KEYS: [&str; 12] = [
    "arch",
    "d_emb",
    "d_h",
    "leap",
    "pooling",
    "skip_variant",
    "vocab_size",
    "n_classes",
    "dropout",
    "task",
    "readout",
    "flush_partial",
];

/// Applies one model-spec key; returns `Ok(false)` if the key is not a
/// spec key.
pub fn set_spec_key(spec: &mut ModelSpec, key: &str, value: &str) -> Result<bool> {
    let map = |e: Error| match e {
        Error::Config { .. } => e,
        other => Error::Config {
            key: key.into(),
            msg: other.to_string(),
        },
    };
    match key {
        "arch" => spec.arch = value.parse().map_err(map)?,
        "d_emb" => spec.d_emb = parse(key, value)?,
        "d_h" => spec.d_h = parse(key, value)?,
        "leap" => spec.leap = parse(key, value)?,
        "pooling" => spec.pooling = value.parse().map_err(map)?,
        "skip_variant" => spec.skip_variant = value.parse().map_err(map)?,
        "vocab_size" => spec.vocab_size = parse(key, value)?,
        "n_classes" => spec.n_classes = parse(key, value)?,
        "dropout" => spec.dropout = parse(key, value)?,
        "task" => spec.task = value.parse().map_err(map)?,
        "readout" => spec.readout = value.parse().map_err(map)?,
        "flush_partial" => spec.flush_partial = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn spec_entries(spec: &ModelSpec) -> Vec<(&'static str, String)> {
    vec![
        ("arch", spec.arch.to_string()),
        ("d_emb", spec.d_emb.to_string()),
        ("d_h", spec.d_h.to_string()),
        ("leap", spec.leap.to_string()),
        ("pooling", spec.pooling.to_string()),
        ("skip_variant", spec.skip_variant.to_string()),
        ("vocab_size", spec.vocab_size.to_string()),
        ("n_classes", spec.n_classes.to_string()),
        ("dropout", format!("{:?}", spec.dropout)),
        ("task", spec.task.to_string()),
        ("readout", spec.readout.to_string()),
        ("flush_partial", spec.flush_partial.to_string()),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Jsonl,
    DistantToken,
    Adding,
}

impl FromStr for SourceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(SourceKind::Jsonl),
            "distant_token" => Ok(SourceKind::DistantToken),
            "adding" => Ok(SourceKind::Adding),
            other => Err(Error::InvalidArgument(format!("unknown data source `{other}`"))),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Jsonl => "jsonl",
            SourceKind::DistantToken => "distant_token",
            SourceKind::Adding => "adding",
        })
    }
}

/// Where examples come from. Synthetic sources generate `n_examples`
/// sequences of length `seq_len`; everything without an explicit
/// validation file is split by `split_ratio`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: SourceKind,
    pub path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub n_examples: usize,
    pub seq_len: usize,
    pub gap: usize,
    pub split_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: SourceKind::DistantToken,
            path: None,
            val_path: None,
            n_examples: 1000,
            seq_len: 64,
            gap: 32,
            split_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub archs: Vec<Arch>,
    pub n_examples: usize,
    pub backward: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradflowConfig {
    /// Clamp every forget gate to this value; `None` profiles the model as
    /// initialised.
    pub clamp_f: Option<f64>,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub forget_bias: f64,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
    pub bench: BenchConfig,
    pub gradflow: GradflowConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelSpec::new(Arch::QlFull, BYTE_VOCAB, 64, 64, 2);
        RunConfig {
            bench: BenchConfig {
                archs: vec![model.arch],
                n_examples: 64,
                backward: true,
            },
            model,
            forget_bias: 0.0,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            gradflow: GradflowConfig {
                clamp_f: None,
                seq_len: 32,
            },
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl fmt::Display for EarlyStopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EarlyStopMetric::ValAcc => "val_acc",
            EarlyStopMetric::ValMacroF1 => "val_macro_f1",
            EarlyStopMetric::ValLoss => "val_loss",
        })
    }
}

fn invalid(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("<file>", format!("{}: {e}", path.display())))?;
        text.parse()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_spec_key(&mut self.model, key, value)? {
            if key == "arch" && self.bench.archs.len() == 1 {
                self.bench.archs = vec![self.model.arch];
            }
            return Ok(());
        }
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "forget_bias" => self.forget_bias = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_len" => t.max_len = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse().map_err(|e: Error| invalid(key, e.to_string()))?,
            "clip_norm" => t.clip_norm = parse_opt(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "early_stop_metric" => {
                t.early_stop = value.parse().map_err(|e: Error| invalid(key, e.to_string()))?
            }
            "patience" => t.patience = parse_opt(key, value)?,
            "data_source" => d.source = value.parse().map_err(|e: Error| invalid(key, e.to_string()))?,
            "data_path" => d.path = parse_opt(key, value)?,
            "val_path" => d.val_path = parse_opt(key, value)?,
            "n_examples" => d.n_examples = parse(key, value)?,
            "seq_len" => d.seq_len = parse(key, value)?,
            "gap" => d.gap = parse(key, value)?,
            "split_ratio" => d.split_ratio = parse(key, value)?,
            "out_dir" => self.out_dir = parse(key, value)?,
            "bench_archs" => {
                self.bench.archs = value
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|e: Error| invalid(key, e.to_string())))
                    .collect::<Result<_>>()?
            }
            "bench_examples" => self.bench.n_examples = parse(key, value)?,
            "bench_backward" => self.bench.backward = parse_bool(key, value)?,
            "gradflow_clamp_f" => self.gradflow.clamp_f = parse_opt(key, value)?,
            "gradflow_len" => self.gradflow.seq_len = parse(key, value)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Checks every invariant so that an invalid file never reaches model
    /// construction.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(invalid("lr", format!("must be positive, got {}", t.lr)));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        for (key, v) in [
            ("batch_size", t.batch_size),
            ("max_len", t.max_len),
            ("epochs", t.epochs),
            ("seq_len", self.data.seq_len),
            ("bench_examples", self.bench.n_examples),
            ("gradflow_len", self.gradflow.seq_len),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("clip_norm", "must be positive or `none`"));
            }
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(invalid("split_ratio", "must lie in (0, 1)"));
        }
        match self.data.source {
            SourceKind::Jsonl if self.data.path.is_none() => {
                return Err(invalid("data_path", "required for data_source = jsonl"))
            }
            SourceKind::DistantToken if self.data.gap >= self.data.seq_len => {
                return Err(invalid("gap", "must be smaller than seq_len"))
            }
            SourceKind::Adding if self.data.seq_len < 2 => {
                return Err(invalid("seq_len", "adding problem needs at least 2"))
            }
            _ => {}
        }
        if let Some(f) = self.gradflow.clamp_f {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid("gradflow_clamp_f", "must lie in (0, 1]"));
            }
        }
        if self.bench.archs.is_empty() {
            return Err(invalid("bench_archs", "needs at least one architecture"));
        }
        self.model.validate().map_err(|e| invalid("model", e.to_string()))
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<(String, String)> = spec_entries(&self.model)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let t = &self.train;
        let d = &self.data;
        let path_text = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string());
        lines.extend(
            [
                ("forget_bias", format!("{:?}", self.forget_bias)),
                ("lr", format!("{:?}", t.lr)),
                ("weight_decay", format!("{:?}", t.weight_decay)),
                ("batch_size", t.batch_size.to_string()),
                ("max_len", t.max_len.to_string()),
                ("epochs", t.epochs.to_string()),
                ("optimizer", t.optimizer.to_string()),
                ("clip_norm", opt_text(&t.clip_norm.map(|c| format!("{c:?}")))),
                ("seed", t.seed.to_string()),
                ("early_stop_metric", t.early_stop.to_string()),
                ("patience", opt_text(&t.patience)),
                ("data_source", d.source.to_string()),
                ("data_path", path_text(&d.path)),
                ("val_path", path_text(&d.val_path)),
                ("n_examples", d.n_examples.to_string()),
                ("seq_len", d.seq_len.to_string()),
                ("gap", d.gap.to_string()),
                ("split_ratio", format!("{:?}", d.split_ratio)),
                ("out_dir", self.out_dir.display().to_string()),
                (
                    "bench_archs",
                    self.bench.archs.iter().map(Arch::to_string).collect::<Vec<_>>().join(","),
                ),
                ("bench_examples", self.bench.n_examples.to_string()),
                ("bench_backward", self.bench.backward.to_string()),
                ("gradflow_clamp_f", opt_text(&self.gradflow.clamp_f.map(|c| format!("{c:?}")))),
                ("gradflow_len", self.gradflow.seq_len.to_string()),
            ]
            .map(|(k, v)| (k.to_string(), v)),
        );
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    /// `#` starts a comment; blank lines are ignored; duplicate keys are
    /// rejected.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                invalid(&format!("line {}", i + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(invalid(key, "duplicate key"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
