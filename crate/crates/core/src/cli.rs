//! Subcommand implementations behind the `qlrnn` binary. Each command
//! writes its report to the given writer and returns structured results
//! so it can be driven from tests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::config::{RunConfig, SourceKind};
use crate::data::{
    gen_adding_problem, gen_distant_token_task, load_jsonl, load_jsonl_unlabelled, split_train_val, Example,
};
use crate::error::{Error, Result};
use crate::gradflow::{clamped_model, gradient_flow_profile, profile_csv, ProfileRow};
use crate::metrics::EvalReport;
use crate::network::{
    backward, closed_form_params, count_params, forward, model_shapes, model_size_mb, step_cost, Arch, Mode,
    Model, ModelSpec, Task,
};
use crate::cells::{count_cell_params, CellParamCount};
use crate::numerics::Rng;
use crate::training::{evaluate, example_loss, train_loop, EpochRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidSpec(_) | Error::UnknownArch(_) | Error::InvalidLeap(_) => EXIT_CONFIG,
        Error::Data { .. }
        | Error::TokenOutOfRange { .. }
        | Error::InvalidTarget { .. }
        | Error::Checkpoint { .. }
        | Error::EmptyInput
        | Error::EmptySequence
        | Error::Io(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const METRICS_LOG: &str = "metrics.log";
pub const TIMING_LOG: &str = "timing.log";
pub const EVAL_REPORT: &str = "eval_report.txt";
pub const RESOLVED_CONFIG: &str = "config.cfg";

/// Checks tokens and labels against a model spec.
pub fn check_examples(spec: &ModelSpec, examples: &[Example], origin: &Path) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (i, ex) in examples.iter().enumerate() {
        let line = i + 1;
        let data_err = |msg: String| Error::Data {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        if ex.tokens.is_empty() {
            return Err(data_err("empty sequence".into()));
        }
        if let Some(&tok) = ex.tokens.iter().find(|&&t| t >= spec.vocab_size) {
            return Err(data_err(format!("token {tok} outside vocabulary of {}", spec.vocab_size)));
        }
        if spec.task == Task::Classify {
            match ex.label {
                Some(l) if l < spec.n_classes => {}
                Some(l) => return Err(data_err(format!("label {l} outside {} classes", spec.n_classes))),
                None => return Err(data_err("missing label".into())),
            }
        }
    }
    Ok(())
}

fn read_examples(cfg: &RunConfig, path: &Path) -> Result<Vec<Example>> {
    let loaded = match cfg.model.task {
        Task::Classify => load_jsonl(path),
        Task::Lm => load_jsonl_unlabelled(path),
    };
    loaded.map_err(|e| match e {
        Error::Io(io) => Error::Data {
            path: path.to_path_buf(),
            line: 0,
            msg: io.to_string(),
        },
        other => other,
    })
}

/// All examples the config's data source describes, before splitting.
pub fn source_examples(cfg: &RunConfig) -> Result<Vec<Example>> {
    let d = &cfg.data;
    let seed = cfg.train.seed;
    match d.source {
        SourceKind::Jsonl => read_examples(cfg, d.path.as_deref().expect("validated")),
        SourceKind::DistantToken => gen_distant_token_task(d.n_examples, d.seq_len, d.gap, seed),
        SourceKind::Adding => gen_adding_problem(d.n_examples, d.seq_len, seed),
    }
}

fn source_name(cfg: &RunConfig) -> PathBuf {
    cfg.data
        .path
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("<{}>", cfg.data.source)))
}

/// Training and validation sets for a config.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let all = source_examples(cfg)?;
    let (train, val) = match &cfg.data.val_path {
        Some(v) => {
            let val = read_examples(cfg, v)?;
            check_examples(&cfg.model, &val, v)?;
            (all, val)
        }
        None => split_train_val(&all, cfg.data.split_ratio, cfg.train.seed).map_err(|e| Error::Data {
            path: source_name(cfg),
            line: 0,
            msg: e.to_string(),
        })?,
    };
    check_examples(&cfg.model, &train, &source_name(cfg))?;
    check_examples(&cfg.model, &val, &source_name(cfg))?;
    Ok((train, val))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
    pub final_report: EvalReport,
    pub checkpoint: PathBuf,
}

/// Trains per the config and writes the best checkpoint, the per-epoch
/// metrics log (deterministic), a timing log and the validation report of
/// the best model into `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, stdout: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train, val) = load_dataset(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    let model = Model::<f64>::with_forget_bias(cfg.model.clone(), cfg.train.seed, cfg.forget_bias)?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_LOG))?);
    let mut timing = BufWriter::new(File::create(out_dir.join(TIMING_LOG))?);
    let outcome = train_loop(&model, &train, &val, &cfg.train, &mut |rec| {
        writeln!(metrics, "{}", rec.metrics_line())?;
        metrics.flush()?;
        writeln!(timing, "{}", rec.timing_line())?;
        timing.flush()?;
        writeln!(stdout, "{} {}", rec.metrics_line(), rec.timing_line())?;
        Ok(())
    })?;
    let path = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&outcome.best, &path)?;
    let report = evaluate(&outcome.best, &val, cfg.train.max_len)?;
    fs::write(out_dir.join(EVAL_REPORT), report.to_text())?;
    writeln!(stdout, "best_epoch={} checkpoint={}", outcome.best_epoch, path.display())?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        records: outcome.records,
        final_report: report,
        checkpoint: path,
    })
}

/// Evaluation-mode metrics of a checkpoint on a set of examples.
pub fn cmd_eval(
    checkpoint_path: &Path,
    examples: &[Example],
    max_len: usize,
    stdout: &mut dyn Write,
) -> Result<EvalReport> {
    let model: Model<f64> = checkpoint::load(checkpoint_path)?;
    check_examples(&model.spec, examples, checkpoint_path)?;
    let report = evaluate(&model, examples, max_len)?;
    write!(stdout, "{}", report.to_text())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamsReport {
    pub total: usize,
    pub closed_form: usize,
    pub cell: CellParamCount,
    pub size_mb_f32: f64,
    pub size_mb_f64: f64,
}

/// Per-tensor parameter table plus totals, checked against closed forms.
pub fn cmd_params(spec: &ModelSpec, stdout: &mut dyn Write) -> Result<ParamsReport> {
    spec.validate()?;
    let shapes = model_shapes(spec);
    writeln!(stdout, "{:<20} {:>10} {:>14}", "tensor", "shape", "count")?;
    let mut total = 0;
    for (name, (r, c)) in &shapes {
        writeln!(stdout, "{:<20} {:>10} {:>14}", name, format!("{r}x{c}"), r * c)?;
        total += r * c;
    }
    let closed_form = closed_form_params(spec);
    let cell = count_cell_params(spec)?;
    if total != closed_form {
        return Err(Error::Numeric(format!(
            "enumerated total {total} disagrees with closed form {closed_form}"
        )));
    }
    let report = ParamsReport {
        total,
        closed_form,
        cell,
        size_mb_f32: model_size_mb(total, 4),
        size_mb_f64: model_size_mb(total, 8),
    };
    writeln!(stdout, "arch = {}", spec.arch)?;
    writeln!(stdout, "cell_enumerated = {}", cell.enumerated)?;
    writeln!(stdout, "cell_closed_form = {}", cell.closed_form)?;
    writeln!(stdout, "total_enumerated = {total}")?;
    writeln!(stdout, "total_closed_form = {closed_form}")?;
    writeln!(stdout, "total_millions = {:.2}", total as f64 / 1e6)?;
    writeln!(stdout, "size_mb_s4 = {:.2}", report.size_mb_f32)?;
    writeln!(stdout, "size_mb_s8 = {:.2}", report.size_mb_f64)?;
    Ok(report)
}

/// Largest hidden size and sequence length accepted by `cmd_gradflow`.
pub const GRADFLOW_MAX_D_H: usize = 16;
pub const GRADFLOW_MAX_LEN: usize = 64;

/// Gradient-flow profile of one sequence drawn from the config's data
/// source, as CSV.
pub fn cmd_gradflow(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<Vec<ProfileRow>> {
    cfg.validate()?;
    let len = cfg.gradflow.seq_len;
    if cfg.model.d_h > GRADFLOW_MAX_D_H {
        return Err(Error::Config {
            key: "d_h".into(),
            msg: format!("gradflow needs d_h <= {GRADFLOW_MAX_D_H}"),
        });
    }
    if len > GRADFLOW_MAX_LEN {
        return Err(Error::Config {
            key: "gradflow_len".into(),
            msg: format!("gradflow needs sequences of at most {GRADFLOW_MAX_LEN}"),
        });
    }
    let seed = cfg.train.seed;
    let example = match cfg.data.source {
        SourceKind::Jsonl => {
            let mut ex = source_examples(cfg)?.into_iter().next().ok_or(Error::EmptyInput)?;
            ex.tokens.truncate(len);
            ex
        }
        SourceKind::DistantToken => gen_distant_token_task(1, len, cfg.data.gap.min(len - 1), seed)?.remove(0),
        SourceKind::Adding => gen_adding_problem(1, len.max(2), seed)?.remove(0),
    };
    check_examples(&cfg.model, std::slice::from_ref(&example), &source_name(cfg))?;
    let model = match cfg.gradflow.clamp_f {
        Some(f) => clamped_model(cfg.model.clone(), f)?,
        None => Model::with_forget_bias(cfg.model.clone(), seed, cfg.forget_bias)?,
    };
    let label = (cfg.model.task == Task::Classify).then(|| example.label.unwrap_or(0));
    let rows = gradient_flow_profile(&model, &example.tokens, label)?;
    write!(stdout, "{}", profile_csv(&rows, cfg.gradflow.clamp_f))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub arch: Arch,
    pub n_examples: usize,
    pub mean_len: f64,
    pub seconds: f64,
    pub examples_per_sec: f64,
    pub tokens_per_sec: f64,
    pub cell_macs: usize,
    pub skip_macs_per_step: f64,
    pub params: usize,
}

/// Times forward (and backward) passes for each configured architecture
/// on shared data and a shared seed. Only the op counts are deterministic.
pub fn cmd_bench(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut examples = source_examples(cfg)?;
    examples.truncate(cfg.bench.n_examples);
    for ex in &mut examples {
        ex.tokens.truncate(cfg.train.max_len);
    }
    check_examples(&cfg.model, &examples, &source_name(cfg))?;
    writeln!(
        stdout,
        "arch,n_examples,mean_len,seconds,examples_per_sec,tokens_per_sec,cell_macs,skip_macs_per_step,params"
    )?;
    let mut rows = Vec::new();
    for &arch in &cfg.bench.archs {
        let mut spec = cfg.model.clone();
        spec.arch = arch;
        if arch == Arch::BiLstm && spec.task == Task::Lm {
            continue;
        }
        let model = Model::<f64>::with_forget_bias(spec.clone(), cfg.train.seed, cfg.forget_bias)?;
        let start = Instant::now();
        let mut n_tokens = 0usize;
        for ex in &examples {
            n_tokens += ex.tokens.len();
            if cfg.bench.backward {
                let out = example_loss(&model, &ex.tokens, ex.label, Mode::Eval, &mut Rng::new(0))?;
                backward(&model, &out.cache, &out.dlogits)?;
            } else {
                forward(&model, &ex.tokens, Mode::Eval, &mut Rng::new(0))?;
            }
        }
        let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        let n = examples.len();
        let mean_len = n_tokens as f64 / n as f64;
        let examples_per_sec = n as f64 / seconds;
        let cost = step_cost(&spec);
        let row = BenchRow {
            arch,
            n_examples: n,
            mean_len,
            seconds,
            examples_per_sec,
            tokens_per_sec: examples_per_sec * mean_len,
            cell_macs: cost.cell_macs,
            skip_macs_per_step: cost.skip_macs_per_step,
            params: count_params(&model),
        };
        writeln!(
            stdout,
            "{},{},{},{:.6},{:.3},{:.3},{},{},{}",
            row.arch,
            row.n_examples,
            row.mean_len,
            row.seconds,
            row.examples_per_sec,
            row.tokens_per_sec,
            row.cell_macs,
            row.skip_macs_per_step,
            row.params
        )?;
        rows.push(row);
    }
    Ok(rows)
}
