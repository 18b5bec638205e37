//! Losses, optimisers, gradient clipping, evaluation and the epoch loop.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{make_batches, Example, PAD_ID};
use crate::error::{Error, Result};
use crate::metrics::{classification_report, lm_metrics, throughput, EvalReport};
use crate::network::{backward, forward, Gradients, Mode, Model, Params, SequenceCache, Task};
use crate::numerics::{Matrix, Rng, Scalar};

/// Mean softmax cross-entropy over the rows of `logits`, with its gradient.
/// Row `r` is scored against `targets[r]`; uses log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[usize]) -> Result<(T, Matrix<T>)> {
    if logits.rows() != targets.len() {
        return Err(Error::LengthMismatch(logits.rows(), targets.len()));
    }
    if targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = logits.cols();
    let scale = T::one() / T::of(targets.len() as f64);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(logits.rows(), n);
    for (r, &y) in targets.iter().enumerate() {
        if y >= n {
            return Err(Error::InvalidTarget { target: y, classes: n });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += (lse - row[y]) * scale;
        for c in 0..n {
            let p = (row[c] - lse).exp();
            let onehot = if c == y { T::one() } else { T::zero() };
            grad[(r, c)] = (p - onehot) * scale;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite cross-entropy {loss}")));
    }
    Ok((loss, grad))
}

/// Softmax of one logits row.
pub fn softmax_row<T: Scalar>(logits: &Matrix<T>, r: usize) -> Vec<T> {
    let row = logits.row(r);
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward pass and loss for one example.
#[derive(Debug, Clone)]
pub struct ExampleOutput<T> {
    pub loss: T,
    pub logits: Matrix<T>,
    pub dlogits: Matrix<T>,
    pub cache: SequenceCache<T>,
}

/// Classification scores the label; language modelling scores every
/// position but the last against the following token.
pub fn example_loss<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    label: Option<usize>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ExampleOutput<T>> {
    let (logits, cache) = forward(model, tokens, mode, rng)?;
    let (loss, dlogits) = match model.spec.task {
        Task::Classify => {
            let y = label.ok_or_else(|| Error::InvalidArgument("classification example has no label".into()))?;
            cross_entropy(&logits, &[y])?
        }
        Task::Lm => {
            let len = tokens.len();
            if len < 2 {
                return Err(Error::InvalidArgument(
                    "language modelling needs sequences of length at least 2".into(),
                ));
            }
            let scored = logits.slice_rows(0, len - 1);
            let (loss, g) = cross_entropy(&scored, &tokens[1..])?;
            let mut dlogits = Matrix::zeros(len, logits.cols());
            dlogits.as_mut_slice()[..g.len()].copy_from_slice(g.as_slice());
            (loss, dlogits)
        }
    };
    Ok(ExampleOutput {
        loss,
        logits,
        dlogits,
        cache,
    })
}

/// Loss and parameter gradients for one example.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    label: Option<usize>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(T, Gradients<T>)> {
    let out = example_loss(model, tokens, label, mode, rng)?;
    let grads = backward(model, &out.cache, &out.dlogits)?;
    Ok((out.loss, grads))
}

/// Floor on the denominator of [`relative_error`], so that gradients that
/// are both near zero compare by absolute difference.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub n_checked: usize,
}

/// Compares analytic gradients of one example's loss with central
/// differences of step `h` over every parameter. Each loss evaluation
/// reuses the same dropout stream, so train mode is checkable too.
pub fn gradient_check(
    model: &Model<f64>,
    tokens: &[usize],
    label: Option<usize>,
    mode: Mode,
    dropout_seed: u64,
    h: f64,
) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let loss = |m: &Model<f64>| -> Result<f64> {
        Ok(example_loss(m, tokens, label, mode, &mut Rng::new(dropout_seed))?.loss)
    };
    let (_, grads) = loss_and_grads(model, tokens, label, mode, &mut Rng::new(dropout_seed))?;
    let analytic = grads.tensors();
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        n_checked: 0,
    };
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = model.params.tensors()[ti].1.as_slice()[k];
            let set = |v: f64, p: &mut Model<f64>| p.params.tensors_mut()[ti].1.as_mut_slice()[k] = v;
            set(orig + h, &mut probe);
            let up = loss(&probe)?;
            set(orig - h, &mut probe);
            let down = loss(&probe)?;
            set(orig, &mut probe);
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("non-finite difference quotient at {name}[{k}]")));
            }
            let err = relative_error(g.as_slice()[k], numeric);
            if err > out.max_rel_err || out.n_checked == 0 {
                out.max_rel_err = err;
                out.worst = (name.clone(), k);
            }
            out.n_checked += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" | "adamw" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// `p ← p − lr·(g + wd·p)`.
pub fn sgd_update<T: Scalar>(p: &mut Matrix<T>, g: &Matrix<T>, lr: f64, weight_decay: f64) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape("sgd_update", p.shape(), g.shape()));
    }
    let (lr, wd) = (T::of(lr), T::of(weight_decay));
    for (w, &d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *w -= lr * (d + wd * *w);
    }
    Ok(())
}

/// One Adam step with bias correction at step `t ≥ 1` and decoupled
/// weight decay.
pub fn adam_update<T: Scalar>(
    p: &mut Matrix<T>,
    g: &Matrix<T>,
    m: &mut Matrix<T>,
    v: &mut Matrix<T>,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
        return Err(Error::shape("adam_update", p.shape(), g.shape()));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let c1 = T::one() - T::of(cfg.beta1.powi(t as i32));
    let c2 = T::one() - T::of(cfg.beta2.powi(t as i32));
    let (lr, eps, wd) = (T::of(cfg.lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    let ps = p.as_mut_slice();
    let ms = m.as_mut_slice();
    let vs = v.as_mut_slice();
    for (k, &d) in g.as_slice().iter().enumerate() {
        ms[k] = b1 * ms[k] + (T::one() - b1) * d;
        vs[k] = b2 * vs[k] + (T::one() - b2) * d * d;
        let m_hat = ms[k] / c1;
        let v_hat = vs[k] / c2;
        ps[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * ps[k]);
    }
    Ok(())
}

/// Rescales the tensors so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_by_global_norm<T: Scalar>(tensors: &mut [&mut Matrix<T>], max_norm: f64) -> T {
    let norm = tensors.iter().map(|m| m.sum_squares()).sum::<T>().sqrt();
    let max = T::of(max_norm);
    if norm > max {
        let s = max / norm;
        for m in tensors.iter_mut() {
            for x in m.as_mut_slice() {
                *x *= s;
            }
        }
    }
    norm
}

pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> T {
    let mut ts: Vec<&mut Matrix<T>> = grads.tensors_mut().into_iter().map(|(_, m)| m).collect();
    clip_by_global_norm(&mut ts, max_norm)
}

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd { lr: f64, weight_decay: f64 },
    Adam {
        cfg: AdamConfig,
        m: Params<T>,
        v: Params<T>,
        t: u64,
    },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, like: &Params<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr, weight_decay },
            OptimizerKind::Adam => Optimizer::Adam {
                cfg: AdamConfig::new(lr, weight_decay),
                m: like.zeros_like(),
                v: like.zeros_like(),
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Gradients<T>) -> Result<()> {
        let gs = grads.tensors();
        match self {
            Optimizer::Sgd { lr, weight_decay } => {
                for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(gs) {
                    sgd_update(p, g, *lr, *weight_decay)?;
                }
            }
            Optimizer::Adam { cfg, m, v, t } => {
                *t += 1;
                let ps = params.tensors_mut();
                let ms = m.tensors_mut();
                let vs = v.tensors_mut();
                for ((((_, p), (_, g)), (_, m)), (_, v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
                    adam_update(p, g, m, v, cfg, *t)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStopMetric {
    ValAcc,
    ValMacroF1,
    ValLoss,
}

impl FromStr for EarlyStopMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val_acc" => Ok(EarlyStopMetric::ValAcc),
            "val_macro_f1" => Ok(EarlyStopMetric::ValMacroF1),
            "val_loss" => Ok(EarlyStopMetric::ValLoss),
            other => Err(Error::InvalidArgument(format!("unknown early-stop metric `{other}`"))),
        }
    }
}

impl EarlyStopMetric {
    /// Score where larger is better, or `None` if the report lacks the metric.
    fn score(self, r: &EvalReport) -> Option<f64> {
        match self {
            EarlyStopMetric::ValAcc => r.accuracy.or(r.token_accuracy),
            EarlyStopMetric::ValMacroF1 => r.macro_f1,
            EarlyStopMetric::ValLoss => r.loss.map(|l| -l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub early_stop: EarlyStopMetric,
    /// Stop after this many epochs without improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            max_len: 512,
            epochs: 10,
            optimizer: OptimizerKind::Adam,
            clip_norm: Some(5.0),
            seed: 0,
            early_stop: EarlyStopMetric::ValAcc,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub n_examples: usize,
    pub n_tokens: usize,
    pub t_epoch: f64,
    pub val: EvalReport,
}

impl EpochRecord {
    /// Deterministic summary line (no timing).
    pub fn metrics_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"));
        let mut s = format!(
            "epoch={} train_loss={:.6} n_examples={} n_tokens={} val_loss={}",
            self.epoch,
            self.train_loss,
            self.n_examples,
            self.n_tokens,
            f(self.val.loss)
        );
        if self.val.accuracy.is_some() {
            let _ = write!(
                s,
                " val_acc={} val_macro_f1={} val_auc={}",
                f(self.val.accuracy),
                f(self.val.macro_f1),
                f(self.val.roc_auc)
            );
        }
        if self.val.perplexity.is_some() {
            let _ = write!(
                s,
                " val_ppl={} val_bpt={} val_token_acc={}",
                f(self.val.perplexity),
                f(self.val.bits_per_token),
                f(self.val.token_accuracy)
            );
        }
        s
    }

    pub fn timing_line(&self) -> String {
        let (ex, tok) = throughput(self.n_examples, 1, self.t_epoch)
            .map(|(e, _)| (e, self.n_tokens as f64 / self.t_epoch))
            .unwrap_or((f64::NAN, f64::NAN));
        format!(
            "epoch={} t_epoch={:.3} examples_per_sec={:.1} tokens_per_sec={:.1}",
            self.epoch, self.t_epoch, ex, tok
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: Model<T>,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

fn truncated(ex: &Example, max_len: usize) -> &[usize] {
    &ex.tokens[..ex.tokens.len().min(max_len)]
}

/// Evaluation-mode metrics over a set of examples (truncated to `max_len`).
pub fn evaluate<T: Scalar>(model: &Model<T>, examples: &[Example], max_len: usize) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let outs: Vec<(f64, Matrix<T>)> = examples
        .par_iter()
        .map(|ex| {
            let tokens = truncated(ex, max_len);
            let out = example_loss(model, tokens, ex.label, Mode::Eval, &mut Rng::new(0))?;
            Ok((out.loss.as_f64(), out.logits))
        })
        .collect::<Result<_>>()?;
    match model.spec.task {
        Task::Classify => {
            let mut preds = Vec::with_capacity(outs.len());
            let mut probs = Vec::with_capacity(outs.len());
            let mut labels = Vec::with_capacity(outs.len());
            for ((_, logits), ex) in outs.iter().zip(examples) {
                preds.push(argmax(logits.row(0)));
                let p = softmax_row(logits, 0);
                probs.push(if p.len() > 1 { p[1].as_f64() } else { 0.0 });
                labels.push(ex.label.unwrap_or_default());
            }
            let mut report = classification_report(&preds, &probs, &labels, model.spec.n_classes)?;
            report.loss = Some(outs.iter().map(|o| o.0).sum::<f64>() / outs.len() as f64);
            Ok(report)
        }
        Task::Lm => {
            let mut nll = 0.0;
            let mut hits = 0;
            let mut count = 0;
            for ((loss, logits), ex) in outs.iter().zip(examples) {
                let tokens = truncated(ex, max_len);
                let n = tokens.len() - 1;
                nll += loss * n as f64;
                count += n;
                hits += (0..n).filter(|&r| argmax(logits.row(r)) == tokens[r + 1]).count();
            }
            let mean = nll / count as f64;
            let m = lm_metrics(mean, hits, count)?;
            Ok(EvalReport {
                n_examples: examples.len(),
                loss: Some(mean),
                perplexity: Some(m.perplexity),
                bits_per_token: Some(m.bits_per_token),
                token_accuracy: Some(m.token_accuracy),
                ..EvalReport::default()
            })
        }
    }
}

/// Mini-batch training with a seeded per-epoch shuffle. Per-example
/// gradients are computed in parallel and reduced in a fixed order, so
/// results do not depend on the thread count. The model with the best
/// validation score (first on ties) is returned. A non-finite loss or
/// gradient aborts with [`Error::Numeric`].
pub fn train_loop<T: Scalar>(
    model: &Model<T>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be positive".into()));
    }
    let mut current = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &current.params);
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let shuffle_seed = Rng::derive(cfg.seed, &[epoch as u64]).next_u64();
        let batches = make_batches(train, cfg.max_len, cfg.batch_size, PAD_ID, Some(shuffle_seed))?;
        let mut loss_sum = 0.0;
        let mut n_tokens = 0;
        for (b, batch) in batches.iter().enumerate() {
            let results: Vec<(T, Gradients<T>)> = (0..batch.len())
                .into_par_iter()
                .map(|i| {
                    let mut rng = Rng::derive(cfg.seed, &[epoch as u64, b as u64, i as u64]);
                    loss_and_grads(&current, batch.sequence(i), batch.labels[i], Mode::Train, &mut rng)
                })
                .collect::<Result<_>>()?;
            let mut grads = current.params.zeros_like();
            for (loss, g) in &results {
                if !loss.is_finite() || !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss or gradient at epoch {epoch}, batch {b}"
                    )));
                }
                loss_sum += loss.as_f64();
                grads.add_assign(g)?;
            }
            grads.scale(T::one() / T::of(batch.len() as f64));
            if let Some(c) = cfg.clip_norm {
                clip_gradients(&mut grads, c);
            }
            opt.step(&mut current.params, &grads)?;
            if !current.params.is_finite() {
                return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}, batch {b}")));
            }
            n_tokens += batch.lengths.iter().sum::<usize>();
        }
        let val_report = evaluate(&current, val, cfg.max_len)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            n_examples: train.len(),
            n_tokens,
            t_epoch: start.elapsed().as_secs_f64(),
            val: val_report,
        };
        on_epoch(&record)?;
        let score = cfg.early_stop.score(&record.val).ok_or_else(|| {
            Error::InvalidArgument(format!("early-stop metric {:?} is not defined for this task", cfg.early_stop))
        })?;
        records.push(record);
        match &best {
            Some((s, _, _)) if score <= *s => {}
            _ => best = Some((score, epoch, current.clone())),
        }
        if let (Some(p), Some((_, be, _))) = (cfg.patience, &best) {
            if epoch - be >= p {
                break;
            }
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Arch, ModelSpec};

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let z = Matrix::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        let (l, g) = cross_entropy(&z, &[1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((g[(0, 0)] - 0.5).abs() < 1e-12 && (g[(0, 1)] + 0.5).abs() < 1e-12);
        let z = Matrix::from_rows(&[vec![0.0f64, 100.0]]).unwrap();
        let (l, _) = cross_entropy(&z, &[1]).unwrap();
        assert!(l < 1e-40);
        let (l, _) = cross_entropy(&z, &[0]).unwrap();
        assert!((l - 100.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_spec_examples() {
        let z = Matrix::from_rows(&[vec![0.0f64; 4]]).unwrap();
        assert!((cross_entropy(&z, &[2]).unwrap().0 - 4f64.ln()).abs() < 1e-12);
        let z = Matrix::from_rows(&[vec![0.0f64, 50.0, 0.0]]).unwrap();
        assert!(cross_entropy(&z, &[1]).unwrap().0 < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = Rng::new(5);
        let z: Matrix<f64> = rng.uniform_matrix(1, 5, 3.0);
        for y in 0..5 {
            let (l, g) = cross_entropy(&z, &[y]).unwrap();
            let denom: f64 = z.row(0).iter().map(|v| v.exp()).sum();
            let direct = -(z[(0, y)].exp() / denom).ln();
            assert!((l - direct).abs() < 1e-12);
            let fd = crate::numerics::fd_gradient(|m| cross_entropy(m, &[y]).unwrap().0, &z, 1e-6).unwrap();
            for c in 0..5 {
                assert!((fd[(0, c)] - g[(0, c)]).abs() < 1e-8);
            }
        }
        assert!(matches!(cross_entropy(&z, &[5]), Err(Error::InvalidTarget { .. })));
    }

    #[test]
    fn sgd_and_adam_first_steps() {
        let mut p = Matrix::filled(1, 1, 1.0f64);
        sgd_update(&mut p, &Matrix::filled(1, 1, 0.5), 0.1, 0.0).unwrap();
        assert!((p[(0, 0)] - 0.95).abs() < 1e-15);

        let lr = 1e-5;
        let cfg = AdamConfig::new(lr, 0.0);
        let mut p = Matrix::filled(1, 1, 0.0);
        let (mut m, mut v) = (Matrix::zeros(1, 1), Matrix::zeros(1, 1));
        adam_update(&mut p, &Matrix::filled(1, 1, 1.0), &mut m, &mut v, &cfg, 1).unwrap();
        assert!((p[(0, 0)] + lr).abs() < 1e-12);
        assert!((p[(0, 0)] + lr / (1.0 + 1e-8)).abs() < 1e-18);
        assert!(adam_update(&mut p, &Matrix::filled(1, 1, 1.0), &mut m, &mut v, &cfg, 0).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_without_decay() {
        let mut p = Matrix::filled(2, 2, 0.3);
        let cfg = AdamConfig::new(0.1, 0.0);
        let (mut m, mut v) = (Matrix::zeros(2, 2), Matrix::zeros(2, 2));
        adam_update(&mut p, &Matrix::zeros(2, 2), &mut m, &mut v, &cfg, 1).unwrap();
        assert_eq!(p, Matrix::filled(2, 2, 0.3));
    }

    #[test]
    fn clipping_examples() {
        let mut a = Matrix::column(&[3.0f64, 4.0]);
        let n = clip_by_global_norm(&mut [&mut a], 5.0);
        assert_eq!(n, 5.0);
        assert_eq!(a, Matrix::column(&[3.0, 4.0]));
        let mut a = Matrix::column(&[6.0f64, 8.0]);
        clip_by_global_norm(&mut [&mut a], 5.0);
        assert!((a[(0, 0)] - 3.0).abs() < 1e-12 && (a[(1, 0)] - 4.0).abs() < 1e-12);
        let mut a = Matrix::column(&[3.0f64, 4.0]);
        clip_by_global_norm(&mut [&mut a], 1.0);
        assert!((a[(0, 0)] - 0.6).abs() < 1e-12 && (a[(1, 0)] - 0.8).abs() < 1e-12);
        let mut rng = Rng::new(17);
        for max in [0.5, 2.0, 50.0] {
            let mut x: Matrix<f64> = rng.uniform_matrix(3, 4, 2.0);
            let mut y: Matrix<f64> = rng.uniform_matrix(5, 1, 2.0);
            let before = (x.sum_squares() + y.sum_squares()).sqrt();
            assert_eq!(clip_by_global_norm(&mut [&mut x, &mut y], max), before);
            let after = (x.sum_squares() + y.sum_squares()).sqrt();
            assert!((after - before.min(max)).abs() < 1e-12);
        }
        let mut z = Matrix::column(&[0.0, 0.0]);
        assert_eq!(clip_by_global_norm(&mut [&mut z], 5.0), 0.0);
        assert_eq!(z, Matrix::column(&[0.0, 0.0]));
    }

    #[test]
    fn lm_loss_scores_next_token() {
        let mut spec = ModelSpec::new(Arch::Lstm, 5, 3, 4, 2);
        spec.task = Task::Lm;
        let model = Model::<f64>::zeros(spec).unwrap();
        let out = example_loss(&model, &[1, 2, 3], None, Mode::Eval, &mut Rng::new(0)).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        assert_eq!(out.dlogits.shape(), (3, 5));
        assert!(out.dlogits.row(2).iter().all(|&v| v == 0.0));
        assert!(example_loss(&model, &[1], None, Mode::Eval, &mut Rng::new(0)).is_err());
    }

    fn toy_set(n: usize) -> Vec<Example> {
        crate::data::gen_distant_token_task(n, 6, 2, 1)
            .unwrap()
            .into_iter()
            .map(|mut e| {
                for t in &mut e.tokens {
                    *t %= 16;
                }
                e
            })
            .collect()
    }

    fn toy_model() -> Model<f64> {
        Model::new(ModelSpec::new(Arch::Lstm, 16, 4, 6, 2), 3).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = toy_set(40);
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 8,
            max_len: 16,
            epochs: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || train_loop(&toy_model(), &data, &data, &cfg, &mut |_| Ok(())).unwrap();
        let a = run();
        let b = run();
        assert!(a.records.last().unwrap().train_loss < a.records[0].train_loss);
        let lines = |o: &TrainOutcome<f64>| o.records.iter().map(EpochRecord::metrics_line).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        assert_eq!(a.best.params, b.best.params);
    }

    #[test]
    fn best_model_is_retained() {
        let data = toy_set(20);
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 4,
            max_len: 16,
            epochs: 4,
            ..TrainConfig::default()
        };
        let out = train_loop(&toy_model(), &data, &data, &cfg, &mut |_| Ok(())).unwrap();
        let best_acc = out.records.iter().map(|r| r.val.accuracy.unwrap()).fold(0.0, f64::max);
        let first = out.records.iter().position(|r| r.val.accuracy.unwrap() == best_acc).unwrap();
        assert_eq!(out.best_epoch, first + 1);
        let again = evaluate(&out.best, &data, 16).unwrap();
        assert_eq!(again.accuracy.unwrap(), best_acc);
    }

    #[test]
    fn divergence_aborts() {
        let data = toy_set(8);
        let mut model = toy_model();
        model.params.head_b[(0, 0)] = f64::NAN;
        let cfg = TrainConfig {
            max_len: 16,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_loop(&model, &data, &data, &cfg, &mut |_| Ok(())),
            Err(Error::Numeric(_))
        ));
    }

    fn batch_loss(model: &Model<f64>, batch: &[(Vec<usize>, usize)]) -> (f64, Gradients<f64>) {
        let mut total = 0.0;
        let mut acc = model.params.zeros_like();
        for (tokens, label) in batch {
            let (l, g) = loss_and_grads(model, tokens, Some(*label), Mode::Eval, &mut Rng::new(0)).unwrap();
            total += l;
            acc.add_assign(&g).unwrap();
        }
        let n = batch.len() as f64;
        acc.scale(1.0 / n);
        (total / n, acc)
    }

    #[test]
    fn small_sgd_steps_do_not_increase_batch_loss() {
        let mut rng = Rng::new(31);
        let batch: Vec<(Vec<usize>, usize)> = (0..4)
            .map(|i| ((0..9).map(|_| rng.below(7)).collect(), i % 2))
            .collect();
        for arch in Arch::ALL {
            let mut spec = ModelSpec::new(arch, 7, 4, 5, 2);
            spec.leap = 3;
            let mut model = Model::<f64>::new(spec, 3).unwrap();
            let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.05, 0.0, &model.params);
            let (mut prev, _) = batch_loss(&model, &batch);
            for step in 0..10 {
                let (_, g) = batch_loss(&model, &batch);
                opt.step(&mut model.params, &g).unwrap();
                let (l, _) = batch_loss(&model, &batch);
                assert!(l <= prev + 1e-12, "{arch} step {step}: {l} > {prev}");
                prev = l;
            }
        }
    }

    #[test]
    fn repeated_steps_fit_a_single_example() {
        let spec = ModelSpec::new(Arch::QlFull, 7, 4, 6, 2);
        let mut model = Model::<f64>::new(spec, 8).unwrap();
        let batch = vec![(vec![1, 4, 2, 6, 0, 3], 1)];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, 0.0, &model.params);
        let (start, _) = batch_loss(&model, &batch);
        for _ in 0..50 {
            let (_, g) = batch_loss(&model, &batch);
            opt.step(&mut model.params, &g).unwrap();
        }
        let (end, _) = batch_loss(&model, &batch);
        assert!(end < 0.1 * start, "{start} -> {end}");
    }
}
