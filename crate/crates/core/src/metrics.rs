//! Classification, throughput and language-modelling metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Stabiliser added to precision/recall/F1 denominators.
pub const EPS: f64 = 1e-12;

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub n: usize,
    pub per_class: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn from_predictions(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::LengthMismatch(preds.len(), labels.len()));
        }
        if preds.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
            return Err(Error::InvalidTarget {
                target: bad,
                classes: n_classes,
            });
        }
        let mut per_class = vec![ClassCounts::default(); n_classes];
        for (&p, &y) in preds.iter().zip(labels) {
            for (c, counts) in per_class.iter_mut().enumerate() {
                match (p == c, y == c) {
                    (true, true) => counts.tp += 1,
                    (true, false) => counts.fp += 1,
                    (false, true) => counts.fn_ += 1,
                    (false, false) => counts.tn += 1,
                }
            }
        }
        Ok(ConfusionCounts {
            n: preds.len(),
            per_class,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl ClassScores {
    pub fn from_counts(c: &ClassCounts) -> Self {
        let precision = c.tp as f64 / (c.tp as f64 + c.fp as f64 + EPS);
        let recall = c.tp as f64 / (c.tp as f64 + c.fn_ as f64 + EPS);
        let f1 = 2.0 * precision * recall / (precision + recall + EPS);
        ClassScores {
            precision,
            recall,
            f1,
            support: c.tp + c.fn_,
        }
    }
}

/// Evaluation summary. Fields that do not apply to a task are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub n_examples: usize,
    pub accuracy: Option<f64>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    pub roc_auc: Option<f64>,
    pub per_class: Vec<ClassScores>,
    pub loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub bits_per_token: Option<f64>,
    pub token_accuracy: Option<f64>,
    pub examples_per_sec: Option<f64>,
    pub tokens_per_sec: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Accuracy, per-class and macro precision/recall/F1, and ROC-AUC when the
/// problem is binary and both classes are present (`None` otherwise).
pub fn classification_report(
    preds: &[usize],
    pos_probs: &[f64],
    labels: &[usize],
    n_classes: usize,
) -> Result<EvalReport> {
    if pos_probs.len() != labels.len() {
        return Err(Error::LengthMismatch(pos_probs.len(), labels.len()));
    }
    let counts = ConfusionCounts::from_predictions(preds, labels, n_classes)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let per_class: Vec<ClassScores> = counts.per_class.iter().map(ClassScores::from_counts).collect();
    let roc = if n_classes == 2 {
        match roc_auc(pos_probs, labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(EvalReport {
        n_examples: preds.len(),
        accuracy: Some(hits as f64 / preds.len() as f64),
        macro_precision: Some(mean(per_class.iter().map(|c| c.precision))),
        macro_recall: Some(mean(per_class.iter().map(|c| c.recall))),
        macro_f1: Some(mean(per_class.iter().map(|c| c.f1))),
        roc_auc: roc,
        per_class,
        ..EvalReport::default()
    })
}

/// Area under the ROC curve as the rank statistic
/// `P(s₊ > s₋) + ½ P(s₊ = s₋)`; label 1 is the positive class.
pub fn roc_auc(pos_probs: &[f64], labels: &[usize]) -> Result<f64> {
    if pos_probs.len() != labels.len() {
        return Err(Error::LengthMismatch(pos_probs.len(), labels.len()));
    }
    if pos_probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..pos_probs.len()).collect();
    order.sort_by(|&a, &b| pos_probs[a].total_cmp(&pos_probs[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled so it
    // stays integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pos_probs[order[j + 1]] == pos_probs[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg_rank * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Examples per second and tokens per second for one epoch.
pub fn throughput(n_examples: usize, seq_len: usize, t_epoch: f64) -> Result<(f64, f64)> {
    if !(t_epoch > 0.0) || !t_epoch.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epoch time must be positive, got {t_epoch}"
        )));
    }
    let ex = n_examples as f64 / t_epoch;
    Ok((ex, ex * seq_len as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmMetrics {
    pub perplexity: f64,
    pub bits_per_token: f64,
    pub token_accuracy: f64,
}

/// Perplexity, bits per token and next-token accuracy from the mean
/// negative log-likelihood (nats) over `tokens` predictions.
pub fn lm_metrics(mean_nll: f64, hits: usize, tokens: usize) -> Result<LmMetrics> {
    if !mean_nll.is_finite() || mean_nll < 0.0 {
        return Err(Error::Numeric(format!("invalid mean NLL {mean_nll}")));
    }
    if tokens == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(LmMetrics {
        perplexity: mean_nll.exp(),
        bits_per_token: mean_nll / std::f64::consts::LN_2,
        token_accuracy: hits as f64 / tokens as f64,
    })
}

impl EvalReport {
    /// Stable `key = value` document; absent metrics are written as `undefined`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:?}"));
        let _ = writeln!(out, "n_examples = {}", self.n_examples);
        for (k, v) in [
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("roc_auc", self.roc_auc),
            ("loss", self.loss),
            ("perplexity", self.perplexity),
            ("bits_per_token", self.bits_per_token),
            ("token_accuracy", self.token_accuracy),
            ("examples_per_sec", self.examples_per_sec),
            ("tokens_per_sec", self.tokens_per_sec),
        ] {
            let _ = writeln!(out, "{k} = {}", fmt(v));
        }
        for (c, s) in self.per_class.iter().enumerate() {
            let _ = writeln!(out, "class.{c}.precision = {:?}", s.precision);
            let _ = writeln!(out, "class.{c}.recall = {:?}", s.recall);
            let _ = writeln!(out, "class.{c}.f1 = {:?}", s.f1);
            let _ = writeln!(out, "class.{c}.support = {}", s.support);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::InvalidArgument(format!(
                "report line {} is not `key = value`",
                i + 1
            )))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let num = |k: &str| -> Result<Option<f64>> {
            match kv.get(k).map(String::as_str) {
                None | Some("undefined") => Ok(None),
                Some(v) => v
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::InvalidArgument(format!("bad value for {k}: {v}"))),
            }
        };
        let count = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("missing {k}")))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value for {k}")))
        };
        let mut per_class = Vec::new();
        while kv.contains_key(&format!("class.{}.f1", per_class.len())) {
            let c = per_class.len();
            per_class.push(ClassScores {
                precision: num(&format!("class.{c}.precision"))?.unwrap_or_default(),
                recall: num(&format!("class.{c}.recall"))?.unwrap_or_default(),
                f1: num(&format!("class.{c}.f1"))?.unwrap_or_default(),
                support: count(&format!("class.{c}.support"))?,
            });
        }
        Ok(EvalReport {
            n_examples: count("n_examples")?,
            accuracy: num("accuracy")?,
            macro_precision: num("macro_precision")?,
            macro_recall: num("macro_recall")?,
            macro_f1: num("macro_f1")?,
            roc_auc: num("roc_auc")?,
            per_class,
            loss: num("loss")?,
            perplexity: num("perplexity")?,
            bits_per_token: num("bits_per_token")?,
            token_accuracy: num("token_accuracy")?,
            examples_per_sec: num("examples_per_sec")?,
            tokens_per_sec: num("tokens_per_sec")?,
        })
    }
}
