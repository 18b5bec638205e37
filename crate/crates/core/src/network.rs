//! Embedding → recurrent layer → dropout → head, with full backpropagation
//! through time and whole-model parameter accounting.

use std::fmt;
use std::str::FromStr;

use crate::cells::{
    cell_shapes, closed_form_cell_params, emit_backward,
    gated_cell_backward, gru_step, gru_step_backward, lstm_step, lstm_step_backward,
    pool_block_backward, ql_step_carry, ql_step_summary_with, CarryStepCache, GateTransform,
    GruCache, GruParams, LstmParams, Pooling, PsugParams, QLState, ShapeList, SkipParams,
    SkipVariant, StepCache, SummaryStepCache,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Lstm,
    Gru,
    BiLstm,
    QlFull,
    PsugOnly,
    HgrOnly,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Lstm,
        Arch::Gru,
        Arch::BiLstm,
        Arch::QlFull,
        Arch::PsugOnly,
        Arch::HgrOnly,
    ];
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lstm" => Arch::Lstm,
            "gru" => Arch::Gru,
            "bilstm" => Arch::BiLstm,
            "ql_full" => Arch::QlFull,
            "psug_only" => Arch::PsugOnly,
            "hgr_only" => Arch::HgrOnly,
            other => return Err(Error::UnknownArch(other.to_string())),
        })
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Lstm => "lstm",
            Arch::Gru => "gru",
            Arch::BiLstm => "bilstm",
            Arch::QlFull => "ql_full",
            Arch::PsugOnly => "psug_only",
            Arch::HgrOnly => "hgr_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    #[default]
    Classify,
    Lm,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "lm" => Ok(Task::Lm),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Lm => "lm",
        })
    }
}

/// What the classification head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Readout {
    /// Final hidden state. For BiLSTM: final states of both directions.
    #[default]
    Last,
    /// Mean of the recurrent outputs over all positions.
    Mean,
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Readout::Last),
            "mean" => Ok(Readout::Mean),
            other => Err(Error::InvalidArgument(format!("unknown readout `{other}`"))),
        }
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Last => "last",
            Readout::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub d_emb: usize,
    pub d_h: usize,
    /// Leap interval `K`.
    pub leap: usize,
    pub pooling: Pooling,
    pub skip_variant: SkipVariant,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub task: Task,
    pub readout: Readout,
    /// Pool a trailing partial block on the last step.
    pub flush_partial: bool,
}

impl ModelSpec {
    pub fn new(arch: Arch, vocab_size: usize, d_emb: usize, d_h: usize, n_classes: usize) -> Self {
        ModelSpec {
            arch,
            d_emb,
            d_h,
            leap: 16,
            pooling: Pooling::Mean,
            skip_variant: SkipVariant::Summary,
            vocab_size,
            n_classes,
            dropout: 0.0,
            task: Task::Classify,
            readout: Readout::Last,
            flush_partial: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.leap < 1 {
            return Err(Error::InvalidLeap(self.leap));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.task == Task::Classify && self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.d_emb == 0 || self.d_h == 0 {
            return bad("d_emb and d_h must be positive".into());
        }
        if self.arch == Arch::BiLstm && self.task == Task::Lm {
            return bad("bilstm cannot be used for next-token prediction".into());
        }
        Ok(())
    }

    /// Leap machinery present (either variant).
    pub fn has_skip(&self) -> bool {
        matches!(self.arch, Arch::QlFull | Arch::HgrOnly)
    }

    pub fn has_summary_skip(&self) -> bool {
        self.has_skip() && self.skip_variant == SkipVariant::Summary
    }

    /// Width of the recurrent output fed to the head.
    pub fn recurrent_width(&self) -> usize {
        if self.arch == Arch::BiLstm {
            2 * self.d_h
        } else {
            self.d_h
        }
    }

    pub fn n_outputs(&self) -> usize {
        match self.task {
            Task::Classify => self.n_classes,
            Task::Lm => self.vocab_size,
        }
    }
}

/// How a model's parameters were initialised.
#[derive(Debug, Clone, PartialEq)]
pub struct InitRecord {
    pub seed: u64,
    pub scheme: String,
    pub forget_bias: f64,
}

pub const INIT_SCHEME: &str = "uniform_inv_sqrt_fan";

#[derive(Debug, Clone, PartialEq)]
pub enum Recurrent<T> {
    Lstm(LstmParams<T>),
    Psug(PsugParams<T>),
    Gru(GruParams<T>),
    BiLstm {
        fwd: LstmParams<T>,
        bwd: LstmParams<T>,
    },
}

impl<T: Scalar> Recurrent<T> {
    fn zeros_like(&self) -> Self {
        match self {
            Recurrent::Lstm(p) => Recurrent::Lstm(p.zeros_like()),
            Recurrent::Psug(p) => Recurrent::Psug(p.zeros_like()),
            Recurrent::Gru(p) => Recurrent::Gru(GruParams::zeros(p.input_dim(), p.hidden_dim())),
            Recurrent::BiLstm { fwd, bwd } => Recurrent::BiLstm {
                fwd: fwd.zeros_like(),
                bwd: bwd.zeros_like(),
            },
        }
    }

    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        fn named<'a, T>(
            prefix: &str,
            v: Vec<(&'static str, &'a Matrix<T>)>,
        ) -> Vec<(String, &'a Matrix<T>)> {
            v.into_iter()
                .map(|(n, m)| (format!("{prefix}{n}"), m))
                .collect()
        }
        match self {
            Recurrent::Lstm(p) => named("", p.tensors()),
            Recurrent::Psug(p) => named("", p.tensors()),
            Recurrent::Gru(p) => named("", p.tensors()),
            Recurrent::BiLstm { fwd, bwd } => {
                let mut v = named("fwd.", fwd.tensors());
                v.extend(named("bwd.", bwd.tensors()));
                v
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        fn named<'a, T>(
            prefix: &str,
            v: Vec<(&'static str, &'a mut Matrix<T>)>,
        ) -> Vec<(String, &'a mut Matrix<T>)> {
            v.into_iter()
                .map(|(n, m)| (format!("{prefix}{n}"), m))
                .collect()
        }
        match self {
            Recurrent::Lstm(p) => named("", p.tensors_mut()),
            Recurrent::Psug(p) => named("", p.tensors_mut()),
            Recurrent::Gru(p) => named("", p.tensors_mut()),
            Recurrent::BiLstm { fwd, bwd } => {
                let mut v = named("fwd.", fwd.tensors_mut());
                v.extend(named("bwd.", bwd.tensors_mut()));
                v
            }
        }
    }
}

/// Every trainable tensor of a model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// `vocab x d_emb`
    pub embedding: Matrix<T>,
    pub recurrent: Recurrent<T>,
    pub skip: Option<SkipParams<T>>,
    /// `width x n_outputs`
    pub head_w: Matrix<T>,
    /// `n_outputs x 1`
    pub head_b: Matrix<T>,
}

pub type Gradients<T> = Params<T>;

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Params {
            embedding: Matrix::zeros(self.embedding.rows(), self.embedding.cols()),
            recurrent: self.recurrent.zeros_like(),
            skip: self
                .skip
                .as_ref()
                .map(|s| SkipParams {
                    w_p: Matrix::zeros(s.w_p.rows(), s.w_p.cols()),
                    b_p: Matrix::zeros(s.b_p.rows(), 1),
                }),
            head_w: Matrix::zeros(self.head_w.rows(), self.head_w.cols()),
            head_b: Matrix::zeros(self.head_b.rows(), 1),
        }
    }

    /// Named tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        v.extend(
            self.recurrent
                .tensors()
                .into_iter()
                .map(|(n, m)| (format!("cell.{n}"), m)),
        );
        if let Some(s) = &self.skip {
            v.extend(s.tensors().into_iter().map(|(n, m)| (format!("skip.{n}"), m)));
        }
        v.push(("head.w".into(), &self.head_w));
        v.push(("head.b".into(), &self.head_b));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut v = vec![("embedding".to_string(), &mut self.embedding)];
        v.extend(
            self.recurrent
                .tensors_mut()
                .into_iter()
                .map(|(n, m)| (format!("cell.{n}"), m)),
        );
        if let Some(s) = &mut self.skip {
            v.extend(
                s.tensors_mut()
                    .into_iter()
                    .map(|(n, m)| (format!("skip.{n}"), m)),
            );
        }
        v.push(("head.w".into(), &mut self.head_w));
        v.push(("head.b".into(), &mut self.head_b));
        v
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params<T>) -> Result<()> {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for (_, m) in self.tensors_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn sum_squares(&self) -> T {
        self.tensors()
            .iter()
            .fold(T::zero(), |acc, (_, m)| acc + m.sum_squares())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: Params<T>,
    pub init: InitRecord,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialised model: uniform `±1/√fan` weights (`fan = d_h` for
    /// recurrent weights, `d_emb` for the embedding, the input width for the
    /// head and projection), zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        Self::with_forget_bias(spec, seed, 0.0)
    }

    pub fn with_forget_bias(spec: ModelSpec, seed: u64, forget_bias: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let (m, n) = (spec.d_emb, spec.d_h);
        let embedding = rng.uniform_matrix(spec.vocab_size, m, 1.0 / (m as f64).sqrt());
        let recurrent = match spec.arch {
            Arch::Lstm | Arch::HgrOnly => {
                Recurrent::Lstm(LstmParams::init(&mut rng, m, n, forget_bias))
            }
            Arch::QlFull | Arch::PsugOnly => {
                Recurrent::Psug(PsugParams::init(&mut rng, m, n, forget_bias))
            }
            Arch::Gru => Recurrent::Gru(GruParams::init(&mut rng, m, n)),
            Arch::BiLstm => Recurrent::BiLstm {
                fwd: LstmParams::init(&mut rng, m, n, forget_bias),
                bwd: LstmParams::init(&mut rng, m, n, forget_bias),
            },
        };
        let skip = spec
            .has_summary_skip()
            .then(|| SkipParams::init(&mut rng, n, spec.pooling));
        let width = spec.recurrent_width();
        let head_w = rng.uniform_matrix(width, spec.n_outputs(), 1.0 / (width as f64).sqrt());
        let head_b = Matrix::zeros(spec.n_outputs(), 1);
        Ok(Model {
            params: Params {
                embedding,
                recurrent,
                skip,
                head_w,
                head_b,
            },
            spec,
            init: InitRecord {
                seed,
                scheme: INIT_SCHEME.into(),
                forget_bias,
            },
        })
    }

    /// Model with every parameter set to zero.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        for (_, m) in model.params.tensors_mut() {
            m.fill(T::zero());
        }
        model.init.scheme = "zeros".into();
        Ok(model)
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.spec.clone()).expect("spec already validated");
        for ((_, dst), (_, src)) in out.params.tensors_mut().into_iter().zip(self.params.tensors()) {
            *dst = src.cast();
        }
        out.init = self.init.clone();
        out
    }
}

/// Per-step recurrent caches for the backward pass.
#[derive(Debug, Clone)]
pub enum RecurrentCache<T> {
    Plain(Vec<StepCache<T>>),
    Summary(Vec<SummaryStepCache<T>>),
    Carry(Vec<CarryStepCache<T>>),
    Gru(Vec<GruCache<T>>),
    BiLstm {
        fwd: Vec<StepCache<T>>,
        /// In processing order, i.e. `bwd[s]` consumed position `L - 1 - s`.
        bwd: Vec<StepCache<T>>,
    },
}

impl<T> RecurrentCache<T> {
    pub fn len(&self) -> usize {
        match self {
            RecurrentCache::Plain(v) => v.len(),
            RecurrentCache::Summary(v) => v.len(),
            RecurrentCache::Carry(v) => v.len(),
            RecurrentCache::Gru(v) => v.len(),
            RecurrentCache::BiLstm { fwd, .. } => fwd.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct SequenceCache<T> {
    pub arch: Arch,
    pub tokens: Vec<usize>,
    pub recurrent: RecurrentCache<T>,
    /// Recurrent output at every position.
    pub outputs: Vec<Matrix<T>>,
    /// Head inputs after dropout (one for classification, `L` for LM).
    pub features: Vec<Matrix<T>>,
    /// Inverted-dropout masks (already scaled by `1/(1-p)`), train mode only.
    pub masks: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> SequenceCache<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Rough number of bytes held by the cache; a desk-scale stand-in for
    /// peak activation memory.
    pub fn approx_bytes(&self) -> usize {
        let step_scalars: usize = match &self.recurrent {
            RecurrentCache::Plain(v) => v.iter().map(step_cache_scalars).sum(),
            RecurrentCache::Summary(v) => v
                .iter()
                .map(|c| {
                    step_cache_scalars(&c.cell)
                        + c.boundary.as_ref().map_or(0, |b| {
                            b.block.len() + b.pooled.len() + b.summary.len() + b.c_post.len()
                        })
                })
                .sum(),
            RecurrentCache::Carry(v) => v
                .iter()
                .map(|c| step_cache_scalars(&c.cell) + c.c_star.len())
                .sum(),
            RecurrentCache::Gru(v) => v
                .iter()
                .map(|c| c.x.len() + c.h_prev.len() + c.z.len() + c.r.len() + c.rh.len() + c.cand.len())
                .sum(),
            RecurrentCache::BiLstm { fwd, bwd } => fwd
                .iter()
                .chain(bwd.iter())
                .map(step_cache_scalars)
                .sum(),
        };
        let extra: usize = self.outputs.iter().map(Matrix::len).sum::<usize>()
            + self.features.iter().map(Matrix::len).sum::<usize>();
        (step_scalars + extra) * std::mem::size_of::<T>()
    }
}

fn step_cache_scalars<T: Scalar>(c: &StepCache<T>) -> usize {
    c.x.len() + c.h_prev.len() + c.c_prev.len() + 4 * c.c.len() + c.c.len()
}

/// Embedding lookup; one column per token.
pub fn embed<T: Scalar>(model: &Model<T>, tokens: &[usize]) -> Result<Vec<Matrix<T>>> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let vocab = model.spec.vocab_size;
    tokens
        .iter()
        .map(|&tok| {
            if tok >= vocab {
                Err(Error::TokenOutOfRange { token: tok, vocab })
            } else {
                Ok(Matrix::column(model.params.embedding.row(tok)))
            }
        })
        .collect()
}

fn run_plain<T: Scalar, G: GateTransform<T>>(
    p: &G,
    xs: &[Matrix<T>],
) -> Result<(Vec<Matrix<T>>, Vec<StepCache<T>>)> {
    let d = p.hidden_dim();
    let (mut h, mut c) = (Matrix::zeros(d, 1), Matrix::zeros(d, 1));
    let mut outs = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (h_next, c_next, cache) = lstm_step(p, x, &h, &c)?;
        outs.push(h_next.clone());
        caches.push(cache);
        h = h_next;
        c = c_next;
    }
    Ok((outs, caches))
}

fn run_summary<T: Scalar, G: GateTransform<T>>(
    p: &G,
    sp: &SkipParams<T>,
    spec: &ModelSpec,
    xs: &[Matrix<T>],
) -> Result<(Vec<Matrix<T>>, Vec<SummaryStepCache<T>>)> {
    let mut st = QLState::new(p.hidden_dim());
    let mut outs = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    let last = xs.len() - 1;
    for (t, x) in xs.iter().enumerate() {
        let flush = spec.flush_partial && t == last;
        let (h, next, cache) = ql_step_summary_with(p, sp, &st, x, spec.leap, spec.pooling, flush)?;
        outs.push(h);
        caches.push(cache);
        st = next;
    }
    Ok((outs, caches))
}

fn run_carry<T: Scalar, G: GateTransform<T>>(
    p: &G,
    spec: &ModelSpec,
    xs: &[Matrix<T>],
) -> Result<(Vec<Matrix<T>>, Vec<CarryStepCache<T>>)> {
    let mut st = QLState::new(p.hidden_dim());
    let mut outs = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (h, next, cache) = ql_step_carry(p, &st, x, spec.leap)?;
        outs.push(h);
        caches.push(cache);
        st = next;
    }
    Ok((outs, caches))
}

fn run_gated<T: Scalar, G: GateTransform<T>>(
    p: &G,
    skip: Option<&SkipParams<T>>,
    spec: &ModelSpec,
    xs: &[Matrix<T>],
) -> Result<(Vec<Matrix<T>>, RecurrentCache<T>)> {
    if !spec.has_skip() {
        let (o, c) = run_plain(p, xs)?;
        return Ok((o, RecurrentCache::Plain(c)));
    }
    match spec.skip_variant {
        SkipVariant::Summary => {
            let sp = skip.ok_or_else(|| Error::CacheMismatch("missing skip params".into()))?;
            let (o, c) = run_summary(p, sp, spec, xs)?;
            Ok((o, RecurrentCache::Summary(c)))
        }
        SkipVariant::Carry => {
            let (o, c) = run_carry(p, spec, xs)?;
            Ok((o, RecurrentCache::Carry(c)))
        }
    }
}

/// Runs the recurrent layer over embedded inputs.
pub fn run_recurrent<T: Scalar>(
    model: &Model<T>,
    xs: &[Matrix<T>],
) -> Result<(Vec<Matrix<T>>, RecurrentCache<T>)> {
    if xs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let spec = &model.spec;
    let skip = model.params.skip.as_ref();
    match &model.params.recurrent {
        Recurrent::Lstm(p) => run_gated(p, skip, spec, xs),
        Recurrent::Psug(p) => run_gated(p, skip, spec, xs),
        Recurrent::Gru(p) => {
            let mut h = Matrix::zeros(p.hidden_dim(), 1);
            let mut outs = Vec::with_capacity(xs.len());
            let mut caches = Vec::with_capacity(xs.len());
            for x in xs {
                let (h_next, cache) = gru_step(p, x, &h)?;
                outs.push(h_next.clone());
                caches.push(cache);
                h = h_next;
            }
            Ok((outs, RecurrentCache::Gru(caches)))
        }
        Recurrent::BiLstm { fwd, bwd } => {
            let (hf, cf) = run_plain(fwd, xs)?;
            let rev: Vec<Matrix<T>> = xs.iter().rev().cloned().collect();
            let (hb, cb) = run_plain(bwd, &rev)?;
            let outs = hf
                .iter()
                .zip(hb.iter().rev())
                .map(|(a, b)| Matrix::vstack(&[a, b]))
                .collect::<Result<Vec<_>>>()?;
            Ok((outs, RecurrentCache::BiLstm { fwd: cf, bwd: cb }))
        }
    }
}

/// Head inputs before dropout.
fn readout_features<T: Scalar>(spec: &ModelSpec, outputs: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
    if spec.task == Task::Lm {
        return Ok(outputs.to_vec());
    }
    let len = outputs.len();
    let feature = match spec.readout {
        Readout::Last if spec.arch == Arch::BiLstm => {
            let d = spec.d_h;
            Matrix::vstack(&[
                &outputs[len - 1].slice_rows(0, d),
                &outputs[0].slice_rows(d, 2 * d),
            ])?
        }
        Readout::Last => outputs[len - 1].clone(),
        Readout::Mean => {
            let mut acc = Matrix::zeros(outputs[0].rows(), 1);
            for o in outputs {
                acc.add_assign(o)?;
            }
            acc.scale(T::one() / T::of(len as f64))
        }
    };
    Ok(vec![feature])
}

/// Full forward pass. Logits have one row per readout position: a single
/// row for classification, `L` rows (position `t` predicts token `t + 1`)
/// for language modelling.
pub fn forward<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Matrix<T>, SequenceCache<T>)> {
    let xs = embed(model, tokens)?;
    let (outputs, recurrent) = run_recurrent(model, &xs)?;
    let pre = readout_features(&model.spec, &outputs)?;
    let p = model.spec.dropout;
    let mut features = Vec::with_capacity(pre.len());
    let mut masks = Vec::with_capacity(pre.len());
    for f in pre {
        if mode == Mode::Train && p > 0.0 {
            let keep = T::of(1.0 / (1.0 - p));
            let mask = Matrix::from_fn(f.rows(), 1, |_, _| {
                if rng.next_f64() >= p {
                    keep
                } else {
                    T::zero()
                }
            });
            features.push(f.hadamard(&mask)?);
            masks.push(Some(mask));
        } else {
            features.push(f);
            masks.push(None);
        }
    }
    let n_out = model.spec.n_outputs();
    let mut logits = Matrix::zeros(features.len(), n_out);
    for (r, f) in features.iter().enumerate() {
        let z = model.params.head_w.t_matvec(f)?;
        for c in 0..n_out {
            logits[(r, c)] = z[(c, 0)] + model.params.head_b[(c, 0)];
        }
    }
    let cache = SequenceCache {
        arch: model.spec.arch,
        tokens: tokens.to_vec(),
        recurrent,
        outputs,
        features,
        masks,
    };
    Ok((logits, cache))
}

/// Result of a backward pass that also exposes per-position input gradients.
#[derive(Debug, Clone)]
pub struct BackwardResult<T> {
    pub grads: Gradients<T>,
    /// `∂Loss/∂x_t` for every position.
    pub input_grads: Vec<Matrix<T>>,
}

pub fn backward<T: Scalar>(
    model: &Model<T>,
    cache: &SequenceCache<T>,
    dlogits: &Matrix<T>,
) -> Result<Gradients<T>> {
    backward_full(model, cache, dlogits).map(|r| r.grads)
}

pub fn backward_full<T: Scalar>(
    model: &Model<T>,
    cache: &SequenceCache<T>,
    dlogits: &Matrix<T>,
) -> Result<BackwardResult<T>> {
    let spec = &model.spec;
    if cache.arch != spec.arch || cache.recurrent.len() != cache.tokens.len() {
        return Err(Error::CacheMismatch("cache was produced by another model".into()));
    }
    if dlogits.shape() != (cache.features.len(), spec.n_outputs()) {
        return Err(Error::shape(
            "dlogits",
            (cache.features.len(), spec.n_outputs()),
            dlogits.shape(),
        ));
    }
    let mut grads = model.params.zeros_like();
    let len = cache.tokens.len();
    let width = spec.recurrent_width();

    // Head and dropout.
    let mut dpre = Vec::with_capacity(cache.features.len());
    for (r, feat) in cache.features.iter().enumerate() {
        let dl = Matrix::column(dlogits.row(r));
        grads.head_w.add_outer(feat, &dl)?;
        grads.head_b.add_assign(&dl)?;
        let mut df = model.params.head_w.matmul(&dl)?;
        if let Some(mask) = &cache.masks[r] {
            df = df.hadamard(mask)?;
        }
        dpre.push(df);
    }

    // Readout.
    let mut d_out: Vec<Matrix<T>> = (0..len).map(|_| Matrix::zeros(width, 1)).collect();
    match spec.task {
        Task::Lm => {
            for (t, df) in dpre.into_iter().enumerate() {
                d_out[t] = df;
            }
        }
        Task::Classify => {
            let df = &dpre[0];
            match spec.readout {
                Readout::Last if spec.arch == Arch::BiLstm => {
                    let d = spec.d_h;
                    for r in 0..d {
                        d_out[len - 1][(r, 0)] += df[(r, 0)];
                        d_out[0][(d + r, 0)] += df[(d + r, 0)];
                    }
                }
                Readout::Last => d_out[len - 1] = df.clone(),
                Readout::Mean => {
                    let s = df.scale(T::one() / T::of(len as f64));
                    for d in &mut d_out {
                        *d = s.clone();
                    }
                }
            }
        }
    }

    let input_grads = recurrent_backward(model, cache, &d_out, &mut grads)?;
    for (t, dx) in input_grads.iter().enumerate() {
        let tok = cache.tokens[t];
        let cols = grads.embedding.cols();
        let row = &mut grads.embedding.as_mut_slice()[tok * cols..(tok + 1) * cols];
        for (g, &v) in row.iter_mut().zip(dx.as_slice()) {
            *g += v;
        }
    }
    Ok(BackwardResult { grads, input_grads })
}

fn plain_backward<T: Scalar, G: GateTransform<T>>(
    p: &G,
    caches: &[StepCache<T>],
    d_out: &[Matrix<T>],
    grads: &mut G,
) -> Result<Vec<Matrix<T>>> {
    let d = p.hidden_dim();
    let mut dh_next = Matrix::zeros(d, 1);
    let mut dc_next = Matrix::zeros(d, 1);
    let mut dxs = vec![Matrix::zeros(p.input_dim(), 1); caches.len()];
    for t in (0..caches.len()).rev() {
        let dh = d_out[t].add(&dh_next)?;
        let (dx, dh_prev, dc_prev) = lstm_step_backward(p, &caches[t], &dh, &dc_next, grads)?;
        dxs[t] = dx;
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    Ok(dxs)
}

fn summary_backward<T: Scalar, G: GateTransform<T>>(
    p: &G,
    sp: &SkipParams<T>,
    pooling: Pooling,
    caches: &[SummaryStepCache<T>],
    d_out: &[Matrix<T>],
    grads: &mut G,
    skip_grads: &mut SkipParams<T>,
) -> Result<Vec<Matrix<T>>> {
    let d = p.hidden_dim();
    let len = caches.len();
    let mut dh_next = Matrix::zeros(d, 1);
    let mut dc_next = Matrix::zeros(d, 1);
    // Gradients reaching the pre-skip hidden states through pooling.
    let mut d_buffer = vec![Matrix::zeros(d, 1); len];
    let mut dxs = vec![Matrix::zeros(p.input_dim(), 1); len];
    for t in (0..len).rev() {
        let cache = &caches[t];
        let o = &cache.cell.gates.o;
        let dh = d_out[t].add(&dh_next)?;
        let (d_o, dc_pre) = match &cache.boundary {
            Some(b) => {
                let (mut d_o, dc_emit) = emit_backward(o, &b.c_post, &dh)?;
                let dc_post = dc_next.add(&dc_emit)?;
                skip_grads.w_p.add_outer(&dc_post, &b.pooled)?;
                skip_grads.b_p.add_assign(&dc_post)?;
                let dpooled = sp.w_p.t_matvec(&dc_post)?;
                let dblock = pool_block_backward(&b.block, pooling, &dpooled)?;
                let m = b.block.rows();
                for r in 0..m {
                    let pos = t + 1 - m + r;
                    d_buffer[pos].add_assign(&Matrix::column(dblock.row(r)))?;
                }
                let (d_o_pre, dc_emit_pre) = emit_backward(o, &cache.cell.c, &d_buffer[t])?;
                d_o.add_assign(&d_o_pre)?;
                (d_o, dc_post.add(&dc_emit_pre)?)
            }
            None => {
                let dh_total = dh.add(&d_buffer[t])?;
                let (d_o, dc_emit) = emit_backward(o, &cache.cell.c, &dh_total)?;
                (d_o, dc_next.add(&dc_emit)?)
            }
        };
        let (dx, dh_prev, dc_prev) = gated_cell_backward(p, &cache.cell, &dc_pre, &d_o, grads)?;
        dxs[t] = dx;
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    Ok(dxs)
}

fn carry_backward<T: Scalar, G: GateTransform<T>>(
    p: &G,
    caches: &[CarryStepCache<T>],
    d_out: &[Matrix<T>],
    grads: &mut G,
) -> Result<Vec<Matrix<T>>> {
    let d = p.hidden_dim();
    let len = caches.len();
    let mut dh_next = Matrix::zeros(d, 1);
    let mut dc_next = Matrix::zeros(d, 1);
    let mut d_long = Matrix::zeros(d, 1);
    let mut dxs = vec![Matrix::zeros(p.input_dim(), 1); len];
    for t in (0..len).rev() {
        let cache = &caches[t];
        let dh = d_out[t].add(&dh_next)?;
        let (d_o, mut dc_star) = emit_backward(&cache.cell.gates.o, &cache.c_star, &dh)?;
        if cache.boundary {
            dc_star.add_assign(&d_long)?;
            d_long = dc_star.clone();
        }
        let dc_pre = dc_next.add(&dc_star)?;
        let (dx, dh_prev, dc_prev) = gated_cell_backward(p, &cache.cell, &dc_pre, &d_o, grads)?;
        dxs[t] = dx;
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    Ok(dxs)
}

fn gated_backward<T: Scalar, G: GateTransform<T>>(
    p: &G,
    spec: &ModelSpec,
    skip: Option<&SkipParams<T>>,
    cache: &RecurrentCache<T>,
    d_out: &[Matrix<T>],
    grads: &mut G,
    skip_grads: Option<&mut SkipParams<T>>,
) -> Result<Vec<Matrix<T>>> {
    match cache {
        RecurrentCache::Plain(c) => plain_backward(p, c, d_out, grads),
        RecurrentCache::Summary(c) => {
            let (sp, sg) = skip
                .zip(skip_grads)
                .ok_or_else(|| Error::CacheMismatch("missing skip params".into()))?;
            summary_backward(p, sp, spec.pooling, c, d_out, grads, sg)
        }
        RecurrentCache::Carry(c) => carry_backward(p, c, d_out, grads),
        _ => Err(Error::CacheMismatch("recurrent cache kind".into())),
    }
}

fn recurrent_backward<T: Scalar>(
    model: &Model<T>,
    cache: &SequenceCache<T>,
    d_out: &[Matrix<T>],
    grads: &mut Gradients<T>,
) -> Result<Vec<Matrix<T>>> {
    let spec = &model.spec;
    let skip = model.params.skip.as_ref();
    let skip_grads = grads.skip.as_mut();
    match (&model.params.recurrent, &mut grads.recurrent, &cache.recurrent) {
        (Recurrent::Lstm(p), Recurrent::Lstm(g), rc) => {
            gated_backward(p, spec, skip, rc, d_out, g, skip_grads)
        }
        (Recurrent::Psug(p), Recurrent::Psug(g), rc) => {
            gated_backward(p, spec, skip, rc, d_out, g, skip_grads)
        }
        (Recurrent::Gru(p), Recurrent::Gru(g), RecurrentCache::Gru(caches)) => {
            let mut dh_next = Matrix::zeros(p.hidden_dim(), 1);
            let mut dxs = vec![Matrix::zeros(p.input_dim(), 1); caches.len()];
            for t in (0..caches.len()).rev() {
                let dh = d_out[t].add(&dh_next)?;
                let (dx, dh_prev) = gru_step_backward(p, &caches[t], &dh, g)?;
                dxs[t] = dx;
                dh_next = dh_prev;
            }
            Ok(dxs)
        }
        (
            Recurrent::BiLstm { fwd, bwd },
            Recurrent::BiLstm { fwd: gf, bwd: gb },
            RecurrentCache::BiLstm { fwd: cf, bwd: cb },
        ) => {
            let d = spec.d_h;
            let len = d_out.len();
            let d_fwd: Vec<Matrix<T>> = d_out.iter().map(|m| m.slice_rows(0, d)).collect();
            let d_bwd: Vec<Matrix<T>> = (0..len)
                .map(|s| d_out[len - 1 - s].slice_rows(d, 2 * d))
                .collect();
            let mut dxs = plain_backward(fwd, cf, &d_fwd, gf)?;
            let dxs_b = plain_backward(bwd, cb, &d_bwd, gb)?;
            for (s, dx) in dxs_b.iter().enumerate() {
                dxs[len - 1 - s].add_assign(dx)?;
            }
            Ok(dxs)
        }
        _ => Err(Error::CacheMismatch("recurrent layer kind".into())),
    }
}

/// Number of scalars across every tensor of the model.
pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.params.tensors().iter().map(|(_, m)| m.len()).sum()
}

/// Whole-model tensor shapes derived from the spec alone.
pub fn model_shapes(spec: &ModelSpec) -> ShapeList {
    let mut shapes: ShapeList = vec![("embedding".into(), (spec.vocab_size, spec.d_emb))];
    shapes.extend(
        cell_shapes(spec)
            .into_iter()
            .map(|(n, s)| {
                if n.starts_with("w_p") || n.starts_with("b_p") {
                    (format!("skip.{n}"), s)
                } else {
                    (format!("cell.{n}"), s)
                }
            }),
    );
    shapes.push(("head.w".into(), (spec.recurrent_width(), spec.n_outputs())));
    shapes.push(("head.b".into(), (spec.n_outputs(), 1)));
    shapes
}

pub fn count_spec_params(spec: &ModelSpec) -> usize {
    model_shapes(spec).iter().map(|(_, (r, c))| r * c).sum()
}

/// Closed-form whole-model count: embedding + recurrent layer + head.
pub fn closed_form_params(spec: &ModelSpec) -> usize {
    let n_out = spec.n_outputs();
    spec.vocab_size * spec.d_emb
        + closed_form_cell_params(spec)
        + spec.recurrent_width() * n_out
        + n_out
}

/// Analytic multiply-accumulate counts for one recurrent step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCost {
    /// Gate transforms: `k·d_h·(d_x + d_h)` with `k` gate blocks.
    pub cell_macs: usize,
    /// Summary projection `d_h·p`, amortised over the `K` steps of a block.
    pub skip_macs_per_step: f64,
}

pub fn step_cost(spec: &ModelSpec) -> StepCost {
    let (m, n) = (spec.d_emb, spec.d_h);
    let affine = n * (m + n);
    let cell_macs = match spec.arch {
        Arch::Lstm | Arch::HgrOnly | Arch::PsugOnly | Arch::QlFull => 4 * affine,
        Arch::Gru => 3 * affine,
        Arch::BiLstm => 2 * 4 * affine,
    };
    let skip_macs_per_step = if spec.has_summary_skip() {
        (n * spec.pooling.width(n)) as f64 / spec.leap as f64
    } else {
        0.0
    };
    StepCost {
        cell_macs,
        skip_macs_per_step,
    }
}

/// Storage size in MiB for `count` parameters of `bytes_per_param` bytes.
pub fn model_size_mb(count: usize, bytes_per_param: usize) -> f64 {
    (bytes_per_param as f64 * count as f64) / (1024.0 * 1024.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Arch) -> ModelSpec {
        let mut s = ModelSpec::new(arch, 7, 4, 3, 2);
        s.leap = 2;
        s
    }

    #[test]
    fn zero_model_logits_equal_head_bias() {
        for arch in Arch::ALL {
            let mut m = Model::<f64>::zeros(tiny(arch)).unwrap();
            m.params.head_b = Matrix::column(&[0.25, -1.5]);
            let (logits, _) = forward(&m, &[3], Mode::Eval, &mut Rng::new(0)).unwrap();
            assert_eq!(logits.as_slice(), &[0.25, -1.5], "{arch}");
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut spec = tiny(Arch::QlFull);
        spec.dropout = 0.5;
        let m = Model::<f64>::new(spec, 3).unwrap();
        let toks = [1, 2, 3, 4, 5];
        let (a, _) = forward(&m, &toks, Mode::Eval, &mut Rng::new(1)).unwrap();
        let (b, _) = forward(&m, &toks, Mode::Eval, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let m = Model::<f64>::new(tiny(Arch::Lstm), 3).unwrap();
        assert!(matches!(
            forward(&m, &[7], Mode::Eval, &mut Rng::new(0)),
            Err(Error::TokenOutOfRange { token: 7, vocab: 7 })
        ));
        assert!(matches!(
            forward(&m, &[], Mode::Eval, &mut Rng::new(0)),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for arch in Arch::ALL {
            let m = Model::<f64>::new(tiny(arch), 9).unwrap();
            let (logits, cache) = forward(&m, &[1, 2, 3], Mode::Eval, &mut Rng::new(0)).unwrap();
            let g = backward(&m, &cache, &Matrix::zeros(logits.rows(), logits.cols())).unwrap();
            assert_eq!(g.sum_squares(), 0.0, "{arch}");
        }
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let a = Model::<f64>::new(tiny(Arch::Lstm), 1).unwrap();
        let b = Model::<f64>::new(tiny(Arch::Gru), 1).unwrap();
        let (logits, cache) = forward(&a, &[1, 2], Mode::Eval, &mut Rng::new(0)).unwrap();
        assert!(backward(&b, &cache, &logits).is_err());
    }

    #[test]
    fn shapes_match_constructed_tensors() {
        for arch in Arch::ALL {
            for pooling in [Pooling::Mean, Pooling::MeanMax] {
                let mut spec = tiny(arch);
                spec.pooling = pooling;
                let m = Model::<f64>::new(spec.clone(), 0).unwrap();
                let built: Vec<(String, (usize, usize))> = m
                    .params
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (n, t.shape()))
                    .collect();
                assert_eq!(built, model_shapes(&spec), "{arch}");
                assert_eq!(count_params(&m), closed_form_params(&spec));
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny(Arch::Lstm);
        s.leap = 0;
        assert!(s.validate().is_err());
        let mut s = tiny(Arch::Lstm);
        s.dropout = 1.0;
        assert!(s.validate().is_err());
        let mut s = tiny(Arch::BiLstm);
        s.task = Task::Lm;
        assert!(s.validate().is_err());
        assert!("transformer".parse::<Arch>().is_err());
    }

    #[test]
    fn model_size_examples() {
        assert!((model_size_mb(27_831_810, 4) - 106.17).abs() < 0.05);
        assert!((model_size_mb(15_470_000, 4) - 59.01).abs() < 0.01);
        assert_eq!(model_size_mb(0, 4), 0.0);
    }
}
