//! Single-timestep recurrent cells and the block-level skip machinery.
//!
//! Gate pre-activations are always laid out as four contiguous `d_h` blocks
//! in the order (input, forget, output, candidate). Both the per-gate LSTM
//! weights and the unified (stacked) weights compute every pre-activation
//! row as `(w_r · x) + (u_r · h) + b_r`, so a stacked copy of an LSTM
//! reproduces its trajectory exactly.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{Arch, ModelSpec};
use crate::numerics::{sigmoid, tanh_, Matrix, Rng, Scalar};

/// Named tensor shapes, in canonical order.
pub type ShapeList = Vec<(String, (usize, usize))>;

fn shape_count(shapes: &ShapeList) -> usize {
    shapes.iter().map(|(_, (r, c))| r * c).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    MeanMax,
}

impl Pooling {
    /// Width of the pooled vector for a hidden size.
    pub fn width(self, d_h: usize) -> usize {
        match self {
            Pooling::Mean | Pooling::Max => d_h,
            Pooling::MeanMax => 2 * d_h,
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "mean_max" => Ok(Pooling::MeanMax),
            other => Err(Error::InvalidArgument(format!("unknown pooling `{other}`"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
            Pooling::MeanMax => "mean_max",
        })
    }
}

/// Which block-level skip mechanism a leap model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkipVariant {
    /// Pooled block summary projected by `W_p` and added to the cell state.
    #[default]
    Summary,
    /// Long-term cell accumulator added at every boundary, no projection.
    Carry,
}

impl FromStr for SkipVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(SkipVariant::Summary),
            "carry" => Ok(SkipVariant::Carry),
            other => Err(Error::InvalidArgument(format!(
                "unknown skip variant `{other}`"
            ))),
        }
    }
}

impl fmt::Display for SkipVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipVariant::Summary => "summary",
            SkipVariant::Carry => "carry",
        })
    }
}

/// Computes `out[r] = (w_r · x) + (u_r · h) + b_r` for every row.
fn affine_rows<T: Scalar>(
    w: &Matrix<T>,
    u: &Matrix<T>,
    b: &Matrix<T>,
    x: &Matrix<T>,
    h: &Matrix<T>,
    out: &mut Vec<T>,
) -> Result<()> {
    if x.cols() != 1 || w.cols() != x.rows() {
        return Err(Error::shape("input transform", w.shape(), x.shape()));
    }
    if h.cols() != 1 || u.cols() != h.rows() {
        return Err(Error::shape("recurrent transform", u.shape(), h.shape()));
    }
    if u.rows() != w.rows() || b.shape() != (w.rows(), 1) {
        return Err(Error::shape("gate bias", w.shape(), b.shape()));
    }
    let xs = x.as_slice();
    let hs = h.as_slice();
    for r in 0..w.rows() {
        let mut wx = T::zero();
        for (&a, &v) in w.row(r).iter().zip(xs) {
            wx += a * v;
        }
        let mut uh = T::zero();
        for (&a, &v) in u.row(r).iter().zip(hs) {
            uh += a * v;
        }
        out.push(wx + uh + b[(r, 0)]);
    }
    Ok(())
}

/// A parameterisation that maps `(x_t, h_{t-1})` to the stacked
/// `4 d_h` gate pre-activations. Gradient buffers use the same type.
pub trait GateTransform<T: Scalar>: Clone + Send + Sync {
    fn input_dim(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn preactivations(&self, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<Matrix<T>>;
    fn zeros_like(&self) -> Self;
    /// Adds the weight gradients for pre-activation gradient `dz` to `self`.
    fn accumulate(&mut self, dz: &Matrix<T>, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<()>;
    /// Gradients of the pre-activations with respect to `x` and `h_prev`.
    fn backprop(&self, dz: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)>;
    fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)>;
}

/// Classical LSTM with one input matrix, recurrent matrix and bias per gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub w_i: Matrix<T>,
    pub w_f: Matrix<T>,
    pub w_o: Matrix<T>,
    pub w_g: Matrix<T>,
    pub u_i: Matrix<T>,
    pub u_f: Matrix<T>,
    pub u_o: Matrix<T>,
    pub u_g: Matrix<T>,
    pub b_i: Matrix<T>,
    pub b_f: Matrix<T>,
    pub b_o: Matrix<T>,
    pub b_g: Matrix<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn shapes(d_x: usize, d_h: usize) -> ShapeList {
        vec![
            ("w_i".into(), (d_h, d_x)),
            ("w_f".into(), (d_h, d_x)),
            ("w_o".into(), (d_h, d_x)),
            ("w_g".into(), (d_h, d_x)),
            ("u_i".into(), (d_h, d_h)),
            ("u_f".into(), (d_h, d_h)),
            ("u_o".into(), (d_h, d_h)),
            ("u_g".into(), (d_h, d_h)),
            ("b_i".into(), (d_h, 1)),
            ("b_f".into(), (d_h, 1)),
            ("b_o".into(), (d_h, 1)),
            ("b_g".into(), (d_h, 1)),
        ]
    }

    pub fn zeros(d_x: usize, d_h: usize) -> Self {
        let w = || Matrix::zeros(d_h, d_x);
        let u = || Matrix::zeros(d_h, d_h);
        let b = || Matrix::zeros(d_h, 1);
        LstmParams {
            w_i: w(),
            w_f: w(),
            w_o: w(),
            w_g: w(),
            u_i: u(),
            u_f: u(),
            u_o: u(),
            u_g: u(),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            b_g: b(),
        }
    }

    /// Uniform `±1/√d_h` weights, zero biases, forget bias set to `forget_bias`.
    pub fn init(rng: &mut Rng, d_x: usize, d_h: usize, forget_bias: f64) -> Self {
        let mut p = Self::zeros(d_x, d_h);
        let bound = 1.0 / (d_h as f64).sqrt();
        for (name, m) in p.tensors_mut() {
            if name.starts_with('b') {
                continue;
            }
            *m = rng.uniform_matrix(m.rows(), m.cols(), bound);
        }
        p.b_f.fill(T::of(forget_bias));
        p
    }

    fn gate_blocks(&self) -> [(&Matrix<T>, &Matrix<T>, &Matrix<T>); 4] {
        [
            (&self.w_i, &self.u_i, &self.b_i),
            (&self.w_f, &self.u_f, &self.b_f),
            (&self.w_o, &self.u_o, &self.b_o),
            (&self.w_g, &self.u_g, &self.b_g),
        ]
    }
}

impl<T: Scalar> GateTransform<T> for LstmParams<T> {
    fn input_dim(&self) -> usize {
        self.w_i.cols()
    }

    fn hidden_dim(&self) -> usize {
        self.w_i.rows()
    }

    fn preactivations(&self, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<Matrix<T>> {
        let mut z = Vec::with_capacity(4 * self.hidden_dim());
        for (w, u, b) in self.gate_blocks() {
            affine_rows(w, u, b, x, h_prev, &mut z)?;
        }
        Ok(Matrix::column(&z))
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim())
    }

    fn accumulate(&mut self, dz: &Matrix<T>, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<()> {
        let d = self.hidden_dim();
        let blocks = [
            (&mut self.w_i, &mut self.u_i, &mut self.b_i),
            (&mut self.w_f, &mut self.u_f, &mut self.b_f),
            (&mut self.w_o, &mut self.u_o, &mut self.b_o),
            (&mut self.w_g, &mut self.u_g, &mut self.b_g),
        ];
        for (k, (w, u, b)) in blocks.into_iter().enumerate() {
            let dzk = dz.slice_rows(k * d, (k + 1) * d);
            w.add_outer(&dzk, x)?;
            u.add_outer(&dzk, h_prev)?;
            b.add_assign(&dzk)?;
        }
        Ok(())
    }

    fn backprop(&self, dz: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let d = self.hidden_dim();
        if dz.shape() != (4 * d, 1) {
            return Err(Error::shape("gate backprop", (4 * d, 1), dz.shape()));
        }
        let mut dx = Matrix::zeros(self.input_dim(), 1);
        let mut dh = Matrix::zeros(d, 1);
        for (k, (w, u, _)) in self.gate_blocks().into_iter().enumerate() {
            let dzk = dz.slice_rows(k * d, (k + 1) * d);
            dx.add_assign(&w.t_matvec(&dzk)?)?;
            dh.add_assign(&u.t_matvec(&dzk)?)?;
        }
        Ok((dx, dh))
    }

    fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("w_o", &self.w_o),
            ("w_g", &self.w_g),
            ("u_i", &self.u_i),
            ("u_f", &self.u_f),
            ("u_o", &self.u_o),
            ("u_g", &self.u_g),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_g", &self.b_g),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        vec![
            ("w_i", &mut self.w_i),
            ("w_f", &mut self.w_f),
            ("w_o", &mut self.w_o),
            ("w_g", &mut self.w_g),
            ("u_i", &mut self.u_i),
            ("u_f", &mut self.u_f),
            ("u_o", &mut self.u_o),
            ("u_g", &mut self.u_g),
            ("b_i", &mut self.b_i),
            ("b_f", &mut self.b_f),
            ("b_o", &mut self.b_o),
            ("b_g", &mut self.b_g),
        ]
    }
}

/// Unified gating: one stacked input matrix, one stacked recurrent matrix and
/// the concatenated bias `[b_i; b_f; b_o; b_g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsugParams<T> {
    pub w: Matrix<T>,
    pub u: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> PsugParams<T> {
    pub fn shapes(d_x: usize, d_h: usize) -> ShapeList {
        vec![
            ("w".into(), (4 * d_h, d_x)),
            ("u".into(), (4 * d_h, d_h)),
            ("b".into(), (4 * d_h, 1)),
        ]
    }

    pub fn zeros(d_x: usize, d_h: usize) -> Self {
        PsugParams {
            w: Matrix::zeros(4 * d_h, d_x),
            u: Matrix::zeros(4 * d_h, d_h),
            b: Matrix::zeros(4 * d_h, 1),
        }
    }

    pub fn init(rng: &mut Rng, d_x: usize, d_h: usize, forget_bias: f64) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut b = Matrix::zeros(4 * d_h, 1);
        for r in d_h..2 * d_h {
            b[(r, 0)] = T::of(forget_bias);
        }
        PsugParams {
            w: rng.uniform_matrix(4 * d_h, d_x, bound),
            u: rng.uniform_matrix(4 * d_h, d_h, bound),
            b,
        }
    }

    /// Stacks the per-gate matrices of an LSTM in (i, f, o, g) order.
    pub fn from_lstm(p: &LstmParams<T>) -> Self {
        let stack = |parts: [&Matrix<T>; 4]| {
            Matrix::vstack(&parts).expect("per-gate tensors share a width")
        };
        PsugParams {
            w: stack([&p.w_i, &p.w_f, &p.w_o, &p.w_g]),
            u: stack([&p.u_i, &p.u_f, &p.u_o, &p.u_g]),
            b: stack([&p.b_i, &p.b_f, &p.b_o, &p.b_g]),
        }
    }
}

impl<T: Scalar> GateTransform<T> for PsugParams<T> {
    fn input_dim(&self) -> usize {
        self.w.cols()
    }

    fn hidden_dim(&self) -> usize {
        self.w.rows() / 4
    }

    fn preactivations(&self, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<Matrix<T>> {
        let mut z = Vec::with_capacity(self.w.rows());
        affine_rows(&self.w, &self.u, &self.b, x, h_prev, &mut z)?;
        Ok(Matrix::column(&z))
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim())
    }

    fn accumulate(&mut self, dz: &Matrix<T>, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<()> {
        self.w.add_outer(dz, x)?;
        self.u.add_outer(dz, h_prev)?;
        self.b.add_assign(dz)
    }

    fn backprop(&self, dz: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        Ok((self.w.t_matvec(dz)?, self.u.t_matvec(dz)?))
    }

    fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![("w", &self.w), ("u", &self.u), ("b", &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        vec![("w", &mut self.w), ("u", &mut self.u), ("b", &mut self.b)]
    }
}

/// GRU with update gate `z`, reset gate `r` and candidate `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T> {
    pub w_z: Matrix<T>,
    pub w_r: Matrix<T>,
    pub w_h: Matrix<T>,
    pub u_z: Matrix<T>,
    pub u_r: Matrix<T>,
    pub u_h: Matrix<T>,
    pub b_z: Matrix<T>,
    pub b_r: Matrix<T>,
    pub b_h: Matrix<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn shapes(d_x: usize, d_h: usize) -> ShapeList {
        vec![
            ("w_z".into(), (d_h, d_x)),
            ("w_r".into(), (d_h, d_x)),
            ("w_h".into(), (d_h, d_x)),
            ("u_z".into(), (d_h, d_h)),
            ("u_r".into(), (d_h, d_h)),
            ("u_h".into(), (d_h, d_h)),
            ("b_z".into(), (d_h, 1)),
            ("b_r".into(), (d_h, 1)),
            ("b_h".into(), (d_h, 1)),
        ]
    }

    pub fn zeros(d_x: usize, d_h: usize) -> Self {
        let w = || Matrix::zeros(d_h, d_x);
        let u = || Matrix::zeros(d_h, d_h);
        let b = || Matrix::zeros(d_h, 1);
        GruParams {
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    pub fn init(rng: &mut Rng, d_x: usize, d_h: usize) -> Self {
        let mut p = Self::zeros(d_x, d_h);
        let bound = 1.0 / (d_h as f64).sqrt();
        for (name, m) in p.tensors_mut() {
            if !name.starts_with('b') {
                *m = rng.uniform_matrix(m.rows(), m.cols(), bound);
            }
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        vec![
            ("w_z", &mut self.w_z),
            ("w_r", &mut self.w_r),
            ("w_h", &mut self.w_h),
            ("u_z", &mut self.u_z),
            ("u_r", &mut self.u_r),
            ("u_h", &mut self.u_h),
            ("b_z", &mut self.b_z),
            ("b_r", &mut self.b_r),
            ("b_h", &mut self.b_h),
        ]
    }
}

/// Block-summary projection `s_k = W_p · pooled + b_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipParams<T> {
    pub w_p: Matrix<T>,
    pub b_p: Matrix<T>,
}

impl<T: Scalar> SkipParams<T> {
    pub fn shapes(d_h: usize, pooling: Pooling) -> ShapeList {
        vec![("w_p".into(), (d_h, pooling.width(d_h))), ("b_p".into(), (d_h, 1))]
    }

    pub fn zeros(d_h: usize, pooling: Pooling) -> Self {
        SkipParams {
            w_p: Matrix::zeros(d_h, pooling.width(d_h)),
            b_p: Matrix::zeros(d_h, 1),
        }
    }

    pub fn init(rng: &mut Rng, d_h: usize, pooling: Pooling) -> Self {
        let p = pooling.width(d_h);
        SkipParams {
            w_p: rng.uniform_matrix(d_h, p, 1.0 / (p as f64).sqrt()),
            b_p: Matrix::zeros(d_h, 1),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix<T>)> {
        vec![("w_p", &self.w_p), ("b_p", &self.b_p)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        vec![("w_p", &mut self.w_p), ("b_p", &mut self.b_p)]
    }
}

/// Activated gates of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates<T> {
    pub i: Matrix<T>,
    pub f: Matrix<T>,
    pub o: Matrix<T>,
    pub g: Matrix<T>,
}

impl<T: Scalar> Gates<T> {
    pub fn from_preactivations(z: &Matrix<T>, d_h: usize) -> Result<Self> {
        if z.shape() != (4 * d_h, 1) {
            return Err(Error::shape("gate split", (4 * d_h, 1), z.shape()));
        }
        Ok(Gates {
            i: sigmoid(&z.slice_rows(0, d_h)),
            f: sigmoid(&z.slice_rows(d_h, 2 * d_h)),
            o: sigmoid(&z.slice_rows(2 * d_h, 3 * d_h)),
            g: tanh_(&z.slice_rows(3 * d_h, 4 * d_h)),
        })
    }

    /// `f ⊙ c_prev + i ⊙ g`
    pub fn cell_update(&self, c_prev: &Matrix<T>) -> Result<Matrix<T>> {
        self.f
            .hadamard(c_prev)?
            .add(&self.i.hadamard(&self.g)?)
    }

    /// `o ⊙ tanh(c)`
    pub fn emit(&self, c: &Matrix<T>) -> Result<Matrix<T>> {
        self.o.hadamard(&tanh_(c))
    }
}

/// Unified gating: one affine map, sliced into (i, f, o, g).
pub fn psug_gates<T: Scalar>(
    p: &PsugParams<T>,
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
) -> Result<Gates<T>> {
    gates_of(p, x, h_prev)
}

pub fn gates_of<T: Scalar, G: GateTransform<T>>(
    p: &G,
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
) -> Result<Gates<T>> {
    let z = p.preactivations(x, h_prev)?;
    Gates::from_preactivations(&z, p.hidden_dim())
}

/// Everything a gated step needs for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache<T> {
    pub x: Matrix<T>,
    pub h_prev: Matrix<T>,
    pub c_prev: Matrix<T>,
    pub gates: Gates<T>,
    /// Cell state after `f ⊙ c_prev + i ⊙ g`, before any skip.
    pub c: Matrix<T>,
}

fn check_state<T: Scalar>(d_h: usize, h: &Matrix<T>, c: &Matrix<T>) -> Result<()> {
    if h.shape() != (d_h, 1) {
        return Err(Error::shape("hidden state", (d_h, 1), h.shape()));
    }
    if c.shape() != (d_h, 1) {
        return Err(Error::shape("cell state", (d_h, 1), c.shape()));
    }
    Ok(())
}

/// Gate computation plus the cell update, shared by every LSTM-family step.
pub fn gated_cell<T: Scalar, G: GateTransform<T>>(
    p: &G,
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
    c_prev: &Matrix<T>,
) -> Result<StepCache<T>> {
    check_state(p.hidden_dim(), h_prev, c_prev)?;
    let gates = gates_of(p, x, h_prev)?;
    let c = gates.cell_update(c_prev)?;
    Ok(StepCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        gates,
        c,
    })
}

/// Classical LSTM step: returns `(h_t, c_t, cache)`.
pub fn lstm_step<T: Scalar, G: GateTransform<T>>(
    p: &G,
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
    c_prev: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, StepCache<T>)> {
    let cache = gated_cell(p, x, h_prev, c_prev)?;
    let h = cache.gates.emit(&cache.c)?;
    Ok((h, cache.c.clone(), cache))
}

/// Backward through the gates and the cell update, given the gradients of
/// the pre-skip cell state and of the output gate.
///
/// Returns `(dx, dh_prev, dc_prev)` and adds weight gradients to `grads`.
pub fn gated_cell_backward<T: Scalar, G: GateTransform<T>>(
    p: &G,
    cache: &StepCache<T>,
    dc: &Matrix<T>,
    d_o: &Matrix<T>,
    grads: &mut G,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let Gates { i, f, o, g } = &cache.gates;
    let one = T::one();
    let d_i = dc.hadamard(g)?.zip_map(i, |d, s| d * s * (one - s))?;
    let d_f = dc
        .hadamard(&cache.c_prev)?
        .zip_map(f, |d, s| d * s * (one - s))?;
    let d_oz = d_o.zip_map(o, |d, s| d * s * (one - s))?;
    let d_g = dc.hadamard(i)?.zip_map(g, |d, s| d * (one - s * s))?;
    let dz = Matrix::vstack(&[&d_i, &d_f, &d_oz, &d_g])?;
    grads.accumulate(&dz, &cache.x, &cache.h_prev)?;
    let (dx, dh_prev) = p.backprop(&dz)?;
    let dc_prev = dc.hadamard(f)?;
    Ok((dx, dh_prev, dc_prev))
}

/// Gradient split of `h = o ⊙ tanh(c)`: returns `(d_o, dc)`.
pub fn emit_backward<T: Scalar>(
    o: &Matrix<T>,
    c: &Matrix<T>,
    dh: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let tc = tanh_(c);
    let d_o = dh.hadamard(&tc)?;
    let one = T::one();
    let dc = dh.hadamard(o)?.zip_map(&tc, |d, t| d * (one - t * t))?;
    Ok((d_o, dc))
}

/// Plain LSTM step backward. `dh` and `dc` are the gradients arriving at
/// `h_t` and `c_t`.
pub fn lstm_step_backward<T: Scalar, G: GateTransform<T>>(
    p: &G,
    cache: &StepCache<T>,
    dh: &Matrix<T>,
    dc: &Matrix<T>,
    grads: &mut G,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let (d_o, dc_emit) = emit_backward(&cache.gates.o, &cache.c, dh)?;
    let dc_total = dc.add(&dc_emit)?;
    gated_cell_backward(p, cache, &dc_total, &d_o, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCache<T> {
    pub x: Matrix<T>,
    pub h_prev: Matrix<T>,
    pub z: Matrix<T>,
    pub r: Matrix<T>,
    pub rh: Matrix<T>,
    pub cand: Matrix<T>,
}

/// GRU step: `h_t = (1 − z) ⊙ h_prev + z ⊙ tanh(W_h x + U_h (r ⊙ h_prev) + b_h)`.
pub fn gru_step<T: Scalar>(
    p: &GruParams<T>,
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
) -> Result<(Matrix<T>, GruCache<T>)> {
    let d = p.hidden_dim();
    if h_prev.shape() != (d, 1) {
        return Err(Error::shape("hidden state", (d, 1), h_prev.shape()));
    }
    let mut buf = Vec::with_capacity(d);
    affine_rows(&p.w_z, &p.u_z, &p.b_z, x, h_prev, &mut buf)?;
    let z = sigmoid(&Matrix::column(&buf));
    buf.clear();
    affine_rows(&p.w_r, &p.u_r, &p.b_r, x, h_prev, &mut buf)?;
    let r = sigmoid(&Matrix::column(&buf));
    let rh = r.hadamard(h_prev)?;
    buf.clear();
    affine_rows(&p.w_h, &p.u_h, &p.b_h, x, &rh, &mut buf)?;
    let cand = tanh_(&Matrix::column(&buf));
    let one = T::one();
    let keep = z.zip_map(h_prev, |zv, hv| (one - zv) * hv)?;
    let h = keep.add(&z.hadamard(&cand)?)?;
    Ok((
        h,
        GruCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            z,
            r,
            rh,
            cand,
        },
    ))
}

/// Returns `(dx, dh_prev)` and adds weight gradients to `grads`.
pub fn gru_step_backward<T: Scalar>(
    p: &GruParams<T>,
    cache: &GruCache<T>,
    dh: &Matrix<T>,
    grads: &mut GruParams<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let one = T::one();
    let GruCache {
        x,
        h_prev,
        z,
        r,
        rh,
        cand,
    } = cache;
    let dz = dh.hadamard(&cand.sub(h_prev)?)?;
    let dcand = dh.hadamard(z)?;
    let mut dh_prev = dh.zip_map(z, |d, zv| d * (one - zv))?;
    let da = dcand.zip_map(cand, |d, c| d * (one - c * c))?;
    grads.w_h.add_outer(&da, x)?;
    grads.u_h.add_outer(&da, rh)?;
    grads.b_h.add_assign(&da)?;
    let drh = p.u_h.t_matvec(&da)?;
    let dr = drh.hadamard(h_prev)?;
    dh_prev.add_assign(&drh.hadamard(r)?)?;
    let dz_pre = dz.zip_map(z, |d, s| d * s * (one - s))?;
    let dr_pre = dr.zip_map(r, |d, s| d * s * (one - s))?;
    grads.w_z.add_outer(&dz_pre, x)?;
    grads.u_z.add_outer(&dz_pre, h_prev)?;
    grads.b_z.add_assign(&dz_pre)?;
    grads.w_r.add_outer(&dr_pre, x)?;
    grads.u_r.add_outer(&dr_pre, h_prev)?;
    grads.b_r.add_assign(&dr_pre)?;
    dh_prev.add_assign(&p.u_z.t_matvec(&dz_pre)?)?;
    dh_prev.add_assign(&p.u_r.t_matvec(&dr_pre)?)?;
    let mut dx = p.w_z.t_matvec(&dz_pre)?;
    dx.add_assign(&p.w_r.t_matvec(&dr_pre)?)?;
    dx.add_assign(&p.w_h.t_matvec(&da)?)?;
    Ok((dx, dh_prev))
}

/// Pools the rows of a block (`m x d_h`) into a column.
pub fn pool_block<T: Scalar>(block: &Matrix<T>, method: Pooling) -> Result<Matrix<T>> {
    let (m, d) = block.shape();
    if m == 0 {
        return Err(Error::EmptyBlock);
    }
    let mean = || {
        let inv = T::one() / T::of(m as f64);
        Matrix::from_fn(d, 1, |c, _| {
            let mut s = T::zero();
            for r in 0..m {
                s += block[(r, c)];
            }
            s * inv
        })
    };
    let max = || {
        Matrix::from_fn(d, 1, |c, _| {
            (1..m).fold(block[(0, c)], |acc, r| acc.max(block[(r, c)]))
        })
    };
    Ok(match method {
        Pooling::Mean => mean(),
        Pooling::Max => max(),
        Pooling::MeanMax => Matrix::vstack(&[&mean(), &max()])?,
    })
}

/// Gradient of [`pool_block`] with respect to the block rows. Max pooling
/// routes each column's gradient to the first row attaining the maximum.
pub fn pool_block_backward<T: Scalar>(
    block: &Matrix<T>,
    method: Pooling,
    dpooled: &Matrix<T>,
) -> Result<Matrix<T>> {
    let (m, d) = block.shape();
    if m == 0 {
        return Err(Error::EmptyBlock);
    }
    if dpooled.shape() != (method.width(d), 1) {
        return Err(Error::shape("pool backward", (method.width(d), 1), dpooled.shape()));
    }
    let mut out = Matrix::zeros(m, d);
    let inv = T::one() / T::of(m as f64);
    let (mean_off, max_off) = match method {
        Pooling::Mean => (Some(0), None),
        Pooling::Max => (None, Some(0)),
        Pooling::MeanMax => (Some(0), Some(d)),
    };
    if let Some(off) = mean_off {
        for r in 0..m {
            for c in 0..d {
                out[(r, c)] += dpooled[(off + c, 0)] * inv;
            }
        }
    }
    if let Some(off) = max_off {
        for c in 0..d {
            let mut arg = 0;
            for r in 1..m {
                if block[(r, c)] > block[(arg, c)] {
                    arg = r;
                }
            }
            out[(arg, c)] += dpooled[(off + c, 0)];
        }
    }
    Ok(out)
}

/// `s_k = W_p · pooled + b_p`
pub fn block_summary<T: Scalar>(sp: &SkipParams<T>, pooled: &Matrix<T>) -> Result<Matrix<T>> {
    if pooled.shape() != (sp.w_p.cols(), 1) {
        return Err(Error::shape("block summary", sp.w_p.shape(), pooled.shape()));
    }
    sp.w_p.matmul(pooled)?.add(&sp.b_p)
}

/// Recurrent state of a leap model for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct QLState<T> {
    pub h: Matrix<T>,
    /// Short-term cell state.
    pub c: Matrix<T>,
    /// Long-term carry, used by [`SkipVariant::Carry`] only.
    pub c_long: Matrix<T>,
    /// Pre-skip hidden states of the current, unfinished block.
    pub block_buffer: Vec<Matrix<T>>,
    /// Number of steps already taken; the next step has index `t + 1`.
    pub t: usize,
}

impl<T: Scalar> QLState<T> {
    pub fn new(d_h: usize) -> Self {
        QLState {
            h: Matrix::zeros(d_h, 1),
            c: Matrix::zeros(d_h, 1),
            c_long: Matrix::zeros(d_h, 1),
            block_buffer: Vec::new(),
            t: 0,
        }
    }
}

/// Bookkeeping for a step on which the block summary fired.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCache<T> {
    /// Pre-skip hidden states of the block, one per row.
    pub block: Matrix<T>,
    pub pooled: Matrix<T>,
    pub summary: Matrix<T>,
    /// Cell state after the skip was added.
    pub c_post: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStepCache<T> {
    pub cell: StepCache<T>,
    pub boundary: Option<BoundaryCache<T>>,
}

/// One step with the pooled block-summary skip. `force_flush` pools a
/// partial block on this step even if `t` is not a multiple of `k`.
#[allow(clippy::too_many_arguments)]
pub fn ql_step_summary_with<T: Scalar, G: GateTransform<T>>(
    p: &G,
    sp: &SkipParams<T>,
    st: &QLState<T>,
    x: &Matrix<T>,
    k: usize,
    pooling: Pooling,
    force_flush: bool,
) -> Result<(Matrix<T>, QLState<T>, SummaryStepCache<T>)> {
    if k == 0 {
        return Err(Error::InvalidLeap(k));
    }
    let cell = gated_cell(p, x, &st.h, &st.c)?;
    let h_pre = cell.gates.emit(&cell.c)?;
    let t = st.t + 1;
    let mut buffer = st.block_buffer.clone();
    buffer.push(h_pre.clone());

    if t % k == 0 || force_flush {
        let rows: Vec<Vec<T>> = buffer.iter().map(|h| h.as_slice().to_vec()).collect();
        let block = Matrix::from_rows(&rows)?;
        let pooled = pool_block(&block, pooling)?;
        let summary = block_summary(sp, &pooled)?;
        let c_post = cell.c.add(&summary)?;
        let h = cell.gates.emit(&c_post)?;
        let next = QLState {
            h: h.clone(),
            c: c_post.clone(),
            c_long: st.c_long.clone(),
            block_buffer: Vec::new(),
            t,
        };
        let cache = SummaryStepCache {
            cell,
            boundary: Some(BoundaryCache {
                block,
                pooled,
                summary,
                c_post,
            }),
        };
        Ok((h, next, cache))
    } else {
        let next = QLState {
            h: h_pre.clone(),
            c: cell.c.clone(),
            c_long: st.c_long.clone(),
            block_buffer: buffer,
            t,
        };
        Ok((h_pre, next, SummaryStepCache { cell, boundary: None }))
    }
}

/// One step with the pooled block-summary skip (fires when `t mod k == 0`).
pub fn ql_step_summary<T: Scalar, G: GateTransform<T>>(
    p: &G,
    sp: &SkipParams<T>,
    st: &QLState<T>,
    x: &Matrix<T>,
    k: usize,
    pooling: Pooling,
) -> Result<(Matrix<T>, QLState<T>, SummaryStepCache<T>)> {
    ql_step_summary_with(p, sp, st, x, k, pooling, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarryStepCache<T> {
    pub cell: StepCache<T>,
    pub boundary: bool,
    /// Cell state the hidden output was computed from.
    pub c_star: Matrix<T>,
}

/// One step with the carried long-term state. The returned state keeps the
/// short-term cell `c_t`; the skip only reaches `h_t` and the carry.
pub fn ql_step_carry<T: Scalar, G: GateTransform<T>>(
    p: &G,
    st: &QLState<T>,
    x: &Matrix<T>,
    k: usize,
) -> Result<(Matrix<T>, QLState<T>, CarryStepCache<T>)> {
    if k == 0 {
        return Err(Error::InvalidLeap(k));
    }
    let cell = gated_cell(p, x, &st.h, &st.c)?;
    let t = st.t + 1;
    let boundary = t % k == 0;
    let (c_star, c_long) = if boundary {
        let c_star = cell.c.add(&st.c_long)?;
        (c_star.clone(), c_star)
    } else {
        (cell.c.clone(), st.c_long.clone())
    };
    let h = cell.gates.emit(&c_star)?;
    let next = QLState {
        h: h.clone(),
        c: cell.c.clone(),
        c_long,
        block_buffer: Vec::new(),
        t,
    };
    Ok((
        h,
        next,
        CarryStepCache {
            cell,
            boundary,
            c_star,
        },
    ))
}

/// Bidirectional LSTM outputs `[h_fwd(t); h_bwd(t)]` for every position.
pub fn bilstm_forward<T: Scalar>(
    fwd: &LstmParams<T>,
    bwd: &LstmParams<T>,
    xs: &[Matrix<T>],
) -> Result<Vec<Matrix<T>>> {
    if xs.is_empty() {
        return Err(Error::EmptySequence);
    }
    if fwd.hidden_dim() != bwd.hidden_dim() || fwd.input_dim() != bwd.input_dim() {
        return Err(Error::shape("bilstm", fwd.w_i.shape(), bwd.w_i.shape()));
    }
    let run = |p: &LstmParams<T>, seq: &mut dyn Iterator<Item = &Matrix<T>>| -> Result<Vec<Matrix<T>>> {
        let d = p.hidden_dim();
        let (mut h, mut c) = (Matrix::zeros(d, 1), Matrix::zeros(d, 1));
        let mut out = Vec::new();
        for x in seq {
            let (h_next, c_next, _) = lstm_step(p, x, &h, &c)?;
            out.push(h_next.clone());
            h = h_next;
            c = c_next;
        }
        Ok(out)
    };
    let hf = run(fwd, &mut xs.iter())?;
    let mut hb = run(bwd, &mut xs.iter().rev())?;
    hb.reverse();
    hf.iter()
        .zip(&hb)
        .map(|(a, b)| Matrix::vstack(&[a, b]))
        .collect()
}

/// Enumerated and closed-form scalar counts of a recurrent layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellParamCount {
    pub enumerated: usize,
    pub closed_form: usize,
}

/// Tensor shapes of the recurrent layer (including skip projection) of a spec.
pub fn cell_shapes(spec: &ModelSpec) -> ShapeList {
    let (m, n) = (spec.d_emb, spec.d_h);
    let prefixed = |prefix: &str, shapes: ShapeList| -> ShapeList {
        shapes
            .into_iter()
            .map(|(name, s)| (format!("{prefix}{name}"), s))
            .collect()
    };
    let mut shapes = match spec.arch {
        Arch::Lstm | Arch::HgrOnly => LstmParams::<f64>::shapes(m, n),
        Arch::Gru => GruParams::<f64>::shapes(m, n),
        Arch::QlFull | Arch::PsugOnly => PsugParams::<f64>::shapes(m, n),
        Arch::BiLstm => {
            let mut s = prefixed("fwd.", LstmParams::<f64>::shapes(m, n));
            s.extend(prefixed("bwd.", LstmParams::<f64>::shapes(m, n)));
            s
        }
    };
    if spec.has_summary_skip() {
        shapes.extend(SkipParams::<f64>::shapes(n, spec.pooling));
    }
    shapes
}

/// Closed-form recurrent-layer size: `4(nm + n² + n)` for LSTM,
/// `3(nm + n² + n)` for GRU, `4nm + 4n² + 4n` for unified gating, plus
/// `n·p + n` for a summary projection.
pub fn closed_form_cell_params(spec: &ModelSpec) -> usize {
    let (m, n) = (spec.d_emb, spec.d_h);
    let base = n * m + n * n + n;
    let core = match spec.arch {
        Arch::Lstm | Arch::HgrOnly => 4 * base,
        Arch::Gru => 3 * base,
        Arch::BiLstm => 2 * 4 * base,
        Arch::QlFull | Arch::PsugOnly => 4 * n * m + 4 * n * n + 4 * n,
    };
    let skip = if spec.has_summary_skip() {
        n * spec.pooling.width(n) + n
    } else {
        0
    };
    core + skip
}

pub fn count_cell_params(spec: &ModelSpec) -> Result<CellParamCount> {
    let enumerated = shape_count(&cell_shapes(spec));
    let closed_form = closed_form_cell_params(spec);
    if enumerated != closed_form {
        return Err(Error::Numeric(format!(
            "enumerated count {enumerated} disagrees with closed form {closed_form}"
        )));
    }
    Ok(CellParamCount {
        enumerated,
        closed_form,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Arch;
    use crate::numerics::{fd_gradient, logit, sigmoid_scalar, Rng};
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::column(v)
    }

    fn random_lstm(seed: u64, d_x: usize, d_h: usize) -> LstmParams<f64> {
        let mut p = LstmParams::init(&mut Rng::new(seed), d_x, d_h, 0.0);
        let mut rng = Rng::derive(seed, &[1]);
        for b in [&mut p.b_i, &mut p.b_f, &mut p.b_o, &mut p.b_g] {
            *b = rng.uniform_matrix(d_h, 1, 0.5);
        }
        p
    }

    fn random_seq(seed: u64, len: usize, d_x: usize) -> Vec<Matrix<f64>> {
        let mut rng = Rng::derive(seed, &[2]);
        (0..len).map(|_| rng.uniform_matrix(d_x, 1, 1.0)).collect()
    }

    #[test]
    fn lstm_step_zero_params() {
        let p = LstmParams::<f64>::zeros(3, 2);
        let z = Matrix::zeros(2, 1);
        let (h, c, cache) = lstm_step(&p, &col(&[1.0, -2.0, 0.5]), &z, &z).unwrap();
        assert_eq!(cache.gates.i, Matrix::filled(2, 1, 0.5));
        assert_eq!(cache.gates.f, Matrix::filled(2, 1, 0.5));
        assert_eq!(cache.gates.o, Matrix::filled(2, 1, 0.5));
        assert_eq!(cache.gates.g, z);
        assert_eq!((h, c), (z.clone(), z));
    }

    #[test]
    fn lstm_step_saturated_forget_keeps_cell() {
        let mut p = LstmParams::<f64>::zeros(3, 2);
        p.b_f = Matrix::filled(2, 1, 50.0);
        let c_prev = col(&[0.7, -1.3]);
        let (_, c, _) = lstm_step(&p, &col(&[1.0, 2.0, 3.0]), &Matrix::zeros(2, 1), &c_prev).unwrap();
        for r in 0..2 {
            assert!((c[(r, 0)] - c_prev[(r, 0)]).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_step_matches_scalar_loop() {
        let (d_x, d_h) = (3, 2);
        let p = random_lstm(4, d_x, d_h);
        let x = col(&[0.3, -0.8, 0.5]);
        let h_prev = col(&[0.1, -0.4]);
        let c_prev = col(&[0.9, -0.2]);
        let (h, c, _) = lstm_step(&p, &x, &h_prev, &c_prev).unwrap();
        let pre = |w: &Matrix<f64>, u: &Matrix<f64>, b: &Matrix<f64>, r: usize| {
            let mut s = b[(r, 0)];
            for k in 0..d_x {
                s += w[(r, k)] * x[(k, 0)];
            }
            for k in 0..d_h {
                s += u[(r, k)] * h_prev[(k, 0)];
            }
            s
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for r in 0..d_h {
            let i = sig(pre(&p.w_i, &p.u_i, &p.b_i, r));
            let f = sig(pre(&p.w_f, &p.u_f, &p.b_f, r));
            let o = sig(pre(&p.w_o, &p.u_o, &p.b_o, r));
            let g = pre(&p.w_g, &p.u_g, &p.b_g, r).tanh();
            let c_r = f * c_prev[(r, 0)] + i * g;
            assert!((c[(r, 0)] - c_r).abs() < 1e-14);
            assert!((h[(r, 0)] - o * c_r.tanh()).abs() < 1e-14);
        }
        assert!(lstm_step(&p, &col(&[1.0]), &h_prev, &c_prev).is_err());
    }

    #[test]
    fn gru_step_examples() {
        let p = GruParams::<f64>::zeros(2, 3);
        let x = col(&[1.0, -1.0]);
        let (h, _) = gru_step(&p, &x, &Matrix::zeros(3, 1)).unwrap();
        assert_eq!(h, Matrix::zeros(3, 1));
        let v = col(&[0.4, -1.2, 2.0]);
        let (h, _) = gru_step(&p, &x, &v).unwrap();
        assert_eq!(h, v.scale(0.5));

        let mut rng = Rng::new(8);
        let p = GruParams::<f64>::init(&mut rng, 2, 3);
        let h_prev = col(&[0.2, -0.5, 0.1]);
        let (h, _) = gru_step(&p, &x, &h_prev).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let aff = |w: &Matrix<f64>, u: &Matrix<f64>, b: &Matrix<f64>, hv: &[f64], r: usize| {
            b[(r, 0)] + (0..2).map(|k| w[(r, k)] * x[(k, 0)]).sum::<f64>()
                + (0..3).map(|k| u[(r, k)] * hv[k]).sum::<f64>()
        };
        let hp = h_prev.as_slice();
        let rv: Vec<f64> = (0..3).map(|r| sig(aff(&p.w_r, &p.u_r, &p.b_r, hp, r))).collect();
        let rh: Vec<f64> = (0..3).map(|k| rv[k] * hp[k]).collect();
        for r in 0..3 {
            let z = sig(aff(&p.w_z, &p.u_z, &p.b_z, hp, r));
            let cand = aff(&p.w_h, &p.u_h, &p.b_h, &rh, r).tanh();
            assert!((h[(r, 0)] - ((1.0 - z) * hp[r] + z * cand)).abs() < 1e-14);
        }
    }

    #[test]
    fn psug_gate_examples() {
        let p = PsugParams::<f64>::zeros(3, 2);
        let x = col(&[1.0, 2.0, 3.0]);
        let h = col(&[0.5, -0.5]);
        let g = psug_gates(&p, &x, &h).unwrap();
        assert_eq!(g.i, Matrix::filled(2, 1, 0.5));
        assert_eq!(g.f, Matrix::filled(2, 1, 0.5));
        assert_eq!(g.o, Matrix::filled(2, 1, 0.5));
        assert_eq!(g.g, Matrix::zeros(2, 1));

        let mut p = PsugParams::<f64>::zeros(3, 2);
        p.b = col(&[50.0, 50.0, -50.0, -50.0, 0.0, 0.0, 0.0, 0.0]);
        let g = psug_gates(&p, &x, &h).unwrap();
        assert!(g.i.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(g.f.as_slice().iter().all(|&v| v < 1e-15));
        assert_eq!(g.o, Matrix::filled(2, 1, 0.5));
        assert_eq!(g.g, Matrix::zeros(2, 1));

        let lstm = random_lstm(3, 3, 2);
        let stacked = PsugParams::from_lstm(&lstm);
        assert_eq!(psug_gates(&stacked, &x, &h).unwrap(), gates_of(&lstm, &x, &h).unwrap());
    }

    #[test]
    fn psug_trajectory_is_bit_exact() {
        for seed in 0..10 {
            let lstm = random_lstm(seed, 3, 4);
            let psug = PsugParams::from_lstm(&lstm);
            let (mut h1, mut c1) = (Matrix::zeros(4, 1), Matrix::zeros(4, 1));
            let (mut h2, mut c2) = (h1.clone(), c1.clone());
            for x in random_seq(seed, 12, 3) {
                (h1, c1, _) = lstm_step(&lstm, &x, &h1, &c1).unwrap();
                (h2, c2, _) = lstm_step(&psug, &x, &h2, &c2).unwrap();
                assert_eq!((&h1, &c1), (&h2, &c2));
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let block = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(pool_block(&block, Pooling::Mean).unwrap(), col(&[2.0, 4.0]));
        assert_eq!(pool_block(&block, Pooling::Max).unwrap(), col(&[3.0, 5.0]));
        assert_eq!(pool_block(&block, Pooling::MeanMax).unwrap(), col(&[2.0, 4.0, 3.0, 5.0]));
        assert!(matches!(
            pool_block(&Matrix::<f64>::zeros(0, 2), Pooling::Mean),
            Err(Error::EmptyBlock)
        ));
        for (m, w) in [(Pooling::Mean, 2), (Pooling::Max, 2), (Pooling::MeanMax, 4)] {
            assert_eq!(m.width(2), w);
            assert_eq!(m.to_string().parse::<Pooling>().unwrap(), m);
        }
    }

    #[test]
    fn block_summary_examples() {
        let pooled = col(&[0.3, -0.7]);
        let mut sp = SkipParams::<f64>::zeros(2, Pooling::Mean);
        sp.w_p = Matrix::identity(2);
        assert_eq!(block_summary(&sp, &pooled).unwrap(), pooled);
        sp.w_p = Matrix::zeros(2, 2);
        sp.b_p = col(&[1.5, 2.5]);
        assert_eq!(block_summary(&sp, &pooled).unwrap(), sp.b_p);
        let sp = SkipParams::<f64>::init(&mut Rng::new(2), 2, Pooling::MeanMax);
        let pooled = col(&[0.1, 0.2, 0.3, 0.4]);
        let s = block_summary(&sp, &pooled).unwrap();
        for r in 0..2 {
            let want = sp.b_p[(r, 0)] + (0..4).map(|k| sp.w_p[(r, k)] * pooled[(k, 0)]).sum::<f64>();
            assert!((s[(r, 0)] - want).abs() < 1e-15);
        }
        assert!(block_summary(&sp, &col(&[1.0, 2.0])).is_err());
    }

    fn run_summary(
        p: &PsugParams<f64>,
        sp: &SkipParams<f64>,
        xs: &[Matrix<f64>],
        k: usize,
        pooling: Pooling,
    ) -> Vec<QLState<f64>> {
        let mut st = QLState::new(p.hidden_dim());
        let mut out = Vec::new();
        for x in xs {
            let (_, next, _) = ql_step_summary(p, sp, &st, x, k, pooling).unwrap();
            out.push(next.clone());
            st = next;
        }
        out
    }

    #[test]
    fn summary_skip_off_matches_plain_cell() {
        let lstm = random_lstm(5, 3, 4);
        let p = PsugParams::from_lstm(&lstm);
        let xs = random_seq(5, 9, 3);
        let sp = SkipParams::init(&mut Rng::new(1), 4, Pooling::Mean);
        let long_k = run_summary(&p, &sp, &xs, 10, Pooling::Mean);
        let zero = run_summary(&p, &SkipParams::zeros(4, Pooling::Mean), &xs, 3, Pooling::Mean);
        let (mut h, mut c) = (Matrix::zeros(4, 1), Matrix::zeros(4, 1));
        for (t, x) in xs.iter().enumerate() {
            (h, c, _) = lstm_step(&lstm, x, &h, &c).unwrap();
            assert_eq!((&long_k[t].h, &long_k[t].c), (&h, &c));
            assert_eq!((&zero[t].h, &zero[t].c), (&h, &c));
        }
        let mut st = QLState::new(4);
        for x in &xs {
            st = ql_step_carry(&p, &st, x, 10).unwrap().1;
        }
        assert_eq!((&st.h, &st.c), (&h, &c));
    }

    #[test]
    fn boundary_jacobian_is_identity() {
        let p = PsugParams::from_lstm(&random_lstm(6, 2, 3));
        let sp = SkipParams::init(&mut Rng::new(6), 3, Pooling::Mean);
        let xs = random_seq(6, 4, 2);
        for j in 0..3 {
            let c_at_boundary = |b: &Matrix<f64>| {
                let mut sp = sp.clone();
                sp.b_p = b.clone();
                run_summary(&p, &sp, &xs[..2], 2, Pooling::Mean)[1].c[(j, 0)]
            };
            let row = fd_gradient(c_at_boundary, &sp.b_p, 1e-6).unwrap();
            for i in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((row[(i, 0)] - want).abs() < 1e-6, "({j},{i}) = {}", row[(i, 0)]);
            }
        }
    }

    #[test]
    fn carry_branches() {
        let p = PsugParams::from_lstm(&random_lstm(7, 2, 2));
        let x = col(&[0.5, -0.5]);
        let mut st = QLState::new(2);
        st.c_long = col(&[0.3, 0.3]);
        let (h, next, cache) = ql_step_carry(&p, &st, &x, 2).unwrap();
        assert!(!cache.boundary);
        assert_eq!(cache.c_star, cache.cell.c);
        assert_eq!(next.c_long, st.c_long);
        assert_eq!(h, cache.cell.gates.emit(&cache.cell.c).unwrap());

        let (_, next, cache) = ql_step_carry(&p, &QLState::new(2), &x, 1).unwrap();
        assert!(cache.boundary);
        assert_eq!(cache.c_star, cache.cell.c);
        assert_eq!(next.c_long, cache.cell.c);
        assert!(ql_step_carry(&p, &st, &x, 0).is_err());
    }

    #[test]
    fn carry_matches_scalar_unroll() {
        let mut lstm = LstmParams::<f64>::zeros(1, 1);
        let vals = [0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2, -0.1, 0.05, 0.15, -0.25, 0.35];
        let tensors = lstm.tensors_mut();
        for ((_, m), v) in tensors.into_iter().zip(vals) {
            m[(0, 0)] = v;
        }
        let (wi, wf, wo, wg) = (0.3, -0.2, 0.5, 0.1);
        let (ui, uf, uo, ug) = (-0.4, 0.6, 0.2, -0.1);
        let (bi, bf, bo, bg) = (0.05, 0.15, -0.25, 0.35);
        let p = PsugParams::from_lstm(&lstm);
        let xs = [0.8, -1.1];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let step = |x: f64, h: f64| {
            (
                sig(wi * x + ui * h + bi),
                sig(wf * x + uf * h + bf),
                sig(wo * x + uo * h + bo),
                (wg * x + ug * h + bg).tanh(),
            )
        };
        let (i1, f1, o1, g1) = step(xs[0], 0.0);
        let c1 = f1 * 0.0 + i1 * g1;
        let long1 = c1;
        let h1 = o1 * long1.tanh();
        let (i2, f2, o2, g2) = step(xs[1], h1);
        let c2 = f2 * c1 + i2 * g2;
        let star2 = c2 + long1;
        let h2 = o2 * star2.tanh();

        let mut st = QLState::new(1);
        let mut hs = Vec::new();
        for &x in &xs {
            let (h, next, _) = ql_step_carry(&p, &st, &col(&[x]), 1).unwrap();
            hs.push(h[(0, 0)]);
            st = next;
        }
        assert!((hs[0] - h1).abs() < 1e-15);
        assert!((hs[1] - h2).abs() < 1e-15);
        assert!((st.c_long[(0, 0)] - star2).abs() < 1e-15);
        assert!((st.c[(0, 0)] - c2).abs() < 1e-15);
    }

    #[test]
    fn bilstm_examples() {
        let fwd = random_lstm(9, 2, 3);
        let bwd = random_lstm(10, 2, 3);
        let xs = random_seq(9, 5, 2);
        let out = bilstm_forward(&fwd, &bwd, &xs).unwrap();
        assert!(out.iter().all(|o| o.shape() == (6, 1)));

        let zero = LstmParams::<f64>::zeros(2, 3);
        let z = bilstm_forward(&zero, &zero, &vec![Matrix::zeros(2, 1); 4]).unwrap();
        assert!(z.iter().all(|o| o.as_slice().iter().all(|&v| v == 0.0)));

        let rev: Vec<_> = xs.iter().rev().cloned().collect();
        let swapped = bilstm_forward(&bwd, &fwd, &rev).unwrap();
        let n = xs.len();
        for t in 0..n {
            let a = &out[n - 1 - t];
            let b = &swapped[t];
            assert_eq!(a.slice_rows(0, 3), b.slice_rows(3, 6));
            assert_eq!(a.slice_rows(3, 6), b.slice_rows(0, 3));
        }
        assert!(bilstm_forward(&fwd, &bwd, &[]).is_err());
    }

    #[test]
    fn forget_chain_decays_geometrically() {
        for (b_f, f) in [(logit(0.5f64), 0.5f64), (logit(0.9), 0.9), (50.0, 1.0)] {
            let mut p = LstmParams::<f64>::zeros(2, 3);
            p.b_f = Matrix::filled(3, 1, b_f);
            p.b_i = Matrix::filled(3, 1, -50.0);
            let xs = random_seq(1, 20, 2);
            for steps in [1usize, 5, 20] {
                for j in 0..3 {
                    let end = |c0: &Matrix<f64>| {
                        let (mut h, mut c) = (Matrix::zeros(3, 1), c0.clone());
                        for x in &xs[..steps] {
                            (h, c, _) = lstm_step(&p, x, &h, &c).unwrap();
                        }
                        c[(j, 0)]
                    };
                    let row = fd_gradient(end, &col(&[0.2, -0.1, 0.4]), 1e-5).unwrap();
                    for i in 0..3 {
                        let want = if i == j { f.powi(steps as i32) } else { 0.0 };
                        assert!((row[(i, 0)] - want).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn count_examples() {
        let spec = |arch, d_emb, d_h| ModelSpec::new(arch, 50_257, d_emb, d_h, 2);
        assert_eq!(count_cell_params(&spec(Arch::Lstm, 512, 512)).unwrap().enumerated, 2_099_200);
        assert_eq!(count_cell_params(&spec(Arch::Gru, 512, 512)).unwrap().enumerated, 1_574_400);
        assert_eq!(count_cell_params(&spec(Arch::PsugOnly, 256, 384)).unwrap().enumerated, 984_576);
        let psug = count_cell_params(&spec(Arch::PsugOnly, 256, 384)).unwrap().enumerated;
        let ql = count_cell_params(&spec(Arch::QlFull, 256, 384)).unwrap().enumerated;
        assert_eq!(ql, psug + 384 * 384 + 384);
    }

    proptest! {
        #[test]
        fn counts_agree_on_grid(d_x in 1usize..40, d_h in 1usize..40, a in 0usize..6, pool in 0usize..3) {
            let mut s = ModelSpec::new(Arch::ALL[a], 10, d_x, d_h, 2);
            s.pooling = [Pooling::Mean, Pooling::Max, Pooling::MeanMax][pool];
            let c = count_cell_params(&s).unwrap();
            prop_assert_eq!(c.enumerated, c.closed_form);
        }

        #[test]
        fn gate_ranges(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 3)) {
            let p = random_lstm(seed, 3, 4);
            let h = Rng::new(seed).uniform_matrix(4, 1, 1.0);
            let g = gates_of(&p, &col(&x), &h).unwrap();
            for m in [&g.i, &g.f, &g.o] {
                prop_assert!(m.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            prop_assert!(g.g.as_slice().iter().all(|&v| v > -1.0 && v < 1.0));
            let gp = GruParams::<f64>::init(&mut Rng::new(seed), 3, 4);
            let (_, cache) = gru_step(&gp, &col(&x), &h).unwrap();
            prop_assert!(cache.z.as_slice().iter().chain(cache.r.as_slice()).all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(sigmoid_scalar(x[0]) > 0.0);
        }

        #[test]
        fn block_buffer_bounded(seed in any::<u64>(), k in 1usize..6, len in 1usize..20) {
            let p = PsugParams::from_lstm(&random_lstm(seed, 2, 3));
            let sp = SkipParams::init(&mut Rng::new(seed), 3, Pooling::Max);
            let states = run_summary(&p, &sp, &random_seq(seed, len, 2), k, Pooling::Max);
            for st in &states {
                prop_assert!(st.block_buffer.len() < k);
                prop_assert_eq!(st.block_buffer.len(), st.t % k);
            }
        }
    }
}
