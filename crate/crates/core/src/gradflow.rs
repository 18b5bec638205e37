//! Gradient flow across time: how strongly the memory state at the end of
//! a sequence depends on the memory state `d` steps earlier, and how large
//! the loss gradient is at each input position.
//!
//! The memory state is the cell state the hidden output is read from (`c`
//! after any skip; `c*` for the carry variant), the hidden state for GRU,
//! and the forward direction's cell for BiLSTM.

use std::fmt::Write as _;

use crate::cells::{
    block_summary, gated_cell, gru_step, pool_block, GateTransform, LstmParams, PsugParams, SkipParams,
    SkipVariant,
};
use crate::error::{Error, Result};
use crate::network::{backward_full, embed, Arch, Mode, Model, ModelSpec, Recurrent};
use crate::numerics::{logit, Matrix, Rng};
use crate::training::example_loss;

/// Bias that saturates a sigmoid to 1 (or, negated, to 0) in `f64`.
pub const SATURATE: f64 = 50.0;

/// Finite-difference step for state Jacobians.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileRow {
    pub distance: usize,
    /// `‖∂Loss/∂x_t‖₂` at `t = L − 1 − distance`.
    pub input_grad_norm: f64,
    /// `‖∂m_{L−1}/∂m_t‖_F / √d_h`; equals 1 at distance 0.
    pub memory_jacobian_norm: f64,
}

/// Hidden outputs and memory states after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub hidden: Vec<Matrix<f64>>,
    pub memory: Vec<Matrix<f64>>,
}

/// Additive perturbation of the memory state right after step `t`,
/// applied before any skip fires on that step.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub t: usize,
    pub delta: &'a Matrix<f64>,
}

fn bump(m: &Matrix<f64>, probe: Option<Probe<'_>>, t: usize) -> Result<Matrix<f64>> {
    match probe {
        Some(p) if p.t == t => m.add(p.delta),
        _ => Ok(m.clone()),
    }
}

fn gated_trajectory<G: GateTransform<f64>>(
    p: &G,
    skip: Option<&SkipParams<f64>>,
    spec: &ModelSpec,
    xs: &[Matrix<f64>],
    probe: Option<Probe<'_>>,
) -> Result<Trajectory> {
    let d = p.hidden_dim();
    let (mut h, mut c) = (Matrix::zeros(d, 1), Matrix::zeros(d, 1));
    let mut c_long = Matrix::zeros(d, 1);
    let mut buffer: Vec<Vec<f64>> = Vec::new();
    let mut out = Trajectory {
        hidden: Vec::with_capacity(xs.len()),
        memory: Vec::with_capacity(xs.len()),
    };
    let last = xs.len() - 1;
    for (t, x) in xs.iter().enumerate() {
        let cell = gated_cell(p, x, &h, &c)?;
        let c_t = bump(&cell.c, probe, t)?;
        let boundary = (t + 1) % spec.leap == 0;
        let read = if !spec.has_skip() {
            c = c_t.clone();
            c_t
        } else if spec.skip_variant == SkipVariant::Carry {
            c = c_t.clone();
            if boundary {
                c_long = c_t.add(&c_long)?;
                c_long.clone()
            } else {
                c_t
            }
        } else {
            let sp = skip.ok_or_else(|| Error::InvalidSpec("summary skip without projection".into()))?;
            buffer.push(cell.gates.emit(&c_t)?.into_vec());
            if boundary || (spec.flush_partial && t == last) {
                let block = Matrix::from_rows(&buffer)?;
                buffer.clear();
                let s = block_summary(sp, &pool_block(&block, spec.pooling)?)?;
                c = c_t.add(&s)?;
            } else {
                c = c_t;
            }
            c.clone()
        };
        h = cell.gates.emit(&read)?;
        out.hidden.push(h.clone());
        out.memory.push(read);
    }
    Ok(out)
}

/// Re-runs the recurrent layer, optionally perturbing one memory state.
pub fn trajectory(model: &Model<f64>, tokens: &[usize], probe: Option<Probe<'_>>) -> Result<Trajectory> {
    let xs = embed(model, tokens)?;
    let spec = &model.spec;
    match &model.params.recurrent {
        Recurrent::Lstm(p) => gated_trajectory(p, model.params.skip.as_ref(), spec, &xs, probe),
        Recurrent::Psug(p) => gated_trajectory(p, model.params.skip.as_ref(), spec, &xs, probe),
        Recurrent::BiLstm { fwd, .. } => {
            let mut plain = spec.clone();
            plain.arch = Arch::Lstm;
            gated_trajectory(fwd, None, &plain, &xs, probe)
        }
        Recurrent::Gru(p) => {
            let mut h = Matrix::zeros(p.hidden_dim(), 1);
            let mut out = Trajectory {
                hidden: Vec::new(),
                memory: Vec::new(),
            };
            for (t, x) in xs.iter().enumerate() {
                h = bump(&gru_step(p, x, &h)?.0, probe, t)?;
                out.hidden.push(h.clone());
                out.memory.push(h.clone());
            }
            Ok(out)
        }
    }
}

/// Central-difference Jacobian of the final memory state with respect to
/// the memory state after step `t`.
pub fn memory_jacobian(model: &Model<f64>, tokens: &[usize], t: usize) -> Result<Matrix<f64>> {
    if t >= tokens.len() {
        return Err(Error::InvalidArgument(format!("step {t} beyond sequence of {}", tokens.len())));
    }
    let d = model.spec.d_h;
    let mut jac = Matrix::zeros(d, d);
    for j in 0..d {
        let mut delta = Matrix::zeros(d, 1);
        delta[(j, 0)] = FD_STEP;
        let up = trajectory(model, tokens, Some(Probe { t, delta: &delta }))?;
        delta[(j, 0)] = -FD_STEP;
        let down = trajectory(model, tokens, Some(Probe { t, delta: &delta }))?;
        let (a, b) = (up.memory.last().unwrap(), down.memory.last().unwrap());
        for i in 0..d {
            jac[(i, j)] = (a[(i, 0)] - b[(i, 0)]) / (2.0 * FD_STEP);
        }
    }
    Ok(jac)
}

/// Per-distance gradient norms for one sequence, ordered by distance.
pub fn gradient_flow_profile(model: &Model<f64>, tokens: &[usize], label: Option<usize>) -> Result<Vec<ProfileRow>> {
    let out = example_loss(model, tokens, label, Mode::Eval, &mut Rng::new(0))?;
    let input_grads = backward_full(model, &out.cache, &out.dlogits)?.input_grads;
    let len = tokens.len();
    let scale = (model.spec.d_h as f64).sqrt();
    (0..len)
        .map(|distance| {
            let t = len - 1 - distance;
            Ok(ProfileRow {
                distance,
                input_grad_norm: input_grads[t].frobenius_norm(),
                memory_jacobian_norm: memory_jacobian(model, tokens, t)?.frobenius_norm() / scale,
            })
        })
        .collect()
}

fn clamp_lstm(p: &mut LstmParams<f64>, b_f: f64) {
    p.b_f.fill(b_f);
    p.b_i.fill(-SATURATE);
}

/// Forget-gate bias giving `σ(b) = f`, saturating at `f = 1`.
pub fn forget_bias_for(f: f64) -> f64 {
    if f >= 1.0 {
        SATURATE
    } else {
        logit(f)
    }
}

/// All-zero model with every forget gate held at `f` and the input gate
/// shut, so each memory coordinate evolves as `m_t = f·m_{t−1}`. For GRU
/// the update gate is held at `1 − f`. A summary projection is set to the
/// identity on the mean (or max) part of the pooled vector.
pub fn clamped_model(spec: ModelSpec, f: f64) -> Result<Model<f64>> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::InvalidArgument(format!("clamped forget value must lie in (0, 1], got {f}")));
    }
    let mut model = Model::<f64>::zeros(spec)?;
    let d = model.spec.d_h;
    let b_f = forget_bias_for(f);
    match &mut model.params.recurrent {
        Recurrent::Lstm(p) => clamp_lstm(p, b_f),
        Recurrent::BiLstm { fwd, bwd } => {
            clamp_lstm(fwd, b_f);
            clamp_lstm(bwd, b_f);
        }
        Recurrent::Psug(PsugParams { b, .. }) => {
            for r in 0..d {
                b[(r, 0)] = -SATURATE;
                b[(d + r, 0)] = b_f;
            }
        }
        Recurrent::Gru(p) => p.b_z.fill(if f >= 1.0 { -SATURATE } else { logit(1.0 - f) }),
    }
    if let Some(sp) = &mut model.params.skip {
        for r in 0..d {
            sp.w_p[(r, r)] = 1.0;
        }
    }
    model.init.scheme = format!("clamped_f={f}");
    Ok(model)
}

/// CSV with header `distance,norm` (plus `analytic` = `f^distance` when a
/// clamp value is given).
pub fn profile_csv(rows: &[ProfileRow], analytic_f: Option<f64>) -> String {
    let mut out = String::from(if analytic_f.is_some() {
        "distance,norm,analytic\n"
    } else {
        "distance,norm\n"
    });
    for r in rows {
        let _ = write!(out, "{},{:.12e}", r.distance, r.memory_jacobian_norm);
        if let Some(f) = analytic_f {
            let _ = write!(out, ",{:.12e}", f.powi(r.distance as i32));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::run_recurrent;

    fn tokens(len: usize) -> Vec<usize> {
        (0..len).map(|i| (i * 7 + 3) % 11).collect()
    }

    #[test]
    fn unperturbed_trajectory_matches_network() {
        for arch in Arch::ALL {
            for variant in [SkipVariant::Summary, SkipVariant::Carry] {
                let mut spec = ModelSpec::new(arch, 11, 3, 4, 2);
                spec.leap = 3;
                spec.skip_variant = variant;
                spec.flush_partial = true;
                let model = Model::<f64>::new(spec, 2).unwrap();
                let toks = tokens(8);
                let tr = trajectory(&model, &toks, None).unwrap();
                let (outs, _) = run_recurrent(&model, &embed(&model, &toks).unwrap()).unwrap();
                for (a, b) in tr.hidden.iter().zip(&outs) {
                    assert_eq!(a, &b.slice_rows(0, 4), "{arch} {variant}");
                }
            }
        }
    }

    #[test]
    fn clamped_decay_matches_power_law() {
        for f in [0.5, 0.9] {
            let model = clamped_model(ModelSpec::new(Arch::Lstm, 11, 3, 4, 2), f).unwrap();
            let rows = gradient_flow_profile(&model, &tokens(21), Some(0)).unwrap();
            for r in &rows {
                assert!((r.memory_jacobian_norm - f.powi(r.distance as i32)).abs() < 1e-4);
            }
        }
        let model = clamped_model(ModelSpec::new(Arch::Lstm, 11, 3, 4, 2), 1.0).unwrap();
        for r in gradient_flow_profile(&model, &tokens(21), Some(0)).unwrap() {
            assert!((r.memory_jacobian_norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn skip_path_strengthens_long_range_flow() {
        let k = 4;
        let spec = |arch| {
            let mut s = ModelSpec::new(arch, 11, 3, 4, 2);
            s.leap = k;
            s
        };
        let toks = tokens(3 * k);
        let ql = gradient_flow_profile(&clamped_model(spec(Arch::QlFull), 0.9).unwrap(), &toks, Some(0)).unwrap();
        let psug = gradient_flow_profile(&clamped_model(spec(Arch::PsugOnly), 0.9).unwrap(), &toks, Some(0)).unwrap();
        assert!(ql[2 * k].memory_jacobian_norm > psug[2 * k].memory_jacobian_norm);
    }

    #[test]
    fn csv_layout() {
        let rows = [ProfileRow {
            distance: 2,
            input_grad_norm: 0.0,
            memory_jacobian_norm: 0.81,
        }];
        let csv = profile_csv(&rows, Some(0.9));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("distance,norm,analytic"));
        let fields: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields[0], 2.0);
        assert!((fields[1] - fields[2]).abs() < 1e-12);
        assert!(profile_csv(&rows, None).starts_with("distance,norm\n"));
        assert!(clamped_model(ModelSpec::new(Arch::Lstm, 11, 3, 4, 2), 0.0).is_err());
    }
}
