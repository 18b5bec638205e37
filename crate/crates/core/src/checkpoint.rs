//! Plain-text model checkpoints.
//!
//! ```text
//! qlrnn-checkpoint 1
//! [spec]
//! arch = ql_full
//! ...
//! [init]
//! seed = 42
//! scheme = uniform_inv_sqrt_fan
//! forget_bias = 0.0
//! [tensors]
//! embedding 257 16
//! <one line of space-separated values per row>
//! ...
//! ```
//!
//! Values are written in shortest round-trip form, so an `f64` model is
//! restored bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{set_spec_key, spec_entries};
use crate::error::{Error, Result};
use crate::network::{InitRecord, Model, ModelSpec};
use crate::numerics::Scalar;

const MAGIC: &str = "qlrnn-checkpoint 1";

pub fn to_text<T: Scalar>(model: &Model<T>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}\n[spec]");
    for (k, v) in spec_entries(&model.spec) {
        let _ = writeln!(out, "{k} = {v}");
    }
    let init = &model.init;
    let _ = writeln!(
        out,
        "[init]\nseed = {}\nscheme = {}\nforget_bias = {:?}\n[tensors]",
        init.seed, init.scheme, init.forget_bias
    );
    for (name, m) in model.params.tensors() {
        let _ = writeln!(out, "{name} {} {}", m.rows(), m.cols());
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{:?}", v.as_f64())).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        line,
        msg: msg.into(),
    }
}

pub fn from_text<T: Scalar>(text: &str) -> Result<Model<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")));

    let (n, magic) = next("header")?;
    if magic != MAGIC {
        return Err(err(n, format!("bad header `{magic}`")));
    }
    let (n, l) = next("[spec]")?;
    if l != "[spec]" {
        return Err(err(n, "expected [spec]"));
    }
    let mut spec = ModelSpec::new(crate::network::Arch::Lstm, 2, 1, 1, 2);
    let mut init = InitRecord {
        seed: 0,
        scheme: String::new(),
        forget_bias: 0.0,
    };
    let mut section = "spec";
    loop {
        let (n, l) = next("[tensors]")?;
        match l {
            "[init]" => section = "init",
            "[tensors]" => break,
            _ => {
                let (k, v) = l
                    .split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| err(n, format!("expected `key = value`, got `{l}`")))?;
                let bad = |e: String| err(n, format!("{k}: {e}"));
                match (section, k) {
                    ("spec", _) => {
                        if !set_spec_key(&mut spec, k, v).map_err(|e| bad(e.to_string()))? {
                            return Err(bad("unknown spec key".into()));
                        }
                    }
                    ("init", "seed") => init.seed = v.parse().map_err(|_| bad(v.into()))?,
                    ("init", "scheme") => init.scheme = v.to_string(),
                    ("init", "forget_bias") => init.forget_bias = v.parse().map_err(|_| bad(v.into()))?,
                    _ => return Err(bad("unknown key".into())),
                }
            }
        }
    }
    spec.validate().map_err(|e| err(0, e.to_string()))?;
    let mut model = Model::<T>::zeros(spec)?;
    model.init = init;
    for (name, m) in model.params.tensors_mut() {
        let (n, header) = next(&format!("tensor {name}"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let shape = match parts.as_slice() {
            [nm, r, c] if *nm == name => (
                r.parse::<usize>().map_err(|_| err(n, "bad row count"))?,
                c.parse::<usize>().map_err(|_| err(n, "bad column count"))?,
            ),
            _ => return Err(err(n, format!("expected tensor `{name}`, got `{header}`"))),
        };
        if shape != m.shape() {
            return Err(err(n, format!("{name} has shape {shape:?}, spec requires {:?}", m.shape())));
        }
        for r in 0..shape.0 {
            let (n, row) = next(&format!("row {r} of {name}"))?;
            let vals: Vec<&str> = row.split_whitespace().collect();
            if vals.len() != shape.1 {
                return Err(err(n, format!("{name} row {r} has {} values, expected {}", vals.len(), shape.1)));
            }
            for (c, v) in vals.iter().enumerate() {
                let x: f64 = v.parse().map_err(|_| err(n, format!("bad number `{v}`")))?;
                m[(r, c)] = T::of(x);
            }
        }
    }
    if let Some((n, extra)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(err(n, format!("trailing content `{extra}`")));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_text(&std::fs::read_to_string(path)?)
}
