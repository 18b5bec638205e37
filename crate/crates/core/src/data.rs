//! Byte-level tokenisation, batching, JSONL loading and synthetic
//! long-range tasks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Padding id; byte values occupy `0..=255`.
pub const PAD_ID: usize = 256;
pub const BYTE_VOCAB: usize = 257;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Option<usize>,
    pub raw_text: Option<String>,
}

impl Example {
    pub fn labelled(tokens: Vec<usize>, label: usize) -> Self {
        Example {
            tokens,
            label: Some(label),
            raw_text: None,
        }
    }
}

/// Right-padded batch; `lengths[i]` is the unpadded length of row `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Row `i` without padding.
    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i][..self.lengths[i]]
    }
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::TokenOutOfRange {
                token: id,
                vocab: 256,
            })
        })
        .collect()
}

/// Seeded shuffle then split; the first `round(ratio·n)` examples (clamped
/// so both sides are non-empty) form the training set.
pub fn split_train_val(
    examples: &[Example],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let n = examples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 examples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, &[0x5117]).shuffle(&mut order);
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Groups examples into batches, truncating each sequence to its first
/// `max_len` tokens and right-padding with `pad_id`. With a seed the
/// example order is shuffled first; without one it is preserved.
pub fn make_batches(
    examples: &[Example],
    max_len: usize,
    batch_size: usize,
    pad_id: usize,
    seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if max_len == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "max_len and batch_size must be positive (got {max_len}, {batch_size})"
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(s) = seed {
        Rng::new(s).shuffle(&mut order);
    }
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut batch = Batch {
            tokens: Vec::with_capacity(chunk.len()),
            lengths: Vec::with_capacity(chunk.len()),
            labels: Vec::with_capacity(chunk.len()),
        };
        for &i in chunk {
            let ex = &examples[i];
            if ex.tokens.is_empty() {
                return Err(Error::EmptySequence);
            }
            let len = ex.tokens.len().min(max_len);
            let mut row = ex.tokens[..len].to_vec();
            row.resize(max_len, pad_id);
            batch.tokens.push(row);
            batch.lengths.push(len);
            batch.labels.push(ex.label);
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Reads `{"text": ..., "label": ...}` lines in order; blank lines are
/// skipped and every line must carry a non-negative integer label.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    read_jsonl(path, true)
}

/// Like [`load_jsonl`] but `label` is optional (language-modelling text).
pub fn load_jsonl_unlabelled(path: &Path) -> Result<Vec<Example>> {
    read_jsonl(path, false)
}

fn read_jsonl(path: &Path, require_label: bool) -> Result<Vec<Example>> {
    let file = File::open(path)?;
    let err = |line: usize, msg: String| Error::Data {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| err(n, format!("malformed JSON: {e}")))?;
        let text = v
            .get("text")
            .ok_or_else(|| err(n, "missing `text` field".into()))?
            .as_str()
            .ok_or_else(|| err(n, "`text` must be a string".into()))?;
        if text.is_empty() {
            return Err(err(n, "empty `text`".into()));
        }
        let label = match v.get("label") {
            None | Some(Value::Null) if require_label => {
                return Err(err(n, "missing `label` field".into()))
            }
            None | Some(Value::Null) => None,
            Some(l) => Some(
                l.as_u64()
                    .ok_or_else(|| err(n, format!("invalid label {l}")))? as usize,
            ),
        };
        out.push(Example {
            tokens: tokenize_bytes(text.as_bytes()),
            label,
            raw_text: Some(text.to_string()),
        });
    }
    Ok(out)
}

/// Writes examples as JSONL. Token sequences that are not valid UTF-8 are
/// written lossily.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        let text = match &ex.raw_text {
            Some(t) => t.clone(),
            None => String::from_utf8_lossy(&detokenize(&ex.tokens)?).into_owned(),
        };
        let mut obj = serde_json::Map::new();
        obj.insert("text".into(), Value::String(text));
        if let Some(l) = ex.label {
            obj.insert("label".into(), Value::from(l));
        }
        writeln!(w, "{}", Value::Object(obj))?;
    }
    w.flush()?;
    Ok(())
}

/// Position of the class marker in a distant-token sequence.
pub fn distant_marker_position(len: usize, gap: usize) -> usize {
    len - 1 - gap
}

/// Binary task whose label is a single marker byte (`'0'` or `'1'`) placed
/// `gap` positions before the end of a sequence of lowercase noise bytes.
/// Labels alternate, so the set is exactly balanced for even `n`.
pub fn gen_distant_token_task(n: usize, len: usize, gap: usize, seed: u64) -> Result<Vec<Example>> {
    if len == 0 || gap >= len {
        return Err(Error::InvalidArgument(format!(
            "gap {gap} must be smaller than sequence length {len}"
        )));
    }
    let mut rng = Rng::derive(seed, &[0xD157]);
    let pos = distant_marker_position(len, gap);
    Ok((0..n)
        .map(|i| {
            let label = i % 2;
            let mut tokens: Vec<usize> = (0..len).map(|_| b'a' as usize + rng.below(26)).collect();
            tokens[pos] = b'0' as usize + label;
            Example::labelled(tokens, label)
        })
        .collect())
}

/// Number of value levels in the adding problem; level `q` encodes `q / 46`.
pub const ADDING_LEVELS: usize = 47;
pub const ADDING_PLAIN_BASE: usize = 33;
pub const ADDING_MARKED_BASE: usize = 80;

pub fn adding_value(level: usize) -> f64 {
    level as f64 / (ADDING_LEVELS - 1) as f64
}

/// Decodes an adding-problem token into `(value, marked)`.
pub fn decode_adding_token(token: usize) -> Option<(f64, bool)> {
    if (ADDING_PLAIN_BASE..ADDING_PLAIN_BASE + ADDING_LEVELS).contains(&token) {
        Some((adding_value(token - ADDING_PLAIN_BASE), false))
    } else if (ADDING_MARKED_BASE..ADDING_MARKED_BASE + ADDING_LEVELS).contains(&token) {
        Some((adding_value(token - ADDING_MARKED_BASE), true))
    } else {
        None
    }
}

/// Classification form of the adding problem: each token carries a
/// quantised value and a marker flag, one marker falls in each half, and
/// the label is whether the two marked values sum to more than 1. Sums of
/// exactly 1 are never generated. Labels alternate.
pub fn gen_adding_problem(n: usize, len: usize, seed: u64) -> Result<Vec<Example>> {
    if len < 2 {
        return Err(Error::InvalidArgument(format!(
            "adding problem needs length at least 2, got {len}"
        )));
    }
    let mut rng = Rng::derive(seed, &[0xADD]);
    let levels = ADDING_LEVELS;
    let top = ADDING_LEVELS - 1;
    let half = len / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (qa, qb) = loop {
            let qa = rng.below(levels);
            let qb = rng.below(levels);
            let sum = qa + qb;
            if sum != top && usize::from(sum > top) == label {
                break (qa, qb);
            }
        };
        let mut tokens: Vec<usize> = (0..len)
            .map(|_| ADDING_PLAIN_BASE + rng.below(levels))
            .collect();
        let pa = rng.below(half);
        let pb = half + rng.below(len - half);
        tokens[pa] = ADDING_MARKED_BASE + qa;
        tokens[pb] = ADDING_MARKED_BASE + qb;
        out.push(Example::labelled(tokens, label));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_tokenisation() {
        assert_eq!(tokenize_bytes(b"AB"), vec![65, 66]);
        assert!(tokenize_bytes(b"").is_empty());
        assert_eq!(detokenize(&[72, 105]).unwrap(), b"Hi");
        assert!(matches!(
            detokenize(&[PAD_ID]),
            Err(Error::TokenOutOfRange { token: 256, .. })
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ex: Vec<Example> = (0..100).map(|i| Example::labelled(vec![i], i % 2)).collect();
        let (tr, va) = split_train_val(&ex, 0.8, 42).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let (tr2, va2) = split_train_val(&ex, 0.8, 42).unwrap();
        assert_eq!((tr, va), (tr2, va2));
        assert!(split_train_val(&ex, 1.0, 0).is_err());
        assert!(split_train_val(&ex[..1], 0.5, 0).is_err());
    }

    #[test]
    fn batching_truncates_and_pads() {
        let long = Example::labelled((0..600).map(|i| i % 256).collect(), 1);
        let b = make_batches(&[long], 512, 16, PAD_ID, None).unwrap();
        assert_eq!(b[0].tokens[0].len(), 512);
        assert_eq!(b[0].lengths[0], 512);
        assert_eq!(b[0].tokens[0][..], (0..512).map(|i| i % 256).collect::<Vec<_>>()[..]);

        let short = Example::labelled(vec![1, 2, 3], 0);
        let b = make_batches(&[short], 8, 4, PAD_ID, None).unwrap();
        assert_eq!(b[0].tokens[0], vec![1, 2, 3, 256, 256, 256, 256, 256]);
        assert_eq!(b[0].sequence(0), &[1, 2, 3]);
        assert!(make_batches(&[], 8, 0, PAD_ID, None).is_err());
    }

    #[test]
    fn batch_partition() {
        let ten: Vec<Example> = (0..10).map(|i| Example::labelled(vec![i], 0)).collect();
        let sizes: Vec<usize> = make_batches(&ten, 5, 4, PAD_ID, None).unwrap().iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let ex: Vec<Example> = (0..37).map(|i| Example::labelled(vec![i + 1], 0)).collect();
        let batches = make_batches(&ex, 4, 16, PAD_ID, Some(3)).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![16, 16, 5]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.tokens.iter().map(|r| r[0])).collect();
        seen.sort();
        assert_eq!(seen, (1..=37).collect::<Vec<_>>());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ex = vec![
            Example {
                tokens: tokenize_bytes(b"good film"),
                label: Some(1),
                raw_text: Some("good film".into()),
            },
            Example {
                tokens: tokenize_bytes(b"bad"),
                label: Some(0),
                raw_text: Some("bad".into()),
            },
        ];
        write_jsonl(&path, &ex).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), ex);

        let bad = dir.path().join("bad.jsonl");
        let mut f = File::create(&bad).unwrap();
        writeln!(f, r#"{{"text": "ok", "label": 0}}"#).unwrap();
        writeln!(f, r#"{{"text": "x", "label": -1}}"#).unwrap();
        drop(f);
        match load_jsonl(&bad) {
            Err(Error::Data { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("label"));
            }
            other => panic!("expected data error, got {other:?}"),
        }
        std::fs::write(&bad, "{\"text\": \"no label\"}\n").unwrap();
        match load_jsonl(&bad) {
            Err(Error::Data { line: 1, msg, .. }) => assert!(msg.contains("label")),
            other => panic!("expected data error, got {other:?}"),
        }
        assert_eq!(load_jsonl_unlabelled(&bad).unwrap()[0].label, None);
        std::fs::write(&bad, "{not json\n").unwrap();
        assert!(matches!(load_jsonl(&bad), Err(Error::Data { line: 1, .. })));
    }

    #[test]
    fn distant_token_layout() {
        let ex = gen_distant_token_task(10, 64, 48, 7).unwrap();
        for e in &ex {
            let pos = distant_marker_position(64, 48);
            assert_eq!(e.tokens[pos], b'0' as usize + e.label.unwrap());
            for (t, &tok) in e.tokens.iter().enumerate() {
                if t != pos {
                    assert!((b'a' as usize..=b'z' as usize).contains(&tok));
                }
            }
        }
        assert_eq!(ex.iter().filter(|e| e.label == Some(1)).count(), 5);
        assert!(gen_distant_token_task(4, 8, 8, 0).is_err());
    }

    #[test]
    fn adding_labels_match_decoded_sum() {
        let ex = gen_adding_problem(200, 30, 11).unwrap();
        for e in &ex {
            let marked: Vec<f64> = e
                .tokens
                .iter()
                .filter_map(|&t| decode_adding_token(t))
                .filter(|(_, m)| *m)
                .map(|(v, _)| v)
                .collect();
            assert_eq!(marked.len(), 2);
            assert_eq!(e.label, Some(usize::from(marked[0] + marked[1] > 1.0)));
            assert!(e.tokens.iter().all(|&t| t < BYTE_VOCAB));
        }
        assert_eq!(ex.iter().filter(|e| e.label == Some(1)).count(), 100);
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(detokenize(&tokenize_bytes(&bytes)).unwrap(), bytes);
        }
    }
}
