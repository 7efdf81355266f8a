//! Parallel-corpus loading, padded batching, and a synthetic multi-language
//! task generator for desk-scale experiments.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{IdMatrix, Mask};
use crate::tokenizer::{Preprocessed, SubwordModel, PAD_ID};

/// One tokenized parallel sentence pair.
#[derive(Clone, Debug)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// A padded batch of parallel sentences. Row i of src and tgt are
/// translations of each other; masks are true exactly on non-pad positions.
#[derive(Clone, Debug)]
pub struct ParallelBatch {
    pub src_ids: IdMatrix,
    pub tgt_ids: IdMatrix,
    pub src_mask: Mask,
    pub tgt_mask: Mask,
    pub pair_label: (String, String),
}

impl ParallelBatch {
    pub fn batch_size(&self) -> usize {
        self.src_ids.rows
    }
}

/// Load and tokenize a line-aligned parallel corpus. Pairs where either
/// side is rejected by preprocessing are dropped; the count is returned.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    model_src: &SubwordModel,
    model_tgt: &SubwordModel,
    max_len: usize,
) -> Result<(Vec<Example>, usize)> {
    let src_text = std::fs::read_to_string(src_path)?;
    let tgt_text = std::fs::read_to_string(tgt_path)?;
    load_parallel_text(&src_text, &tgt_text, model_src, model_tgt, max_len)
}

pub fn load_parallel_text(
    src_text: &str,
    tgt_text: &str,
    model_src: &SubwordModel,
    model_tgt: &SubwordModel,
    max_len: usize,
) -> Result<(Vec<Example>, usize)> {
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
        });
    }
    let mut examples = Vec::new();
    let mut dropped = 0;
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        match (
            crate::tokenizer::preprocess_line(s, max_len),
            crate::tokenizer::preprocess_line(t, max_len),
        ) {
            (Preprocessed::Tokens(sw), Preprocessed::Tokens(tw)) => examples.push(Example {
                src: model_src.apply(&sw),
                tgt: model_tgt.apply(&tw),
            }),
            _ => dropped += 1,
        }
    }
    Ok((examples, dropped))
}

fn pad_rows(rows: &[&Vec<u32>]) -> (IdMatrix, Mask) {
    let b = rows.len();
    let t = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = vec![PAD_ID; b * t];
    let mut mask = vec![false; b * t];
    for (r, row) in rows.iter().enumerate() {
        for (c, &id) in row.iter().enumerate() {
            ids[r * t + c] = id;
            mask[r * t + c] = true;
        }
    }
    (IdMatrix::new(b, t, ids), Mask::new(b, t, mask))
}

/// Pad variable-length id rows into a rectangular matrix with its mask.
pub fn pad_to_matrix(rows: &[Vec<u32>]) -> (IdMatrix, Mask) {
    let refs: Vec<&Vec<u32>> = rows.iter().collect();
    pad_rows(&refs)
}

/// Build one padded batch directly from examples (used for dev/test sets).
pub fn batch_from_examples(examples: &[Example], pair_label: (String, String)) -> ParallelBatch {
    let srcs: Vec<&Vec<u32>> = examples.iter().map(|e| &e.src).collect();
    let tgts: Vec<&Vec<u32>> = examples.iter().map(|e| &e.tgt).collect();
    let (src_ids, src_mask) = pad_rows(&srcs);
    let (tgt_ids, tgt_mask) = pad_rows(&tgts);
    ParallelBatch {
        src_ids,
        tgt_ids,
        src_mask,
        tgt_mask,
        pair_label,
    }
}

/// Length-bucketed, seeded batching. Batches of fewer than 2 rows are
/// dropped (batch statistics of the distance loss need at least 2).
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    pair_label: (String, String),
) -> Result<Vec<ParallelBatch>> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    // Bucket by length before shuffling batch order, to limit pad waste.
    order.sort_by_key(|&i| (examples[i].src.len(), examples[i].tgt.len(), i));
    let mut groups: Vec<&[usize]> = order.chunks(batch_size).collect();
    if let Some(last) = groups.last() {
        if last.len() < 2 {
            groups.pop();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|g| {
            let batch: Vec<Example> = g.iter().map(|&i| examples[i].clone()).collect();
            batch_from_examples(&batch, pair_label.clone())
        })
        .collect())
}

/// Sequence-level transform applied to the shared payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Reverse,
    Shift(usize),
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => write!(f, "identity"),
            Transform::Reverse => write!(f, "reverse"),
            Transform::Shift(k) => write!(f, "shift-{}", k),
        }
    }
}

impl Transform {
    pub fn parse(s: &str) -> Result<Transform> {
        match s {
            "identity" => Ok(Transform::Identity),
            "reverse" => Ok(Transform::Reverse),
            _ => s
                .strip_prefix("shift-")
                .and_then(|k| k.parse().ok())
                .map(Transform::Shift)
                .ok_or_else(|| Error::Config(format!("unknown transform: {}", s))),
        }
    }

    fn apply(&self, payload: &[u32]) -> Vec<u32> {
        match self {
            Transform::Identity => payload.to_vec(),
            Transform::Reverse => payload.iter().rev().copied().collect(),
            Transform::Shift(k) => {
                let n = payload.len();
                (0..n).map(|i| payload[(i + k) % n]).collect()
            }
        }
    }
}

/// Spec for the three-way synthetic task: a shared payload sentence is
/// rendered through each language's symbol bijection, with languages B and
/// C additionally applying the sequence transform.
#[derive(Clone, Debug)]
pub struct SyntheticTaskSpec {
    pub vocab_size: u32,
    pub len_min: usize,
    pub len_max: usize,
    pub transform: Transform,
    pub seed: u64,
    /// When false every language uses the identity symbol mapping.
    pub shuffle_mappings: bool,
}

impl SyntheticTaskSpec {
    pub fn to_text(&self) -> String {
        format!(
            "vocab_size={}\nlen_min={}\nlen_max={}\ntransform={}\nseed={}\nshuffle_mappings={}\n",
            self.vocab_size, self.len_min, self.len_max, self.transform, self.seed, self.shuffle_mappings
        )
    }

    pub fn from_text(text: &str) -> Result<SyntheticTaskSpec> {
        let mut spec = SyntheticTaskSpec {
            vocab_size: 16,
            len_min: 4,
            len_max: 12,
            transform: Transform::Reverse,
            seed: 0,
            shuffle_mappings: true,
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad spec line: {}", line)))?;
            let (k, v) = (k.trim(), v.trim());
            macro_rules! parse_val {
                () => {
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad value for {}: {}", k, v)))?
                };
            }
            match k {
                "vocab_size" => spec.vocab_size = parse_val!(),
                "len_min" => spec.len_min = parse_val!(),
                "len_max" => spec.len_max = parse_val!(),
                "transform" => spec.transform = Transform::parse(v)?,
                "seed" => spec.seed = parse_val!(),
                "shuffle_mappings" => spec.shuffle_mappings = parse_val!(),
                other => return Err(Error::Config(format!("unknown spec key: {}", other))),
            }
        }
        Ok(spec)
    }
}

/// Three line-aligned corpora over languages A, B and C.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub c: Vec<String>,
}

fn render_symbol(s: u32) -> String {
    if s < 26 {
        char::from(b'a' + s as u8).to_string()
    } else {
        format!("s{}", s)
    }
}

fn bijection(vocab: u32, rng: &mut ChaCha8Rng, shuffle: bool) -> Vec<u32> {
    let mut map: Vec<u32> = (0..vocab).collect();
    if shuffle {
        map.shuffle(rng);
    }
    map
}

/// Generate `n` multi-way parallel sentences. Identical seeds produce
/// identical corpora.
pub fn synth_generate(spec: &SyntheticTaskSpec, n: usize) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Language A keeps the raw payload order; B and C relabel and transform.
    let map_a: Vec<u32> = (0..spec.vocab_size).collect();
    let map_b = bijection(spec.vocab_size, &mut rng, spec.shuffle_mappings);
    let map_c = bijection(spec.vocab_size, &mut rng, spec.shuffle_mappings);

    let render = |payload: &[u32], map: &[u32]| -> String {
        payload
            .iter()
            .map(|&s| render_symbol(map[s as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut out = SynthCorpus {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let len = rng.gen_range(spec.len_min..=spec.len_max);
        let payload: Vec<u32> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        let transformed = spec.transform.apply(&payload);
        out.a.push(render(&payload, &map_a));
        out.b.push(render(&transformed, &map_b));
        out.c.push(render(&transformed, &map_c));
    }
    out
}
