//! Encoder and decoder stacks used as per-language modules. No parameter is
//! shared between modules; each stack owns its full parameter set.
//!
//! Blocks use the pre-norm residual order and fixed sinusoidal positions.
//! Dropout defaults to 0 so determinism and gradient invariants hold exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{argmax, IdMatrix, Mask, Tape, Tensor};
use crate::tokenizer::{BOS_ID, EOS_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Desk-scale default: 2 blocks, 2 heads, D=64, ff 128.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            num_blocks: 2,
            num_heads: 2,
            model_dim: 64,
            ff_dim: 128,
            dropout: 0.0,
            max_len: 256,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::IndivisibleDim {
                n: self.num_heads,
                dim: self.model_dim,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "num_blocks={}\nnum_heads={}\nmodel_dim={}\nff_dim={}\ndropout={}\nmax_len={}\nvocab_size={}\n",
            self.num_blocks, self.num_heads, self.model_dim, self.ff_dim, self.dropout,
            self.max_len, self.vocab_size
        )
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::desk_default(0);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line: {}", line)))?;
            macro_rules! parse_val {
                () => {
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad value for {}: {}", k, v)))?
                };
            }
            match k {
                "num_blocks" => cfg.num_blocks = parse_val!(),
                "num_heads" => cfg.num_heads = parse_val!(),
                "model_dim" => cfg.model_dim = parse_val!(),
                "ff_dim" => cfg.ff_dim = parse_val!(),
                "dropout" => cfg.dropout = parse_val!(),
                "max_len" => cfg.max_len = parse_val!(),
                "vocab_size" => cfg.vocab_size = parse_val!(),
                other => return Err(Error::Config(format!("unknown config key: {}", other))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fixed sinusoidal positional table [T, D].
pub fn positional_encoding(t_len: usize, d: usize, max_len: usize) -> Result<Tensor> {
    if t_len > max_len {
        return Err(Error::LengthExceeded {
            len: t_len,
            max: max_len,
        });
    }
    let mut vals = vec![0.0; t_len * d];
    for t in 0..t_len {
        for i in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            vals[t * d + 2 * i] = angle.sin();
            if 2 * i + 1 < d {
                vals[t * d + 2 * i + 1] = angle.cos();
            }
        }
    }
    Ok(Tensor::new(vec![t_len, d], vals))
}

#[derive(Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub self_attn: AttentionParams,
    /// Cross-attention over encoder memory (decoder blocks only).
    pub cross: Option<(Tensor, Tensor, AttentionParams)>,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

#[derive(Clone)]
pub struct EncoderStack {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

#[derive(Clone)]
pub struct DecoderStack {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub out_proj: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let vals: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(vec![rows, cols], vals)
}

fn ones(n: usize) -> Tensor {
    Tensor::param(vec![n], vec![1.0; n])
}

fn zeros(n: usize) -> Tensor {
    Tensor::param(vec![n], vec![0.0; n])
}

fn init_attention(rng: &mut ChaCha8Rng, d: usize) -> AttentionParams {
    AttentionParams {
        wq: xavier(rng, d, d),
        wk: xavier(rng, d, d),
        wv: xavier(rng, d, d),
        wo: xavier(rng, d, d),
    }
}

fn init_block(rng: &mut ChaCha8Rng, cfg: &ModelConfig, with_cross: bool) -> BlockParams {
    let d = cfg.model_dim;
    BlockParams {
        ln1_gain: ones(d),
        ln1_bias: zeros(d),
        self_attn: init_attention(rng, d),
        cross: if with_cross {
            Some((ones(d), zeros(d), init_attention(rng, d)))
        } else {
            None
        },
        ln2_gain: ones(d),
        ln2_bias: zeros(d),
        ff_w1: xavier(rng, d, cfg.ff_dim),
        ff_b1: zeros(cfg.ff_dim),
        ff_w2: xavier(rng, cfg.ff_dim, d),
        ff_b2: zeros(d),
    }
}

fn attention_param_names(prefix: &str, p: &AttentionParams) -> Vec<(String, Tensor)> {
    vec![
        (format!("{}.wq", prefix), p.wq.clone()),
        (format!("{}.wk", prefix), p.wk.clone()),
        (format!("{}.wv", prefix), p.wv.clone()),
        (format!("{}.wo", prefix), p.wo.clone()),
    ]
}

fn block_param_names(i: usize, b: &BlockParams) -> Vec<(String, Tensor)> {
    let p = format!("block{}", i);
    let mut out = vec![
        (format!("{}.ln1.gain", p), b.ln1_gain.clone()),
        (format!("{}.ln1.bias", p), b.ln1_bias.clone()),
    ];
    out.extend(attention_param_names(&format!("{}.self_attn", p), &b.self_attn));
    if let Some((g, bias, attn)) = &b.cross {
        out.push((format!("{}.cross_ln.gain", p), g.clone()));
        out.push((format!("{}.cross_ln.bias", p), bias.clone()));
        out.extend(attention_param_names(&format!("{}.cross_attn", p), attn));
    }
    out.push((format!("{}.ln2.gain", p), b.ln2_gain.clone()));
    out.push((format!("{}.ln2.bias", p), b.ln2_bias.clone()));
    out.push((format!("{}.ff.w1", p), b.ff_w1.clone()));
    out.push((format!("{}.ff.b1", p), b.ff_b1.clone()));
    out.push((format!("{}.ff.w2", p), b.ff_w2.clone()));
    out.push((format!("{}.ff.b2", p), b.ff_b2.clone()));
    out
}

impl EncoderStack {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = xavier(&mut rng, config.vocab_size, config.model_dim);
        let blocks = (0..config.num_blocks)
            .map(|_| init_block(&mut rng, &config, false))
            .collect();
        Ok(EncoderStack {
            embed,
            blocks,
            final_gain: ones(config.model_dim),
            final_bias: zeros(config.model_dim),
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(block_param_names(i, b));
        }
        out.push(("final_ln.gain".to_string(), self.final_gain.clone()));
        out.push(("final_ln.bias".to_string(), self.final_bias.clone()));
        out
    }
}

impl DecoderStack {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = xavier(&mut rng, config.vocab_size, config.model_dim);
        let blocks = (0..config.num_blocks)
            .map(|_| init_block(&mut rng, &config, true))
            .collect();
        let final_gain = ones(config.model_dim);
        let final_bias = zeros(config.model_dim);
        let out_proj = xavier(&mut rng, config.model_dim, config.vocab_size);
        Ok(DecoderStack {
            embed,
            blocks,
            final_gain,
            final_bias,
            out_proj,
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(block_param_names(i, b));
        }
        out.push(("final_ln.gain".to_string(), self.final_gain.clone()));
        out.push(("final_ln.bias".to_string(), self.final_bias.clone()));
        out.push(("out_proj".to_string(), self.out_proj.clone()));
        out
    }
}

/// Allowed-positions mask for one attention pattern: [B, Tq, Tk] flattened.
pub struct AttnMask {
    pub b: usize,
    pub tq: usize,
    pub tk: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    /// Every query may attend to every non-pad key.
    pub fn padding(key_mask: &Mask, tq: usize) -> AttnMask {
        let (b, tk) = (key_mask.rows, key_mask.cols);
        let mut allow = vec![false; b * tq * tk];
        for bi in 0..b {
            for q in 0..tq {
                for k in 0..tk {
                    allow[(bi * tq + q) * tk + k] = key_mask.get(bi, k);
                }
            }
        }
        AttnMask { b, tq, tk, allow }
    }

    /// Position t attends to non-pad positions <= t.
    pub fn causal(key_mask: &Mask) -> AttnMask {
        let (b, t) = (key_mask.rows, key_mask.cols);
        let mut allow = vec![false; b * t * t];
        for bi in 0..b {
            for q in 0..t {
                for k in 0..=q {
                    allow[(bi * t + q) * t + k] = key_mask.get(bi, k);
                }
            }
        }
        AttnMask {
            b,
            tq: t,
            tk: t,
            allow,
        }
    }

    fn check_nonempty(&self) -> Result<()> {
        for bq in 0..self.b * self.tq {
            if !self.allow[bq * self.tk..(bq + 1) * self.tk].iter().any(|&a| a) {
                return Err(Error::MaskAllFalse);
            }
        }
        Ok(())
    }
}

/// Scaled dot-product attention over `num_heads` head groups.
pub fn multi_head_attention(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttnMask,
    params: &AttentionParams,
    num_heads: usize,
) -> Result<Tensor> {
    let qs = q.shape();
    let ks = k.shape();
    let vs = v.shape();
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::ShapeMismatch("attention inputs must be [B,T,D]".into()));
    }
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    if ks[0] != b || vs[0] != b || ks[2] != d || vs[2] != d || vs[1] != tk {
        return Err(Error::ShapeMismatch(format!(
            "attention shapes {:?}/{:?}/{:?}",
            qs, ks, vs
        )));
    }
    if mask.b != b || mask.tq != tq || mask.tk != tk {
        return Err(Error::ShapeMismatch("attention mask extents".into()));
    }
    if d % num_heads != 0 {
        return Err(Error::IndivisibleDim {
            n: num_heads,
            dim: d,
        });
    }
    mask.check_nonempty()?;
    let dh = d / num_heads;

    let split_heads = |x: &Tensor, t: usize| -> Result<Tensor> {
        let h4 = tape.reshape(x, vec![b, t, num_heads, dh])?;
        let perm = tape.permute(&h4, &[0, 2, 1, 3])?; // [B,H,T,dh]
        tape.reshape(&perm, vec![b * num_heads, t, dh])
    };

    let qp = split_heads(&tape.matmul(q, &params.wq)?, tq)?;
    let kp = split_heads(&tape.matmul(k, &params.wk)?, tk)?;
    let vp = split_heads(&tape.matmul(v, &params.wv)?, tk)?;

    let kt = tape.transpose(&kp)?; // [B*H, dh, Tk]
    let scores = tape.scale(&tape.matmul(&qp, &kt)?, 1.0 / (dh as f64).sqrt())?;
    // Expand the [B,Tq,Tk] mask across heads.
    let mut keep = vec![false; b * num_heads * tq * tk];
    for bi in 0..b {
        for h in 0..num_heads {
            let dst = ((bi * num_heads + h) * tq) * tk;
            let src = bi * tq * tk;
            keep[dst..dst + tq * tk].copy_from_slice(&mask.allow[src..src + tq * tk]);
        }
    }
    let masked = tape.masked_fill(&scores, &keep, f64::NEG_INFINITY)?;
    let attn = tape.softmax(&masked, 2)?;
    let ctx = tape.matmul(&attn, &vp)?; // [B*H, Tq, dh]
    let merged = tape.reshape(&ctx, vec![b, num_heads, tq, dh])?;
    let perm = tape.permute(&merged, &[0, 2, 1, 3])?;
    let flat = tape.reshape(&perm, vec![b, tq, d])?;
    tape.matmul(&flat, &params.wo)
}

fn relu(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let keep: Vec<bool> = x.values().iter().map(|&v| v > 0.0).collect();
    tape.masked_fill(x, &keep, 0.0)
}

fn feed_forward(tape: &Tape, x: &Tensor, b: &BlockParams) -> Result<Tensor> {
    let h = tape.add(&tape.matmul(x, &b.ff_w1)?, &b.ff_b1)?;
    let h = relu(tape, &h)?;
    tape.add(&tape.matmul(&h, &b.ff_w2)?, &b.ff_b2)
}

fn embed_with_positions(
    tape: &Tape,
    embed: &Tensor,
    ids: &IdMatrix,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let x = tape.embedding_lookup(embed, ids)?;
    let x = tape.scale(&x, (cfg.model_dim as f64).sqrt())?;
    let pe = positional_encoding(ids.cols, cfg.model_dim, cfg.max_len)?;
    tape.add(&x, &pe)
}

/// Encoder forward: [B,T] ids -> [B,T,D] contextual states.
pub fn encode(tape: &Tape, enc: &EncoderStack, src_ids: &IdMatrix, src_mask: &Mask) -> Result<Tensor> {
    let cfg = &enc.config;
    let mut x = embed_with_positions(tape, &enc.embed, src_ids, cfg)?;
    let mask = AttnMask::padding(src_mask, src_ids.cols);
    for b in &enc.blocks {
        let normed = tape.layer_norm(&x, &b.ln1_gain, &b.ln1_bias, 1e-5)?;
        let attn = multi_head_attention(tape, &normed, &normed, &normed, &mask, &b.self_attn, cfg.num_heads)?;
        x = tape.add(&x, &attn)?;
        let normed = tape.layer_norm(&x, &b.ln2_gain, &b.ln2_bias, 1e-5)?;
        let ff = feed_forward(tape, &normed, b)?;
        x = tape.add(&x, &ff)?;
    }
    tape.layer_norm(&x, &enc.final_gain, &enc.final_bias, 1e-5)
}

/// Decoder forward with teacher forcing: causal self-attention over the
/// shifted-right target, cross-attention over memory, output logits [B,T,V].
pub fn decode_teacher_forced(
    tape: &Tape,
    dec: &DecoderStack,
    memory: &Tensor,
    memory_mask: &Mask,
    tgt_in_ids: &IdMatrix,
    tgt_in_mask: &Mask,
) -> Result<Tensor> {
    let cfg = &dec.config;
    let ms = memory.shape();
    if ms.len() != 3 || ms[2] != cfg.model_dim {
        return Err(Error::DimMismatch(format!(
            "memory shape {:?} vs model dim {}",
            ms, cfg.model_dim
        )));
    }
    let mut x = embed_with_positions(tape, &dec.embed, tgt_in_ids, cfg)?;
    let self_mask = AttnMask::causal(tgt_in_mask);
    let cross_mask = AttnMask::padding(memory_mask, tgt_in_ids.cols);
    for b in &dec.blocks {
        let normed = tape.layer_norm(&x, &b.ln1_gain, &b.ln1_bias, 1e-5)?;
        let attn =
            multi_head_attention(tape, &normed, &normed, &normed, &self_mask, &b.self_attn, cfg.num_heads)?;
        x = tape.add(&x, &attn)?;
        let (cg, cb, cattn) = b
            .cross
            .as_ref()
            .expect("decoder block missing cross-attention parameters");
        let normed = tape.layer_norm(&x, cg, cb, 1e-5)?;
        let attn = multi_head_attention(tape, &normed, memory, memory, &cross_mask, cattn, cfg.num_heads)?;
        x = tape.add(&x, &attn)?;
        let normed = tape.layer_norm(&x, &b.ln2_gain, &b.ln2_bias, 1e-5)?;
        let ff = feed_forward(tape, &normed, b)?;
        x = tape.add(&x, &ff)?;
    }
    let x = tape.layer_norm(&x, &dec.final_gain, &dec.final_bias, 1e-5)?;
    tape.matmul(&x, &dec.out_proj)
}

/// Iterative argmax decoding from bos until eos or `max_out` tokens.
/// Returns per-row payloads without bos/eos. Lowest-index tie-break.
pub fn generate_greedy(
    dec: &DecoderStack,
    memory: &Tensor,
    memory_mask: &Mask,
    max_out: usize,
) -> Result<Vec<Vec<u32>>> {
    let b = memory.shape()[0];
    let v = dec.config.vocab_size;
    let mut seqs: Vec<Vec<u32>> = vec![vec![BOS_ID]; b];
    let mut done = vec![false; b];
    for _ in 0..max_out {
        let t = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut ids = vec![0u32; b * t];
        let mut mask = vec![false; b * t];
        for (r, s) in seqs.iter().enumerate() {
            for (c, &id) in s.iter().enumerate() {
                ids[r * t + c] = id;
                mask[r * t + c] = true;
            }
        }
        let tgt_in = IdMatrix::new(b, t, ids);
        let tgt_mask = Mask::new(b, t, mask);
        let tape = Tape::new();
        let logits = decode_teacher_forced(&tape, dec, memory, memory_mask, &tgt_in, &tgt_mask)?;
        let lv = logits.to_vec();
        tape.clear();
        let mut all_done = true;
        for r in 0..b {
            if done[r] {
                continue;
            }
            let pos = seqs[r].len() - 1;
            let row = &lv[(r * t + pos) * v..(r * t + pos + 1) * v];
            let next = argmax(row) as u32;
            if next == EOS_ID {
                done[r] = true;
            } else {
                seqs[r].push(next);
                all_done = false;
            }
        }
        if all_done && done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(seqs.into_iter().map(|s| s[1..].to_vec()).collect())
}
