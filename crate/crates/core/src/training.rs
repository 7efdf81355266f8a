//! Training schedules: joint bilingual training and incremental language
//! addition, with Adam and validation-based early stopping.
//!
//! One parallel batch drives all four tasks of a joint step: each side is
//! encoded once, then decoded as autoencoding (L_XX, L_YY) and translation
//! (L_XY, L_YX), all teacher-forced, plus the interlingua distance. The
//! incremental step trains only the new encoder against a frozen decoder
//! with the plain translation cross-entropy; the distance is telemetry only.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::corpus::ParallelBatch;
use crate::dvq::{dvq_forward, DvqAux};
use crate::error::{Error, Result};
use crate::interlingua::{distance, joint_loss, DistanceKind};
use crate::registry::{ModuleRole, ModuleStack, SystemState};
use crate::tensor::{argmax, IdMatrix, Mask, Tape, Tensor};
use crate::tokenizer::PAD_ID;
use crate::transformer::{decode_teacher_forced, encode, DecoderStack, EncoderStack};

#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub distance_kind: DistanceKind,
    pub weights: [f64; 5],
    pub dvq: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_steps: 2000,
            eval_interval: 50,
            patience: 5,
            distance_kind: DistanceKind::Corr,
            weights: [1.0; 5],
            dvq: false,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter Adam moments, keyed by tensor identity. Frozen parameters
/// never acquire state.
#[derive(Default)]
pub struct AdamState {
    step: u64,
    m: HashMap<usize, Vec<f64>>,
    v: HashMap<usize, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_state_for(&self, t: &Tensor) -> bool {
        self.m.contains_key(&t.ptr_id())
    }
}

/// One bias-corrected Adam step over `params`. Parameters without gradients
/// (frozen or untouched) are skipped; gradients are consumed (zeroed).
pub fn adam_update(params: &[Tensor], state: &mut AdamState, cfg: &TrainingConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in params {
        if !p.requires_grad() {
            continue;
        }
        let Some(g) = p.grad() else { continue };
        let key = p.ptr_id();
        let m = state.m.entry(key).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(key).or_insert_with(|| vec![0.0; g.len()]);
        let mut vals = p.to_vec();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            vals[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.set_values(&vals);
        p.zero_grad();
    }
}

/// Shift a [bos, tokens…, eos, pad…] id matrix into decoder input/target
/// views of width T−1: input drops each row's eos, target drops its bos.
pub fn teacher_forcing_views(ids: &IdMatrix, mask: &Mask) -> (IdMatrix, Mask, IdMatrix) {
    let (b, t) = (ids.rows, ids.cols);
    let w = t - 1;
    let mut in_ids = vec![PAD_ID; b * w];
    let mut in_mask = vec![false; b * w];
    let mut out_ids = vec![PAD_ID; b * w];
    for r in 0..b {
        for c in 0..w {
            if mask.get(r, c + 1) {
                in_ids[r * w + c] = ids.data[r * t + c];
                in_mask[r * w + c] = true;
                out_ids[r * w + c] = ids.data[r * t + c + 1];
            }
        }
    }
    (
        IdMatrix::new(b, w, in_ids),
        Mask::new(b, w, in_mask),
        IdMatrix::new(b, w, out_ids),
    )
}

struct Encoded {
    pooled: Tensor,
    memory: Tensor,
    memory_mask: Mask,
    aux: Option<DvqAux>,
}

fn encode_side(
    tape: &Tape,
    enc: &EncoderStack,
    state: &SystemState,
    use_dvq: bool,
    ids: &IdMatrix,
    mask: &Mask,
) -> Result<Encoded> {
    let enc_out = encode(tape, enc, ids, mask)?;
    let pooled = tape.masked_mean_time(&enc_out, mask)?;
    if use_dvq {
        let cb = state
            .codebooks
            .as_ref()
            .ok_or_else(|| Error::MissingModule("interlingua codebooks".into()))?;
        let (zq_st, _, aux) = dvq_forward(tape, cb, &pooled)?;
        let b = ids.rows;
        let d = zq_st.shape()[1];
        let memory = tape.reshape(&zq_st, vec![b, 1, d])?;
        Ok(Encoded {
            pooled,
            memory,
            memory_mask: Mask::all_true(b, 1),
            aux: Some(aux),
        })
    } else {
        Ok(Encoded {
            pooled,
            memory: enc_out,
            memory_mask: mask.clone(),
            aux: None,
        })
    }
}

fn decode_ce(
    tape: &Tape,
    dec: &DecoderStack,
    enc: &Encoded,
    tgt_ids: &IdMatrix,
    tgt_mask: &Mask,
) -> Result<(Tensor, Tensor)> {
    let (in_ids, in_mask, out_ids) = teacher_forcing_views(tgt_ids, tgt_mask);
    let logits = decode_teacher_forced(tape, dec, &enc.memory, &enc.memory_mask, &in_ids, &in_mask)?;
    let ce = tape.cross_entropy(&logits, &out_ids, PAD_ID)?;
    Ok((ce, logits))
}

fn encoder_of(state: &SystemState, lang: &str) -> Result<EncoderStack> {
    let module = state
        .get(lang, ModuleRole::Encoder)
        .ok_or_else(|| Error::MissingModule(format!("{}/encoder", lang)))?;
    match &module.stack {
        ModuleStack::Encoder(s) => Ok(s.clone()),
        ModuleStack::Decoder(_) => unreachable!("encoder slot holds a decoder"),
    }
}

fn decoder_of(state: &SystemState, lang: &str) -> Result<DecoderStack> {
    let module = state
        .get(lang, ModuleRole::Decoder)
        .ok_or_else(|| Error::MissingModule(format!("{}/decoder", lang)))?;
    match &module.stack {
        ModuleStack::Decoder(s) => Ok(s.clone()),
        ModuleStack::Encoder(_) => unreachable!("decoder slot holds an encoder"),
    }
}

fn trainable_params(state: &SystemState, langs: &[&str]) -> Vec<Tensor> {
    let mut out = Vec::new();
    for (key, module) in &state.modules {
        if langs.contains(&key.0.as_str()) {
            for (_, t) in module.stack.named_params() {
                if t.requires_grad() {
                    out.push(t);
                }
            }
        }
    }
    if let Some(cb) = &state.codebooks {
        for (_, t) in cb.named_params() {
            if t.requires_grad() {
                out.push(t);
            }
        }
    }
    out
}

/// Loss values of one step. `None` marks terms that do not apply to the
/// schedule (rendered as empty CSV fields).
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub l_xx: Option<f64>,
    pub l_yy: Option<f64>,
    pub l_xy: Option<f64>,
    pub l_yx: Option<f64>,
    pub d: Option<f64>,
    pub total: f64,
}

/// One joint step over a parallel batch: four cross-entropies, distance,
/// single backward, Adam update of both language pairs (plus codebooks when
/// dvq is enabled).
pub fn joint_train_step(
    state: &mut SystemState,
    batch: &ParallelBatch,
    cfg: &TrainingConfig,
    adam: &mut AdamState,
) -> Result<StepStats> {
    if batch.src_ids.rows < 2 {
        return Err(Error::BatchTooSmall(batch.src_ids.rows));
    }
    let (x_lang, y_lang) = (&batch.pair_label.0, &batch.pair_label.1);
    let e_x = encoder_of(state, x_lang)?;
    let d_x = decoder_of(state, x_lang)?;
    let e_y = encoder_of(state, y_lang)?;
    let d_y = decoder_of(state, y_lang)?;

    let params = trainable_params(state, &[x_lang, y_lang]);
    for p in &params {
        p.zero_grad();
    }

    let tape = Tape::new();
    let enc_x = encode_side(&tape, &e_x, state, cfg.dvq, &batch.src_ids, &batch.src_mask)?;
    let enc_y = encode_side(&tape, &e_y, state, cfg.dvq, &batch.tgt_ids, &batch.tgt_mask)?;
    let (l_xx, _) = decode_ce(&tape, &d_x, &enc_x, &batch.src_ids, &batch.src_mask)?;
    let (l_yy, _) = decode_ce(&tape, &d_y, &enc_y, &batch.tgt_ids, &batch.tgt_mask)?;
    let (l_xy, _) = decode_ce(&tape, &d_y, &enc_x, &batch.tgt_ids, &batch.tgt_mask)?;
    let (l_yx, _) = decode_ce(&tape, &d_x, &enc_y, &batch.src_ids, &batch.src_mask)?;
    let lb = joint_loss(
        &tape,
        &l_xx,
        &l_yy,
        &l_xy,
        &l_yx,
        &enc_x.pooled,
        &enc_y.pooled,
        cfg.distance_kind,
        cfg.weights,
    )?;
    let mut total = lb.total.clone();
    for aux in [&enc_x.aux, &enc_y.aux].into_iter().flatten() {
        total = tape.add(&total, &tape.add(&aux.codebook, &aux.commitment)?)?;
    }
    tape.backward(&total)?;
    tape.clear();
    adam_update(&params, adam, cfg);

    Ok(StepStats {
        l_xx: Some(lb.l_xx.item()),
        l_yy: Some(lb.l_yy.item()),
        l_xy: Some(lb.l_xy.item()),
        l_yx: Some(lb.l_yx.item()),
        d: Some(lb.d.item()),
        total: total.item(),
    })
}

/// One incremental step: cross-entropy of the frozen shared-language decoder
/// teacher-forced on X given the new encoder's memory of Z. Only the new
/// encoder's parameters move. The distance to the existing X encoder's
/// pooled batch (when that encoder exists) is reported for monitoring only.
pub fn add_language_train_step(
    state: &mut SystemState,
    batch_zx: &ParallelBatch,
    x_vocab_fingerprint: Option<u32>,
    cfg: &TrainingConfig,
    adam: &mut AdamState,
) -> Result<StepStats> {
    let (z_lang, x_lang) = (&batch_zx.pair_label.0, &batch_zx.pair_label.1);
    let dec_mod = state
        .get(x_lang, ModuleRole::Decoder)
        .ok_or_else(|| Error::MissingModule(format!("{}/decoder", x_lang)))?;
    if !dec_mod.frozen {
        return Err(Error::DecoderNotFrozen(x_lang.clone()));
    }
    if let Some(fp) = x_vocab_fingerprint {
        if fp != dec_mod.vocab_fingerprint {
            return Err(Error::VocabFingerprintMismatch {
                language: x_lang.clone(),
                expected: dec_mod.vocab_fingerprint,
                actual: fp,
            });
        }
    }
    let e_z = encoder_of(state, z_lang)?;
    let d_x = decoder_of(state, x_lang)?;

    let params = trainable_params(state, &[z_lang]);
    for p in &params {
        p.zero_grad();
    }

    let tape = Tape::new();
    let enc_z = encode_side(&tape, &e_z, state, cfg.dvq, &batch_zx.src_ids, &batch_zx.src_mask)?;
    let (l_zx, _) = decode_ce(&tape, &d_x, &enc_z, &batch_zx.tgt_ids, &batch_zx.tgt_mask)?;

    // Distance telemetry against the existing X encoder, outside the loss.
    let d_val = match state.get(x_lang, ModuleRole::Encoder) {
        Some(_) => {
            let e_x = encoder_of(state, x_lang)?;
            let enc_out = encode(&tape, &e_x, &batch_zx.tgt_ids, &batch_zx.tgt_mask)?;
            let pooled_x = tape.masked_mean_time(&enc_out, &batch_zx.tgt_mask)?;
            Some(
                distance(&tape, cfg.distance_kind, &enc_z.pooled, &pooled_x)?.item(),
            )
        }
        None => None,
    };

    tape.backward(&l_zx)?;
    tape.clear();
    adam_update(&params, adam, cfg);

    Ok(StepStats {
        l_xx: None,
        l_yy: None,
        l_xy: Some(l_zx.item()),
        l_yx: None,
        d: d_val,
        total: l_zx.item(),
    })
}

/// Mean teacher-forced cross-entropy over dev batches, summed across the
/// four joint tasks. The distance term is deliberately excluded so runs
/// with different distance kinds stay comparable.
pub fn dev_loss_joint(state: &SystemState, dev: &[ParallelBatch], cfg: &TrainingConfig) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    let mut sum = 0.0;
    for batch in dev {
        let (x_lang, y_lang) = (&batch.pair_label.0, &batch.pair_label.1);
        let e_x = encoder_of(state, x_lang)?;
        let d_x = decoder_of(state, x_lang)?;
        let e_y = encoder_of(state, y_lang)?;
        let d_y = decoder_of(state, y_lang)?;
        let tape = Tape::new();
        let enc_x = encode_side(&tape, &e_x, state, cfg.dvq, &batch.src_ids, &batch.src_mask)?;
        let enc_y = encode_side(&tape, &e_y, state, cfg.dvq, &batch.tgt_ids, &batch.tgt_mask)?;
        let (l_xx, _) = decode_ce(&tape, &d_x, &enc_x, &batch.src_ids, &batch.src_mask)?;
        let (l_yy, _) = decode_ce(&tape, &d_y, &enc_y, &batch.tgt_ids, &batch.tgt_mask)?;
        let (l_xy, _) = decode_ce(&tape, &d_y, &enc_x, &batch.tgt_ids, &batch.tgt_mask)?;
        let (l_yx, _) = decode_ce(&tape, &d_x, &enc_y, &batch.src_ids, &batch.src_mask)?;
        sum += l_xx.item() + l_yy.item() + l_xy.item() + l_yx.item();
        tape.clear();
    }
    Ok(sum / dev.len() as f64)
}

/// Mean teacher-forced cross-entropy of the incremental task (Z→X).
pub fn dev_loss_add(state: &SystemState, dev: &[ParallelBatch], cfg: &TrainingConfig) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    let mut sum = 0.0;
    for batch in dev {
        let (z_lang, x_lang) = (&batch.pair_label.0, &batch.pair_label.1);
        let e_z = encoder_of(state, z_lang)?;
        let d_x = decoder_of(state, x_lang)?;
        let tape = Tape::new();
        let enc_z = encode_side(&tape, &e_z, state, cfg.dvq, &batch.src_ids, &batch.src_mask)?;
        let (l_zx, _) = decode_ce(&tape, &d_x, &enc_z, &batch.tgt_ids, &batch.tgt_mask)?;
        sum += l_zx.item();
        tape.clear();
    }
    Ok(sum / dev.len() as f64)
}

/// Fraction of non-pad target tokens predicted correctly under teacher
/// forcing by encoder(`enc_lang`) → decoder(`dec_lang`). Each batch side is
/// matched to the requested language through its pair label.
pub fn teacher_forced_accuracy(
    state: &SystemState,
    use_dvq: bool,
    enc_lang: &str,
    dec_lang: &str,
    batches: &[ParallelBatch],
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let enc = encoder_of(state, enc_lang)?;
    let dec = decoder_of(state, dec_lang)?;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for batch in batches {
        let side = |lang: &str| -> Result<(&IdMatrix, &Mask)> {
            if lang == batch.pair_label.0 {
                Ok((&batch.src_ids, &batch.src_mask))
            } else if lang == batch.pair_label.1 {
                Ok((&batch.tgt_ids, &batch.tgt_mask))
            } else {
                Err(Error::BatchMismatch(format!(
                    "language {} not in batch pair {:?}",
                    lang, batch.pair_label
                )))
            }
        };
        let (src_ids, src_mask) = side(enc_lang)?;
        let (tgt_ids, tgt_mask) = side(dec_lang)?;
        let tape = Tape::new();
        let encoded = encode_side(&tape, &enc, state, use_dvq, src_ids, src_mask)?;
        let (_, logits) = decode_ce(&tape, &dec, &encoded, tgt_ids, tgt_mask)?;
        tape.clear();
        let (_, _, out_ids) = teacher_forcing_views(tgt_ids, tgt_mask);
        let v = dec.config.vocab_size;
        let lv = logits.to_vec();
        for (pos, &want) in out_ids.data.iter().enumerate() {
            if want == PAD_ID {
                continue;
            }
            seen += 1;
            if argmax(&lv[pos * v..(pos + 1) * v]) as u32 == want {
                correct += 1;
            }
        }
    }
    if seen == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(correct as f64 / seen as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub stats: StepStats,
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub rows: Vec<MetricsRow>,
    pub best_dev: f64,
    pub best_step: usize,
}

fn push_field(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{}", v);
    }
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l_xx,l_yy,l_xy,l_yx,d,total,dev_loss\n");
        for row in &self.rows {
            let _ = write!(out, "{}", row.step);
            push_field(&mut out, row.stats.l_xx);
            push_field(&mut out, row.stats.l_yy);
            push_field(&mut out, row.stats.l_xy);
            push_field(&mut out, row.stats.l_yx);
            push_field(&mut out, row.stats.d);
            push_field(&mut out, Some(row.stats.total));
            push_field(&mut out, row.dev_loss);
            out.push('\n');
        }
        out
    }
}

/// Run `step_fn` over the training batches (cycled in order), evaluating
/// `dev_fn` every `eval_interval` steps. Stops at `max_steps` or when
/// `patience` consecutive evaluations fail to improve the best dev loss by
/// more than 1e-4; the returned state holds the best parameters seen.
pub fn train_loop<S, D>(
    state: &mut SystemState,
    train: &[ParallelBatch],
    dev: &[ParallelBatch],
    cfg: &TrainingConfig,
    mut step_fn: S,
    mut dev_fn: D,
) -> Result<TrainHistory>
where
    S: FnMut(&mut SystemState, &ParallelBatch) -> Result<StepStats>,
    D: FnMut(&SystemState) -> Result<f64>,
{
    const IMPROVEMENT: f64 = 1e-4;
    cfg.validate()?;
    if dev.is_empty() {
        return Err(Error::EmptyDevSet);
    }
    let mut history = TrainHistory {
        rows: Vec::new(),
        best_dev: f64::INFINITY,
        best_step: 0,
    };
    if cfg.max_steps == 0 {
        return Ok(history);
    }
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // Baseline evaluation so "never improves" stops after exactly
    // patience * eval_interval steps.
    history.best_dev = dev_fn(state)?;
    let mut best_snapshot = state.snapshot_values();
    let mut bad_evals = 0usize;

    for step in 1..=cfg.max_steps {
        let batch = &train[(step - 1) % train.len()];
        let stats = step_fn(state, batch)?;
        let mut row = MetricsRow {
            step,
            stats,
            dev_loss: None,
        };
        if step % cfg.eval_interval == 0 {
            let dl = dev_fn(state)?;
            row.dev_loss = Some(dl);
            if dl < history.best_dev - IMPROVEMENT {
                history.best_dev = dl;
                history.best_step = step;
                best_snapshot = state.snapshot_values();
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
        }
        history.rows.push(row);
        if bad_evals >= cfg.patience {
            break;
        }
    }
    state.restore_values(&best_snapshot);
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{batch_from_examples, Example};
    use crate::registry::{LanguageModule, ModuleRole, ModuleStack};
    use crate::tokenizer::{BOS_ID, EOS_ID};
    use crate::transformer::ModelConfig;

    fn tiny_config(v: usize) -> ModelConfig {
        ModelConfig {
            num_blocks: 1,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            dropout: 0.0,
            max_len: 32,
            vocab_size: v,
        }
    }

    fn pair_state(x: &str, y: &str, vocab: usize) -> SystemState {
        let mut st = SystemState::new();
        let mut seed = 1;
        for lang in [x, y] {
            let enc = EncoderStack::init(tiny_config(vocab), seed).unwrap();
            st.register_module(
                LanguageModule::new(lang, ModuleRole::Encoder, ModuleStack::Encoder(enc), 0),
                false,
            )
            .unwrap();
            let dec = DecoderStack::init(tiny_config(vocab), seed + 1).unwrap();
            st.register_module(
                LanguageModule::new(lang, ModuleRole::Decoder, ModuleStack::Decoder(dec), 0),
                false,
            )
            .unwrap();
            seed += 2;
        }
        st
    }

    fn wrap(payload: &[u32]) -> Vec<u32> {
        let mut v = vec![BOS_ID];
        v.extend_from_slice(payload);
        v.push(EOS_ID);
        v
    }

    fn toy_batch(x: &str, y: &str) -> ParallelBatch {
        let examples = vec![
            Example {
                src: wrap(&[4, 5, 6]),
                tgt: wrap(&[6, 5, 4]),
            },
            Example {
                src: wrap(&[5, 7]),
                tgt: wrap(&[7, 5]),
            },
            Example {
                src: wrap(&[6, 6, 4, 7]),
                tgt: wrap(&[7, 4, 6, 6]),
            },
        ];
        batch_from_examples(&examples, (x.to_string(), y.to_string()))
    }

    #[test]
    fn adam_first_step_oracle() {
        let p = Tensor::param(vec![1], vec![1.0]);
        p.accumulate_grad(&[1.0]);
        let mut adam = AdamState::new();
        let cfg = TrainingConfig {
            learning_rate: 0.1,
            ..TrainingConfig::default()
        };
        adam_update(&[p.clone()], &mut adam, &cfg);
        // θ ← θ − lr·m̂/(√v̂ + eps) with m̂ = v̂ = 1 on the first step.
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.to_vec()[0] - expect).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn adam_skips_frozen_and_gradless() {
        let frozen = Tensor::new(vec![2], vec![1.0, 2.0]);
        let idle = Tensor::param(vec![2], vec![3.0, 4.0]);
        let mut adam = AdamState::new();
        let cfg = TrainingConfig::default();
        adam_update(&[frozen.clone(), idle.clone()], &mut adam, &cfg);
        assert_eq!(frozen.to_vec(), vec![1.0, 2.0]);
        assert_eq!(idle.to_vec(), vec![3.0, 4.0]);
        assert!(!adam.has_state_for(&frozen));
        assert!(!adam.has_state_for(&idle));
    }

    #[test]
    fn adam_zero_gradients_leave_params_fixed() {
        let p = Tensor::param(vec![2], vec![1.0, -1.0]);
        let mut adam = AdamState::new();
        let cfg = TrainingConfig::default();
        for _ in 0..5 {
            p.accumulate_grad(&[0.0, 0.0]);
            adam_update(&[p.clone()], &mut adam, &cfg);
        }
        assert_eq!(p.to_vec(), vec![1.0, -1.0]);
    }

    #[test]
    fn teacher_forcing_views_hand_case() {
        // Row 0: bos 4 5 eos; row 1: bos 4 eos pad.
        let ids = IdMatrix::new(2, 4, vec![1, 4, 5, 2, 1, 4, 2, 0]);
        let mask = Mask::new(
            2,
            4,
            vec![true, true, true, true, true, true, true, false],
        );
        let (in_ids, in_mask, out_ids) = teacher_forcing_views(&ids, &mask);
        assert_eq!(in_ids.data, vec![1, 4, 5, 1, 4, 0]);
        assert_eq!(in_mask.data, vec![true, true, true, true, true, false]);
        assert_eq!(out_ids.data, vec![4, 5, 2, 4, 2, 0]);
    }

    #[test]
    fn joint_step_composition_without_distance() {
        let mut st = pair_state("a", "b", 10);
        let batch = toy_batch("a", "b");
        let mut adam = AdamState::new();
        let cfg = TrainingConfig {
            distance_kind: DistanceKind::None,
            weights: [1.0, 1.0, 1.0, 1.0, 0.0],
            ..TrainingConfig::default()
        };
        let stats = joint_train_step(&mut st, &batch, &cfg, &mut adam).unwrap();
        let sum = stats.l_xx.unwrap() + stats.l_yy.unwrap() + stats.l_xy.unwrap()
            + stats.l_yx.unwrap();
        assert!((stats.total - sum).abs() < 1e-9);
        assert!(stats.total.is_finite());
    }

    #[test]
    fn joint_step_training_reduces_loss() {
        let mut st = pair_state("a", "b", 10);
        let batch = toy_batch("a", "b");
        let mut adam = AdamState::new();
        let cfg = TrainingConfig::default();
        let first = joint_train_step(&mut st, &batch, &cfg, &mut adam).unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = joint_train_step(&mut st, &batch, &cfg, &mut adam).unwrap();
        }
        assert!(last.total < first.total, "{} vs {}", last.total, first.total);
    }

    #[test]
    fn joint_step_batch_too_small() {
        let mut st = pair_state("a", "b", 10);
        let examples = vec![Example {
            src: wrap(&[4]),
            tgt: wrap(&[4]),
        }];
        let batch = batch_from_examples(&examples, ("a".into(), "b".into()));
        let mut adam = AdamState::new();
        assert!(matches!(
            joint_train_step(&mut st, &batch, &TrainingConfig::default(), &mut adam),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn add_language_requires_frozen_decoder() {
        let mut st = pair_state("a", "b", 10);
        let enc_c = EncoderStack::init(tiny_config(10), 9).unwrap();
        st.register_module(
            LanguageModule::new("c", ModuleRole::Encoder, ModuleStack::Encoder(enc_c), 0),
            false,
        )
        .unwrap();
        let batch = toy_batch("c", "a");
        let mut adam = AdamState::new();
        let cfg = TrainingConfig::default();
        assert!(matches!(
            add_language_train_step(&mut st, &batch, None, &cfg, &mut adam),
            Err(Error::DecoderNotFrozen(_))
        ));
        st.set_frozen("a", ModuleRole::Decoder, true).unwrap();
        assert!(matches!(
            add_language_train_step(&mut st, &batch, Some(123), &cfg, &mut adam),
            Err(Error::VocabFingerprintMismatch { .. })
        ));
    }

    #[test]
    fn add_language_freezes_decoder_bitwise() {
        let mut st = pair_state("a", "b", 10);
        let enc_c = EncoderStack::init(tiny_config(10), 9).unwrap();
        st.register_module(
            LanguageModule::new("c", ModuleRole::Encoder, ModuleStack::Encoder(enc_c), 0),
            false,
        )
        .unwrap();
        st.set_frozen("a", ModuleRole::Decoder, true).unwrap();
        let before: Vec<Vec<f64>> = st
            .get("a", ModuleRole::Decoder)
            .unwrap()
            .stack
            .named_params()
            .iter()
            .map(|(_, t)| t.to_vec())
            .collect();
        let enc_before = st
            .get("c", ModuleRole::Encoder)
            .unwrap()
            .stack
            .named_params()[0]
            .1
            .to_vec();

        let batch = toy_batch("c", "a");
        let mut adam = AdamState::new();
        let cfg = TrainingConfig::default();
        for _ in 0..3 {
            let stats = add_language_train_step(&mut st, &batch, Some(0), &cfg, &mut adam).unwrap();
            assert!(stats.l_xx.is_none());
            assert!(stats.l_xy.is_some());
            assert!(stats.d.is_some());
        }
        let after: Vec<Vec<f64>> = st
            .get("a", ModuleRole::Decoder)
            .unwrap()
            .stack
            .named_params()
            .iter()
            .map(|(_, t)| t.to_vec())
            .collect();
        assert_eq!(before, after);
        // The new encoder did move.
        let enc_after = st
            .get("c", ModuleRole::Encoder)
            .unwrap()
            .stack
            .named_params()[0]
            .1
            .to_vec();
        assert_ne!(enc_before, enc_after);
    }

    #[test]
    fn accuracy_is_in_unit_interval() {
        let st = pair_state("a", "b", 10);
        let batch = toy_batch("a", "b");
        let acc = teacher_forced_accuracy(&st, false, "a", "b", &[batch]).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn train_loop_stops_on_patience() {
        let mut st = SystemState::new();
        let batch = toy_batch("a", "b");
        let cfg = TrainingConfig {
            max_steps: 1000,
            eval_interval: 10,
            patience: 3,
            ..TrainingConfig::default()
        };
        let noop = |_: &mut SystemState, _: &ParallelBatch| {
            Ok(StepStats {
                l_xx: None,
                l_yy: None,
                l_xy: None,
                l_yx: None,
                d: None,
                total: 1.0,
            })
        };
        let hist = train_loop(
            &mut st,
            std::slice::from_ref(&batch),
            std::slice::from_ref(&batch),
            &cfg,
            noop,
            |_| Ok(5.0),
        )
        .unwrap();
        assert_eq!(hist.rows.len(), 30);
    }

    #[test]
    fn train_loop_runs_to_max_steps_when_improving() {
        let mut st = SystemState::new();
        let batch = toy_batch("a", "b");
        let cfg = TrainingConfig {
            max_steps: 40,
            eval_interval: 10,
            patience: 2,
            ..TrainingConfig::default()
        };
        let noop = |_: &mut SystemState, _: &ParallelBatch| {
            Ok(StepStats {
                l_xx: None,
                l_yy: None,
                l_xy: None,
                l_yx: None,
                d: None,
                total: 1.0,
            })
        };
        let mut dev = 100.0;
        let hist = train_loop(
            &mut st,
            std::slice::from_ref(&batch),
            std::slice::from_ref(&batch),
            &cfg,
            noop,
            move |_| {
                dev -= 1.0;
                Ok(dev)
            },
        )
        .unwrap();
        assert_eq!(hist.rows.len(), 40);
        assert_eq!(hist.best_step, 40);
    }

    #[test]
    fn train_loop_zero_steps_and_empty_dev() {
        let mut st = SystemState::new();
        let batch = toy_batch("a", "b");
        let noop = |_: &mut SystemState, _: &ParallelBatch| {
            Ok(StepStats {
                l_xx: None,
                l_yy: None,
                l_xy: None,
                l_yx: None,
                d: None,
                total: 0.0,
            })
        };
        let cfg = TrainingConfig {
            max_steps: 0,
            ..TrainingConfig::default()
        };
        let hist = train_loop(
            &mut st,
            std::slice::from_ref(&batch),
            std::slice::from_ref(&batch),
            &cfg,
            noop,
            |_| Ok(1.0),
        )
        .unwrap();
        assert!(hist.rows.is_empty());
        assert!(matches!(
            train_loop(
                &mut st,
                std::slice::from_ref(&batch),
                &[],
                &TrainingConfig::default(),
                noop,
                |_| Ok(1.0)
            ),
            Err(Error::EmptyDevSet)
        ));
    }

    #[test]
    fn metrics_csv_shape() {
        let hist = TrainHistory {
            rows: vec![MetricsRow {
                step: 1,
                stats: StepStats {
                    l_xx: Some(1.5),
                    l_yy: Some(2.0),
                    l_xy: None,
                    l_yx: Some(0.25),
                    d: Some(0.5),
                    total: 4.25,
                },
                dev_loss: None,
            }],
            best_dev: 0.0,
            best_step: 0,
        };
        let csv = hist.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,l_xx,l_yy,l_xy,l_yx,d,total,dev_loss");
        assert_eq!(lines.next().unwrap(), "1,1.5,2,,0.25,0.5,4.25,");
    }
}
