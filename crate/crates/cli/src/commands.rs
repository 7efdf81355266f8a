use std::fs;
use std::path::{Path, PathBuf};

use imt_core::corpus::{
    batch_from_examples, load_parallel, make_batches, Example, ParallelBatch, SyntheticTaskSpec,
};
use imt_core::dvq::codebook_init;
use imt_core::evaluation::{at_compatibility, bleu, export_representations, translate_corpus};
use imt_core::interlingua::DistanceKind;
use imt_core::registry::{LanguageModule, ModuleRole, ModuleStack, SystemState};
use imt_core::tokenizer::{bpe_learn, preprocess_line, Preprocessed, SubwordModel};
use imt_core::training::{
    add_language_train_step, dev_loss_add, dev_loss_joint, joint_train_step, train_loop,
    AdamState, TrainingConfig,
};
use imt_core::transformer::{DecoderStack, EncoderStack, ModelConfig};
use imt_core::util::crc32;
use imt_core::{Error, Result};

use crate::config::KvConfig;

const DEFAULT_MAX_WORDS: usize = 80;

/// IMT_SEED wins over config files and flags.
fn effective_seed(configured: u64) -> Result<u64> {
    match std::env::var("IMT_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("IMT_SEED is not an integer: {}", v))),
        Err(_) => Ok(configured),
    }
}

fn ensure_run_dir(name: &str) -> Result<PathBuf> {
    let dir = PathBuf::from("runs").join(name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(|l| l.to_string()).collect())
}

fn load_model(path: &Path) -> Result<SubwordModel> {
    SubwordModel::from_text(&fs::read_to_string(path)?)
}

fn learn_bpe_from_file(path: &Path, merges: usize, lang: &str) -> Result<SubwordModel> {
    let mut corpus = Vec::new();
    for line in read_lines(path)? {
        if let Preprocessed::Tokens(words) = preprocess_line(&line, DEFAULT_MAX_WORDS) {
            corpus.push(words);
        }
    }
    let mut model = bpe_learn(&corpus, merges)?;
    model.language_tag = Some(lang.to_string());
    Ok(model)
}

fn model_config_from(cfg: &KvConfig, vocab_size: usize) -> Result<ModelConfig> {
    let mc = ModelConfig {
        num_blocks: cfg.parse("num_blocks", 2)?,
        num_heads: cfg.parse("num_heads", 2)?,
        model_dim: cfg.parse("model_dim", 64)?,
        ff_dim: cfg.parse("ff_dim", 128)?,
        dropout: 0.0,
        max_len: cfg.parse("max_len", 256)?,
        vocab_size,
    };
    mc.validate()?;
    Ok(mc)
}

fn training_config_from(cfg: &KvConfig) -> Result<TrainingConfig> {
    let defaults = TrainingConfig::default();
    let distance: DistanceKind = cfg.raw("distance").unwrap_or("corr").parse()?;
    let tc = TrainingConfig {
        learning_rate: cfg.parse("learning_rate", defaults.learning_rate)?,
        batch_size: cfg.parse("batch_size", defaults.batch_size)?,
        max_steps: cfg.parse("max_steps", defaults.max_steps)?,
        eval_interval: cfg.parse("eval_interval", defaults.eval_interval)?,
        patience: cfg.parse("patience", defaults.patience)?,
        distance_kind: distance,
        weights: [
            cfg.parse("w_xx", 1.0)?,
            cfg.parse("w_yy", 1.0)?,
            cfg.parse("w_xy", 1.0)?,
            cfg.parse("w_yx", 1.0)?,
            cfg.parse("w_d", 1.0)?,
        ],
        dvq: cfg.parse("dvq", false)?,
        seed: effective_seed(cfg.parse("seed", 0)?)?,
        ..defaults
    };
    tc.validate()?;
    Ok(tc)
}

/// Drop examples whose subword sequences exceed the position table.
fn filter_by_len(examples: Vec<Example>, max_len: usize) -> (Vec<Example>, usize) {
    let before = examples.len();
    let kept: Vec<Example> = examples
        .into_iter()
        .filter(|e| e.src.len() <= max_len && e.tgt.len() <= max_len)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

fn dev_batches(examples: &[Example], batch_size: usize, pair: (String, String)) -> Vec<ParallelBatch> {
    examples
        .chunks(batch_size)
        .map(|chunk| batch_from_examples(chunk, pair.clone()))
        .collect()
}

/// CRC32 over the 32-bit parameter bytes of a module, in named order.
fn params_crc(module: &LanguageModule) -> u32 {
    let mut bytes = Vec::new();
    for (_, t) in module.stack.named_params() {
        for v in t.to_vec() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    crc32(&bytes)
}

pub fn cmd_train_joint(mut cfg: KvConfig, run: &str) -> Result<()> {
    let dir = ensure_run_dir(run)?;

    let lang_x = cfg.require("lang_x")?.to_string();
    let lang_y = cfg.require("lang_y")?.to_string();
    let train_x = PathBuf::from(cfg.require("train_x")?);
    let train_y = PathBuf::from(cfg.require("train_y")?);
    let dev_x = PathBuf::from(cfg.require("dev_x")?);
    let dev_y = PathBuf::from(cfg.require("dev_y")?);
    let merges: usize = cfg.parse("bpe_merges", 32)?;

    let model_x = learn_bpe_from_file(&train_x, merges, &lang_x)?;
    let model_y = learn_bpe_from_file(&train_y, merges, &lang_y)?;
    fs::write(dir.join(format!("bpe.{}.txt", lang_x)), model_x.to_text())?;
    fs::write(dir.join(format!("bpe.{}.txt", lang_y)), model_y.to_text())?;

    let tc = training_config_from(&cfg)?;
    let mc_x = model_config_from(&cfg, model_x.vocab_size())?;
    let mc_y = ModelConfig {
        vocab_size: model_y.vocab_size(),
        ..mc_x.clone()
    };
    let dvq_tables: usize = cfg.parse("dvq_tables", 4)?;
    let dvq_codewords: usize = cfg.parse("dvq_codewords", 16)?;
    cfg.set("seed", tc.seed.to_string());
    cfg.finish()?;
    fs::write(dir.join("config.txt"), cfg.resolved_text())?;

    let (train, train_dropped) =
        load_parallel(&train_x, &train_y, &model_x, &model_y, DEFAULT_MAX_WORDS)?;
    let (train, overlong) = filter_by_len(train, mc_x.max_len);
    let (dev, dev_dropped) = load_parallel(&dev_x, &dev_y, &model_x, &model_y, DEFAULT_MAX_WORDS)?;
    let (dev, _) = filter_by_len(dev, mc_x.max_len);
    if train_dropped + overlong + dev_dropped > 0 {
        eprintln!(
            "dropped {} train / {} dev pairs during preprocessing",
            train_dropped + overlong,
            dev_dropped
        );
    }
    let pair = (lang_x.clone(), lang_y.clone());
    let train_batches = make_batches(&train, tc.batch_size, tc.seed, pair.clone())?;
    let dev_batches = dev_batches(&dev, tc.batch_size, pair);

    let mut state = SystemState::new();
    let fp_x = model_x.fingerprint();
    let fp_y = model_y.fingerprint();
    state.register_module(
        LanguageModule::new(
            &lang_x,
            ModuleRole::Encoder,
            ModuleStack::Encoder(EncoderStack::init(mc_x.clone(), tc.seed.wrapping_add(10))?),
            fp_x,
        ),
        false,
    )?;
    state.register_module(
        LanguageModule::new(
            &lang_x,
            ModuleRole::Decoder,
            ModuleStack::Decoder(DecoderStack::init(mc_x.clone(), tc.seed.wrapping_add(11))?),
            fp_x,
        ),
        false,
    )?;
    state.register_module(
        LanguageModule::new(
            &lang_y,
            ModuleRole::Encoder,
            ModuleStack::Encoder(EncoderStack::init(mc_y.clone(), tc.seed.wrapping_add(12))?),
            fp_y,
        ),
        false,
    )?;
    state.register_module(
        LanguageModule::new(
            &lang_y,
            ModuleRole::Decoder,
            ModuleStack::Decoder(DecoderStack::init(mc_y, tc.seed.wrapping_add(13))?),
            fp_y,
        ),
        false,
    )?;
    if tc.dvq {
        state.set_codebooks(codebook_init(
            dvq_tables,
            dvq_codewords,
            mc_x.model_dim,
            tc.seed.wrapping_add(14),
        )?);
    }

    let mut adam = AdamState::new();
    let tc_step = tc.clone();
    let history = train_loop(
        &mut state,
        &train_batches,
        &dev_batches,
        &tc,
        |st, batch| joint_train_step(st, batch, &tc_step, &mut adam),
        |st| dev_loss_joint(st, &dev_batches, &tc),
    )?;
    fs::write(dir.join("metrics.csv"), history.to_csv())?;
    state.save(&dir.join("system.ckpt"))?;
    println!(
        "train-joint {}: {} steps, best dev loss {:.6} at step {}",
        run,
        history.rows.len(),
        history.best_dev,
        history.best_step
    );
    Ok(())
}

pub fn cmd_add_language(mut cfg: KvConfig, run: &str) -> Result<()> {
    let dir = ensure_run_dir(run)?;

    let checkpoint = PathBuf::from(cfg.require("checkpoint")?);
    let new_lang = cfg.require("new_lang")?.to_string();
    let shared_lang = cfg.require("shared_lang")?.to_string();
    let train_new = PathBuf::from(cfg.require("train_new")?);
    let train_shared = PathBuf::from(cfg.require("train_shared")?);
    let dev_new = PathBuf::from(cfg.require("dev_new")?);
    let dev_shared = PathBuf::from(cfg.require("dev_shared")?);
    let shared_bpe = PathBuf::from(cfg.require("shared_bpe_model")?);
    let merges: usize = cfg.parse("bpe_merges", 32)?;
    let tc = training_config_from(&cfg)?;
    cfg.set("seed", tc.seed.to_string());
    cfg.finish()?;
    fs::write(dir.join("config.txt"), cfg.resolved_text())?;

    let mut state = SystemState::load(&checkpoint)?;
    let shared_model = load_model(&shared_bpe)?;
    let shared_fp = shared_model.fingerprint();
    let dec = state
        .get(&shared_lang, ModuleRole::Decoder)
        .ok_or_else(|| Error::MissingModule(format!("{}/decoder", shared_lang)))?;
    if dec.vocab_fingerprint != shared_fp {
        eprintln!(
            "the supplied {} subword model does not match the one this \
             checkpoint was trained with; re-use the bpe.{}.txt written by \
             the original training run",
            shared_lang, shared_lang
        );
        return Err(Error::VocabFingerprintMismatch {
            language: shared_lang,
            expected: dec.vocab_fingerprint,
            actual: shared_fp,
        });
    }
    let shared_config = dec.config().clone();

    let new_model = learn_bpe_from_file(&train_new, merges, &new_lang)?;
    fs::write(dir.join(format!("bpe.{}.txt", new_lang)), new_model.to_text())?;

    state.set_frozen(&shared_lang, ModuleRole::Decoder, true)?;
    let frozen_before = params_crc(state.get(&shared_lang, ModuleRole::Decoder).unwrap());

    let enc_config = ModelConfig {
        vocab_size: new_model.vocab_size(),
        ..shared_config
    };
    state.register_module(
        LanguageModule::new(
            &new_lang,
            ModuleRole::Encoder,
            ModuleStack::Encoder(EncoderStack::init(
                enc_config.clone(),
                tc.seed.wrapping_add(20),
            )?),
            new_model.fingerprint(),
        ),
        false,
    )?;

    let (train, _) = load_parallel(
        &train_new,
        &train_shared,
        &new_model,
        &shared_model,
        DEFAULT_MAX_WORDS,
    )?;
    let (train, _) = filter_by_len(train, enc_config.max_len);
    let (dev, _) = load_parallel(
        &dev_new,
        &dev_shared,
        &new_model,
        &shared_model,
        DEFAULT_MAX_WORDS,
    )?;
    let (dev, _) = filter_by_len(dev, enc_config.max_len);
    let pair = (new_lang.clone(), shared_lang.clone());
    let train_batches = make_batches(&train, tc.batch_size, tc.seed, pair.clone())?;
    let dev_batches = dev_batches(&dev, tc.batch_size, pair);

    let mut adam = AdamState::new();
    let tc_step = tc.clone();
    let history = train_loop(
        &mut state,
        &train_batches,
        &dev_batches,
        &tc,
        |st, batch| add_language_train_step(st, batch, Some(shared_fp), &tc_step, &mut adam),
        |st| dev_loss_add(st, &dev_batches, &tc),
    )?;

    let frozen_after = params_crc(state.get(&shared_lang, ModuleRole::Decoder).unwrap());
    if frozen_before == frozen_after {
        println!("frozen: unchanged ({} decoder, crc32 {:08x})", shared_lang, frozen_after);
    } else {
        return Err(Error::Config(format!(
            "frozen {} decoder changed during incremental training ({:08x} -> {:08x})",
            shared_lang, frozen_before, frozen_after
        )));
    }

    fs::write(dir.join("metrics.csv"), history.to_csv())?;
    state.save(&dir.join("system.ckpt"))?;
    println!(
        "add-language {}: {} steps, best dev loss {:.6} at step {}, {} modules",
        run,
        history.rows.len(),
        history.best_dev,
        history.best_step,
        state.modules.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_translate(
    checkpoint: &Path,
    src: &str,
    tgt: &str,
    src_model: &Path,
    tgt_model: &Path,
    input: &Path,
    output: &Path,
    batch_size: usize,
) -> Result<()> {
    let state = SystemState::load(checkpoint)?;
    let src_model = load_model(src_model)?;
    let tgt_model = load_model(tgt_model)?;
    let pipeline = state.compose_pipeline(
        src,
        tgt,
        Some(src_model.fingerprint()),
        Some(tgt_model.fingerprint()),
    )?;
    let lines = read_lines(input)?;
    let out = translate_corpus(&pipeline, &src_model, &tgt_model, &lines, batch_size)?;
    let mut text = out.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(output, text)?;
    println!("translated {} lines {}->{}", lines.len(), src, tgt);
    Ok(())
}

pub fn cmd_evaluate_bleu(hyp: &Path, reference: &Path) -> Result<()> {
    let score = bleu(&read_lines(hyp)?, &read_lines(reference)?)?;
    println!("BLEU = {:.2}", score);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate_compat(
    checkpoint: &Path,
    decoder: &str,
    encoder: &str,
    file_a: &Path,
    file_b: &Path,
    model_a: &Path,
    model_b: &Path,
    batch_size: usize,
) -> Result<()> {
    let state = SystemState::load(checkpoint)?;
    let report = at_compatibility(
        &state,
        decoder,
        encoder,
        &read_lines(file_a)?,
        &read_lines(file_b)?,
        &load_model(model_a)?,
        &load_model(model_b)?,
        batch_size,
    )?;
    println!(
        "decoder {}: autoencode {:.2} translate {:.2} a-t {:.2}",
        report.decoder_language,
        report.bleu_autoencode,
        report.bleu_translate,
        report.bleu_a_t
    );
    Ok(())
}

pub fn cmd_evaluate_export(
    checkpoint: &Path,
    langs: &[String],
    files: &[PathBuf],
    models: &[PathBuf],
    output: &Path,
    batch_size: usize,
) -> Result<()> {
    if langs.len() != files.len() || langs.len() != models.len() {
        return Err(Error::Config(
            "--langs, --files and --models must have the same arity".into(),
        ));
    }
    let state = SystemState::load(checkpoint)?;
    let mut inputs = Vec::new();
    for ((lang, file), model_path) in langs.iter().zip(files).zip(models) {
        let model = load_model(model_path)?;
        let rows: Vec<Vec<u32>> = read_lines(file)?
            .iter()
            .map(|line| match preprocess_line(line, DEFAULT_MAX_WORDS) {
                Preprocessed::Tokens(words) => model.apply(&words),
                // Keep one record per input line even for blank lines.
                Preprocessed::Rejected => model.apply(&[]),
            })
            .collect();
        inputs.push((lang.clone(), rows));
    }
    let csv = export_representations(&state, &inputs, batch_size)?;
    fs::write(output, &csv)?;
    println!("wrote {} records to {}", csv.lines().count() - 1, output.display());
    Ok(())
}

pub fn cmd_bpe_learn(input: &Path, merges: usize, output: &Path, lang: Option<&str>) -> Result<()> {
    let model = learn_bpe_from_file(input, merges, lang.unwrap_or(""))?;
    fs::write(output, model.to_text())?;
    println!("learned {} merges, vocab {}", model.merges.len(), model.vocab_size());
    Ok(())
}

pub fn cmd_bpe_apply(model: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = load_model(model)?;
    let mut out = String::new();
    for line in read_lines(input)? {
        if let Preprocessed::Tokens(words) = preprocess_line(&line, DEFAULT_MAX_WORDS) {
            let ids: Vec<String> = model.apply(&words).iter().map(|id| id.to_string()).collect();
            out.push_str(&ids.join(" "));
        }
        out.push('\n');
    }
    fs::write(output, out)?;
    Ok(())
}

pub fn cmd_bpe_decode(model: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = load_model(model)?;
    let mut out = String::new();
    for line in read_lines(input)? {
        let ids: Vec<u32> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse()
                    .map_err(|_| Error::Config(format!("bad token id: {}", tok)))
            })
            .collect::<Result<_>>()?;
        out.push_str(&model.decode(&ids)?);
        out.push('\n');
    }
    fs::write(output, out)?;
    Ok(())
}

pub fn cmd_synth(
    config: Option<&Path>,
    out_dir: &Path,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    seed: Option<u64>,
) -> Result<()> {
    let mut spec = match config {
        Some(path) => SyntheticTaskSpec::from_text(&fs::read_to_string(path)?)?,
        None => SyntheticTaskSpec::from_text("")?,
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.seed = effective_seed(spec.seed)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("task.txt"), spec.to_text())?;

    let total = n_train + n_dev + n_test;
    let corpus = imt_core::corpus::synth_generate(&spec, total);
    let splits = [("train", 0, n_train), ("dev", n_train, n_dev), ("test", n_train + n_dev, n_test)];
    for (name, start, len) in splits {
        for (lang, lines) in [("a", &corpus.a), ("b", &corpus.b), ("c", &corpus.c)] {
            let mut text = lines[start..start + len].join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            fs::write(out_dir.join(format!("{}.{}", name, lang)), text)?;
        }
    }
    println!(
        "wrote {}+{}+{} sentences x 3 languages to {}",
        n_train,
        n_dev,
        n_test,
        out_dir.display()
    );
    Ok(())
}
