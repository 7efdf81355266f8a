mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::KvConfig;
use imt_core::Result;

/// Incremental multilingual translation toolkit.
#[derive(Parser)]
#[command(name = "imt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn or apply subword models.
    Bpe {
        #[command(subcommand)]
        action: BpeAction,
    },
    /// Joint bilingual training: four tasks plus the interlingua distance.
    TrainJoint {
        /// Run name; artifacts land in runs/<name>/.
        #[arg(long)]
        run: String,
        /// key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value overrides (flags win over the file).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Distance kind: corr|max|l1|l2|none.
        #[arg(long)]
        distance: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Train a new encoder against a frozen decoder from a checkpoint.
    AddLanguage {
        #[arg(long)]
        run: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Compose any encoder with any decoder and translate a file.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[arg(long)]
        src_model: PathBuf,
        #[arg(long)]
        tgt_model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Scoring and analysis over a checkpoint.
    Evaluate {
        #[command(subcommand)]
        mode: EvaluateMode,
    },
    /// Generate the three-way synthetic corpus.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        dev: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum BpeAction {
    /// Learn a subword model from a text file.
    Learn {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 32)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        lang: Option<String>,
    },
    /// Tokenize a text file into id sequences (one line of ids per line).
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Reverse `apply`: id sequences back to text.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvaluateMode {
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Autoencode/translate/A-T BLEU triple for one decoder.
    Compat {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Decoder language (the report's subject).
        #[arg(long)]
        decoder: String,
        /// Encoder language feeding the translation pipeline.
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        file_a: PathBuf,
        #[arg(long)]
        file_b: PathBuf,
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Pooled-representation CSV for offline projection tools.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        langs: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        files: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        models: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
}

fn load_config(
    path: Option<&PathBuf>,
    overrides: &[String],
    distance: Option<&String>,
    seed: Option<u64>,
    max_steps: Option<usize>,
) -> Result<KvConfig> {
    let mut cfg = match path {
        Some(p) => KvConfig::from_file(p)?,
        None => KvConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    if let Some(d) = distance {
        cfg.set("distance", d.clone());
    }
    if let Some(s) = seed {
        cfg.set("seed", s.to_string());
    }
    if let Some(m) = max_steps {
        cfg.set("max_steps", m.to_string());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bpe { action } => match action {
            BpeAction::Learn {
                input,
                merges,
                output,
                lang,
            } => commands::cmd_bpe_learn(&input, merges, &output, lang.as_deref()),
            BpeAction::Apply { model, input, output } => {
                commands::cmd_bpe_apply(&model, &input, &output)
            }
            BpeAction::Decode { model, input, output } => {
                commands::cmd_bpe_decode(&model, &input, &output)
            }
        },
        Command::TrainJoint {
            run,
            config,
            overrides,
            distance,
            seed,
            max_steps,
        } => {
            let cfg = load_config(config.as_ref(), &overrides, distance.as_ref(), seed, max_steps)?;
            commands::cmd_train_joint(cfg, &run)
        }
        Command::AddLanguage {
            run,
            config,
            overrides,
            seed,
            max_steps,
        } => {
            let cfg = load_config(config.as_ref(), &overrides, None, seed, max_steps)?;
            commands::cmd_add_language(cfg, &run)
        }
        Command::Translate {
            checkpoint,
            src,
            tgt,
            src_model,
            tgt_model,
            input,
            output,
            batch_size,
        } => commands::cmd_translate(
            &checkpoint,
            &src,
            &tgt,
            &src_model,
            &tgt_model,
            &input,
            &output,
            batch_size,
        ),
        Command::Evaluate { mode } => match mode {
            EvaluateMode::Bleu { hyp, reference } => commands::cmd_evaluate_bleu(&hyp, &reference),
            EvaluateMode::Compat {
                checkpoint,
                decoder,
                encoder,
                file_a,
                file_b,
                model_a,
                model_b,
                batch_size,
            } => commands::cmd_evaluate_compat(
                &checkpoint,
                &decoder,
                &encoder,
                &file_a,
                &file_b,
                &model_a,
                &model_b,
                batch_size,
            ),
            EvaluateMode::Export {
                checkpoint,
                langs,
                files,
                models,
                output,
                batch_size,
            } => commands::cmd_evaluate_export(
                &checkpoint,
                &langs,
                &files,
                &models,
                &output,
                batch_size,
            ),
        },
        Command::Synth {
            config,
            out_dir,
            train,
            dev,
            test,
            seed,
        } => commands::cmd_synth(config.as_deref(), &out_dir, train, dev, test, seed),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
