//! Command-line interface for the dialogue training and calibration
//! workbench.

use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use caldial::corpus::{build_vocab, read_jsonl, write_jsonl, Vocab};
use caldial::distill::{run_self_distillation, temperature_sweep, TMode};
use caldial::error::Error;
use caldial::model::load_checkpoint;
use caldial::pipeline::report::{default_report_config, run_report, SWEEP_TEMPERATURES};
use caldial::pipeline::{
    chat, evaluate_checkpoint, finetune_with_ts, generate_synthetic_corpus, pretrain_lm,
    train_conversational, ExperimentConfig, Split, SynthTask,
};

#[derive(Parser)]
#[command(
    name = "caldial",
    about = "Train, calibrate, distill and evaluate a small dialogue transformer",
    version
)]
struct Cli {
    /// Flat JSON config file; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus.
    GenCorpus {
        /// copy | template-qa
        #[arg(long, default_value = "template-qa")]
        task: SynthTask,
        #[arg(long, default_value_t = 96)]
        pairs: usize,
        #[arg(long, default_value_t = 120)]
        vocab_bound: usize,
        /// Target file; defaults to the config's corpus path.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Pretrain the language model on the corpus text.
    PretrainLm,
    /// Train the conversational model, optionally transferring a pretrained
    /// language-model encoder.
    Train {
        #[arg(long)]
        lm_checkpoint: Option<PathBuf>,
    },
    /// Measure the optimal temperature and fine-tune the whole model with
    /// temperature-scaled cross-entropy.
    FinetuneTs {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Self-distillation from a trained checkpoint.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
        /// fixed | optimal (overrides the config's distill block)
        #[arg(long)]
        t_mode: Option<String>,
        /// Fixed temperature (overrides the config's distill block).
        #[arg(long)]
        t: Option<f64>,
    },
    /// One fixed-T self-distillation run per temperature.
    SweepT {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',')]
        t_values: Vec<f64>,
    },
    /// Evaluate a checkpoint on a corpus split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// val | train
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Run the whole experiment matrix and emit tables and CSV files.
    Report,
    /// Interactive greedy-decoding loop; /exit quits.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocab file; by default the vocabulary is rebuilt from the corpus.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => match &cli.command {
            Command::Report => {
                let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report"));
                default_report_config(&out, cli.seed.unwrap_or(42))
            }
            _ => ExperimentConfig::default(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenCorpus {
            task,
            pairs,
            vocab_bound,
            file,
        } => {
            let corpus = generate_synthetic_corpus(pairs, vocab_bound, cfg.seed, task)?;
            let path = file.unwrap_or_else(|| cfg.corpus.clone());
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            write_jsonl(&path, &corpus)?;
            println!("wrote {} pairs to {}", corpus.len(), path.display());
        }
        Command::PretrainLm => {
            let (ckpt, manifest) = pretrain_lm(&cfg)?;
            let best = &manifest.per_epoch[manifest.best_epoch];
            println!(
                "pretrained lm -> {} (best epoch {} val loss {:.4})",
                ckpt.display(),
                manifest.best_epoch,
                best.val_loss.unwrap_or(f64::NAN)
            );
        }
        Command::Train { lm_checkpoint } => {
            let (ckpt, manifest) = train_conversational(&cfg, lm_checkpoint.as_deref())?;
            let best = &manifest.per_epoch[manifest.best_epoch];
            println!(
                "trained -> {} (best epoch {} val bleu-1 {:.4})",
                ckpt.display(),
                manifest.best_epoch,
                best.val_bleu1.unwrap_or(f64::NAN)
            );
        }
        Command::FinetuneTs { checkpoint } => {
            let (ckpt, manifest, calibration) = finetune_with_ts(&checkpoint, &cfg)?;
            println!(
                "fine-tuned with T* = {:.4} -> {} (ece {:.4} -> {:.4})",
                manifest.t_used.unwrap_or(f64::NAN),
                ckpt.display(),
                calibration.ece_before,
                calibration.ece_after
            );
        }
        Command::Distill {
            checkpoint,
            t_mode,
            t,
        } => {
            let mut dcfg = cfg.distill.clone().unwrap_or_default();
            if let Some(mode) = t_mode {
                dcfg.t_mode = match mode.as_str() {
                    "fixed" => TMode::Fixed,
                    "optimal" => TMode::Optimal,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown t-mode {other:?} (expected fixed or optimal)"
                        )))
                    }
                };
            }
            if let Some(t) = t {
                dcfg.t_fixed = t;
            }
            let (ckpt, log) = run_self_distillation(&checkpoint, &cfg, &dcfg)?;
            println!(
                "distilled with T = {:.4} -> {} (val bleu-1 {:.4}, ece {:.4})",
                log.t_used,
                ckpt.display(),
                log.final_eval.bleu1,
                log.final_eval.ece
            );
        }
        Command::SweepT {
            checkpoint,
            t_values,
        } => {
            let values = if t_values.is_empty() {
                SWEEP_TEMPERATURES.to_vec()
            } else {
                t_values
            };
            let table = temperature_sweep(&checkpoint, &cfg, &values)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            let csv_path = cfg.out_dir.join("t_sweep.csv");
            std::fs::write(&csv_path, table.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            let md_path = cfg.out_dir.join("t_sweep.md");
            std::fs::write(&md_path, table.to_markdown()).map_err(|e| Error::io(&md_path, e))?;
            print!("{}", table.to_markdown());
            println!("best T by BLEU-1: {}", table.best_row().t);
        }
        Command::Evaluate { checkpoint, split } => {
            let split = match split.as_str() {
                "val" => Split::Val,
                "train" => Split::Train,
                other => {
                    return Err(Error::Config(format!(
                        "unknown split {other:?} (expected val or train)"
                    )))
                }
            };
            let report = evaluate_checkpoint(&checkpoint, &cfg, split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report => {
            let paths = run_report(&cfg)?;
            println!("report written:");
            println!("  {}", paths.main_table.display());
            println!("  {}", paths.distill_table.display());
            println!("  {}", paths.sweep_csv.display());
            println!("  {}", paths.lengths_csv.display());
            println!("  {}", paths.summary.display());
        }
        Command::Chat { checkpoint, vocab } => {
            let params = load_checkpoint(&checkpoint)?;
            let vocab = match vocab {
                Some(path) => Vocab::read_from(&path)?,
                None => {
                    let pairs = read_jsonl(&cfg.corpus)?;
                    let (train, _) =
                        caldial::corpus::split_dataset(&pairs, cfg.train_fraction, cfg.seed)?;
                    build_vocab(&train, cfg.min_freq)
                }
            };
            let stdin = std::io::stdin();
            chat(
                &params,
                &vocab,
                BufReader::new(stdin.lock()),
                std::io::stdout(),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests exit 0; usage errors exit 1
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
