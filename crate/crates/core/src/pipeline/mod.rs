//! End-to-end workflows: language-model pretraining, conversational training
//! with optional encoder transfer, temperature-scaled fine-tuning,
//! evaluation, synthetic corpus generation, the chat loop, and the
//! experiment-matrix report runner.

pub mod report;
mod synth;

pub use synth::{generate_synthetic_corpus, SynthTask};

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{ece, CalibrationReport, DEFAULT_ECE_BINS};
use crate::corpus::{
    build_vocab, make_batches, read_jsonl, split_dataset, tokenize, DialoguePair, Vocab,
};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::metrics::{avg_sentence_length, bleu1, meteor_corpus, perplexity, EvalReport};
use crate::model::{
    load_checkpoint, save_checkpoint, transfer_encoder, ModelConfig, ModelParameters, ParamKind,
};
use crate::train::{
    calibrate_on_val, collect_predictions, decode_pairs, train_lm, train_seq2seq, EpochLog,
    Objective, OptimizerConfig, TrainLog, TrainOptions,
};

/// Flat run configuration; every field has a default so a minimal config
/// file (or none at all) runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: PathBuf,
    pub seed: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub objective: Objective,
    pub alpha: f64,
    pub optimizer: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip per batch; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub train_fraction: f64,
    pub min_freq: usize,
    /// Cap on decoded tokens for per-epoch validation BLEU-1.
    pub val_decode_cap: usize,
    pub distill: Option<DistillConfig>,
    pub ts_finetune: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            seed: 42,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 256,
            max_len: 64,
            dropout: 0.1,
            objective: Objective::Ce,
            alpha: 0.1,
            optimizer: "adam".into(),
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 4,
            epochs: 200,
            patience: 30,
            train_fraction: 0.8,
            min_freq: 1,
            val_decode_cap: 24,
            distill: None,
            ts_finetune: false,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizer != "adam" {
            return Err(Error::Config(format!(
                "unknown optimizer {:?} (only \"adam\" is supported)",
                self.optimizer
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs and patience must be positive".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        // shape fields are checked against the vocab at model build time
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ffn: self.d_ffn,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            optimizer: OptimizerConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                grad_clip: self.grad_clip,
            },
            objective: self.objective,
            alpha: self.alpha,
            seed: self.seed,
            max_len: self.max_len,
            val_decode_cap: self.val_decode_cap,
        }
    }

    /// Copy with a different output directory.
    pub fn with_out_dir(&self, out_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = self.clone();
        cfg.out_dir = out_dir.into();
        cfg
    }
}

/// Deterministically loaded and split corpus with its vocabulary (built on
/// the train split only).
pub struct Prepared {
    pub train: Vec<DialoguePair>,
    pub val: Vec<DialoguePair>,
    pub vocab: Vocab,
}

pub fn prepare_corpus(cfg: &ExperimentConfig) -> Result<Prepared> {
    let pairs = read_jsonl(&cfg.corpus)?;
    if pairs.is_empty() {
        return Err(Error::Corpus(format!(
            "corpus {} is empty",
            cfg.corpus.display()
        )));
    }
    let (train, val) = split_dataset(&pairs, cfg.train_fraction, cfg.seed)?;
    let vocab = build_vocab(&train, cfg.min_freq);
    Ok(Prepared { train, val, vocab })
}

fn check_vocab(params: &ModelParameters, vocab: &Vocab) -> Result<()> {
    if params.config.vocab_size != vocab.size() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocab size {} does not match corpus vocab size {}",
            params.config.vocab_size,
            vocab.size()
        )));
    }
    Ok(())
}

/// Everything needed to reproduce one training run byte-for-byte with the
/// same build.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config: ExperimentConfig,
    pub per_epoch: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    pub vocab_file: PathBuf,
    pub wall_clock_secs: f64,
    pub t_used: Option<f64>,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn new(
        stage: &str,
        cfg: &ExperimentConfig,
        log: TrainLog,
        checkpoint: PathBuf,
        vocab_file: PathBuf,
        started: Instant,
        t_used: Option<f64>,
        notes: Vec<String>,
    ) -> Self {
        RunManifest {
            stage: stage.into(),
            config: cfg.clone(),
            per_epoch: log.per_epoch,
            best_epoch: log.best_epoch,
            stopped_early: log.stopped_early,
            checkpoint,
            vocab_file,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            t_used,
            notes,
        }
    }
}

fn write_run_outputs(
    params: &ModelParameters,
    vocab: &Vocab,
    cfg: &ExperimentConfig,
    ckpt_name: &str,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let ckpt = cfg.out_dir.join(ckpt_name);
    save_checkpoint(params, &ckpt)?;
    let vocab_file = cfg.out_dir.join("vocab.txt");
    vocab.write_to(&vocab_file)?;
    Ok((ckpt, vocab_file))
}

/// Stage one: next-token language-model pretraining on the corpus's own
/// text stream (each pair's query followed by its reply). Best epoch by
/// validation loss.
pub fn pretrain_lm(cfg: &ExperimentConfig) -> Result<(PathBuf, RunManifest)> {
    cfg.validate()?;
    let started = Instant::now();
    let prepared = prepare_corpus(cfg)?;
    let model_cfg = cfg.model_config(prepared.vocab.size());
    let mut params = ModelParameters::init(model_cfg, cfg.seed, ParamKind::Lm)?;
    let log = train_lm(
        &mut params,
        &prepared.train,
        &prepared.val,
        &prepared.vocab,
        &cfg.train_options(),
    )?;
    let (ckpt, vocab_file) = write_run_outputs(&params, &prepared.vocab, cfg, "lm.ckpt")?;
    let manifest = RunManifest::new(
        "pretrain-lm",
        cfg,
        log,
        ckpt.clone(),
        vocab_file,
        started,
        None,
        vec![
            "lm pretrained on this corpus's own text (queries + replies); no external corpus"
                .into(),
        ],
    );
    manifest.write_json(&cfg.out_dir.join("lm.manifest.json"))?;
    Ok((ckpt, manifest))
}

/// Conversational training. With a pretrained language-model checkpoint the
/// encoder (embeddings + encoder layers) is transferred before training.
/// Best epoch by validation BLEU-1.
pub fn train_conversational(
    cfg: &ExperimentConfig,
    lm_checkpoint: Option<&Path>,
) -> Result<(PathBuf, RunManifest)> {
    cfg.validate()?;
    let started = Instant::now();
    let prepared = prepare_corpus(cfg)?;
    let model_cfg = cfg.model_config(prepared.vocab.size());
    let mut params = ModelParameters::init(model_cfg, cfg.seed, ParamKind::Seq2Seq)?;
    let mut notes = Vec::new();
    if let Some(lm_path) = lm_checkpoint {
        let lm = load_checkpoint(lm_path)?;
        check_vocab(&lm, &prepared.vocab)?;
        params = transfer_encoder(&lm, &params)?;
        notes.push(format!("encoder transferred from {}", lm_path.display()));
    } else {
        notes.push("trained from scratch (no language-model transfer)".into());
    }
    let log = train_seq2seq(
        &mut params,
        &prepared.train,
        &prepared.val,
        &prepared.vocab,
        &cfg.train_options(),
        None,
        None,
    )?;
    let (ckpt, vocab_file) = write_run_outputs(&params, &prepared.vocab, cfg, "conv.ckpt")?;
    let manifest = RunManifest::new(
        "train",
        cfg,
        log,
        ckpt.clone(),
        vocab_file,
        started,
        None,
        notes,
    );
    manifest.write_json(&cfg.out_dir.join("conv.manifest.json"))?;
    Ok((ckpt, manifest))
}

/// Measure the NLL-optimal temperature on the loaded model's validation
/// predictions, then fine-tune the whole model with temperature-scaled
/// cross-entropy at that fixed temperature.
pub fn finetune_with_ts(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
) -> Result<(PathBuf, RunManifest, CalibrationReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let prepared = prepare_corpus(cfg)?;
    let mut params = load_checkpoint(checkpoint)?;
    check_vocab(&params, &prepared.vocab)?;

    let report = calibrate_on_val(
        &params,
        &prepared.val,
        &prepared.vocab,
        cfg.batch_size,
        cfg.max_len,
    )?;
    let t_star = report.t_optimal;

    let log = train_seq2seq(
        &mut params,
        &prepared.train,
        &prepared.val,
        &prepared.vocab,
        &cfg.train_options(),
        None,
        Some(t_star),
    )?;
    let (ckpt, vocab_file) = write_run_outputs(&params, &prepared.vocab, cfg, "ts.ckpt")?;
    report.write_json(&cfg.out_dir.join("calibration.json"))?;
    report
        .bins
        .write_csv(&cfg.out_dir.join("reliability_bins.csv"))?;
    let manifest = RunManifest::new(
        "finetune-ts",
        cfg,
        log,
        ckpt.clone(),
        vocab_file,
        started,
        Some(t_star),
        vec![format!(
            "whole model fine-tuned with temperature-scaled cross-entropy at T = {t_star}"
        )],
    );
    manifest.write_json(&cfg.out_dir.join("ts.manifest.json"))?;
    Ok((ckpt, manifest, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Evaluate parameters on one corpus split: greedy-decode every query and
/// score BLEU-1, METEOR and average length against the references, plus
/// teacher-forced perplexity and token-level ECE.
pub fn evaluate_params(
    params: &ModelParameters,
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    split: Split,
) -> Result<EvalReport> {
    check_vocab(params, &prepared.vocab)?;
    let pairs = match split {
        Split::Train => &prepared.train,
        Split::Val => &prepared.val,
    };
    if pairs.is_empty() {
        return Err(Error::Corpus("evaluation split is empty".into()));
    }
    let predictions = decode_pairs(params, pairs, &prepared.vocab, cfg.max_len)?;
    let references: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.reply)).collect();
    let bleu = bleu1(&predictions, &references)?;
    let met = meteor_corpus(&predictions, &references)?;
    let avg_len = avg_sentence_length(&predictions)?;
    let batches = make_batches(pairs, &prepared.vocab, cfg.batch_size, cfg.max_len);
    let ppl = perplexity(params, &batches)?;
    let preds = collect_predictions(params, pairs, &prepared.vocab, cfg.batch_size, cfg.max_len)?;
    let (ece_value, _) = ece(&preds, 1.0, DEFAULT_ECE_BINS)?;
    let report = EvalReport {
        bleu1: bleu,
        meteor: met,
        perplexity: ppl,
        ece: ece_value,
        avg_len,
        n_samples: pairs.len(),
    };
    report.validate()?;
    Ok(report)
}

pub fn evaluate_checkpoint(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    split: Split,
) -> Result<EvalReport> {
    cfg.validate()?;
    let prepared = prepare_corpus(cfg)?;
    let params = load_checkpoint(checkpoint)?;
    evaluate_params(&params, &prepared, cfg, split)
}

/// Line-oriented chat loop: reads a query, greedy-decodes a reply, prints
/// it. `/exit` quits, a blank line re-prompts without a model call.
pub fn chat(
    params: &ModelParameters,
    vocab: &Vocab,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    check_vocab(params, vocab)?;
    let prompt = |out: &mut dyn Write| -> std::io::Result<()> {
        write!(out, "> ")?;
        out.flush()
    };
    prompt(&mut output).map_err(|e| Error::io("<stdout>", e))?;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        let line = line.trim();
        if line == "/exit" {
            break;
        }
        if !line.is_empty() {
            match crate::train::decode_reply(params, line, vocab, params.config.max_len) {
                Ok(tokens) if tokens.is_empty() => {
                    writeln!(output, "(empty reply)").map_err(|e| Error::io("<stdout>", e))?;
                }
                Ok(tokens) => {
                    writeln!(output, "{}", tokens.join(" "))
                        .map_err(|e| Error::io("<stdout>", e))?;
                }
                Err(e) => {
                    writeln!(output, "decode error: {e}").map_err(|e| Error::io("<stdout>", e))?;
                }
            }
        }
        prompt(&mut output).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            corpus: dir.join("corpus.jsonl"),
            out_dir: dir.join("out"),
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 24,
            max_len: 24,
            epochs: 3,
            patience: 3,
            lr: 0.005,
            val_decode_cap: 10,
            ..ExperimentConfig::default()
        }
    }

    fn write_corpus(dir: &Path, n: usize) -> PathBuf {
        let pairs = generate_synthetic_corpus(n, 64, 3, SynthTask::Copy).unwrap();
        let path = dir.join("corpus.jsonl");
        crate::corpus::write_jsonl(&path, &pairs).unwrap();
        path
    }

    #[test]
    fn config_defaults_round_trip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.lr, cfg.lr);

        // a minimal config runs on defaults
        let minimal: ExperimentConfig = serde_json::from_str("{}").unwrap();
        minimal.validate().unwrap();
        assert_eq!(minimal.batch_size, 4);
        assert_eq!(minimal.lr, 0.01);

        let bad: ExperimentConfig =
            serde_json::from_str("{\"optimizer\": \"sgd\"}").unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pretrain_then_train_then_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 24);
        let cfg = small_cfg(dir.path());

        let (lm_ckpt, lm_manifest) = pretrain_lm(&cfg).unwrap();
        assert!(lm_ckpt.exists());
        assert!(!lm_manifest.per_epoch.is_empty());
        assert!(lm_manifest.per_epoch[lm_manifest.best_epoch].val_loss.is_some());

        let (conv_ckpt, conv_manifest) = train_conversational(&cfg, Some(&lm_ckpt)).unwrap();
        assert!(conv_ckpt.exists());
        let best = conv_manifest.best_epoch;
        let best_bleu = conv_manifest.per_epoch[best].val_bleu1.unwrap();
        for e in &conv_manifest.per_epoch {
            assert!(e.val_bleu1.unwrap() <= best_bleu);
        }

        let report = evaluate_checkpoint(&conv_ckpt, &cfg, Split::Val).unwrap();
        report.validate().unwrap();
        let report2 = evaluate_checkpoint(&conv_ckpt, &cfg, Split::Val).unwrap();
        assert_eq!(report.bleu1, report2.bleu1);
        assert_eq!(report.perplexity, report2.perplexity);
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 24);
        let cfg = small_cfg(dir.path());
        let (_, _) = pretrain_lm(&cfg).unwrap();

        // a corpus with a different vocabulary
        let other = generate_synthetic_corpus(24, 32, 9, SynthTask::Copy).unwrap();
        crate::corpus::write_jsonl(&cfg.corpus, &other).unwrap();
        let lm_ckpt = cfg.out_dir.join("lm.ckpt");
        assert!(train_conversational(&cfg, Some(&lm_ckpt)).is_err());
    }

    #[test]
    fn chat_replies_and_exits() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 24);
        let cfg = small_cfg(dir.path());
        let prepared = prepare_corpus(&cfg).unwrap();
        let params = ModelParameters::init(
            cfg.model_config(prepared.vocab.size()),
            1,
            ParamKind::Seq2Seq,
        )
        .unwrap();

        let input = b"hello there\n\n/exit\n" as &[u8];
        let mut output = Vec::new();
        chat(&params, &prepared.vocab, input, &mut output).unwrap();
        let text = String::from_utf8(output).unwrap();
        // three prompts: initial, after the reply, after the blank line
        assert_eq!(text.matches("> ").count(), 3);
    }
}
