//! Self-distillation: snapshot the trained student as a frozen teacher and
//! retrain the student from its own weights against the combined
//! `lambda_sd * KL + CE` objective, with a fixed or NLL-optimal softening
//! temperature; plus the temperature-sweep harness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{load_checkpoint, save_checkpoint};
use crate::pipeline::{evaluate_params, prepare_corpus, ExperimentConfig, Split};
use crate::train::{
    calibrate_on_val, train_seq2seq, EpochLog, Objective, TeacherSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TMode {
    Fixed,
    Optimal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub t_mode: TMode,
    pub t_fixed: f64,
    pub lambda_sd: f64,
    /// Override the run config's epochs/patience for the distillation stage.
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    /// Standalone objective of the student; defaults to the run objective.
    pub student_objective: Option<Objective>,
    /// Multiply the KL term by T^2 (off in the standard objective).
    pub t2_rescale: bool,
    /// Re-randomize the student instead of continuing from its weights.
    pub reinit_student: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            t_mode: TMode::Fixed,
            t_fixed: 2.0,
            lambda_sd: 1.0,
            epochs: None,
            patience: None,
            student_objective: None,
            t2_rescale: false,
            reinit_student: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_fixed > 0.0) {
            return Err(Error::Config(format!(
                "t_fixed must be > 0, got {}",
                self.t_fixed
            )));
        }
        if self.lambda_sd < 0.0 {
            return Err(Error::Config(format!(
                "lambda_sd must be >= 0, got {}",
                self.lambda_sd
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillRunLog {
    pub t_mode: TMode,
    /// The temperature used for the whole run (no per-epoch re-estimation).
    pub t_used: f64,
    pub lambda_sd: f64,
    pub per_epoch: Vec<EpochLog>,
    pub best_epoch: usize,
    pub final_eval: EvalReport,
    pub notes: Vec<String>,
}

impl DistillRunLog {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Load the student, freeze a copy of it as the teacher, pick the softening
/// temperature (fixed, or NLL-optimal on the teacher's validation
/// predictions, measured once before training), and retrain the student
/// against the combined objective. Returns the new checkpoint path and the
/// run log.
pub fn run_self_distillation(
    student_checkpoint: &Path,
    cfg: &ExperimentConfig,
    dcfg: &DistillConfig,
) -> Result<(PathBuf, DistillRunLog)> {
    cfg.validate()?;
    dcfg.validate()?;
    let prepared = prepare_corpus(cfg)?;
    let loaded = load_checkpoint(student_checkpoint)?;
    if loaded.config.vocab_size != prepared.vocab.size() {
        return Err(Error::Checkpoint(format!(
            "student checkpoint vocab size {} does not match corpus vocab size {}",
            loaded.config.vocab_size,
            prepared.vocab.size()
        )));
    }

    let teacher = loaded.clone();
    let mut notes = Vec::new();
    let t_used = match dcfg.t_mode {
        TMode::Fixed => dcfg.t_fixed,
        TMode::Optimal => {
            let report = calibrate_on_val(
                &teacher,
                &prepared.val,
                &prepared.vocab,
                cfg.batch_size,
                cfg.max_len,
            )
            .map_err(|e| {
                Error::Numeric(format!("optimal-temperature search failed: {e}"))
            })?;
            notes.push(format!(
                "optimal T measured once on the teacher's validation-token predictions \
                 (nll {:.6} -> {:.6})",
                report.nll_before, report.nll_after
            ));
            report.t_optimal
        }
    };

    let mut student = if dcfg.reinit_student {
        notes.push("student re-initialized from scratch".into());
        crate::model::ModelParameters::init(loaded.config, cfg.seed, loaded.kind)?
    } else {
        loaded
    };

    let mut opts = cfg.train_options();
    if let Some(epochs) = dcfg.epochs {
        opts.epochs = epochs;
    }
    if let Some(patience) = dcfg.patience {
        opts.patience = patience;
    }
    if let Some(objective) = dcfg.student_objective {
        opts.objective = objective;
    }

    let spec = TeacherSpec {
        params: &teacher,
        t: t_used,
        lambda_sd: dcfg.lambda_sd,
        t2_rescale: dcfg.t2_rescale,
    };
    let log = train_seq2seq(
        &mut student,
        &prepared.train,
        &prepared.val,
        &prepared.vocab,
        &opts,
        Some(&spec),
        None,
    )?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let ckpt = cfg.out_dir.join("sd.ckpt");
    save_checkpoint(&student, &ckpt)?;
    prepared.vocab.write_to(&cfg.out_dir.join("vocab.txt"))?;

    let final_eval = evaluate_params(&student, &prepared, cfg, Split::Val)?;
    let run_log = DistillRunLog {
        t_mode: dcfg.t_mode,
        t_used,
        lambda_sd: dcfg.lambda_sd,
        per_epoch: log.per_epoch,
        best_epoch: log.best_epoch,
        final_eval,
        notes,
    };
    run_log.write_json(&cfg.out_dir.join("sd.log.json"))?;
    Ok((ckpt, run_log))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: f64,
    pub bleu1: f64,
    pub meteor: f64,
    pub perplexity: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    /// Rows sorted by temperature.
    pub rows: Vec<SweepRow>,
    /// Index of the best-BLEU-1 row.
    pub best: usize,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,bleu1,meteor,perplexity,ece\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.t, r.bleu1, r.meteor, r.perplexity, r.ece
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| T | BLEU-1 | Perplexity | METEOR | ECE |\n|---|---|---|---|---|\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            let marker = if i == self.best { " (best)" } else { "" };
            out.push_str(&format!(
                "| {}{marker} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                r.t, r.bleu1, r.perplexity, r.meteor, r.ece
            ));
        }
        out
    }

    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

/// One full fixed-temperature self-distillation run per value, identical
/// seed and config otherwise. Rows come back sorted by temperature.
pub fn temperature_sweep(
    student_checkpoint: &Path,
    cfg: &ExperimentConfig,
    t_values: &[f64],
) -> Result<SweepTable> {
    if t_values.is_empty() {
        return Err(Error::Config("temperature sweep needs at least one T".into()));
    }
    if let Some(&bad) = t_values.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::Config(format!("sweep temperatures must be > 0, got {bad}")));
    }
    let mut sorted: Vec<f64> = t_values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));

    let mut rows = Vec::with_capacity(sorted.len());
    for &t in &sorted {
        let sub_cfg = cfg.with_out_dir(cfg.out_dir.join(format!("sweep_t{t}")));
        let dcfg = DistillConfig {
            t_mode: TMode::Fixed,
            t_fixed: t,
            ..cfg.distill.clone().unwrap_or_default()
        };
        let (_, log) = run_self_distillation(student_checkpoint, &sub_cfg, &dcfg)?;
        rows.push(SweepRow {
            t,
            bleu1: log.final_eval.bleu1,
            meteor: log.final_eval.meteor,
            perplexity: log.final_eval.perplexity,
            ece: log.final_eval.ece,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.bleu1.total_cmp(&b.bleu1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(SweepTable { rows, best })
}
