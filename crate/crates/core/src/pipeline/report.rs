//! Experiment-matrix runner: trains the four headline models (transformer
//! baseline, ULMFiT-style transfer, its label-smoothed variant, and the
//! temperature-scaled fine-tune), the six-row self-distillation comparison,
//! the temperature sweep, and the sentence-length summary, then writes the
//! markdown tables and CSV files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::write_jsonl;
use crate::distill::{run_self_distillation, temperature_sweep, DistillConfig, TMode};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::pipeline::{
    evaluate_checkpoint, finetune_with_ts, generate_synthetic_corpus, pretrain_lm,
    train_conversational, ExperimentConfig, Split, SynthTask,
};
use crate::train::Objective;

/// Temperatures of the sweep experiment.
pub const SWEEP_TEMPERATURES: [f64; 5] = [1.5, 2.0, 3.0, 4.0, 5.0];

/// Default corpus generated when the configured one is missing.
const DEF_CORPUS_PAIRS: usize = 96;
const DEF_CORPUS_VOCAB_BOUND: usize = 120;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportPaths {
    pub main_table: PathBuf,
    pub distill_table: PathBuf,
    pub sweep_csv: PathBuf,
    pub sweep_table: PathBuf,
    pub lengths_csv: PathBuf,
    pub summary: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Summary {
    corpus: PathBuf,
    seed: u64,
    main_rows: Vec<(String, String, EvalReport)>,
    distill_rows: Vec<(String, String, Option<f64>, EvalReport)>,
    t_optimal_transformer: f64,
    t_optimal_culmfit: f64,
    ts_finetune_t: f64,
    best_sweep_t: f64,
    paths: ReportPaths,
}

/// Report-runner defaults: the standard configuration with stage budgets
/// small enough for a desk-scale end-to-end run.
pub fn default_report_config(out_dir: &Path, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        corpus: out_dir.join("corpus.jsonl"),
        out_dir: out_dir.to_path_buf(),
        seed,
        epochs: 20,
        patience: 6,
        distill: Some(DistillConfig {
            epochs: Some(10),
            patience: Some(4),
            ..DistillConfig::default()
        }),
        ..ExperimentConfig::default()
    }
}

fn stage(base: &ExperimentConfig, dir: &str, objective: Objective) -> ExperimentConfig {
    let mut cfg = base.with_out_dir(base.out_dir.join(dir));
    cfg.objective = objective;
    cfg
}

fn distill_stage(base: &ExperimentConfig, mode: TMode, objective: Objective) -> DistillConfig {
    let mut dcfg = base.distill.clone().unwrap_or_default();
    dcfg.t_mode = mode;
    dcfg.student_objective = Some(objective);
    dcfg
}

/// Run the whole experiment matrix under `cfg.out_dir`, generating the
/// corpus if the configured path does not exist.
pub fn run_report(cfg: &ExperimentConfig) -> Result<ReportPaths> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    if !cfg.corpus.exists() {
        let pairs = generate_synthetic_corpus(
            DEF_CORPUS_PAIRS,
            DEF_CORPUS_VOCAB_BOUND,
            cfg.seed,
            SynthTask::TemplateQa,
        )?;
        write_jsonl(&cfg.corpus, &pairs)?;
        println!(
            "generated synthetic corpus ({DEF_CORPUS_PAIRS} pairs) at {}",
            cfg.corpus.display()
        );
    }

    // ---- headline models -------------------------------------------------
    println!("[1/6] transformer baseline");
    let transformer_cfg = stage(cfg, "transformer", Objective::Ce);
    let (transformer_ckpt, _) = train_conversational(&transformer_cfg, None)?;

    println!("[2/6] language-model pretraining (ce and ls)");
    let lm_ce_cfg = stage(cfg, "lm_ce", Objective::Ce);
    let (lm_ce_ckpt, _) = pretrain_lm(&lm_ce_cfg)?;
    let lm_ls_cfg = stage(cfg, "lm_ls", Objective::Ls);
    let (lm_ls_ckpt, _) = pretrain_lm(&lm_ls_cfg)?;

    println!("[3/6] transferred models (ulmfit, culmfit)");
    let ulmfit_cfg = stage(cfg, "ulmfit", Objective::Ce);
    let (ulmfit_ckpt, _) = train_conversational(&ulmfit_cfg, Some(&lm_ce_ckpt))?;
    let culmfit_cfg = stage(cfg, "culmfit", Objective::Ls);
    let (culmfit_ckpt, _) = train_conversational(&culmfit_cfg, Some(&lm_ls_ckpt))?;

    println!("[4/6] temperature-scaled fine-tuning");
    let ts_cfg = stage(cfg, "finetune_ts", Objective::Ce);
    let (ts_ckpt, ts_manifest, _calibration) = finetune_with_ts(&ulmfit_ckpt, &ts_cfg)?;
    let ts_finetune_t = ts_manifest.t_used.unwrap_or(1.0);

    let eval = |ckpt: &Path, cfg: &ExperimentConfig| evaluate_checkpoint(ckpt, cfg, Split::Val);
    let main_rows: Vec<(String, String, EvalReport)> = vec![
        (
            "Baseline".into(),
            "Transformer".into(),
            eval(&transformer_ckpt, &transformer_cfg)?,
        ),
        (
            "Baseline".into(),
            "ULMFiT".into(),
            eval(&ulmfit_ckpt, &ulmfit_cfg)?,
        ),
        (
            "LS".into(),
            "CULMFiT".into(),
            eval(&culmfit_ckpt, &culmfit_cfg)?,
        ),
        ("TS".into(), "Fine-tune".into(), eval(&ts_ckpt, &ts_cfg)?),
    ];

    // ---- self-distillation matrix ----------------------------------------
    println!("[5/6] self-distillation (fixed and optimal temperatures)");
    let mut distill_rows: Vec<(String, String, Option<f64>, EvalReport)> = vec![
        (
            "Standalone".into(),
            "Transformer".into(),
            None,
            main_rows[0].2.clone(),
        ),
        (
            "Standalone".into(),
            "CULMFiT".into(),
            None,
            main_rows[2].2.clone(),
        ),
    ];
    let sd_runs: [(&str, &Path, TMode, Objective, &str); 4] = [
        (
            "SD Fixed TS",
            &transformer_ckpt,
            TMode::Fixed,
            Objective::Ce,
            "sd_fixed_transformer",
        ),
        (
            "SD Fixed TS",
            &culmfit_ckpt,
            TMode::Fixed,
            Objective::Ls,
            "sd_fixed_culmfit",
        ),
        (
            "SD Optimal TS",
            &transformer_ckpt,
            TMode::Optimal,
            Objective::Ce,
            "sd_optimal_transformer",
        ),
        (
            "SD Optimal TS",
            &culmfit_ckpt,
            TMode::Optimal,
            Objective::Ls,
            "sd_optimal_culmfit",
        ),
    ];
    let mut t_optimal_transformer = f64::NAN;
    let mut t_optimal_culmfit = f64::NAN;
    for (method, ckpt, mode, objective, dir) in sd_runs {
        let run_cfg = stage(cfg, dir, objective);
        let dcfg = distill_stage(cfg, mode, objective);
        let (_, log) = run_self_distillation(ckpt, &run_cfg, &dcfg)?;
        let model = if objective == Objective::Ls {
            "CULMFiT"
        } else {
            "Transformer"
        };
        if mode == TMode::Optimal {
            if objective == Objective::Ls {
                t_optimal_culmfit = log.t_used;
            } else {
                t_optimal_transformer = log.t_used;
            }
        }
        distill_rows.push((
            method.into(),
            model.into(),
            Some(log.t_used),
            log.final_eval.clone(),
        ));
    }

    // ---- temperature sweep ------------------------------------------------
    println!("[6/6] temperature sweep over {SWEEP_TEMPERATURES:?}");
    let sweep_cfg = {
        let mut c = stage(cfg, "sweep", Objective::Ce);
        c.distill = Some(distill_stage(cfg, TMode::Fixed, Objective::Ce));
        c
    };
    let sweep = temperature_sweep(&transformer_ckpt, &sweep_cfg, &SWEEP_TEMPERATURES)?;

    // ---- emit artifacts ----------------------------------------------------
    let paths = ReportPaths {
        main_table: out.join("main_table.md"),
        distill_table: out.join("distill_table.md"),
        sweep_csv: out.join("t_sweep.csv"),
        sweep_table: out.join("t_sweep.md"),
        lengths_csv: out.join("sentence_lengths.csv"),
        summary: out.join("summary.json"),
    };

    let mut main_md = String::from(
        "| Method | Model | BLEU-1 | Perplexity | METEOR | ECE |\n|---|---|---|---|---|---|\n",
    );
    for (method, model, report) in &main_rows {
        main_md.push_str(&report.markdown_row(method, model));
        main_md.push('\n');
    }
    std::fs::write(&paths.main_table, &main_md).map_err(|e| Error::io(&paths.main_table, e))?;

    let mut distill_md = String::from(
        "| Method | Model | T | BLEU-1 | Perplexity | METEOR | ECE |\n|---|---|---|---|---|---|---|\n",
    );
    for (method, model, t, report) in &distill_rows {
        let t_text = match t {
            Some(t) => format!("{t:.3}"),
            None => "-".into(),
        };
        distill_md.push_str(&format!(
            "| {method} | {model} | {t_text} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            report.bleu1, report.perplexity, report.meteor, report.ece
        ));
    }
    std::fs::write(&paths.distill_table, &distill_md)
        .map_err(|e| Error::io(&paths.distill_table, e))?;

    std::fs::write(&paths.sweep_csv, sweep.to_csv())
        .map_err(|e| Error::io(&paths.sweep_csv, e))?;
    std::fs::write(&paths.sweep_table, sweep.to_markdown())
        .map_err(|e| Error::io(&paths.sweep_table, e))?;

    let mut lengths = String::from("model,avg_len\n");
    for (_, model, report) in &main_rows {
        lengths.push_str(&format!("{model},{}\n", report.avg_len));
    }
    std::fs::write(&paths.lengths_csv, &lengths).map_err(|e| Error::io(&paths.lengths_csv, e))?;

    let summary = Summary {
        corpus: cfg.corpus.clone(),
        seed: cfg.seed,
        main_rows,
        distill_rows,
        t_optimal_transformer,
        t_optimal_culmfit,
        ts_finetune_t,
        best_sweep_t: sweep.best_row().t,
        paths: paths.clone(),
    };
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&paths.summary, text).map_err(|e| Error::io(&paths.summary, e))?;

    Ok(paths)
}
