//! Adam optimizer and the training loops shared by pretraining, conversational
//! fine-tuning, temperature-scaled fine-tuning, and self-distillation.
//!
//! Determinism: every random draw (epoch shuffles, per-sequence dropout
//! streams) comes from one ChaCha generator seeded by the run seed, in a
//! fixed order. Batch gradients are position-weighted sums accumulated in
//! input order, and parameters are rounded to f32 precision after each
//! update, so identical seed and config reproduce trajectories exactly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::calibration::PredictionSet;
use crate::corpus::{encode, make_batches, tokenize, DialoguePair, Vocab};
use crate::error::{Error, Result};
use crate::losses::{
    combined_sd_loss_with_grad, cross_entropy, cross_entropy_with_grad, smooth_targets,
    ts_cross_entropy_with_grad, TargetDistribution,
};
use crate::metrics::bleu1;
use crate::model::{
    greedy_decode, lm_forward, lm_forward_tape, round_f32, seq2seq_forward, seq2seq_forward_tape,
    Mode, ModelParameters, ParamKind, TapeForward,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied per batch; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

/// Scale all gradients down so their global L2 norm is at most `max_norm`.
fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm_sq: f64 = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            *g *= scale;
        }
    }
}

/// Adam with f64 moment state over the named parameter tensors. Updated
/// parameters are rounded back to f32 precision so checkpoints stay
/// bit-exact.
pub struct Adam {
    cfg: OptimizerConfig,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &BTreeMap<String, Mat>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(grad.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(grad.dim()));
            let tensor = params.tensor_mut(name);
            for ((mv, vv), (tv, &g)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(tensor.iter_mut().zip(grad.iter()))
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * g;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *tv = round_f32(*tv - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ce,
    Ls,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without improvement of the selection metric before stopping.
    pub patience: usize,
    pub optimizer: OptimizerConfig,
    pub objective: Objective,
    pub alpha: f64,
    pub seed: u64,
    pub max_len: usize,
    /// Cap on greedy-decoded tokens for the per-epoch validation BLEU-1.
    pub val_decode_cap: usize,
}

/// Frozen teacher for self-distillation steps.
pub struct TeacherSpec<'a> {
    pub params: &'a ModelParameters,
    pub t: f64,
    pub lambda_sd: f64,
    pub t2_rescale: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub train_loss: f64,
    /// KL component of the training loss (0 without a teacher).
    pub l_sd: f64,
    /// Cross-entropy component of the training loss.
    pub l_ce: f64,
    pub val_loss: Option<f64>,
    pub val_bleu1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub per_epoch: Vec<EpochLog>,
    /// Index into `per_epoch` of the selected epoch.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn targets_for(
    out_ids: &[usize],
    classes: usize,
    objective: Objective,
    alpha: f64,
) -> Result<TargetDistribution> {
    let hard = TargetDistribution::one_hot(out_ids, classes)?;
    match objective {
        Objective::Ce => Ok(hard),
        Objective::Ls => smooth_targets(&hard, alpha),
    }
}

/// Run one sequence's backward pass and add its parameter gradients into the
/// batch accumulator.
fn accumulate_grads(tape: &TapeForward, seed: Mat, acc: &mut BTreeMap<String, Mat>) {
    let mut grads = tape.graph.backward(tape.logits, seed);
    for (name, var) in &tape.params {
        if let Some(g) = grads.take(*var) {
            match acc.get_mut(name) {
                Some(total) => *total += &g,
                None => {
                    acc.insert(name.clone(), g);
                }
            }
        }
    }
}

/// Encode a pair's concatenated text as one language-model sequence:
/// `<bos> query-tokens reply-tokens <eos>`, truncated to max_len.
pub fn lm_sequence(pair: &DialoguePair, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut tokens = tokenize(&pair.query);
    tokens.extend(tokenize(&pair.reply));
    tokens.truncate(max_len.saturating_sub(2));
    encode(&tokens, vocab, true)
}

/// Next-token language-model training on the corpus text. Selection metric:
/// validation loss under the training objective. Returns with `params` set
/// to the best epoch's weights.
pub fn train_lm(
    params: &mut ModelParameters,
    train_pairs: &[DialoguePair],
    val_pairs: &[DialoguePair],
    vocab: &Vocab,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    if params.kind != ParamKind::Lm {
        return Err(Error::Config("train_lm requires lm parameters".into()));
    }
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Corpus("empty train or validation split".into()));
    }
    let classes = params.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.optimizer);

    let train_seqs: Vec<Vec<usize>> = train_pairs
        .iter()
        .map(|p| lm_sequence(p, vocab, opts.max_len))
        .collect();
    let val_seqs: Vec<Vec<usize>> = val_pairs
        .iter()
        .map(|p| lm_sequence(p, vocab, opts.max_len))
        .collect();

    let mut log = TrainLog {
        per_epoch: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    for _epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut position_count = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let weights: Vec<usize> = chunk
                .iter()
                .map(|&i| train_seqs[i].len().saturating_sub(1))
                .collect();
            let total: usize = weights.iter().sum();
            if total == 0 {
                continue;
            }
            let mut acc: BTreeMap<String, Mat> = BTreeMap::new();
            for (&i, &n) in chunk.iter().zip(&weights) {
                let item_seed: u64 = rng.random();
                if n == 0 {
                    continue;
                }
                let seq = &train_seqs[i];
                let input = &seq[..seq.len() - 1];
                let out = &seq[1..];
                let mut item_rng = ChaCha8Rng::seed_from_u64(item_seed);
                let tape = lm_forward_tape(params, input, Mode::Train { rng: &mut item_rng })?;
                let targets = targets_for(out, classes, opts.objective, opts.alpha)?;
                let mask = vec![true; out.len()];
                let (loss, grad) =
                    cross_entropy_with_grad(tape.graph.value(tape.logits), &targets, &mask)?;
                loss_sum += loss.value * n as f64;
                position_count += n;
                let scale = n as f64 / total as f64;
                accumulate_grads(&tape, grad * scale, &mut acc);
            }
            clip_global_norm(&mut acc, opts.optimizer.grad_clip);
            adam.step(params, &acc);
        }

        let val_loss = lm_loss(params, &val_seqs, opts.objective, opts.alpha)?;
        log.per_epoch.push(EpochLog {
            train_loss: loss_sum / position_count.max(1) as f64,
            l_sd: 0.0,
            l_ce: loss_sum / position_count.max(1) as f64,
            val_loss: Some(val_loss),
            val_bleu1: None,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            log.best_epoch = log.per_epoch.len() - 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    *params = best_params;
    Ok(log)
}

/// Mean per-token loss of the sequences under the objective, dropout off.
pub fn lm_loss(
    params: &ModelParameters,
    seqs: &[Vec<usize>],
    objective: Objective,
    alpha: f64,
) -> Result<f64> {
    let classes = params.config.vocab_size;
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        if seq.len() < 2 {
            continue;
        }
        let logits = lm_forward(params, &seq[..seq.len() - 1])?;
        let out = &seq[1..];
        let targets = targets_for(out, classes, objective, alpha)?;
        let mask = vec![true; out.len()];
        let loss = cross_entropy(&logits, &targets, &mask)?;
        total += loss.value * out.len() as f64;
        count += out.len();
    }
    if count == 0 {
        return Err(Error::Corpus("no scorable language-model tokens".into()));
    }
    Ok(total / count as f64)
}

/// The per-step loss mode of the seq2seq loop.
enum StepLoss<'a> {
    Plain,
    TempScaled(f64),
    Distill(&'a TeacherSpec<'a>),
}

/// Sequence-to-sequence training. Selection metric: validation BLEU-1 from
/// greedy decoding. With `teacher` set, each step optimizes
/// `lambda_sd * KL + CE`; with `ts_temperature` set, cross-entropy on
/// temperature-scaled logits with hard targets. Returns with `params` set to
/// the best epoch's weights.
pub fn train_seq2seq(
    params: &mut ModelParameters,
    train_pairs: &[DialoguePair],
    val_pairs: &[DialoguePair],
    vocab: &Vocab,
    opts: &TrainOptions,
    teacher: Option<&TeacherSpec<'_>>,
    ts_temperature: Option<f64>,
) -> Result<TrainLog> {
    if params.kind != ParamKind::Seq2Seq {
        return Err(Error::Config(
            "train_seq2seq requires seq2seq parameters".into(),
        ));
    }
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Corpus("empty train or validation split".into()));
    }
    let loss_mode = match (teacher, ts_temperature) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "distillation and TS fine-tuning cannot be combined".into(),
            ))
        }
        (Some(t), None) => StepLoss::Distill(t),
        (None, Some(t)) => StepLoss::TempScaled(t),
        (None, None) => StepLoss::Plain,
    };
    let classes = params.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.optimizer);

    let val_refs: Vec<Vec<String>> = val_pairs.iter().map(|p| tokenize(&p.reply)).collect();

    let mut log = TrainLog {
        per_epoch: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_bleu = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    for _epoch in 0..opts.epochs {
        let mut shuffled: Vec<DialoguePair> = train_pairs.to_vec();
        shuffled.shuffle(&mut rng);
        let batches = make_batches(&shuffled, vocab, opts.batch_size, opts.max_len);

        let mut total_sum = 0.0;
        let mut sd_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut position_count = 0usize;
        for batch in &batches {
            let rows: Vec<(Vec<usize>, Vec<usize>)> = (0..batch.len())
                .map(|i| (batch.src_row(i), batch.tgt_row(i)))
                .collect();
            let weights: Vec<usize> = rows
                .iter()
                .map(|(_, tgt)| tgt.len().saturating_sub(1))
                .collect();
            let total: usize = weights.iter().sum();
            if total == 0 {
                continue;
            }
            let mut acc: BTreeMap<String, Mat> = BTreeMap::new();
            for ((src, tgt), &n) in rows.iter().zip(&weights) {
                let item_seed: u64 = rng.random();
                if n == 0 {
                    continue;
                }
                let tgt_in = &tgt[..tgt.len() - 1];
                let tgt_out = &tgt[1..];
                let mut item_rng = ChaCha8Rng::seed_from_u64(item_seed);
                let tape =
                    seq2seq_forward_tape(params, src, tgt_in, Mode::Train { rng: &mut item_rng })?;
                let student_logits = tape.graph.value(tape.logits);
                let mask = vec![true; tgt_out.len()];

                let (total_v, sd_v, ce_v, grad) = match &loss_mode {
                    StepLoss::Plain => {
                        let targets = targets_for(tgt_out, classes, opts.objective, opts.alpha)?;
                        let (loss, grad) =
                            cross_entropy_with_grad(student_logits, &targets, &mask)?;
                        (loss.value, 0.0, loss.value, grad)
                    }
                    StepLoss::TempScaled(t) => {
                        let targets = TargetDistribution::one_hot(tgt_out, classes)?;
                        let (loss, grad) =
                            ts_cross_entropy_with_grad(student_logits, &targets, *t, &mask)?;
                        (loss.value, 0.0, loss.value, grad)
                    }
                    StepLoss::Distill(spec) => {
                        let teacher_logits = seq2seq_forward(spec.params, src, tgt_in)?;
                        let targets = targets_for(tgt_out, classes, opts.objective, opts.alpha)?;
                        let (sd, grad) = combined_sd_loss_with_grad(
                            &teacher_logits,
                            student_logits,
                            &targets,
                            spec.t,
                            spec.lambda_sd,
                            &mask,
                            spec.t2_rescale,
                        )?;
                        (sd.total.value, sd.l_sd, sd.l_ce, grad)
                    }
                };
                total_sum += total_v * n as f64;
                sd_sum += sd_v * n as f64;
                ce_sum += ce_v * n as f64;
                position_count += n;
                let scale = n as f64 / total as f64;
                accumulate_grads(&tape, grad * scale, &mut acc);
            }
            clip_global_norm(&mut acc, opts.optimizer.grad_clip);
            adam.step(params, &acc);
        }

        let denom = position_count.max(1) as f64;
        let predictions = decode_pairs(params, val_pairs, vocab, opts.val_decode_cap)?;
        let val_bleu = bleu1(&predictions, &val_refs)?;
        let val_loss = seq2seq_loss(params, val_pairs, vocab, opts)?;
        log.per_epoch.push(EpochLog {
            train_loss: total_sum / denom,
            l_sd: sd_sum / denom,
            l_ce: ce_sum / denom,
            val_loss: Some(val_loss),
            val_bleu1: Some(val_bleu),
        });

        if val_bleu > best_bleu {
            best_bleu = val_bleu;
            best_params = params.clone();
            log.best_epoch = log.per_epoch.len() - 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    *params = best_params;
    Ok(log)
}

/// Mean per-token validation loss under the training objective, dropout off.
pub fn seq2seq_loss(
    params: &ModelParameters,
    pairs: &[DialoguePair],
    vocab: &Vocab,
    opts: &TrainOptions,
) -> Result<f64> {
    let classes = params.config.vocab_size;
    let batches = make_batches(pairs, vocab, opts.batch_size, opts.max_len);
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in &batches {
        for i in 0..batch.len() {
            let src = batch.src_row(i);
            let tgt = batch.tgt_row(i);
            if tgt.len() < 2 {
                continue;
            }
            let tgt_out = &tgt[1..];
            let logits = seq2seq_forward(params, &src, &tgt[..tgt.len() - 1])?;
            let targets = targets_for(tgt_out, classes, opts.objective, opts.alpha)?;
            let mask = vec![true; tgt_out.len()];
            let loss = cross_entropy(&logits, &targets, &mask)?;
            total += loss.value * tgt_out.len() as f64;
            count += tgt_out.len();
        }
    }
    if count == 0 {
        return Err(Error::Corpus("no scorable target tokens".into()));
    }
    Ok(total / count as f64)
}

/// Greedy-decode a reply for every pair's query, in input order.
pub fn decode_pairs(
    params: &ModelParameters,
    pairs: &[DialoguePair],
    vocab: &Vocab,
    max_new_tokens: usize,
) -> Result<Vec<Vec<String>>> {
    pairs
        .iter()
        .map(|p| decode_reply(params, &p.query, vocab, max_new_tokens))
        .collect()
}

/// Greedy-decode one reply as a token list.
pub fn decode_reply(
    params: &ModelParameters,
    query: &str,
    vocab: &Vocab,
    max_new_tokens: usize,
) -> Result<Vec<String>> {
    let mut tokens = tokenize(query);
    tokens.truncate(params.config.max_len.saturating_sub(2));
    let src = encode(&tokens, vocab, true);
    let ids = greedy_decode(params, &src, max_new_tokens)?;
    Ok(crate::corpus::decode(&ids, vocab))
}

/// Teacher-forced token-level predictions over the pairs: one sample per
/// non-pad target token, logits row plus the true token id.
pub fn collect_predictions(
    params: &ModelParameters,
    pairs: &[DialoguePair],
    vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
) -> Result<PredictionSet> {
    let classes = params.config.vocab_size;
    let batches = make_batches(pairs, vocab, batch_size, max_len);
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for batch in &batches {
        for i in 0..batch.len() {
            let src = batch.src_row(i);
            let tgt = batch.tgt_row(i);
            if tgt.len() < 2 {
                continue;
            }
            let logits = seq2seq_forward(params, &src, &tgt[..tgt.len() - 1])?;
            for (pos, &target) in tgt[1..].iter().enumerate() {
                rows.extend(logits.row(pos).iter());
                labels.push(target);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Corpus("no target tokens to collect".into()));
    }
    let logits = Mat::from_shape_vec((labels.len(), classes), rows)
        .map_err(|e| Error::Shape(e.to_string()))?;
    PredictionSet::new(logits, labels)
}

/// Mean confidence (max softmax at T=1) over teacher-forced target tokens.
pub fn mean_confidence(
    params: &ModelParameters,
    pairs: &[DialoguePair],
    vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
) -> Result<f64> {
    let preds = collect_predictions(params, pairs, vocab, batch_size, max_len)?;
    preds.mean_confidence(1.0)
}

/// Temperature calibration of a model on held-out pairs: collect
/// teacher-forced token predictions and search the NLL-optimal temperature.
pub fn calibrate_on_val(
    params: &ModelParameters,
    pairs: &[DialoguePair],
    vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
) -> Result<crate::calibration::CalibrationReport> {
    let preds = collect_predictions(params, pairs, vocab, batch_size, max_len)?;
    crate::calibration::calibrate(&preds)
}
