//! Text-generation evaluation: BLEU-1, METEOR (exact-match variant),
//! perplexity, and average generated-sentence length.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::model::{seq2seq_forward, ModelParameters};
use crate::numerics::log_softmax_row;

/// Corpus-level BLEU-1: pooled clipped unigram precision times the brevity
/// penalty `min(1, exp(1 - r/c))`. An empty-prediction corpus scores 0.
pub fn bleu1(predictions: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Numeric("bleu1 needs at least one pair".into()));
    }
    let mut matches = 0usize;
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (pred, reference) in predictions.iter().zip(references) {
        matches += clipped_matches(pred, reference);
        cand_len += pred.len();
        ref_len += reference.len();
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let precision = matches as f64 / cand_len as f64;
    let bp = (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0);
    Ok(precision * bp)
}

/// Per-sentence BLEU-1 values for inspection.
pub fn bleu1_per_sentence(
    predictions: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<Vec<f64>> {
    if predictions.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    predictions
        .iter()
        .zip(references)
        .map(|(p, r)| bleu1(std::slice::from_ref(p), std::slice::from_ref(r)))
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry(t.as_str()).or_insert(0) += 1;
    }
    map
}

fn clipped_matches(pred: &[String], reference: &[String]) -> usize {
    let ref_counts = counts(reference);
    let pred_counts = counts(pred);
    pred_counts
        .iter()
        .map(|(t, &n)| n.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum()
}

/// Exact-match METEOR for one pair:
/// `Fmean * (1 - 0.5 * (chunks / m)^3)` with `Fmean = 10PR / (R + 9P)`,
/// where `m` is the maximum number of unigram matches and `chunks` is the
/// minimum chunk count over alignments achieving `m` matches.
pub fn meteor(prediction: &[String], reference: &[String]) -> f64 {
    let m = clipped_matches(prediction, reference);
    if m == 0 {
        return 0.0;
    }
    let chunks = min_chunks(prediction, reference, m);
    let p = m as f64 / prediction.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Mean METEOR over pairs.
pub fn meteor_corpus(predictions: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Numeric("meteor needs at least one pair".into()));
    }
    let total: f64 = predictions
        .iter()
        .zip(references)
        .map(|(p, r)| meteor(p, r))
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Search state for exact chunk minimization.
struct ChunkSearch<'a> {
    pred: &'a [String],
    reference: &'a [String],
    pred_used: Vec<bool>,
    ref_used: Vec<bool>,
    /// Remaining required matches per token.
    needed: HashMap<&'a str, usize>,
    /// Available pred occurrences per token.
    avail_pred: HashMap<&'a str, usize>,
    remaining: usize,
    best: usize,
    nodes: usize,
}

/// Node budget after which the search returns the best alignment found so
/// far (the greedy bound); desk-scale sentences stay far below it.
const CHUNK_SEARCH_BUDGET: usize = 500_000;

/// Minimum number of chunks over all alignments with `m_star` matches. A
/// chunk is a maximal run of positions contiguous in both sentences.
fn min_chunks(pred: &[String], reference: &[String], m_star: usize) -> usize {
    if pred == reference {
        return 1;
    }
    let mut needed: HashMap<&str, usize> = HashMap::new();
    let ref_counts = counts(reference);
    for (t, &n) in counts(pred).iter() {
        let m = n.min(ref_counts.get(t).copied().unwrap_or(0));
        if m > 0 {
            needed.insert(t, m);
        }
    }
    let avail_pred = counts(pred);
    let mut search = ChunkSearch {
        pred,
        reference,
        pred_used: vec![false; pred.len()],
        ref_used: vec![false; reference.len()],
        needed,
        avail_pred,
        remaining: m_star,
        best: greedy_chunks(pred, reference),
        nodes: 0,
    };
    search.run(0, 0);
    search.best
}

impl<'a> ChunkSearch<'a> {
    fn run(&mut self, from: usize, chunks: usize) {
        self.nodes += 1;
        if self.remaining == 0 {
            self.best = self.best.min(chunks);
            return;
        }
        if chunks + 1 >= self.best || self.nodes > CHUNK_SEARCH_BUDGET {
            return;
        }
        // longest block still available bounds how few chunks can remain
        let longest = self.longest_available_block(from);
        if longest == 0 {
            return;
        }
        if chunks + self.remaining.div_ceil(longest) >= self.best {
            return;
        }

        // first pred position that can still be matched
        let mut i = from;
        while i < self.pred.len() {
            let t = self.pred[i].as_str();
            if !self.pred_used[i] && self.needed.get(t).copied().unwrap_or(0) > 0 {
                break;
            }
            i += 1;
        }
        if i == self.pred.len() {
            return;
        }
        let token = self.pred[i].as_str();

        // option 1: a block starting at (i, j), tried at every feasible
        // length; positions stay consumed while the block grows
        for j in 0..self.reference.len() {
            if self.ref_used[j] || self.reference[j] != self.pred[i] {
                continue;
            }
            let mut len = 0;
            while i + len < self.pred.len()
                && j + len < self.reference.len()
                && !self.pred_used[i + len]
                && !self.ref_used[j + len]
                && self.pred[i + len] == self.reference[j + len]
                && self
                    .needed
                    .get(self.pred[i + len].as_str())
                    .copied()
                    .unwrap_or(0)
                    > 0
            {
                self.take_one(i + len, j + len);
                len += 1;
                self.run(i + len, chunks + 1);
            }
            for k in (0..len).rev() {
                self.release_one(i + k, j + k);
            }
        }

        // option 2: leave position i unmatched if other occurrences suffice
        let avail = self.avail_pred[token];
        if avail > self.needed[token] {
            self.pred_used[i] = true;
            *self.avail_pred.get_mut(token).unwrap() -= 1;
            self.run(i + 1, chunks);
            *self.avail_pred.get_mut(token).unwrap() += 1;
            self.pred_used[i] = false;
        }
    }

    fn take_one(&mut self, pi: usize, rj: usize) {
        self.pred_used[pi] = true;
        self.ref_used[rj] = true;
        let t = self.pred[pi].as_str();
        *self.needed.get_mut(t).unwrap() -= 1;
        *self.avail_pred.get_mut(t).unwrap() -= 1;
        self.remaining -= 1;
    }

    fn release_one(&mut self, pi: usize, rj: usize) {
        self.pred_used[pi] = false;
        self.ref_used[rj] = false;
        let t = self.pred[pi].as_str();
        *self.needed.get_mut(t).unwrap() += 1;
        *self.avail_pred.get_mut(t).unwrap() += 1;
        self.remaining += 1;
    }

    fn longest_available_block(&self, from: usize) -> usize {
        let mut longest = 0;
        for i in from..self.pred.len() {
            if self.pred_used[i] {
                continue;
            }
            for j in 0..self.reference.len() {
                if self.ref_used[j] {
                    continue;
                }
                let mut len = 0;
                while i + len < self.pred.len()
                    && j + len < self.reference.len()
                    && !self.pred_used[i + len]
                    && !self.ref_used[j + len]
                    && self.pred[i + len] == self.reference[j + len]
                {
                    len += 1;
                }
                longest = longest.max(len);
            }
        }
        longest
    }
}

/// Upper bound: repeatedly match the longest common available block.
fn greedy_chunks(pred: &[String], reference: &[String]) -> usize {
    let mut pred_used = vec![false; pred.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut chunks = 0;
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..pred.len() {
            for j in 0..reference.len() {
                let mut len = 0;
                while i + len < pred.len()
                    && j + len < reference.len()
                    && !pred_used[i + len]
                    && !ref_used[j + len]
                    && pred[i + len] == reference[j + len]
                {
                    len += 1;
                }
                if len > best.map_or(0, |(_, _, l)| l) {
                    best = Some((i, j, len));
                }
            }
        }
        match best {
            Some((i, j, len)) => {
                for k in 0..len {
                    pred_used[i + k] = true;
                    ref_used[j + k] = true;
                }
                chunks += 1;
            }
            None => return chunks,
        }
    }
}

/// `exp` of the mean per-token cross-entropy of the ground-truth continuation
/// over all non-pad target tokens, teacher-forced.
pub fn perplexity(params: &ModelParameters, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        for i in 0..batch.len() {
            let src = batch.src_row(i);
            let tgt = batch.tgt_row(i);
            if tgt.len() < 2 {
                continue;
            }
            let logits = seq2seq_forward(params, &src, &tgt[..tgt.len() - 1])?;
            for (pos, &target) in tgt[1..].iter().enumerate() {
                let row: Vec<f64> = logits.row(pos).to_vec();
                total -= log_softmax_row(&row)[target];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Numeric(
            "perplexity needs at least one non-pad target token".into(),
        ));
    }
    Ok((total / count as f64).exp())
}

/// Arithmetic mean of the predictions' token counts.
pub fn avg_sentence_length(predictions: &[Vec<String>]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Numeric(
            "avg_sentence_length needs at least one prediction".into(),
        ));
    }
    let total: usize = predictions.iter().map(|p| p.len()).sum();
    Ok(total as f64 / predictions.len() as f64)
}

/// Evaluation summary for one model on one dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub meteor: f64,
    pub perplexity: f64,
    pub ece: f64,
    pub avg_len: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.bleu1) || !in_unit(self.meteor) || !in_unit(self.ece) {
            return Err(Error::Numeric(format!(
                "metric out of [0,1]: bleu1 {}, meteor {}, ece {}",
                self.bleu1, self.meteor, self.ece
            )));
        }
        if !(self.perplexity >= 1.0) || !self.perplexity.is_finite() {
            return Err(Error::Numeric(format!(
                "perplexity must be finite and >= 1, got {}",
                self.perplexity
            )));
        }
        if self.avg_len < 0.0 {
            return Err(Error::Numeric("avg_len must be >= 0".into()));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One markdown row in the `Method | Model | BLEU-1 | Perplexity |
    /// METEOR | ECE` column order.
    pub fn markdown_row(&self, method: &str, model: &str) -> String {
        format!(
            "| {method} | {model} | {:.4} | {:.4} | {:.4} | {:.4} |",
            self.bleu1, self.perplexity, self.meteor, self.ece
        )
    }
}
