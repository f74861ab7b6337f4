//! Confidence calibration: temperature scaling of logits, optimal-temperature
//! search by validation NLL minimization, and Expected Calibration Error with
//! reliability bins.

use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::numerics::{argmax, log_softmax_row, softmax_row};

/// Coarse search grid: 33 log-spaced temperatures on [0.25, 10].
const GRID_LO: f64 = 0.25;
const GRID_HI: f64 = 10.0;
const GRID_POINTS: usize = 33;
/// Interval width at which the golden-section refinement stops.
const GOLDEN_TOL: f64 = 1e-3;
/// Smallest set the optimal-T search accepts.
const MIN_SEARCH_SAMPLES: usize = 10;

pub const DEFAULT_ECE_BINS: usize = 15;

/// Raw per-sample logits with the true class labels.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    logits: Mat,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(logits: Mat, labels: Vec<usize>) -> Result<Self> {
        if logits.nrows() == 0 {
            return Err(Error::Numeric("prediction set is empty".into()));
        }
        if logits.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} logit rows vs {} labels",
                logits.nrows(),
                labels.len()
            )));
        }
        let classes = logits.ncols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(PredictionSet { logits, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Mat {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Mean negative log-likelihood of the labels at temperature `t`.
    pub fn nll(&self, t: f64) -> Result<f64> {
        check_temperature(t)?;
        let mut total = 0.0;
        for (row, &label) in self.logits.axis_iter(Axis(0)).zip(&self.labels) {
            let scaled: Vec<f64> = row.iter().map(|&z| z / t).collect();
            total -= log_softmax_row(&scaled)[label];
        }
        Ok(total / self.len() as f64)
    }

    /// Mean max-softmax confidence at temperature `t`.
    pub fn mean_confidence(&self, t: f64) -> Result<f64> {
        check_temperature(t)?;
        let mut total = 0.0;
        for row in self.logits.axis_iter(Axis(0)) {
            let row: Vec<f64> = row.to_vec();
            total += scale_probs(&row, t)?.confidence;
        }
        Ok(total / self.len() as f64)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// Temperature-scaled probabilities for one logit row.
#[derive(Debug, Clone)]
pub struct ScaledProbs {
    pub probs: Vec<f64>,
    /// Index of the maximum raw logit (unchanged by scaling).
    pub predicted: usize,
    /// Probability assigned to `predicted` — the confidence score.
    pub confidence: f64,
}

/// `softmax(logits / T)`. The argmax is taken on the raw logits, so the
/// prediction is invariant in T by construction; only the confidence moves.
pub fn scale_probs(logits: &[f64], t: f64) -> Result<ScaledProbs> {
    check_temperature(t)?;
    if logits.is_empty() {
        return Err(Error::Shape("empty logit row".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|&z| z / t).collect();
    let probs = softmax_row(&scaled);
    let predicted = argmax(logits);
    let confidence = probs[predicted];
    Ok(ScaledProbs {
        probs,
        predicted,
        confidence,
    })
}

/// Minimize `f` on [lo, hi] by golden-section search; returns the midpoint of
/// the final bracket.
fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    (lo + hi) / 2.0
}

/// The temperature minimizing validation NLL: coarse log-spaced grid on
/// [0.25, 10], then golden-section refinement on the bracketing interval.
///
/// A flat NLL profile (constant logits) returns 1.0 by convention. The
/// result never has higher NLL than T=1 or than any grid point.
pub fn find_optimal_temperature(preds: &PredictionSet) -> Result<f64> {
    if preds.len() < MIN_SEARCH_SAMPLES {
        return Err(Error::Numeric(format!(
            "optimal-T search needs at least {MIN_SEARCH_SAMPLES} samples, got {}",
            preds.len()
        )));
    }
    if preds.logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric(
            "optimal-T search requires finite logits".into(),
        ));
    }

    let ratio = (GRID_HI / GRID_LO).powf(1.0 / (GRID_POINTS - 1) as f64);
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| GRID_LO * ratio.powi(i as i32))
        .collect();
    let nll_of = |t: f64| preds.nll(t).expect("grid temperatures are positive");

    let nlls: Vec<f64> = grid.iter().map(|&t| nll_of(t)).collect();
    let spread = nlls.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - nlls.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread < 1e-12 {
        return Ok(1.0);
    }

    let best = (0..GRID_POINTS).min_by(|&a, &b| nlls[a].total_cmp(&nlls[b])).unwrap();
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(GRID_POINTS - 1)];
    let refined = golden_section_min(nll_of, lo, hi, GOLDEN_TOL);

    // Never return a worse temperature than the grid minimum or T=1.
    let mut t_opt = refined;
    for candidate in [grid[best], 1.0] {
        if nll_of(candidate) < nll_of(t_opt) {
            t_opt = candidate;
        }
    }
    Ok(t_opt)
}

/// Per-bin statistics behind ECE and reliability diagrams. Bin `b` covers
/// confidences in `(b/n, (b+1)/n]`; bin 0 additionally includes 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub n_bins: usize,
    pub counts: Vec<usize>,
    pub confidences: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl ReliabilityBins {
    pub fn bin_lo(&self, b: usize) -> f64 {
        b as f64 / self.n_bins as f64
    }

    pub fn bin_hi(&self, b: usize) -> f64 {
        (b + 1) as f64 / self.n_bins as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin_lo,bin_hi,count,confidence,accuracy\n");
        for b in 0..self.n_bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.bin_lo(b),
                self.bin_hi(b),
                self.counts[b],
                self.confidences[b],
                self.accuracies[b]
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Expected Calibration Error at temperature `t`:
/// `sum_b (count_b / N) * |accuracy_b - confidence_b|`.
pub fn ece(preds: &PredictionSet, t: f64, n_bins: usize) -> Result<(f64, ReliabilityBins)> {
    if n_bins < 1 {
        return Err(Error::Config(format!("n_bins must be >= 1, got {n_bins}")));
    }
    check_temperature(t)?;

    let mut counts = vec![0usize; n_bins];
    let mut conf_sums = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for (row, &label) in preds.logits.axis_iter(Axis(0)).zip(&preds.labels) {
        let row: Vec<f64> = row.to_vec();
        let scaled = scale_probs(&row, t)?;
        let bin = assign_bin(scaled.confidence, n_bins);
        counts[bin] += 1;
        conf_sums[bin] += scaled.confidence;
        if scaled.predicted == label {
            correct[bin] += 1;
        }
    }

    let n = preds.len() as f64;
    let mut value = 0.0;
    let mut confidences = vec![0.0; n_bins];
    let mut accuracies = vec![0.0; n_bins];
    for b in 0..n_bins {
        if counts[b] == 0 {
            continue;
        }
        let c = counts[b] as f64;
        confidences[b] = conf_sums[b] / c;
        accuracies[b] = correct[b] as f64 / c;
        value += (c / n) * (accuracies[b] - confidences[b]).abs();
    }
    Ok((
        value,
        ReliabilityBins {
            n_bins,
            counts,
            confidences,
            accuracies,
        },
    ))
}

/// First bin whose right edge is at or above the confidence. Edges are
/// right-closed, so confidence 1.0 lands in the top bin and 0 in the bottom.
fn assign_bin(confidence: f64, n_bins: usize) -> usize {
    for b in 0..n_bins {
        if confidence <= (b + 1) as f64 / n_bins as f64 {
            return b;
        }
    }
    n_bins - 1
}

/// Outcome of one calibration pass over a prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub t_optimal: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// Reliability bins at the optimal temperature.
    pub bins: ReliabilityBins,
}

impl CalibrationReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Search the optimal temperature and report ECE/NLL before (T=1) and after
/// (T=T*), with reliability bins at T*.
pub fn calibrate(preds: &PredictionSet) -> Result<CalibrationReport> {
    let t_optimal = find_optimal_temperature(preds)?;
    let (ece_before, _) = ece(preds, 1.0, DEFAULT_ECE_BINS)?;
    let (ece_after, bins) = ece(preds, t_optimal, DEFAULT_ECE_BINS)?;
    Ok(CalibrationReport {
        t_optimal,
        ece_before,
        ece_after,
        nll_before: preds.nll(1.0)?,
        nll_after: preds.nll(t_optimal)?,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_probs_known_values() {
        let sp = scale_probs(&[2.0, 1.0, 0.0], 1.0).unwrap();
        let expected = [0.665241, 0.244728, 0.090031];
        for (a, b) in sp.probs.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(sp.predicted, 0);
        assert!((sp.confidence - 0.665241).abs() < 1e-6);
    }

    #[test]
    fn scale_probs_uniform_limit() {
        let sp = scale_probs(&[5.0, -3.0, 1.0, 0.0], 1e6).unwrap();
        for p in &sp.probs {
            assert!((p - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn scale_probs_rejects_bad_temperature() {
        assert!(scale_probs(&[1.0, 2.0], 0.0).is_err());
        assert!(scale_probs(&[1.0, 2.0], -1.0).is_err());
        assert!(scale_probs(&[1.0, 2.0], f64::NAN).is_err());
    }

    #[test]
    fn argmax_invariant_under_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let c = rng.random_range(2..12);
            let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t = rng.random_range(0.01..100.0);
            let sp = scale_probs(&logits, t).unwrap();
            assert_eq!(sp.predicted, argmax(&logits));
        }
    }

    fn preds_from(logits: Mat, labels: Vec<usize>) -> PredictionSet {
        PredictionSet::new(logits, labels).unwrap()
    }

    #[test]
    fn ece_two_sample_case() {
        // confidences 0.8 (correct) and 0.6 (incorrect) in 15 bins -> 0.4
        // logit rows engineered to produce those max-softmax confidences
        let conf_logits = |p: f64| {
            // two classes: softmax([z, 0])[0] = p  =>  z = ln(p / (1 - p))
            array![(p / (1.0 - p)).ln(), 0.0]
        };
        let mut logits = Mat::zeros((2, 2));
        logits.row_mut(0).assign(&conf_logits(0.8));
        logits.row_mut(1).assign(&conf_logits(0.6));
        let preds = preds_from(logits, vec![0, 1]);
        let (value, bins) = ece(&preds, 1.0, 15).unwrap();
        assert!((value - 0.4).abs() < 1e-9);
        assert_eq!(bins.counts.iter().sum::<usize>(), 2);
    }

    #[test]
    fn ece_single_bin_case() {
        // all samples confidence 0.7, accuracy 0.5 -> ECE 0.2
        let z = (0.7_f64 / 0.3).ln();
        let n = 40;
        let mut logits = Mat::zeros((n, 2));
        let mut labels = Vec::new();
        for i in 0..n {
            logits[[i, 0]] = z;
            labels.push(if i % 2 == 0 { 0 } else { 1 });
        }
        let preds = preds_from(logits, labels);
        let (value, _) = ece(&preds, 1.0, 15).unwrap();
        assert!((value - 0.2).abs() < 1e-9);
    }

    #[test]
    fn ece_confidence_one_lands_in_top_bin() {
        let logits = array![[1000.0, -1000.0]];
        let preds = preds_from(logits, vec![0]);
        let (_, bins) = ece(&preds, 1.0, 15).unwrap();
        assert_eq!(bins.counts[14], 1);
    }

    #[test]
    fn flat_nll_returns_one_by_convention() {
        let logits = Mat::zeros((20, 4));
        let labels = (0..20).map(|i| i % 4).collect();
        let preds = preds_from(logits, labels);
        assert_eq!(find_optimal_temperature(&preds).unwrap(), 1.0);
    }

    #[test]
    fn search_rejects_small_or_bad_sets() {
        let logits = Mat::zeros((5, 3));
        let preds = preds_from(logits, vec![0; 5]);
        assert!(find_optimal_temperature(&preds).is_err());

        let mut logits = Mat::zeros((12, 3));
        logits[[0, 0]] = f64::INFINITY;
        let preds = preds_from(logits, vec![0; 12]);
        assert!(find_optimal_temperature(&preds).is_err());
    }

    /// Draw per-sample distributions, sample labels from them, and use
    /// `k * ln(p)` as logits; the NLL-optimal temperature is near `k`.
    fn synthetic_preds(k: f64, n: usize, c: usize, seed: u64) -> PredictionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Mat::zeros((n, c));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p = softmax_row(&raw);
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut label = c - 1;
            for (j, &pj) in p.iter().enumerate() {
                acc += pj;
                if u <= acc {
                    label = j;
                    break;
                }
            }
            labels.push(label);
            for (j, &pj) in p.iter().enumerate() {
                logits[[i, j]] = k * pj.ln();
            }
        }
        preds_from(logits, labels)
    }

    #[test]
    fn optimal_t_recovers_the_scale() {
        let preds = synthetic_preds(1.0, 10_000, 10, 21);
        let t = find_optimal_temperature(&preds).unwrap();
        assert!((0.9..=1.1).contains(&t), "t = {t}");

        let preds = synthetic_preds(3.0, 10_000, 10, 22);
        let t = find_optimal_temperature(&preds).unwrap();
        assert!((2.7..=3.3).contains(&t), "t = {t}");

        let nll_opt = preds.nll(t).unwrap();
        assert!(nll_opt <= preds.nll(1.0).unwrap() + 1e-9);
    }

    #[test]
    fn result_not_worse_than_grid() {
        let preds = synthetic_preds(2.0, 2000, 8, 33);
        let t = find_optimal_temperature(&preds).unwrap();
        let nll_opt = preds.nll(t).unwrap();
        let ratio = (GRID_HI / GRID_LO).powf(1.0 / (GRID_POINTS - 1) as f64);
        for i in 0..GRID_POINTS {
            let g = GRID_LO * ratio.powi(i as i32);
            assert!(nll_opt <= preds.nll(g).unwrap() + 1e-9);
        }
    }

    #[test]
    fn calibrate_reports_improvement_on_overconfident_logits() {
        let base = synthetic_preds(1.0, 4000, 6, 44);
        let sharp = preds_from(base.logits() * 3.0, base.labels().to_vec());
        let report = calibrate(&sharp).unwrap();
        assert!(report.t_optimal > 2.0);
        assert!(report.nll_after <= report.nll_before + 1e-9);
        assert!(report.ece_after < report.ece_before);
    }

    #[test]
    fn bins_csv_has_header_and_rows() {
        let preds = synthetic_preds(1.0, 100, 4, 55);
        let (_, bins) = ece(&preds, 1.0, 15).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bins.csv");
        bins.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,count,confidence,accuracy\n"));
        assert_eq!(text.lines().count(), 16);
    }
}
