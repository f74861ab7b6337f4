//! Training objectives: hard-target cross-entropy, label-smoothed
//! cross-entropy, temperature-scaled distillation KL, the combined
//! self-distillation loss, and temperature-scaled cross-entropy — each with
//! its analytic gradient with respect to the student logits.
//!
//! All reductions are the mean over non-pad target positions. Teacher logits
//! are constants: no gradient flows to them.

use ndarray::Axis;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::numerics::log_softmax_row;

/// Per-position target probability rows (one row per position, C columns).
#[derive(Debug, Clone)]
pub struct TargetDistribution {
    probs: Mat,
}

impl TargetDistribution {
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        let mut probs = Mat::zeros((labels.len(), classes));
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Shape(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
            probs[[r, label]] = 1.0;
        }
        Ok(TargetDistribution { probs })
    }

    pub fn from_probs(probs: Mat) -> Result<Self> {
        for row in probs.axis_iter(Axis(0)) {
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::Numeric("target probabilities must be >= 0".into()));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!(
                    "target row sums to {sum}, expected 1"
                )));
            }
        }
        Ok(TargetDistribution { probs })
    }

    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    pub fn positions(&self) -> usize {
        self.probs.nrows()
    }

    pub fn classes(&self) -> usize {
        self.probs.ncols()
    }
}

/// Apply label smoothing: each entry becomes `p * (1 - alpha) + alpha / C`.
pub fn smooth_targets(targets: &TargetDistribution, alpha: f64) -> Result<TargetDistribution> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "label smoothing alpha must be in [0, 1], got {alpha}"
        )));
    }
    let c = targets.classes() as f64;
    let probs = targets.probs.mapv(|p| p * (1.0 - alpha) + alpha / c);
    Ok(TargetDistribution { probs })
}

/// A reduced loss with its per-position breakdown (masked positions are 0).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub per_position: Vec<f64>,
}

fn check_mask(mask: &[bool], positions: usize) -> Result<usize> {
    if mask.len() != positions {
        return Err(Error::Shape(format!(
            "mask length {} does not match {positions} positions",
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Numeric("all positions are masked out".into()));
    }
    Ok(n)
}

fn check_logits(logits: &Mat, targets: &TargetDistribution) -> Result<()> {
    if logits.dim() != targets.probs.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.probs.dim()
        )));
    }
    Ok(())
}

/// Mean `-sum_c targets * log softmax(logits)` over unmasked positions.
pub fn cross_entropy(
    logits: &Mat,
    targets: &TargetDistribution,
    mask: &[bool],
) -> Result<LossValue> {
    Ok(cross_entropy_with_grad(logits, targets, mask)?.0)
}

/// Cross-entropy plus `d loss / d logits` (zero rows at masked positions).
pub fn cross_entropy_with_grad(
    logits: &Mat,
    targets: &TargetDistribution,
    mask: &[bool],
) -> Result<(LossValue, Mat)> {
    scaled_cross_entropy(logits, targets, 1.0, mask)
}

/// Cross-entropy on temperature-scaled logits: softmax(logits / T).
pub fn ts_cross_entropy(
    logits: &Mat,
    targets: &TargetDistribution,
    t: f64,
    mask: &[bool],
) -> Result<LossValue> {
    Ok(ts_cross_entropy_with_grad(logits, targets, t, mask)?.0)
}

pub fn ts_cross_entropy_with_grad(
    logits: &Mat,
    targets: &TargetDistribution,
    t: f64,
    mask: &[bool],
) -> Result<(LossValue, Mat)> {
    check_temperature(t)?;
    scaled_cross_entropy(logits, targets, t, mask)
}

fn scaled_cross_entropy(
    logits: &Mat,
    targets: &TargetDistribution,
    t: f64,
    mask: &[bool],
) -> Result<(LossValue, Mat)> {
    check_logits(logits, targets)?;
    let n = check_mask(mask, logits.nrows())? as f64;

    let mut per_position = vec![0.0; logits.nrows()];
    let mut grad = Mat::zeros(logits.dim());
    let mut total = 0.0;
    for (r, row) in logits.axis_iter(Axis(0)).enumerate() {
        if !mask[r] {
            continue;
        }
        let scaled: Vec<f64> = row.iter().map(|&z| z / t).collect();
        let log_probs = log_softmax_row(&scaled);
        let q = targets.probs.row(r);
        let loss: f64 = q
            .iter()
            .zip(&log_probs)
            .map(|(&qc, &lp)| -qc * lp)
            .sum();
        per_position[r] = loss;
        total += loss;
        for (c, &lp) in log_probs.iter().enumerate() {
            grad[[r, c]] = (lp.exp() - q[c]) / (t * n);
        }
    }
    Ok((
        LossValue {
            value: total / n,
            per_position,
        },
        grad,
    ))
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

/// Mean `KL(softmax(teacher/T) || softmax(student/T))` over unmasked
/// positions. The teacher side is treated as constant.
pub fn kd_kl_loss(
    teacher_logits: &Mat,
    student_logits: &Mat,
    t: f64,
    mask: &[bool],
) -> Result<LossValue> {
    Ok(kd_kl_loss_with_grad(teacher_logits, student_logits, t, mask, false)?.0)
}

/// KL loss plus gradient w.r.t. the student logits. `t2_rescale` multiplies
/// both the value and the gradient by T^2 (off in the standard objective).
pub fn kd_kl_loss_with_grad(
    teacher_logits: &Mat,
    student_logits: &Mat,
    t: f64,
    mask: &[bool],
    t2_rescale: bool,
) -> Result<(LossValue, Mat)> {
    check_temperature(t)?;
    if teacher_logits.dim() != student_logits.dim() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            teacher_logits.dim(),
            student_logits.dim()
        )));
    }
    let n = check_mask(mask, student_logits.nrows())? as f64;
    let factor = if t2_rescale { t * t } else { 1.0 };

    let mut per_position = vec![0.0; student_logits.nrows()];
    let mut grad = Mat::zeros(student_logits.dim());
    let mut total = 0.0;
    for r in 0..student_logits.nrows() {
        if !mask[r] {
            continue;
        }
        let t_scaled: Vec<f64> = teacher_logits.row(r).iter().map(|&z| z / t).collect();
        let s_scaled: Vec<f64> = student_logits.row(r).iter().map(|&z| z / t).collect();
        let log_p = log_softmax_row(&t_scaled);
        let log_q = log_softmax_row(&s_scaled);
        let mut kl = 0.0;
        for c in 0..log_p.len() {
            let p = log_p[c].exp();
            kl += p * (log_p[c] - log_q[c]);
            grad[[r, c]] = factor * (log_q[c].exp() - p) / (t * n);
        }
        let kl = kl.max(0.0) * factor;
        per_position[r] = kl;
        total += kl;
    }
    Ok((
        LossValue {
            value: total / n,
            per_position,
        },
        grad,
    ))
}

/// The combined self-distillation objective with its reported components.
#[derive(Debug, Clone)]
pub struct SdLoss {
    pub total: LossValue,
    /// Unweighted KL component.
    pub l_sd: f64,
    /// Cross-entropy component.
    pub l_ce: f64,
}

/// `lambda_sd * KL(teacher/T || student/T) + CE(student, targets)`.
pub fn combined_sd_loss(
    teacher_logits: &Mat,
    student_logits: &Mat,
    targets: &TargetDistribution,
    t: f64,
    lambda_sd: f64,
    mask: &[bool],
) -> Result<SdLoss> {
    Ok(combined_sd_loss_with_grad(
        teacher_logits,
        student_logits,
        targets,
        t,
        lambda_sd,
        mask,
        false,
    )?
    .0)
}

pub fn combined_sd_loss_with_grad(
    teacher_logits: &Mat,
    student_logits: &Mat,
    targets: &TargetDistribution,
    t: f64,
    lambda_sd: f64,
    mask: &[bool],
    t2_rescale: bool,
) -> Result<(SdLoss, Mat)> {
    if lambda_sd < 0.0 {
        return Err(Error::Config(format!(
            "lambda_sd must be >= 0, got {lambda_sd}"
        )));
    }
    let (ce, ce_grad) = cross_entropy_with_grad(student_logits, targets, mask)?;
    let (kl, kl_grad) =
        kd_kl_loss_with_grad(teacher_logits, student_logits, t, mask, t2_rescale)?;

    // lambda_sd == 0 must reproduce the plain CE trajectory bit-for-bit.
    let (total_value, grad) = if lambda_sd == 0.0 {
        (ce.value, ce_grad)
    } else {
        (ce.value + lambda_sd * kl.value, ce_grad + &(kl_grad * lambda_sd))
    };
    let per_position = ce
        .per_position
        .iter()
        .zip(&kl.per_position)
        .map(|(&c, &k)| c + lambda_sd * k)
        .collect();
    Ok((
        SdLoss {
            total: LossValue {
                value: total_value,
                per_position,
            },
            l_sd: kl.value,
            l_ce: ce.value,
        },
        grad,
    ))
}
