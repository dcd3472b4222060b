//! Reconstruction-error thresholds, localisation masks and detection metrics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pixels above `μ + THRESHOLD_SIGMAS·σ` of the reference errors are flagged.
pub const THRESHOLD_SIGMAS: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub tau: f64,
}

/// `τ = μ + 1.5σ` over every value of the reference sample.
pub fn recon_threshold(errors: &[f64]) -> Result<Threshold> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("no reference errors for the threshold".into()));
    }
    let n = errors.len() as f64;
    let mu = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    Ok(Threshold {
        mu,
        sigma,
        tau: mu + THRESHOLD_SIGMAS * sigma,
    })
}

/// Flags pixels whose error is strictly above `tau`.
pub fn localize(errors: &[f64], tau: f64) -> Vec<bool> {
    errors.iter().map(|&e| e > tau).collect()
}

/// Image score: mean excess of the pixel errors over `tau`.
pub fn anomaly_mass(errors: &[f64], tau: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().map(|&e| (e - tau).max(0.0)).sum::<f64>() / errors.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    /// Fraction of all samples predicted positive.
    pub fn flag_rate(&self) -> f64 {
        ratio(self.tp + self.fp, self.tp + self.fp + self.fn_ + self.tn)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
}

impl From<Confusion> for LevelMetrics {
    fn from(c: Confusion) -> Self {
        Self {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            counts: c,
        }
    }
}

/// Image- and pixel-level detection quality. Pixel precision, recall and
/// F1 pool every pixel of every image; IoU pools the pixels of the
/// ground-truth anomalous images only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub image: LevelMetrics,
    pub pixel: LevelMetrics,
    pub iou: f64,
}

/// `|a ∩ b| / |a ∪ b|` pooled over pairs; 1 when both are empty.
pub fn pooled_iou<'a>(pairs: impl IntoIterator<Item = (&'a [bool], &'a [bool])>) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (a, b) in pairs {
        for (&x, &y) in a.iter().zip(b) {
            inter += (x && y) as u64;
            union += (x || y) as u64;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn eval_metrics(
    pred_flags: &[bool],
    true_flags: &[bool],
    pred_masks: &[Vec<bool>],
    true_masks: &[Vec<bool>],
) -> Result<AnomalyReport> {
    let n = pred_flags.len();
    if true_flags.len() != n || pred_masks.len() != n || true_masks.len() != n {
        return Err(Error::Shape(format!(
            "{} predicted flags, {} true flags, {} predicted masks, {} true masks",
            n,
            true_flags.len(),
            pred_masks.len(),
            true_masks.len()
        )));
    }
    if let Some(i) = (0..n).find(|&i| pred_masks[i].len() != true_masks[i].len()) {
        return Err(Error::Shape(format!(
            "mask {i}: predicted {} pixels, ground truth {}",
            pred_masks[i].len(),
            true_masks[i].len()
        )));
    }
    let mut image = Confusion::default();
    let mut pixel = Confusion::default();
    for i in 0..n {
        image.add(pred_flags[i], true_flags[i]);
        for (&p, &t) in pred_masks[i].iter().zip(&true_masks[i]) {
            pixel.add(p, t);
        }
    }
    let iou = pooled_iou(
        (0..n)
            .filter(|&i| true_flags[i])
            .map(|i| (pred_masks[i].as_slice(), true_masks[i].as_slice())),
    );
    Ok(AnomalyReport {
        image: image.into(),
        pixel: pixel.into(),
        iou,
    })
}

/// Area under the ROC curve (Mann-Whitney, ties count one half).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::EmptyInput("ROC AUC needs both classes".into()));
    }
    let sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Ok((sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}
