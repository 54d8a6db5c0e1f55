//! Evaluation metrics: confusion-matrix quantities (Jaccard, precision,
//! recall, F1, accuracy, MCC, Cohen's kappa), PSNR, SSIM (reused from the
//! loss module), and FID over embedded image sets.

mod fid;

pub use fid::{embed, fid, gaussian_stats, jacobi_eigen, DefaultEmbedder, Embedder, GaussianStats};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pixel tallies of a binary prediction against a binary ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Binarize `pred` at `threshold` (>= maps to 1) and tally against a
/// strictly binary ground truth.
pub fn confusion(pred: &Tensor<f32>, gt: &Tensor<f32>, threshold: f32) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "confusion: shapes {:?} and {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let g_pos = if g == 1.0 {
            true
        } else if g == 0.0 {
            false
        } else {
            return Err(Error::data(format!(
                "confusion: ground truth value {g} is not binary"
            )));
        };
        let p_pos = p >= threshold;
        match (p_pos, g_pos) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Jaccard overlap of the positive class: tp / (tp + fp + fn).
/// Two empty masks count as perfect agreement (1).
pub fn jaccard(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    c.tp as f64 / denom as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfA {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Precision, recall, F1 and accuracy with empty denominators mapping to 0.
pub fn precision_recall_f1_accuracy(c: &ConfusionCounts) -> PrfA {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let accuracy = ratio(c.tp + c.tn, c.total());
    PrfA {
        precision,
        recall,
        f1,
        accuracy,
    }
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom
}

/// Cohen's kappa via chance-level accuracy from the marginals:
/// AccR = p1 p2 + (1-p1)(1-p2) with p1 = (tp+fn)/N, p2 = (tp+fp)/N.
pub fn kappa(c: &ConfusionCounts) -> f64 {
    let n = c.total();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let p1 = (c.tp + c.fn_) as f64 / nf;
    let p2 = (c.tp + c.fp) as f64 / nf;
    let acc_r = p1 * p2 + (1.0 - p1) * (1.0 - p2);
    if (1.0 - acc_r).abs() < 1e-15 {
        return 0.0;
    }
    let acc = (c.tp + c.tn) as f64 / nf;
    (acc - acc_r) / (1.0 - acc_r)
}

/// PSNR in dB from a precomputed mean squared error; +inf at zero MSE.
pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (max_value * max_value / mse).log10()
}

/// Peak signal-to-noise ratio in dB; +inf when the images are identical.
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>, max_value: f32) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "psnr: shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.numel() as f64;
    Ok(psnr_from_mse(mse, max_value as f64))
}
