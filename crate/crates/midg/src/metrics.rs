//! Regression/classification metrics over sentiment scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary accuracy, positive-class F1, mean absolute error and Pearson
/// correlation. Scores binarize by sign with zero counted positive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    pub n: usize,
    /// Pearson was undefined (zero variance) and `corr` was reported as 0.
    #[serde(skip)]
    pub corr_degenerate: bool,
}

fn positive(x: f64) -> bool {
    x >= 0.0
}

/// Computes all metrics for a prediction batch.
pub fn compute(y_true: &[f64], y_pred: &[f64]) -> Result<MetricsReport> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Contract {
            op: "metrics",
            msg: format!("{} labels vs {} predictions", y_true.len(), y_pred.len()),
        });
    }
    let n = y_true.len();
    let nf = n as f64;

    let mut correct = 0usize;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut abs_err = 0.0;
    for (&y, &p) in y_true.iter().zip(y_pred) {
        let (yp, pp) = (positive(y), positive(p));
        if yp == pp {
            correct += 1;
        }
        match (yp, pp) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
        abs_err += (y - p).abs();
    }
    let acc = correct as f64 / nf;
    let f1_denom = 2 * tp + fp + fn_;
    // no positives anywhere and none predicted: vacuously perfect
    let f1 = if f1_denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / f1_denom as f64
    };
    let mae = abs_err / nf;

    let mean_y: f64 = y_true.iter().sum::<f64>() / nf;
    let mean_p: f64 = y_pred.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut var_y = 0.0;
    let mut var_p = 0.0;
    for (&y, &p) in y_true.iter().zip(y_pred) {
        cov += (y - mean_y) * (p - mean_p);
        var_y += (y - mean_y) * (y - mean_y);
        var_p += (p - mean_p) * (p - mean_p);
    }
    let eps_y = 1e-18 * (1.0 + mean_y * mean_y) * nf;
    let eps_p = 1e-18 * (1.0 + mean_p * mean_p) * nf;
    let (corr, corr_degenerate) = if var_y <= eps_y || var_p <= eps_p {
        (0.0, true)
    } else {
        ((cov / (var_y.sqrt() * var_p.sqrt())).clamp(-1.0, 1.0), false)
    };

    Ok(MetricsReport {
        acc,
        f1,
        mae,
        corr,
        n,
        corr_degenerate,
    })
}
