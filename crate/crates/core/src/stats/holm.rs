use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmResult {
    pub pvalues: Vec<f64>,
    /// Indices into `pvalues`, ascending by p (stable for ties).
    pub order: Vec<usize>,
    /// Per hypothesis, in the original order.
    pub reject: Vec<bool>,
    /// Step-down adjusted p-values, in the original order.
    pub adjusted: Vec<f64>,
    pub alpha: f64,
}

impl HolmResult {
    pub fn rejections(&self) -> usize {
        self.reject.iter().filter(|&&r| r).count()
    }
}

/// Holm's step-down procedure: reject the k-th smallest p while
/// `p_(k) <= alpha / (m - k + 1)`, stopping at the first failure.
pub fn holm_bonferroni(pvalues: &[f64], alpha: f64) -> Result<HolmResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if let Some(&p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidP(p));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));

    let mut reject = vec![false; m];
    for (k, &i) in order.iter().enumerate() {
        if pvalues[i] <= alpha / (m - k) as f64 {
            reject[i] = true;
        } else {
            break;
        }
    }

    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (k, &i) in order.iter().enumerate() {
        running = running.max(((m - k) as f64 * pvalues[i]).min(1.0));
        adjusted[i] = running;
    }

    Ok(HolmResult { pvalues: pvalues.to_vec(), order, reject, adjusted, alpha })
}
