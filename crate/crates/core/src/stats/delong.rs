//! DeLong's test for two correlated ROC curves measured on the same cases.
//!
//! Structural components are computed from midranks, which avoids the
//! quadratic pairwise kernel sum.

use serde::{Deserialize, Serialize};

use super::roc::{midranks, ScoredSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongComparison {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov_ab: f64,
    pub z: f64,
    pub p_two_sided: f64,
    /// Variance of the AUC difference was not positive (e.g. identical
    /// rankings); `z` is 0 and `p` is 1.
    pub degenerate: bool,
}

/// Per-classifier structural components: one value per positive (`v10`)
/// and per negative (`v01`).
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralComponents {
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

impl StructuralComponents {
    pub fn from_scores(pos: &[f64], neg: &[f64]) -> Self {
        let (m, n) = (pos.len(), neg.len());
        let combined: Vec<f64> = pos.iter().chain(neg).copied().collect();
        let all = midranks(&combined);
        let within_pos = midranks(pos);
        let within_neg = midranks(neg);
        // Negatives ranked below X_i (ties 1/2) = combined rank - rank among positives.
        let v10 = (0..m).map(|i| (all[i] - within_pos[i]) / n as f64).collect();
        let v01 = (0..n).map(|j| 1.0 - (all[m + j] - within_neg[j]) / m as f64).collect();
        StructuralComponents { v10, v01 }
    }

    pub fn auc(&self) -> f64 {
        self.v10.iter().sum::<f64>() / self.v10.len() as f64
    }
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

/// Variance of one classifier's AUC estimate.
pub fn delong_variance(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.both_classes()?;
    let c = StructuralComponents::from_scores(&pos, &neg);
    Ok(covariance(&c.v10, &c.v10) / pos.len() as f64 + covariance(&c.v01, &c.v01) / neg.len() as f64)
}

/// Two-sided standard normal tail probability `P(|Z| >= |z|)`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

pub fn delong_test(a: &ScoredSet, b: &ScoredSet) -> Result<DelongComparison> {
    if a.labels() != b.labels() {
        return Err(Error::LabelMismatch);
    }
    let (pos_a, neg_a) = a.both_classes()?;
    let (pos_b, neg_b) = b.both_classes()?;
    let (m, n) = (pos_a.len() as f64, neg_a.len() as f64);
    let ca = StructuralComponents::from_scores(&pos_a, &neg_a);
    let cb = StructuralComponents::from_scores(&pos_b, &neg_b);
    let var_a = covariance(&ca.v10, &ca.v10) / m + covariance(&ca.v01, &ca.v01) / n;
    let var_b = covariance(&cb.v10, &cb.v10) / m + covariance(&cb.v01, &cb.v01) / n;
    let cov_ab = covariance(&ca.v10, &cb.v10) / m + covariance(&ca.v01, &cb.v01) / n;
    let (auc_a, auc_b) = (ca.auc(), cb.auc());
    let denom = var_a + var_b - 2.0 * cov_ab;
    let (z, p, degenerate) = if denom > 0.0 {
        let z = (auc_a - auc_b) / denom.sqrt();
        (z, normal_two_sided_p(z), false)
    } else {
        (0.0, 1.0, true)
    };
    Ok(DelongComparison { auc_a, auc_b, var_a, var_b, cov_ab, z, p_two_sided: p, degenerate })
}
