//! ROC analysis: AUC, DeLong's paired test and Holm's step-down correction.

mod delong;
mod holm;
mod roc;

pub use delong::{delong_test, delong_variance, normal_two_sided_p, DelongComparison, StructuralComponents};
pub use holm::{holm_bonferroni, HolmResult};
pub use roc::{auc, ScoredSet};
