use serde::{Deserialize, Serialize};

use crate::dwi::Label;
use crate::error::{Error, Result};

/// Scores paired with ground-truth labels; malignant is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::DegenerateInput(format!("score {s} is not finite")));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Scores of (positives, negatives).
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            if l.is_positive() {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        (pos, neg)
    }

    pub(crate) fn both_classes(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (pos, neg) = self.split();
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::SingleClass);
        }
        Ok((pos, neg))
    }
}

/// 1-based midranks of `values`; ties share the average of their ranks.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end
        let mid = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mid;
        }
        start = end;
    }
    ranks
}

/// Mann-Whitney estimate of the area under the ROC curve (ties count 1/2).
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.both_classes()?;
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let combined: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let ranks = midranks(&combined);
    let rank_sum: f64 = ranks[..pos.len()].iter().sum();
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(benign: &[f64], malignant: &[f64]) -> ScoredSet {
        let scores = benign.iter().chain(malignant).copied().collect();
        let labels = benign.iter().map(|_| Label::Benign).chain(malignant.iter().map(|_| Label::Malignant)).collect();
        ScoredSet::new(scores, labels).unwrap()
    }

    fn brute_force(s: &ScoredSet) -> f64 {
        let (pos, neg) = s.split();
        let mut total = 0.0;
        for p in &pos {
            for n in &neg {
                total += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    /// Area under the empirical ROC polyline, thresholds at every distinct score.
    fn trapezoid(s: &ScoredSet) -> f64 {
        let (pos, neg) = s.split();
        let mut thresholds: Vec<f64> = s.scores().to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let (mut fpr0, mut tpr0, mut area) = (0.0, 0.0, 0.0);
        for t in thresholds {
            let tpr = pos.iter().filter(|&&v| v >= t).count() as f64 / pos.len() as f64;
            let fpr = neg.iter().filter(|&&v| v >= t).count() as f64 / neg.len() as f64;
            area += (fpr - fpr0) * (tpr + tpr0) / 2.0;
            fpr0 = fpr;
            tpr0 = tpr;
        }
        area
    }

    #[test]
    fn four_pair_example() {
        let s = set(&[0.1, 0.4], &[0.35, 0.8]);
        assert_eq!(auc(&s).unwrap(), 0.75);
        assert_eq!(brute_force(&s), 0.75);
    }

    #[test]
    fn extremes() {
        assert_eq!(auc(&set(&[0.1, 0.2, 0.3], &[0.5, 0.9])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.4, 0.4, 0.4], &[0.4, 0.4])).unwrap(), 0.5);
        assert!(matches!(auc(&set(&[0.1, 0.2], &[])), Err(Error::SingleClass)));
        assert!(ScoredSet::new(vec![0.1], vec![]).is_err());
    }

    #[test]
    fn midranks_handle_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn random_set(rng: &mut ChaCha8Rng, quantize: bool) -> ScoredSet {
        let n = rng.gen_range(2..40);
        let mut labels: Vec<Label> = (0..n).map(|_| if rng.gen_bool(0.5) { Label::Malignant } else { Label::Benign }).collect();
        labels[0] = Label::Malignant;
        labels[1] = Label::Benign;
        let scores = labels
            .iter()
            .map(|l| {
                let v: f64 = rng.gen::<f64>() + if l.is_positive() { 0.3 } else { 0.0 };
                if quantize {
                    (v * 5.0).round() / 5.0
                } else {
                    v
                }
            })
            .collect();
        ScoredSet::new(scores, labels).unwrap()
    }

    #[test]
    fn matches_pairwise_and_trapezoid_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in 0..100 {
            let s = random_set(&mut rng, k % 2 == 0);
            let a = auc(&s).unwrap();
            assert!((a - brute_force(&s)).abs() <= 1e-12);
            assert!((a - trapezoid(&s)).abs() <= 1e-12, "{a} vs {}", trapezoid(&s));
        }
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let s = random_set(&mut rng, true);
            let t = ScoredSet::new(s.scores().iter().map(|v| (3.0 * v).exp() - 7.0).collect(), s.labels().to_vec()).unwrap();
            assert!((auc(&s).unwrap() - auc(&t).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn flipping_labels_complements() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in 0..50 {
            let s = random_set(&mut rng, k % 2 == 0);
            let flipped: Vec<Label> =
                s.labels().iter().map(|l| if l.is_positive() { Label::Benign } else { Label::Malignant }).collect();
            let f = ScoredSet::new(s.scores().to_vec(), flipped).unwrap();
            assert!((auc(&s).unwrap() + auc(&f).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
