use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dwi::{BValue, Protocol};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// One non-zero b-value is replaced by another.
    Shifted,
    /// One non-zero b-value is absent.
    Missing,
    /// Inference protocol equals the training protocol.
    Matched,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Shifted => "shifted",
            ScenarioKind::Missing => "missing",
            ScenarioKind::Matched => "matched",
        })
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shifted" => Ok(ScenarioKind::Shifted),
            "missing" => Ok(ScenarioKind::Missing),
            "matched" => Ok(ScenarioKind::Matched),
            other => Err(Error::InvalidConfig(format!("unknown scenario kind '{other}'"))),
        }
    }
}

/// Evaluation modes, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// E2E trained and tested on the training protocol.
    Matched,
    /// E2E tested on inference planes slotted into the training channels.
    AlteredE2e,
    /// E2E tested on channels restored by model-based adaptation.
    Mbda,
    /// F2E trained and tested on maps fitted from the training protocol.
    F2eMatched,
    /// F2E tested on maps fitted from the inference protocol.
    AlteredF2e,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Matched, Mode::AlteredE2e, Mode::Mbda, Mode::F2eMatched, Mode::AlteredF2e];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Matched => "matched",
            Mode::AlteredE2e => "altered_e2e",
            Mode::Mbda => "mbda",
            Mode::F2eMatched => "f2e_matched",
            Mode::AlteredF2e => "altered_f2e",
        }
    }

    pub fn uses_f2e(self) -> bool {
        matches!(self, Mode::F2eMatched | Mode::AlteredF2e)
    }

    pub fn all() -> BTreeSet<Mode> {
        Mode::ALL.into_iter().collect()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::InvalidConfig(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub training: Protocol,
    pub inference: Protocol,
    pub modes: BTreeSet<Mode>,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, training: Protocol, inference: Protocol, modes: BTreeSet<Mode>) -> Result<Self> {
        let spec = ScenarioSpec { kind, training, inference, modes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn matched(training: Protocol, modes: BTreeSet<Mode>) -> Self {
        ScenarioSpec { kind: ScenarioKind::Matched, inference: training.clone(), training, modes }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.training.to_set();
        let i = self.inference.to_set();
        let ok = match self.kind {
            ScenarioKind::Matched => t == i,
            ScenarioKind::Missing => i.is_subset(&t) && t.len() == i.len() + 1,
            ScenarioKind::Shifted => t.len() == i.len() && t.difference(&i).count() == 1,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "training {} and inference {} do not form a {} scenario",
                self.training, self.inference, self.kind
            )));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidConfig("scenario needs at least one mode".into()));
        }
        Ok(())
    }

    /// Training b-values absent from inference.
    pub fn removed(&self) -> BTreeSet<BValue> {
        self.training.to_set().difference(&self.inference.to_set()).copied().collect()
    }

    /// Inference b-values absent from training.
    pub fn added(&self) -> BTreeSet<BValue> {
        self.inference.to_set().difference(&self.training.to_set()).copied().collect()
    }

    /// Union of both protocols: what a dataset must provide.
    pub fn required(&self) -> BTreeSet<BValue> {
        self.training.to_set().union(&self.inference.to_set()).copied().collect()
    }
}

fn combinations(items: &[BValue], k: usize) -> Vec<Vec<BValue>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if items.len() < k {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn protocol_with_zero(nonzero: &[BValue]) -> Option<Protocol> {
    let set: BTreeSet<BValue> = std::iter::once(BValue::ZERO).chain(nonzero.iter().copied()).collect();
    Protocol::from_set(&set).ok()
}

/// All missing-kind scenarios for one training protocol: each non-zero
/// b-value removed in turn, where the rest is still a valid protocol.
pub fn missing_for(training: &Protocol) -> Vec<ScenarioSpec> {
    let nonzero: Vec<BValue> = training.bvalues().iter().copied().filter(|b| !b.is_zero()).collect();
    nonzero
        .iter()
        .filter_map(|drop| {
            let rest: Vec<BValue> = nonzero.iter().copied().filter(|b| b != drop).collect();
            protocol_with_zero(&rest).map(|inference| ScenarioSpec {
                kind: ScenarioKind::Missing,
                training: training.clone(),
                inference,
                modes: Mode::all(),
            })
        })
        .collect()
}

/// All shifted-kind scenarios for one training protocol within `full`:
/// each non-zero training b-value swapped for each unused non-zero b-value.
pub fn shifted_for(training: &Protocol, full: &Protocol) -> Vec<ScenarioSpec> {
    let nonzero: Vec<BValue> = training.bvalues().iter().copied().filter(|b| !b.is_zero()).collect();
    let unused: Vec<BValue> = full.bvalues().iter().copied().filter(|b| !b.is_zero() && !training.contains(*b)).collect();
    let mut out = Vec::new();
    for replaced in &nonzero {
        for &replacement in &unused {
            let rest: Vec<BValue> = nonzero.iter().copied().filter(|b| b != replaced).chain([replacement]).collect();
            if let Some(inference) = protocol_with_zero(&rest) {
                out.push(ScenarioSpec { kind: ScenarioKind::Shifted, training: training.clone(), inference, modes: Mode::all() });
            }
        }
    }
    out
}

/// Rows of the experiment matrix. Missing: training sets of the full size
/// and one smaller; shifted: training sets one and two smaller than full.
/// Larger training sets come first; within a size, subsets are in
/// lexicographic order.
pub fn enumerate_scenarios(full: &Protocol, kind: ScenarioKind) -> Vec<ScenarioSpec> {
    let nonzero: Vec<BValue> = full.bvalues().iter().copied().filter(|b| !b.is_zero()).collect();
    let n = nonzero.len();
    let sizes: Vec<usize> = match kind {
        ScenarioKind::Missing => vec![n, n.saturating_sub(1)],
        ScenarioKind::Shifted => vec![n.saturating_sub(1), n.saturating_sub(2)],
        ScenarioKind::Matched => (1..=n).rev().collect(),
    };
    let mut out = Vec::new();
    for k in sizes.into_iter().filter(|&k| k >= 1) {
        for subset in combinations(&nonzero, k) {
            let training = protocol_with_zero(&subset).expect("subset of a valid protocol");
            match kind {
                ScenarioKind::Missing => out.extend(missing_for(&training)),
                ScenarioKind::Shifted => out.extend(shifted_for(&training, full)),
                ScenarioKind::Matched => out.push(ScenarioSpec::matched(training, Mode::all())),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> Protocol {
        Protocol::from_values(v).unwrap()
    }

    #[test]
    fn standard_protocol_row_counts() {
        let full = Protocol::standard();
        let shifted = enumerate_scenarios(&full, ScenarioKind::Shifted);
        let missing = enumerate_scenarios(&full, ScenarioKind::Missing);
        assert_eq!(shifted.len(), 12);
        assert_eq!(missing.len(), 9);
        for s in shifted.iter().chain(&missing) {
            s.validate().unwrap();
        }
    }

    #[test]
    fn missing_from_full_protocol() {
        let rows = missing_for(&Protocol::standard());
        let inferred: Vec<Vec<f64>> = rows.iter().map(|r| r.inference.values()).collect();
        assert_eq!(inferred, vec![vec![0.0, 750.0, 1500.0], vec![0.0, 100.0, 1500.0], vec![0.0, 100.0, 750.0]]);
    }

    #[test]
    fn shifted_from_three_values() {
        let rows = shifted_for(&p(&[0.0, 100.0, 750.0]), &Protocol::standard());
        let inferred: Vec<Vec<f64>> = rows.iter().map(|r| r.inference.values()).collect();
        assert_eq!(inferred, vec![vec![0.0, 750.0, 1500.0], vec![0.0, 100.0, 1500.0]]);
    }

    #[test]
    fn two_value_training_has_no_missing_rows() {
        assert!(missing_for(&p(&[0.0, 750.0])).is_empty());
    }

    #[test]
    fn spec_validation() {
        let full = Protocol::standard();
        assert!(ScenarioSpec::new(ScenarioKind::Missing, full.clone(), p(&[0.0, 100.0, 1500.0]), Mode::all()).is_ok());
        assert!(ScenarioSpec::new(ScenarioKind::Missing, full.clone(), p(&[0.0, 1500.0]), Mode::all()).is_err());
        assert!(ScenarioSpec::new(ScenarioKind::Shifted, p(&[0.0, 100.0]), p(&[0.0, 750.0]), Mode::all()).is_ok());
        assert!(ScenarioSpec::new(ScenarioKind::Shifted, p(&[0.0, 100.0]), p(&[0.0, 100.0]), Mode::all()).is_err());
        assert!(ScenarioSpec::new(ScenarioKind::Matched, full.clone(), full, BTreeSet::new()).is_err());
    }

    #[test]
    fn names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("missing".parse::<ScenarioKind>().unwrap(), ScenarioKind::Missing);
    }
}
