//! Model-based domain adaptation: rebuild the channels a classifier was
//! trained on from whatever b-values an inference protocol provides.
//!
//! Measured planes that the training protocol also contains are passed
//! through untouched. Every missing channel is predicted from a voxelwise
//! kurtosis fit to *all* measured planes, including planes the training
//! protocol does not use.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dki::{check_determined, fit_voxel, forward_signal, FitConfig};
use crate::dwi::{BValue, DwiStack, ImagePlane, Protocol};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdaptationReport {
    /// Measured planes passed through unchanged.
    pub kept: BTreeSet<BValue>,
    /// Planes synthesized from the fitted model.
    pub derived: BTreeSet<BValue>,
    /// Measured planes not part of the training protocol (still used by the fit).
    pub dropped: BTreeSet<BValue>,
    /// Whether the fit ran with AKC fixed at zero.
    pub akc_constrained: bool,
}

/// Predict planes at each of `targets` from one voxelwise fit over the
/// lesion mask. Voxels outside the mask are zero.
pub fn restore_channels(
    stack: &DwiStack,
    targets: &[BValue],
    config: &FitConfig,
    exec: Execution,
) -> Result<Vec<ImagePlane>> {
    config.validate()?;
    check_determined(stack.protocol().len(), config)?;
    let (w, h) = stack.dims();
    let voxels = stack.lesion_mask().indices();
    let bvalues = stack.protocol().bvalues();
    let predictions = exec.try_map(&voxels, |&i| -> Result<Vec<f64>> {
        let samples: Vec<_> = bvalues.iter().zip(stack.planes()).map(|(b, p)| (*b, p.data()[i])).collect();
        let fit = fit_voxel(&samples, stack.theta(), config)?;
        Ok(targets.iter().map(|&b| forward_signal(&fit.params, b)).collect())
    })?;
    let mut planes = vec![ImagePlane::zeros(w, h); targets.len()];
    for (&i, values) in voxels.iter().zip(&predictions) {
        for (plane, &v) in planes.iter_mut().zip(values) {
            plane.data_mut()[i] = v;
        }
    }
    Ok(planes)
}

/// Model prediction of the plane at `target_b`. Never copies a measured
/// plane, even when `target_b` is part of the stack's protocol.
pub fn restore_channel(stack: &DwiStack, target_b: BValue, config: &FitConfig, exec: Execution) -> Result<ImagePlane> {
    Ok(restore_channels(stack, &[target_b], config, exec)?.remove(0))
}

/// The fit configuration actually used for a stack: AKC is pinned to zero
/// when only two b-values are available.
pub fn effective_config(stack: &DwiStack, config: &FitConfig) -> FitConfig {
    if stack.protocol().len() == 2 {
        config.constrained()
    } else {
        config.clone()
    }
}

/// Map an inference stack onto `training_protocol`.
pub fn adapt_stack(
    inference: &DwiStack,
    training_protocol: &Protocol,
    config: &FitConfig,
    exec: Execution,
) -> Result<(DwiStack, AdaptationReport)> {
    if !inference.protocol().contains(BValue::ZERO) || !training_protocol.contains(BValue::ZERO) {
        return Err(Error::B0Required);
    }
    let measured = inference.protocol().to_set();
    let wanted = training_protocol.to_set();
    let config = effective_config(inference, config);
    let report = AdaptationReport {
        kept: measured.intersection(&wanted).copied().collect(),
        derived: wanted.difference(&measured).copied().collect(),
        dropped: measured.difference(&wanted).copied().collect(),
        akc_constrained: config.constrain_akc_zero,
    };
    let derived: Vec<BValue> = report.derived.iter().copied().collect();
    let mut restored = if derived.is_empty() {
        Vec::new()
    } else {
        restore_channels(inference, &derived, &config, exec)?
    }
    .into_iter();
    let planes = training_protocol
        .bvalues()
        .iter()
        .map(|b| match inference.plane(*b) {
            Some(p) => p.clone(),
            None => restored.next().expect("one restored plane per derived b-value"),
        })
        .collect();
    let stack = DwiStack::with_theta(
        training_protocol.clone(),
        planes,
        inference.lesion_mask().clone(),
        inference.fat_mask().clone(),
        inference.theta(),
    );
    Ok((stack, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dki::DkiParams;
    use crate::dwi::{Mask, ThetaPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(v: f64) -> BValue {
        BValue::new(v).unwrap()
    }

    fn set(v: &[f64]) -> BTreeSet<BValue> {
        v.iter().map(|&x| b(x)).collect()
    }

    const THETA: f64 = 35.0;

    /// Noiseless 8x8 stack with per-voxel parameters and a one-pixel fat region.
    fn noiseless(protocol: &Protocol, seed: u64) -> (DwiStack, Vec<Option<DkiParams>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (8, 8);
        let params: Vec<Option<DkiParams>> = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                (x >= 2 && y >= 2 && x < 7 && y < 7).then(|| {
                    DkiParams::new(rng.gen_range(500.0..900.0), rng.gen_range(0.8e-3..2.0e-3), rng.gen_range(0.3..1.1), THETA)
                })
            })
            .collect();
        let fat = Mask::from_fn(w, h, |x, y| x == 0 && y == 0);
        let lesion = Mask::from_fn(w, h, |x, y| params[y * w + x].is_some());
        let planes = protocol
            .bvalues()
            .iter()
            .map(|&bv| {
                let data = (0..w * h)
                    .map(|i| match params[i] {
                        Some(p) => forward_signal(&p, bv),
                        None if i == 0 => THETA,
                        None => 0.0,
                    })
                    .collect();
                ImagePlane::new(w, h, data).unwrap()
            })
            .collect();
        (DwiStack::new(protocol.clone(), planes, lesion, fat, ThetaPolicy::Strict).unwrap(), params)
    }

    #[test]
    fn restores_missing_b750() {
        let (full, params) = noiseless(&Protocol::standard(), 1);
        let inference = full.subset_protocol(&set(&[0.0, 100.0, 1500.0])).unwrap();
        let plane = restore_channel(&inference, b(750.0), &FitConfig::default(), Execution::Sequential).unwrap();
        for (i, p) in params.iter().enumerate() {
            match p {
                Some(p) => {
                    let truth = forward_signal(p, b(750.0));
                    assert!((plane.data()[i] / truth - 1.0).abs() <= 1e-6, "voxel {i}");
                }
                None => assert_eq!(plane.data()[i], 0.0),
            }
        }
    }

    #[test]
    fn restore_predicts_rather_than_copies() {
        let (full, _) = noiseless(&Protocol::standard(), 2);
        let plane = restore_channel(&full, b(100.0), &FitConfig::default(), Execution::Sequential).unwrap();
        let measured = full.plane(b(100.0)).unwrap();
        for i in full.lesion_mask().indices() {
            assert!((plane.data()[i] / measured.data()[i] - 1.0).abs() <= 1e-6);
        }
        // outside the mask the prediction is zero, the measured plane is not
        assert_ne!(plane.data()[0], measured.data()[0]);
    }

    #[test]
    fn two_point_extrapolation() {
        let protocol = Protocol::from_values(&[0.0, 750.0]).unwrap();
        let (stack, _) = noiseless(&protocol, 3);
        // constrained mono-exponential fit, closed form from the two samples
        let plane = restore_channel(&stack, b(1500.0), &FitConfig::default().constrained(), Execution::Sequential).unwrap();
        let tissue = |s: f64| (s * s - THETA * THETA).sqrt();
        for i in stack.lesion_mask().indices() {
            let u0 = tissue(stack.planes()[0].data()[i]);
            let u1 = tissue(stack.planes()[1].data()[i]);
            let adc = (u0 / u1).ln() / 750.0;
            let oracle = THETA.hypot(u0 * (-1500.0 * adc).exp());
            assert!((plane.data()[i] / oracle - 1.0).abs() < 1e-8, "voxel {i}");
        }
        assert!(matches!(
            restore_channel(&stack, b(1500.0), &FitConfig::default(), Execution::Sequential),
            Err(Error::UnderDetermined { .. })
        ));
    }

    #[test]
    fn matched_protocol_is_identity() {
        let (full, _) = noiseless(&Protocol::standard(), 4);
        let (out, report) = adapt_stack(&full, &Protocol::standard(), &FitConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(out, full);
        assert!(report.derived.is_empty() && report.dropped.is_empty());
        assert_eq!(report.kept, full.protocol().to_set());
    }

    #[test]
    fn missing_scenario_report() {
        let (full, params) = noiseless(&Protocol::standard(), 5);
        let inference = full.subset_protocol(&set(&[0.0, 100.0, 1500.0])).unwrap();
        let (out, report) = adapt_stack(&inference, &Protocol::standard(), &FitConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(report.kept, set(&[0.0, 100.0, 1500.0]));
        assert_eq!(report.derived, set(&[750.0]));
        assert!(report.dropped.is_empty());
        assert!(!report.akc_constrained);
        for kept in &report.kept {
            assert_eq!(out.plane(*kept).unwrap(), inference.plane(*kept).unwrap());
        }
        let derived = out.plane(b(750.0)).unwrap();
        for i in out.lesion_mask().indices() {
            let truth = forward_signal(&params[i].unwrap(), b(750.0));
            assert!((derived.data()[i] / truth - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn shifted_scenario_uses_dropped_plane() {
        let (full, params) = noiseless(&Protocol::standard(), 6);
        let inference = full.subset_protocol(&set(&[0.0, 100.0, 1500.0])).unwrap();
        let training = Protocol::from_values(&[0.0, 100.0, 750.0]).unwrap();
        let (out, report) = adapt_stack(&inference, &training, &FitConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(report.kept, set(&[0.0, 100.0]));
        assert_eq!(report.derived, set(&[750.0]));
        assert_eq!(report.dropped, set(&[1500.0]));
        assert_eq!(out.protocol(), &training);
        // three measured b-values allow the unconstrained fit, so the restoration is exact
        assert!(!report.akc_constrained);
        let derived = out.plane(b(750.0)).unwrap();
        for i in out.lesion_mask().indices() {
            let truth = forward_signal(&params[i].unwrap(), b(750.0));
            assert!((derived.data()[i] / truth - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn two_measured_bvalues_force_constraint() {
        let (full, _) = noiseless(&Protocol::standard(), 7);
        let inference = full.subset_protocol(&set(&[0.0, 100.0])).unwrap();
        let training = Protocol::from_values(&[0.0, 100.0, 750.0]).unwrap();
        let (_, report) = adapt_stack(&inference, &training, &FitConfig::default(), Execution::Sequential).unwrap();
        assert!(report.akc_constrained);
        assert_eq!(report.derived, set(&[750.0]));
    }
}
