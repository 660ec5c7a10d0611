use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fit::{check_determined, fit_voxel, FitConfig};
use crate::dwi::{DwiStack, ImagePlane, Mask};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::{read_json, read_mask, read_plane, write_json, write_mask, write_plane};

pub const MAPS_FORMAT: &str = "mbda-maps";
pub const MAPS_MANIFEST_NAME: &str = "maps.json";

/// Voxelwise fit results over a lesion mask; zero outside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMaps {
    pub adc_map: ImagePlane,
    pub akc_map: ImagePlane,
    pub s0_map: ImagePlane,
    pub mask: Mask,
    /// Lesion voxels whose fit stopped at the iteration limit.
    pub unconverged: usize,
}

impl ParameterMaps {
    pub fn empty(mask: Mask) -> Self {
        let (w, h) = mask.dims();
        ParameterMaps {
            adc_map: ImagePlane::zeros(w, h),
            akc_map: ImagePlane::zeros(w, h),
            s0_map: ImagePlane::zeros(w, h),
            mask,
            unconverged: 0,
        }
    }
}

/// Fit every lesion voxel of `stack` using its own `theta`.
pub fn fit_roi(stack: &DwiStack, config: &FitConfig, exec: Execution) -> Result<ParameterMaps> {
    config.validate()?;
    check_determined(stack.protocol().len(), config)?;
    let mask = stack.lesion_mask().clone();
    let mut maps = ParameterMaps::empty(mask);
    let voxels = maps.mask.indices();
    let bvalues = stack.protocol().bvalues();
    let fits = exec.try_map(&voxels, |&i| {
        let samples: Vec<_> = bvalues.iter().zip(stack.planes()).map(|(b, p)| (*b, p.data()[i])).collect();
        fit_voxel(&samples, stack.theta(), config)
    })?;
    for (&i, fit) in voxels.iter().zip(&fits) {
        maps.adc_map.data_mut()[i] = fit.params.adc;
        maps.akc_map.data_mut()[i] = fit.params.akc;
        maps.s0_map.data_mut()[i] = fit.params.s0;
        if !fit.converged {
            maps.unconverged += 1;
        }
    }
    Ok(maps)
}

/// Mean ADC and AKC over the mask.
pub fn roi_mean_coefficients(maps: &ParameterMaps) -> Result<(f64, f64)> {
    let (mut adc, mut akc, mut n) = (0.0, 0.0, 0usize);
    for (i, &m) in maps.mask.data().iter().enumerate() {
        if m {
            adc += maps.adc_map.data()[i];
            akc += maps.akc_map.data()[i];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((adc / n as f64, akc / n as f64))
}

/// Default logistic width for [`threshold_classify`], mm²/s.
pub const THRESHOLD_WIDTH: f64 = 0.2e-3;

/// Malignancy score that decreases with ROI-mean ADC, 0.5 at `threshold`.
pub fn threshold_classify(adc_mean: f64, threshold: f64, width: f64) -> f64 {
    1.0 / (1.0 + ((adc_mean - threshold) / width).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapsManifest {
    pub format: String,
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub source_id: Option<String>,
    pub fit_config: FitConfig,
    pub adc: String,
    pub akc: String,
    pub s0: String,
    pub mask: String,
    pub unconverged: usize,
}

pub fn save_maps(maps: &ParameterMaps, source_id: Option<&str>, config: &FitConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (width, height) = maps.mask.dims();
    let manifest = MapsManifest {
        format: MAPS_FORMAT.into(),
        version: crate::io::FORMAT_VERSION,
        width,
        height,
        source_id: source_id.map(str::to_owned),
        fit_config: config.clone(),
        adc: "adc.f32".into(),
        akc: "akc.f32".into(),
        s0: "s0.f32".into(),
        mask: "mask.u8".into(),
        unconverged: maps.unconverged,
    };
    write_plane(&dir.join(&manifest.adc), &maps.adc_map)?;
    write_plane(&dir.join(&manifest.akc), &maps.akc_map)?;
    write_plane(&dir.join(&manifest.s0), &maps.s0_map)?;
    write_mask(&dir.join(&manifest.mask), &maps.mask)?;
    let path = dir.join(MAPS_MANIFEST_NAME);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_maps(path: &Path) -> Result<(ParameterMaps, MapsManifest)> {
    let path = if path.is_dir() { path.join(MAPS_MANIFEST_NAME) } else { path.to_path_buf() };
    let dir = path.parent().unwrap_or(Path::new("."));
    let m: MapsManifest = read_json(&path)?;
    if m.format != MAPS_FORMAT {
        return Err(Error::format(&path, format!("unknown format tag {:?}", m.format)));
    }
    let maps = ParameterMaps {
        adc_map: read_plane(&dir.join(&m.adc), m.width, m.height)?,
        akc_map: read_plane(&dir.join(&m.akc), m.width, m.height)?,
        s0_map: read_plane(&dir.join(&m.s0), m.width, m.height)?,
        mask: read_mask(&dir.join(&m.mask), m.width, m.height)?,
        unconverged: m.unconverged,
    };
    Ok((maps, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dki::model::{forward_signal, DkiParams};
    use crate::dwi::{Protocol, ThetaPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn render(w: usize, h: usize, protocol: &Protocol, params_at: impl Fn(usize, usize) -> Option<DkiParams>, theta: f64) -> DwiStack {
        let lesion = Mask::from_fn(w, h, |x, y| params_at(x, y).is_some());
        let fat = Mask::from_fn(w, h, |x, y| x == 0 && y == 0);
        let planes = protocol
            .bvalues()
            .iter()
            .map(|&b| {
                let mut data = Vec::with_capacity(w * h);
                for y in 0..h {
                    for x in 0..w {
                        data.push(match params_at(x, y) {
                            Some(p) => forward_signal(&p, b),
                            None if x == 0 && y == 0 => theta,
                            None => 0.0,
                        });
                    }
                }
                ImagePlane::new(w, h, data).unwrap()
            })
            .collect();
        DwiStack::new(protocol.clone(), planes, lesion, fat, ThetaPolicy::Strict).unwrap()
    }

    #[test]
    fn homogeneous_round_trip() {
        let truth = DkiParams::new(750.0, 1.4e-3, 0.8, 40.0);
        let stack = render(8, 8, &Protocol::standard(), |x, y| (x > 2 && y > 2 && x < 7).then_some(truth), 40.0);
        let maps = fit_roi(&stack, &FitConfig::default(), Execution::Sequential).unwrap();
        for i in stack.lesion_mask().indices() {
            assert!((maps.adc_map.data()[i] / 1.4e-3 - 1.0).abs() < 1e-6);
            assert!((maps.akc_map.data()[i] / 0.8 - 1.0).abs() < 1e-6);
            assert!((maps.s0_map.data()[i] / 750.0 - 1.0).abs() < 1e-6);
        }
        assert_eq!(maps.adc_map.data()[0], 0.0);
        assert_eq!(maps.unconverged, 0);
    }

    #[test]
    fn two_region_round_trip() {
        let a = DkiParams::new(900.0, 1.8e-3, 0.5, 25.0);
        let c = DkiParams::new(600.0, 0.9e-3, 1.3, 25.0);
        let at = |x: usize, y: usize| match (x, y) {
            (1..=3, 1..=5) => Some(a),
            (4..=6, 1..=5) => Some(c),
            _ => None,
        };
        let stack = render(8, 8, &Protocol::standard(), at, 25.0);
        let maps = fit_roi(&stack, &FitConfig::default(), Execution::Parallel).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if let Some(p) = at(x, y) {
                    let i = y * 8 + x;
                    assert!((maps.adc_map.data()[i] / p.adc - 1.0).abs() < 1e-6);
                    assert!((maps.akc_map.data()[i] / p.akc - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empty_mask_gives_zero_maps() {
        let stack = render(4, 4, &Protocol::standard(), |_, _| None, 10.0);
        let maps = fit_roi(&stack, &FitConfig::default(), Execution::Sequential).unwrap();
        assert!(maps.adc_map.data().iter().all(|&v| v == 0.0));
        assert_eq!(&maps.mask, stack.lesion_mask());
        assert!(matches!(roi_mean_coefficients(&maps), Err(Error::EmptyMask)));
    }

    #[test]
    fn underdetermined_protocol_is_a_config_error() {
        let p = Protocol::from_values(&[0.0, 800.0]).unwrap();
        let stack = render(4, 4, &p, |x, _| (x == 2).then_some(DkiParams::new(500.0, 1e-3, 0.0, 5.0)), 5.0);
        assert!(matches!(
            fit_roi(&stack, &FitConfig::default(), Execution::Sequential),
            Err(Error::UnderDetermined { .. })
        ));
        assert!(fit_roi(&stack, &FitConfig::default().constrained(), Execution::Sequential).is_ok());
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<DkiParams> = (0..64)
            .map(|_| DkiParams::new(rng.gen_range(400.0..900.0), rng.gen_range(0.8e-3..2e-3), rng.gen_range(0.2..1.0), 30.0))
            .collect();
        let mut stack = render(8, 8, &Protocol::standard(), |x, y| (x > 0).then(|| params[y * 8 + x]), 30.0);
        // perturb so fits are not exact
        let planes: Vec<ImagePlane> = stack
            .planes()
            .iter()
            .map(|p| ImagePlane::new(8, 8, p.data().iter().enumerate().map(|(i, v)| v * (1.0 + 0.01 * ((i % 7) as f64 - 3.0))).collect()).unwrap())
            .collect();
        stack = DwiStack::new(stack.protocol().clone(), planes, stack.lesion_mask().clone(), stack.fat_mask().clone(), ThetaPolicy::Strict).unwrap();
        let seq = fit_roi(&stack, &FitConfig::default(), Execution::Sequential).unwrap();
        let par = fit_roi(&stack, &FitConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn roi_means() {
        let mask = Mask::new(2, 1, vec![true, true]).unwrap();
        let mut maps = ParameterMaps::empty(mask);
        maps.adc_map = ImagePlane::new(2, 1, vec![0.8e-3, 1.2e-3]).unwrap();
        maps.akc_map = ImagePlane::new(2, 1, vec![1.0, 1.0]).unwrap();
        let (adc, akc) = roi_mean_coefficients(&maps).unwrap();
        assert!((adc - 1.0e-3).abs() < 1e-18);
        assert_eq!(akc, 1.0);
    }

    #[test]
    fn roi_means_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (w, h) = (rng.gen_range(1..10), rng.gen_range(1..10));
            let mut m: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.4)).collect();
            m[0] = true;
            let adc: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..3e-3)).collect();
            let akc: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..2.0)).collect();
            let mut maps = ParameterMaps::empty(Mask::new(w, h, m.clone()).unwrap());
            maps.adc_map = ImagePlane::new(w, h, adc.clone()).unwrap();
            maps.akc_map = ImagePlane::new(w, h, akc.clone()).unwrap();
            let (mut sa, mut sk, mut n) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if m[y * w + x] {
                        sa += adc[y * w + x];
                        sk += akc[y * w + x];
                        n += 1.0;
                    }
                }
            }
            let (ga, gk) = roi_mean_coefficients(&maps).unwrap();
            assert!((ga - sa / n).abs() <= 1e-12 * (sa / n));
            assert!((gk - sk / n).abs() <= 1e-12 * (sk / n).max(1e-300));
        }
    }

    #[test]
    fn threshold_score_shape() {
        let t = 1.4e-3;
        assert_eq!(threshold_classify(t, t, THRESHOLD_WIDTH), 0.5);
        assert!(threshold_classify(0.0, t, THRESHOLD_WIDTH) > 0.999);
        assert!(threshold_classify(1e-9, 1e-2, THRESHOLD_WIDTH) > 1.0 - 1e-12);
        assert!(threshold_classify(t + 10.0 * THRESHOLD_WIDTH, t, THRESHOLD_WIDTH) < 0.001);
        assert!(threshold_classify(1.0e-3, t, THRESHOLD_WIDTH) > threshold_classify(1.1e-3, t, THRESHOLD_WIDTH));
    }

    #[test]
    fn maps_persist() {
        let truth = DkiParams::new(750.0, 1.4e-3, 0.8, 40.0);
        let stack = render(6, 6, &Protocol::standard(), |x, _| (x > 3).then_some(truth), 40.0);
        let maps = fit_roi(&stack, &FitConfig::default(), Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_maps(&maps, Some("case1"), &FitConfig::default(), dir.path()).unwrap();
        let (back, manifest) = load_maps(dir.path()).unwrap();
        assert_eq!(manifest.source_id.as_deref(), Some("case1"));
        assert_eq!(back.mask, maps.mask);
        for (a, b) in back.adc_map.data().iter().zip(maps.adc_map.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
