//! Synthetic labeled DWI cases.
//!
//! Each case is a single slice with an elliptical lesion whose voxels follow
//! the kurtosis model exactly, a rectangular fat region at a constant level
//! `theta`, and background parenchyma. Magnitude (Rician) noise is added on
//! top. Class-specific tissue parameters are drawn from truncated normals.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dki::{forward_signal, DkiParams, FitConfig};
use crate::dwi::{DwiStack, ImagePlane, Label, LabeledCase, Mask, Protocol, ThetaPolicy};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Magnitude of a complex Gaussian perturbation of a real signal.
pub fn rician_noise<R: Rng + ?Sized>(signal: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return signal;
    }
    let n1: f64 = StandardNormal.sample(rng);
    let n2: f64 = StandardNormal.sample(rng);
    (signal + sigma * n1).hypot(sigma * n2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub adc_mean: f64,
    pub adc_sd: f64,
    pub akc_mean: f64,
    pub akc_sd: f64,
    pub s0_mean: f64,
    pub s0_sd: f64,
}

impl ClassDistribution {
    pub fn benign() -> Self {
        ClassDistribution { adc_mean: 1.8e-3, adc_sd: 0.2e-3, akc_mean: 0.6, akc_sd: 0.15, s0_mean: 800.0, s0_sd: 100.0 }
    }

    pub fn malignant() -> Self {
        ClassDistribution { adc_mean: 1.0e-3, adc_sd: 0.15e-3, akc_mean: 1.2, akc_sd: 0.2, s0_mean: 800.0, s0_sd: 100.0 }
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    /// Range of the lesion ellipse semi-axes, pixels.
    pub lesion_axes: [f64; 2],
    pub fat_region: Rect,
    /// Mean and SD of the per-case fat level.
    pub fat_level: f64,
    pub fat_level_sd: f64,
    /// Background parenchyma outside lesion and fat.
    pub parenchyma: DkiParams,
    pub protocol: Protocol,
    /// Rician noise SD as a fraction of the mean class s0.
    pub noise_sigma: f64,
    pub empty_lesion_fraction: f64,
    /// Relative SD of voxelwise ADC/AKC variation inside a lesion; 0 renders
    /// homogeneous lesions.
    pub lesion_heterogeneity: f64,
    pub benign: ClassDistribution,
    pub malignant: ClassDistribution,
    /// Sampling bounds; kept in sync with the fitter so phantoms stay fittable.
    pub bounds: FitConfig,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            width: 32,
            height: 32,
            lesion_axes: [3.0, 6.0],
            fat_region: Rect { x: 1, y: 1, width: 6, height: 4 },
            fat_level: 60.0,
            fat_level_sd: 10.0,
            parenchyma: DkiParams::new(250.0, 2.2e-3, 0.3, 0.0),
            protocol: Protocol::standard(),
            noise_sigma: 0.02,
            empty_lesion_fraction: 23.0 / 221.0,
            lesion_heterogeneity: 0.05,
            benign: ClassDistribution::benign(),
            malignant: ClassDistribution::malignant(),
            bounds: FitConfig::default(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        let f = self.fat_region;
        if f.width == 0 || f.height == 0 || f.x + f.width > self.width || f.y + f.height > self.height {
            return Err(Error::Geometry(format!("fat region {f:?} does not fit a {}x{} image", self.width, self.height)));
        }
        let [lo, hi] = self.lesion_axes;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("lesion axes range {:?} is invalid", self.lesion_axes));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.empty_lesion_fraction) {
            return bad("noise_sigma must be >= 0 and empty_lesion_fraction in [0, 1]".into());
        }
        if !(self.fat_level >= 0.0 && self.fat_level_sd >= 0.0 && self.lesion_heterogeneity >= 0.0) {
            return bad("fat level, its SD and heterogeneity must be >= 0".into());
        }
        self.bounds.validate()?;
        for (name, d) in [("benign", &self.benign), ("malignant", &self.malignant)] {
            let sds_ok = d.adc_sd >= 0.0 && d.akc_sd >= 0.0 && d.s0_sd >= 0.0;
            let means_ok = (self.bounds.adc_min..=self.bounds.adc_max).contains(&d.adc_mean)
                && (0.0..=self.bounds.akc_max).contains(&d.akc_mean)
                && d.s0_mean > 0.0;
            if !(sds_ok && means_ok) {
                return bad(format!("{name} class distribution out of range: {d:?}"));
            }
        }
        Ok(())
    }

    /// Absolute Rician noise SD.
    pub fn noise_sd(&self) -> f64 {
        self.noise_sigma * 0.5 * (self.benign.s0_mean + self.malignant.s0_mean)
    }

    fn class(&self, label: Label) -> &ClassDistribution {
        match label {
            Label::Benign => &self.benign,
            Label::Malignant => &self.malignant,
        }
    }
}

/// Normal draw restricted to `[lo, hi]`: redraw up to 100 times, then clamp.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let mut v = mean;
    for _ in 0..100 {
        let z: f64 = StandardNormal.sample(rng);
        v = mean + sd * z;
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
    v.clamp(lo, hi)
}

/// Ground truth that produced a case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseTruth {
    /// Class-level tissue parameters of the lesion.
    pub tissue: DkiParams,
    /// Per-pixel parameters; `None` outside the lesion.
    pub voxels: Vec<Option<DkiParams>>,
    pub theta: f64,
}

fn place_lesion<R: Rng + ?Sized>(config: &PhantomConfig, rng: &mut R) -> Result<Mask> {
    let (w, h) = (config.width, config.height);
    let [lo, hi] = config.lesion_axes;
    for _ in 0..100 {
        let ax = rng.gen_range(lo..=hi);
        let ay = rng.gen_range(lo..=hi);
        // keep a one-pixel margin to the image border
        let (min_x, max_x) = (ax + 1.0, w as f64 - ax - 2.0);
        let (min_y, max_y) = (ay + 1.0, h as f64 - ay - 2.0);
        if min_x > max_x || min_y > max_y {
            continue;
        }
        let cx = rng.gen_range(min_x..=max_x);
        let cy = rng.gen_range(min_y..=max_y);
        let mask = Mask::from_fn(w, h, |x, y| {
            let dx = (x as f64 - cx) / ax;
            let dy = (y as f64 - cy) / ay;
            dx * dx + dy * dy <= 1.0
        });
        let overlaps = mask.indices().iter().any(|&i| config.fat_region.contains(i % w, i / w));
        if !overlaps && !mask.is_empty() {
            return Ok(mask);
        }
    }
    Err(Error::Geometry(format!(
        "could not place a lesion with axes {:?} in a {w}x{h} image next to fat region {:?}",
        config.lesion_axes, config.fat_region
    )))
}

/// Render one case. `empty` suppresses the lesion (and forces a benign label).
pub fn render_case<R: Rng + ?Sized>(
    config: &PhantomConfig,
    id: String,
    label: Label,
    empty: bool,
    rng: &mut R,
) -> Result<(LabeledCase, CaseTruth)> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let b = &config.bounds;
    let label = if empty { Label::Benign } else { label };
    let dist = config.class(label);
    let theta = (truncated_normal(rng, config.fat_level, config.fat_level_sd, 0.0, f64::INFINITY) as f32) as f64;
    let tissue = DkiParams::new(
        truncated_normal(rng, dist.s0_mean, dist.s0_sd, 1e-3 * dist.s0_mean, f64::INFINITY),
        truncated_normal(rng, dist.adc_mean, dist.adc_sd, b.adc_min, b.adc_max),
        truncated_normal(rng, dist.akc_mean, dist.akc_sd, 0.0, b.akc_max),
        theta,
    );
    let lesion = if empty { Mask::empty(w, h) } else { place_lesion(config, rng)? };
    let fat = Mask::from_fn(w, h, |x, y| config.fat_region.contains(x, y));

    let hetero = config.lesion_heterogeneity;
    let voxels: Vec<Option<DkiParams>> = lesion
        .data()
        .iter()
        .map(|&inside| {
            inside.then(|| {
                if hetero == 0.0 {
                    tissue
                } else {
                    let za: f64 = StandardNormal.sample(rng);
                    let zk: f64 = StandardNormal.sample(rng);
                    DkiParams {
                        adc: (tissue.adc * (1.0 + hetero * za)).clamp(b.adc_min, b.adc_max),
                        akc: (tissue.akc * (1.0 + hetero * zk)).clamp(0.0, b.akc_max),
                        ..tissue
                    }
                }
            })
        })
        .collect();

    let sigma = config.noise_sd();
    let planes = config
        .protocol
        .bvalues()
        .iter()
        .map(|&bv| {
            let data = (0..w * h)
                .map(|i| {
                    let clean = match &voxels[i] {
                        Some(p) => forward_signal(p, bv),
                        None if fat.data()[i] => theta,
                        None => forward_signal(&config.parenchyma, bv),
                    };
                    rician_noise(clean, sigma, rng)
                })
                .collect();
            ImagePlane::new(w, h, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = DwiStack::new(config.protocol.clone(), planes, lesion, fat, ThetaPolicy::Strict)?;
    Ok((LabeledCase { id, stack, label }, CaseTruth { tissue, voxels, theta }))
}

/// One case whose lesion is absent with probability `empty_lesion_fraction`.
pub fn generate_case<R: Rng + ?Sized>(config: &PhantomConfig, id: String, label: Label, rng: &mut R) -> Result<LabeledCase> {
    let empty = rng.gen_bool(config.empty_lesion_fraction);
    render_case(config, id, label, empty, rng).map(|(c, _)| c)
}

/// RNG for case `index`: one ChaCha stream per case, so cases can be
/// generated in any order.
pub fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Case plan: labels and empty-lesion flags in id order. Exactly
/// `round(fraction * total)` (at most `n_benign`) benign cases are empty.
fn plan_dataset(config: &PhantomConfig, n_benign: usize, n_malignant: usize) -> Vec<(Label, bool)> {
    let total = n_benign + n_malignant;
    let n_empty = ((config.empty_lesion_fraction * total as f64).round() as usize).min(n_benign);
    let mut plan: Vec<(Label, bool)> = (0..n_benign)
        .map(|i| (Label::Benign, i < n_empty))
        .chain((0..n_malignant).map(|_| (Label::Malignant, false)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    plan.shuffle(&mut rng);
    plan
}

pub fn case_id(index: usize) -> String {
    format!("case{index:04}")
}

pub fn generate_dataset_with_truth(
    config: &PhantomConfig,
    n_benign: usize,
    n_malignant: usize,
    exec: Execution,
) -> Result<Vec<(LabeledCase, CaseTruth)>> {
    config.validate()?;
    let plan = plan_dataset(config, n_benign, n_malignant);
    exec.map_range(plan.len(), |i| {
        let (label, empty) = plan[i];
        render_case(config, case_id(i), label, empty, &mut case_rng(config.seed, i))
    })
    .into_iter()
    .collect()
}

/// Deterministic labeled dataset with exact class counts.
pub fn generate_dataset(config: &PhantomConfig, n_benign: usize, n_malignant: usize, exec: Execution) -> Result<Vec<LabeledCase>> {
    Ok(generate_dataset_with_truth(config, n_benign, n_malignant, exec)?.into_iter().map(|(c, _)| c).collect())
}
