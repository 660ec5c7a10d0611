//! Domain types for single-slice diffusion-weighted acquisitions.
//!
//! A [`DwiStack`] holds one co-registered plane per b-value of its
//! [`Protocol`], a lesion mask (the region the classifiers and fits operate
//! on) and a fat mask from which the per-case background level `theta` is
//! estimated.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diffusion weighting in s/mm².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct BValue(f64);

impl BValue {
    pub const ZERO: BValue = BValue(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(BValue(value))
        } else {
            Err(Error::Protocol(format!("b-value {value} must be finite and >= 0")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0.0
    }
}

impl TryFrom<f64> for BValue {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        BValue::new(value)
    }
}

impl From<BValue> for f64 {
    fn from(b: BValue) -> f64 {
        b.0
    }
}

// Construction rejects NaN, so the total order is the numeric order.
impl Eq for BValue {}

impl PartialOrd for BValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BValue {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for BValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parse a comma separated list such as `0,100,750,1500`.
pub fn parse_bvalues(text: &str) -> Result<Vec<BValue>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Protocol(format!("cannot parse b-value {s:?}")))
                .and_then(BValue::new)
        })
        .collect()
}

/// Strictly increasing list of b-values starting at b = 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BValue>", into = "Vec<BValue>")]
pub struct Protocol(Vec<BValue>);

impl Protocol {
    pub fn new(bvalues: Vec<BValue>) -> Result<Self> {
        if bvalues.len() < 2 {
            return Err(Error::Protocol(format!(
                "a protocol needs at least 2 b-values, got {}",
                bvalues.len()
            )));
        }
        if !bvalues[0].is_zero() {
            return Err(Error::Protocol(format!(
                "the first b-value must be 0, got {}",
                bvalues[0]
            )));
        }
        if let Some(w) = bvalues.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Protocol(format!(
                "b-values must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Protocol(bvalues))
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        let bvalues = values.iter().map(|&v| BValue::new(v)).collect::<Result<Vec<_>>>()?;
        Protocol::new(bvalues)
    }

    /// Builds a protocol from an unordered set; fails unless it contains b0
    /// and at least one other value.
    pub fn from_set(set: &BTreeSet<BValue>) -> Result<Self> {
        Protocol::new(set.iter().copied().collect())
    }

    /// The four b-values of the reference acquisition: 0, 100, 750, 1500.
    pub fn standard() -> Self {
        Protocol::from_values(&[0.0, 100.0, 750.0, 1500.0]).expect("valid")
    }

    pub fn bvalues(&self) -> &[BValue] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, b: BValue) -> bool {
        self.position(b).is_some()
    }

    pub fn position(&self, b: BValue) -> Option<usize> {
        self.0.binary_search(&b).ok()
    }

    pub fn to_set(&self) -> BTreeSet<BValue> {
        self.0.iter().copied().collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|b| b.value()).collect()
    }
}

impl From<Protocol> for Vec<BValue> {
    fn from(p: Protocol) -> Self {
        p.0
    }
}

impl TryFrom<Vec<BValue>> for Protocol {
    type Error = Error;

    fn try_from(v: Vec<BValue>) -> Result<Self> {
        Protocol::new(v)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Row-major plane of signal intensities.
///
/// Values are held in double precision; the on-disk format stores single
/// precision, so persisting a plane rounds each value to the nearest `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch {
                expected: "positive width and height".into(),
                found: format!("{width}x{height}"),
            });
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", width * height),
                found: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::DegenerateInput(format!(
                "plane values must be finite and >= 0, found {v}"
            )));
        }
        Ok(ImagePlane { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        ImagePlane { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{width}x{height} mask with {} pixels", width * height),
                found: format!("{} pixels", data.len()),
            });
        }
        Ok(Mask { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&m| m)
    }

    /// Flat indices of the set pixels in row-major order.
    pub fn indices(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// What to do when a stack has no fat pixels to estimate `theta` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaPolicy {
    /// Fail with [`Error::EmptyFatMask`].
    #[default]
    Strict,
    /// Use `theta = 0` and log a warning.
    ZeroFallback,
}

/// Mean b0 intensity over the fat mask.
pub fn compute_theta(b0: &ImagePlane, fat_mask: &Mask) -> Result<f64> {
    if b0.dims() != fat_mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", b0.dims()),
            found: format!("{:?}", fat_mask.dims()),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &m) in b0.data().iter().zip(fat_mask.data()) {
        if m {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyFatMask);
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwiStack {
    protocol: Protocol,
    planes: Vec<ImagePlane>,
    lesion_mask: Mask,
    fat_mask: Mask,
    theta: f64,
}

impl DwiStack {
    /// Validates shapes and computes `theta` from the b0 plane.
    pub fn new(
        protocol: Protocol,
        planes: Vec<ImagePlane>,
        lesion_mask: Mask,
        fat_mask: Mask,
        policy: ThetaPolicy,
    ) -> Result<Self> {
        if planes.len() != protocol.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} planes", protocol.len()),
                found: format!("{} planes", planes.len()),
            });
        }
        let dims = planes[0].dims();
        for (i, p) in planes.iter().enumerate() {
            if p.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: format!("{dims:?}"),
                    found: format!("{:?} for plane {i}", p.dims()),
                });
            }
        }
        for (name, m) in [("lesion", &lesion_mask), ("fat", &fat_mask)] {
            if m.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: format!("{dims:?}"),
                    found: format!("{:?} for {name} mask", m.dims()),
                });
            }
        }
        let theta = match compute_theta(&planes[0], &fat_mask) {
            Ok(t) => t,
            Err(Error::EmptyFatMask) if policy == ThetaPolicy::ZeroFallback => {
                log::warn!("empty fat mask, using theta = 0");
                0.0
            }
            Err(e) => return Err(e),
        };
        Ok(DwiStack { protocol, planes, lesion_mask, fat_mask, theta })
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    pub fn planes(&self) -> &[ImagePlane] {
        &self.planes
    }

    pub fn lesion_mask(&self) -> &Mask {
        &self.lesion_mask
    }

    pub fn fat_mask(&self) -> &Mask {
        &self.fat_mask
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }

    pub fn plane(&self, b: BValue) -> Option<&ImagePlane> {
        self.protocol.position(b).map(|i| &self.planes[i])
    }

    /// Restrict the stack to the b-values in `keep`. The b0 plane is
    /// always required, so `theta` carries over unchanged.
    pub fn subset_protocol(&self, keep: &BTreeSet<BValue>) -> Result<DwiStack> {
        if let Some(b) = keep.iter().find(|b| !self.protocol.contains(**b)) {
            return Err(Error::MissingBValue(b.value()));
        }
        if !keep.contains(&BValue::ZERO) {
            return Err(Error::B0Required);
        }
        let protocol = Protocol::from_set(keep)?;
        let planes = protocol
            .bvalues()
            .iter()
            .map(|b| self.plane(*b).expect("checked above").clone())
            .collect();
        Ok(DwiStack {
            protocol,
            planes,
            lesion_mask: self.lesion_mask.clone(),
            fat_mask: self.fat_mask.clone(),
            theta: self.theta,
        })
    }

    /// Assemble a stack whose `theta` is already known (e.g. restored
    /// channels that share the source stack's fat calibration).
    pub(crate) fn with_theta(
        protocol: Protocol,
        planes: Vec<ImagePlane>,
        lesion_mask: Mask,
        fat_mask: Mask,
        theta: f64,
    ) -> DwiStack {
        debug_assert_eq!(protocol.len(), planes.len());
        DwiStack { protocol, planes, lesion_mask, fat_mask, theta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Malignant
    }

    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub stack: DwiStack,
    pub label: Label,
}
