use crate::dki::{ParameterMaps, EPSILON};
use crate::dwi::{DwiStack, ImagePlane, Label, LabeledCase};
use crate::error::{Error, Result};

use super::network::{MaskedInput, Network};

/// What a classifier is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum CaseInput<'a> {
    Stack(&'a DwiStack),
    Maps(&'a ParameterMaps),
}

impl CaseInput<'_> {
    pub fn mask_is_empty(&self) -> bool {
        match self {
            CaseInput::Stack(s) => s.lesion_mask().is_empty(),
            CaseInput::Maps(m) => m.mask.is_empty(),
        }
    }

    /// Masked network input, or `None` for an empty lesion.
    pub fn to_masked(&self) -> Result<Option<MaskedInput>> {
        match self {
            CaseInput::Stack(s) => stack_input(s),
            CaseInput::Maps(m) => maps_input(m),
        }
    }
}

/// Anything that maps a non-empty masked input to a malignancy probability.
pub trait Scorer {
    fn score(&self, input: &MaskedInput) -> Result<f64>;
}

impl Scorer for Network {
    fn score(&self, input: &MaskedInput) -> Result<f64> {
        self.forward(input)
    }
}

/// Empty lesions are predicted benign (0.0) without evaluating `scorer`.
pub fn predict_case<S: Scorer + ?Sized>(scorer: &S, case: CaseInput<'_>) -> Result<f64> {
    if case.mask_is_empty() {
        return Ok(0.0);
    }
    let input = case.to_masked()?.expect("non-empty mask");
    scorer.score(&input)
}

/// Score for an already prepared input; `None` means an empty lesion.
pub fn predict_prepared<S: Scorer + ?Sized>(scorer: &S, input: Option<&MaskedInput>) -> Result<f64> {
    match input {
        None => Ok(0.0),
        Some(i) => scorer.score(i),
    }
}

/// Fat-corrected b0 level over the lesion, used to normalize signal channels.
pub fn signal_scale(stack: &DwiStack) -> Result<f64> {
    let mask = stack.lesion_mask();
    let b0 = &stack.planes()[0];
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mean = idx.iter().map(|&i| b0.data()[i]).sum::<f64>() / idx.len() as f64;
    let theta = stack.theta();
    Ok((mean * mean - theta * theta).max(EPSILON).sqrt())
}

/// Signal planes in protocol order, divided by [`signal_scale`].
pub fn stack_input(stack: &DwiStack) -> Result<Option<MaskedInput>> {
    if stack.lesion_mask().is_empty() {
        return Ok(None);
    }
    let scale = signal_scale(stack)?;
    let planes: Vec<&ImagePlane> = stack.planes().iter().collect();
    MaskedInput::from_planes(&planes, stack.lesion_mask(), scale).map(Some)
}

/// ADC (in 1e-3 mm²/s) and AKC channels.
pub fn maps_input(maps: &ParameterMaps) -> Result<Option<MaskedInput>> {
    if maps.mask.is_empty() {
        return Ok(None);
    }
    let adc = &maps.adc_map;
    let scaled = ImagePlane::new(adc.width(), adc.height(), adc.data().iter().map(|v| v * 1e3).collect())?;
    MaskedInput::from_planes(&[&scaled, &maps.akc_map], &maps.mask, 1.0).map(Some)
}

/// One prepared case for training or scoring.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub label: Label,
    pub input: Option<MaskedInput>,
}

impl Example {
    pub fn from_case(case: &LabeledCase) -> Result<Self> {
        Ok(Example { id: case.id.clone(), label: case.label, input: stack_input(&case.stack)? })
    }

    pub fn from_maps(id: &str, label: Label, maps: &ParameterMaps) -> Result<Self> {
        Ok(Example { id: id.to_string(), label, input: maps_input(maps)? })
    }
}
