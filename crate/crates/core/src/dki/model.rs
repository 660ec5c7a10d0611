//! Kurtosis signal model with a fixed background level.
//!
//! `S(b) = sqrt(theta^2 + (s0 * exp(-b*adc + b^2*adc^2*akc/6))^2)`

use serde::{Deserialize, Serialize};

use crate::dwi::BValue;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DkiParams {
    /// Noise-free b0 amplitude of the tissue component.
    pub s0: f64,
    /// Apparent diffusion coefficient, mm²/s.
    pub adc: f64,
    /// Apparent kurtosis coefficient.
    pub akc: f64,
    /// Background (fat) level; never fitted.
    pub theta: f64,
}

impl DkiParams {
    pub fn new(s0: f64, adc: f64, akc: f64, theta: f64) -> Self {
        DkiParams { s0, adc, akc, theta }
    }

    /// Exponent of the tissue attenuation at `b`.
    fn exponent(&self, b: f64) -> f64 {
        -b * self.adc + b * b * self.adc * self.adc * self.akc / 6.0
    }

    /// Largest b for which the attenuation still decreases, `3/(adc*akc)`.
    pub fn validity_limit(&self) -> f64 {
        if self.akc <= 0.0 || self.adc <= 0.0 {
            f64::INFINITY
        } else {
            3.0 / (self.adc * self.akc)
        }
    }
}

pub fn forward_signal(params: &DkiParams, b: BValue) -> f64 {
    let tissue = params.s0 * params.exponent(b.value()).exp();
    params.theta.hypot(tissue)
}

/// Partial derivatives of [`forward_signal`] with respect to `(s0, adc, akc)`.
pub fn forward_jacobian(params: &DkiParams, b: BValue) -> [f64; 3] {
    let b = b.value();
    let attenuation = params.exponent(b).exp();
    let tissue = params.s0 * attenuation;
    let signal = params.theta.hypot(tissue);
    // dS/dtissue; tissue > 0 whenever s0 > 0, so signal > 0.
    let outer = if signal > 0.0 { tissue / signal } else { 1.0 };
    [
        outer * attenuation,
        outer * tissue * (-b + b * b * params.adc * params.akc / 3.0),
        outer * tissue * (b * b * params.adc * params.adc / 6.0),
    ]
}
