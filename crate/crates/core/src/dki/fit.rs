//! Per-voxel least-squares fit of the kurtosis model.
//!
//! Damped Gauss-Newton with Marquardt scaling and an analytic Jacobian.
//! Bounds are enforced by projecting every trial point back into the box.

use serde::{Deserialize, Serialize};

use super::model::{forward_jacobian, forward_signal, DkiParams};
use crate::dwi::BValue;
use crate::error::{Error, Result};

/// Floor used for `s0` and for square roots of non-positive quantities.
pub const EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub adc_min: f64,
    pub adc_max: f64,
    pub akc_max: f64,
    pub max_iterations: usize,
    pub cost_tolerance: f64,
    pub param_tolerance: f64,
    pub constrain_akc_zero: bool,
    pub damping_init: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            adc_min: 1e-6,
            adc_max: 5e-3,
            akc_max: 3.0,
            max_iterations: 200,
            cost_tolerance: 1e-12,
            param_tolerance: 1e-10,
            constrain_akc_zero: false,
            damping_init: 1e-3,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.adc_min > 0.0
            && self.adc_min < self.adc_max
            && self.akc_max > 0.0
            && self.cost_tolerance > 0.0
            && self.param_tolerance > 0.0
            && self.damping_init > 0.0
            && self.adc_max.is_finite()
            && self.akc_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("fit config out of range: {self:?}")))
        }
    }

    pub fn constrained(&self) -> FitConfig {
        FitConfig { constrain_akc_zero: true, ..self.clone() }
    }

    pub fn free_parameters(&self) -> usize {
        if self.constrain_akc_zero {
            2
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: DkiParams,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn distinct_bvalues(samples: &[(BValue, f64)]) -> usize {
    let mut bs: Vec<BValue> = samples.iter().map(|s| s.0).collect();
    bs.sort();
    bs.dedup();
    bs.len()
}

/// Checks that a protocol with `distinct` b-values can support `config`.
pub fn check_determined(distinct: usize, config: &FitConfig) -> Result<()> {
    if distinct < 2 {
        return Err(Error::DegenerateInput(format!("{distinct} distinct b-value(s); need at least 2")));
    }
    if distinct < config.free_parameters() {
        return Err(Error::UnderDetermined { distinct, required: config.free_parameters() });
    }
    Ok(())
}

struct Problem<'a> {
    samples: &'a [(BValue, f64)],
    theta: f64,
    /// Number of active parameters: 2 fits (s0, adc), 3 adds akc.
    n: usize,
    lower: [f64; 3],
    upper: [f64; 3],
}

impl Problem<'_> {
    fn params(&self, x: &[f64; 3]) -> DkiParams {
        DkiParams::new(x[0], x[1], if self.n == 3 { x[2] } else { 0.0 }, self.theta)
    }

    fn cost(&self, x: &[f64; 3]) -> f64 {
        let p = self.params(x);
        self.samples
            .iter()
            .map(|&(b, y)| {
                let r = forward_signal(&p, b) - y;
                r * r
            })
            .sum()
    }

    /// Normal equations `J^T J` and gradient `J^T r` at `x`, plus the cost.
    fn normal_equations(&self, x: &[f64; 3]) -> ([[f64; 3]; 3], [f64; 3], f64) {
        let p = self.params(x);
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        let mut cost = 0.0;
        for &(b, y) in self.samples {
            let r = forward_signal(&p, b) - y;
            let j = forward_jacobian(&p, b);
            cost += r * r;
            for row in 0..self.n {
                jtr[row] += j[row] * r;
                for col in 0..self.n {
                    jtj[row][col] += j[row] * j[col];
                }
            }
        }
        (jtj, jtr, cost)
    }

    fn project(&self, x: &mut [f64; 3]) {
        for k in 0..self.n {
            x[k] = x[k].clamp(self.lower[k], self.upper[k]);
        }
    }
}

/// Solve the `n x n` symmetric system by Cholesky; `None` if not positive definite.
fn cholesky_solve(a: &[[f64; 3]; 3], rhs: &[f64; 3], n: usize) -> Option<[f64; 3]> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..n {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    Some(x)
}

fn initial_guess(samples: &[(BValue, f64)], theta: f64, config: &FitConfig, upper_s0: f64) -> [f64; 3] {
    let tissue = |s: f64| (s * s - theta * theta).max(EPSILON).sqrt();
    let lowest = samples[0];
    let s0 = if lowest.0.is_zero() {
        // Average repeated b0 samples.
        let b0: Vec<f64> = samples.iter().filter(|s| s.0.is_zero()).map(|s| s.1).collect();
        tissue(b0.iter().sum::<f64>() / b0.len() as f64)
    } else {
        tissue(lowest.1)
    };
    let mut nonzero: Vec<(f64, f64)> = samples.iter().filter(|s| !s.0.is_zero()).map(|s| (s.0.value(), s.1)).collect();
    nonzero.dedup_by(|a, b| a.0 == b.0);
    let (b_a, s_a, b_b, s_b) = match nonzero.as_slice() {
        [first, second, ..] => (first.0, tissue(first.1), second.0, tissue(second.1)),
        [only] => (lowest.0.value(), s0, only.0, tissue(only.1)),
        [] => (0.0, s0, 1.0, s0),
    };
    let adc = if b_b > b_a { (s_a / s_b).ln() / (b_b - b_a) } else { config.adc_min };
    let adc = if adc.is_finite() { adc.clamp(config.adc_min, config.adc_max) } else { config.adc_min };
    let akc = if config.constrain_akc_zero { 0.0 } else { 0.5f64.min(config.akc_max) };
    [s0.clamp(EPSILON, upper_s0), adc, akc]
}

/// Least-squares fit of `(s0, adc, akc)` to `(b, signal)` samples with a fixed
/// background level `theta`. With `constrain_akc_zero` only `(s0, adc)` are fitted.
pub fn fit_voxel(samples: &[(BValue, f64)], theta: f64, config: &FitConfig) -> Result<FitResult> {
    check_determined(distinct_bvalues(samples), config)?;
    if !theta.is_finite() || theta < 0.0 {
        return Err(Error::DegenerateInput(format!("theta must be finite and >= 0, got {theta}")));
    }
    if samples.iter().any(|s| !s.1.is_finite()) {
        return Err(Error::DegenerateInput("non-finite signal".into()));
    }

    // Canonical order makes the result independent of how samples are passed.
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    if sorted.iter().all(|s| s.1 == 0.0) {
        return Ok(FitResult {
            params: DkiParams::new(EPSILON, config.adc_min, 0.0, theta),
            residual_norm: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let reference = sorted.iter().filter(|s| s.0.is_zero()).map(|s| s.1).fold(0.0, f64::max);
    let reference = if reference > 0.0 { reference } else { sorted.iter().map(|s| s.1).fold(0.0, f64::max) };
    let upper_s0 = 10.0 * reference;
    let problem = Problem {
        samples: &sorted,
        theta,
        n: config.free_parameters(),
        lower: [EPSILON, config.adc_min, 0.0],
        upper: [upper_s0, config.adc_max, config.akc_max],
    };

    let mut x = initial_guess(&sorted, theta, config, upper_s0);
    problem.project(&mut x);
    let (mut jtj, mut jtr, mut cost) = problem.normal_equations(&x);
    let mut lambda = config.damping_init;
    let mut iterations = 0;
    let mut converged = cost == 0.0;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        // Marquardt scaling: damp relative to the curvature of each parameter.
        let mut scale = [1.0; 3];
        for k in 0..problem.n {
            scale[k] = jtj[k][k].sqrt().max(f64::MIN_POSITIVE.sqrt());
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = [[0.0; 3]; 3];
            let mut g = [0.0; 3];
            for r in 0..problem.n {
                for c in 0..problem.n {
                    a[r][c] = jtj[r][c] / (scale[r] * scale[c]);
                }
                a[r][r] += lambda;
                g[r] = -jtr[r] / scale[r];
            }
            let Some(z) = cholesky_solve(&a, &g, problem.n) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = x;
            for k in 0..problem.n {
                trial[k] += z[k] / scale[k];
            }
            problem.project(&mut trial);
            let trial_cost = problem.cost(&trial);
            if trial_cost < cost {
                let step = (0..problem.n)
                    .map(|k| (trial[k] - x[k]).abs() / (x[k].abs().max(problem.lower[k]).max(param_floor(k, config))))
                    .fold(0.0, f64::max);
                let decrease = (cost - trial_cost) / cost;
                x = trial;
                (jtj, jtr, cost) = problem.normal_equations(&x);
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if cost == 0.0 || decrease < config.cost_tolerance || step < config.param_tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left at working precision.
            converged = true;
        }
    }

    Ok(FitResult {
        params: problem.params(&x),
        residual_norm: cost.sqrt(),
        iterations,
        converged,
    })
}

/// Scale below which relative parameter changes are measured absolutely.
fn param_floor(k: usize, config: &FitConfig) -> f64 {
    match k {
        0 => EPSILON,
        1 => config.adc_min,
        _ => 1e-3 * config.akc_max,
    }
}
