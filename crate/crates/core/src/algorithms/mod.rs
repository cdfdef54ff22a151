//! LoCoDL, its theoretical parameter schedule and convergence diagnostics,
//! and the baselines it is compared against (GD, DIANA, Scaffnew).

mod baselines;
mod locodl;

pub use baselines::{
    diana_default_params, diana_step, gd_default_stepsize, gd_step, scaffnew_default_params, scaffnew_step,
    DianaParams, DianaState, GdState, ScaffnewParams, ScaffnewState,
};
pub use locodl::{locodl_step, Locodl, LocodlState};

use serde::{Deserialize, Serialize};

use crate::compressors::{CompressorKind, CompressorSpec};
use crate::error::{Error, Result};

/// Slack allowed on `2ρ − ρ²(1+ω_av) − χ ≥ 0`, which the default schedule
/// meets with equality.
const STEPSIZE_CONDITION_TOL: f64 = 1e-12;

/// LoCoDL parameters: primal stepsize `γ`, dual weight `χ`, mixing `ρ` and
/// communication probability `p`, together with the compressor variances
/// they were chosen for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgoParams {
    pub gamma: f64,
    pub chi: f64,
    pub rho: f64,
    pub p: f64,
    pub omega: f64,
    pub omega_av: f64,
}

impl AlgoParams {
    pub fn new(gamma: f64, chi: f64, rho: f64, p: f64, omega: f64, omega_av: f64) -> Self {
        Self { gamma, chi, rho, p, omega, omega_av }
    }

    /// Dual stepsize `pχ / (γ(1 + 2ω))`.
    pub fn dual_step(&self) -> f64 {
        self.p * self.chi / (self.gamma * (1.0 + 2.0 * self.omega))
    }

    /// `2ρ − ρ²(1 + ω_av) − χ`, nonnegative for admissible parameters.
    pub fn stepsize_slack(&self) -> f64 {
        2.0 * self.rho - self.rho * self.rho * (1.0 + self.omega_av) - self.chi
    }

    /// Checks the linear-convergence conditions for an `L`-smooth problem.
    pub fn validate(&self, smoothness: f64) -> Result<()> {
        let all_finite = [self.gamma, self.chi, self.rho, self.p, self.omega, self.omega_av]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::config("parameters must be finite"));
        }
        if !(self.gamma > 0.0 && self.gamma * smoothness < 2.0) {
            return Err(Error::config(format!(
                "condition 0 < γ < 2/L violated: γ = {:e}, 2/L = {:e}",
                self.gamma,
                2.0 / smoothness
            )));
        }
        if !(self.chi > 0.0) {
            return Err(Error::config(format!("condition χ > 0 violated: χ = {:e}", self.chi)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("condition 0 < ρ <= 1 violated: ρ = {:e}", self.rho)));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::config(format!("condition 0 < p <= 1 violated: p = {:e}", self.p)));
        }
        if self.omega < 0.0 || self.omega_av < 0.0 {
            return Err(Error::config("compressor variances must be nonnegative"));
        }
        let slack = self.stepsize_slack();
        if slack < -STEPSIZE_CONDITION_TOL * (1.0 + self.chi) {
            return Err(Error::config(format!(
                "condition 2ρ − ρ²(1+ω_av) − χ ≥ 0 violated: value {slack:e} with ρ = {:e}, χ = {:e}, ω_av = {:e}",
                self.rho, self.chi, self.omega_av
            )));
        }
        Ok(())
    }
}

/// Theoretical schedule for given variances: `γ = 1/L`,
/// `χ = ρ = 1/(1 + ω_av)` and `p = min(√((1+ω_av)(1+ω)/κ), 1)`.
pub fn default_params_for(smoothness: f64, strong_convexity: f64, omega: f64, omega_av: f64) -> AlgoParams {
    let kappa = smoothness / strong_convexity;
    let chi = 1.0 / (1.0 + omega_av);
    let p = ((1.0 + omega_av) * (1.0 + omega) / kappa).sqrt().min(1.0);
    AlgoParams::new(1.0 / smoothness, chi, chi, p, omega, omega_av)
}

/// Theoretical schedule for `n` clients with independent copies of `spec`.
pub fn default_params(smoothness: f64, strong_convexity: f64, spec: &CompressorSpec, n: usize) -> AlgoParams {
    let params = default_params_for(smoothness, strong_convexity, spec.omega(), spec.omega_av(n));
    if let CompressorKind::RandK { k } = spec.kind() {
        debug_assert!({
            let alt = rand_k_params(smoothness, strong_convexity, n, spec.dim(), k);
            (alt.chi / params.chi - 1.0).abs() < 1e-12 && (alt.p / params.p - 1.0).abs() < 1e-12
        });
    }
    params
}

/// The same schedule written directly in terms of `(n, d, k)` for
/// independent rand-k compressors:
/// `χ = ρ = n/(n − 1 + d/k)`, `p = min(√((dk(n−1) + d²)/(nk²κ)), 1)`.
pub fn rand_k_params(smoothness: f64, strong_convexity: f64, n: usize, d: usize, k: usize) -> AlgoParams {
    let (nf, df, kf) = (n as f64, d as f64, k as f64);
    let kappa = smoothness / strong_convexity;
    let chi = nf / (nf - 1.0 + df / kf);
    let p = ((df * kf * (nf - 1.0) + df * df) / (nf * kf * kf * kappa)).sqrt().min(1.0);
    let omega = df / kf - 1.0;
    AlgoParams::new(1.0 / smoothness, chi, chi, p, omega, omega / nf)
}

/// Contraction factor `τ = max((1−γµ)², (1−γL)², 1 − p²χ/(1+2ω))` of the
/// expected Lyapunov function.
pub fn rate_bound(params: &AlgoParams, smoothness: f64, strong_convexity: f64) -> Result<f64> {
    params.validate(smoothness)?;
    let tau = (1.0 - params.gamma * strong_convexity)
        .powi(2)
        .max((1.0 - params.gamma * smoothness).powi(2))
        .max(1.0 - params.p * params.p * params.chi / (1.0 + 2.0 * params.omega));
    if !(tau < 1.0) {
        return Err(Error::config(format!("rate bound τ = {tau} is not below 1")));
    }
    Ok(tau)
}

/// Rate `max(1−γµ, γL−1)²` of plain gradient descent with the same stepsize.
/// Reported only; LoCoDL matches it while `1 − p²χ/(1+2ω)` stays below it.
pub fn gd_rate(params: &AlgoParams, smoothness: f64, strong_convexity: f64) -> f64 {
    (1.0 - params.gamma * strong_convexity).max(params.gamma * smoothness - 1.0).powi(2)
}

/// Solution `x*` of the problem with the optimal dual variables
/// `u_i* = ∇f_i(x*)` and `v* = ∇g(x*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub u_star: Vec<Vec<f64>>,
    pub v_star: Vec<f64>,
    pub f_star: f64,
    /// Norm of the full gradient at `x_star`.
    pub residual: f64,
}

/// Lyapunov function
/// `Ψ = (1/γ)(Σ‖x_i − x*‖² + n‖y − x*‖²) + (γ(1+2ω)/(p²χ))(Σ‖u_i − u_i*‖² + n‖v − v*‖²)`.
pub fn lyapunov(state: &LocodlState, reference: &ReferenceSolution, params: &AlgoParams) -> f64 {
    use crate::linalg::sqdist;
    let n = state.x.len() as f64;
    let primal: f64 = state.x.iter().map(|x| sqdist(x, &reference.x_star)).sum::<f64>()
        + n * sqdist(&state.y, &reference.x_star);
    let dual: f64 = state
        .u
        .iter()
        .zip(&reference.u_star)
        .map(|(u, us)| sqdist(u, us))
        .sum::<f64>()
        + n * sqdist(&state.v, &reference.v_star);
    primal / params.gamma
        + params.gamma * (1.0 + 2.0 * params.omega) / (params.p * params.p * params.chi) * dual
}
