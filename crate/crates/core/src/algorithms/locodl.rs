use rand::Rng;

use super::AlgoParams;
use crate::compressors::CompressorSpec;
use crate::error::{Error, Result};
use crate::linalg::{axpy, norm_inf};
use crate::objectives::Problem;
use crate::rng::SeedTree;

/// Full iterate of LoCoDL: local models `x_i`, the shared model `y`, and
/// the dual variables `u_i`, `v`.
///
/// All clients hold identical copies of `y` and `v`; they are stored once.
#[derive(Debug, Clone)]
pub struct LocodlState {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Iterations performed.
    pub t: u64,
    /// Communication rounds performed.
    pub rounds: u64,
    /// Cumulative uplink bits per client.
    pub bits_uplink: Vec<u64>,
    /// Natural-compression values clamped to the exponent range so far.
    pub saturated: u64,
    xhat: Vec<Vec<f64>>,
    msgs: Vec<Vec<f64>>,
    grad: Vec<f64>,
}

impl LocodlState {
    /// The all-zero initialization.
    pub fn zeros(n: usize, d: usize) -> Self {
        Self::from_parts(vec![vec![0.0; d]; n], vec![0.0; d], vec![vec![0.0; d]; n], vec![0.0; d])
    }

    /// Builds a state from explicit values; the duals must satisfy
    /// `(1/n) Σ u_i + v = 0`.
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, u: Vec<Vec<f64>>, v: Vec<f64>) -> Result<Self> {
        let d = y.len();
        if x.is_empty() || x.len() != u.len() {
            return Err(Error::input("need the same positive number of local models and duals"));
        }
        if v.len() != d || x.iter().chain(&u).any(|w| w.len() != d) {
            return Err(Error::input("state vectors have inconsistent dimensions"));
        }
        let state = Self::from_parts(x, y, u, v);
        if state.dual_residual() > 1e-9 * state.dual_scale() {
            return Err(Error::input(format!(
                "initial duals violate (1/n) Σ u_i + v = 0 (residual {:e})",
                state.dual_residual()
            )));
        }
        Ok(state)
    }

    fn from_parts(x: Vec<Vec<f64>>, y: Vec<f64>, u: Vec<Vec<f64>>, v: Vec<f64>) -> Self {
        let (n, d) = (x.len(), y.len());
        Self {
            x,
            y,
            u,
            v,
            t: 0,
            rounds: 0,
            bits_uplink: vec![0; n],
            saturated: 0,
            xhat: vec![vec![0.0; d]; n],
            msgs: vec![vec![0.0; d]; n],
            grad: vec![0.0; d],
        }
    }

    pub fn clients(&self) -> usize {
        self.x.len()
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    /// `‖(1/n) Σ u_i + v‖_∞`.
    pub fn dual_residual(&self) -> f64 {
        let n = self.clients() as f64;
        let mut acc = self.v.clone();
        for u in &self.u {
            axpy(1.0 / n, u, &mut acc);
        }
        norm_inf(&acc)
    }

    /// `1 + max_i ‖u_i‖_∞`, the scale for the dual residual.
    pub fn dual_scale(&self) -> f64 {
        1.0 + self.u.iter().map(|u| norm_inf(u)).fold(0.0, f64::max)
    }
}

/// A validated LoCoDL configuration.
#[derive(Debug, Clone, Copy)]
pub struct Locodl<'a> {
    problem: &'a Problem,
    specs: &'a [CompressorSpec],
    params: AlgoParams,
}

impl<'a> Locodl<'a> {
    /// Checks the problem, the compressors and the convergence conditions on
    /// the parameters.
    pub fn new(problem: &'a Problem, specs: &'a [CompressorSpec], params: AlgoParams) -> Result<Self> {
        if !problem.has_shared() {
            return Err(Error::config(
                "LoCoDL needs a strongly convex shared function g; reduce the problem first",
            ));
        }
        if specs.len() != problem.clients() {
            return Err(Error::input(format!(
                "{} compressors for {} clients",
                specs.len(),
                problem.clients()
            )));
        }
        if specs.iter().any(|s| s.dim() != problem.dim()) {
            return Err(Error::input("compressor dimension differs from the problem dimension"));
        }
        let worst_omega = specs.iter().map(CompressorSpec::omega).fold(0.0, f64::max);
        if params.omega < worst_omega {
            return Err(Error::config(format!(
                "parameters assume ω = {} but a compressor has ω = {worst_omega}",
                params.omega
            )));
        }
        params.validate(problem.smoothness())?;
        Ok(Self { problem, specs, params })
    }

    pub fn params(&self) -> &AlgoParams {
        &self.params
    }

    /// One iteration with the shared coin drawn from the seed tree. Returns
    /// whether communication happened.
    pub fn step(&self, state: &mut LocodlState, seeds: &SeedTree) -> Result<bool> {
        let coin = seeds.coin(state.t).random::<f64>() < self.params.p;
        self.step_with_coin(state, coin, None, seeds)
    }

    /// One iteration with a given coin. `active`, when given, marks the
    /// clients that take part in a communication round; the others send
    /// nothing. Partial participation requires `ρ = 1`.
    pub fn step_with_coin(
        &self,
        state: &mut LocodlState,
        coin: bool,
        active: Option<&[bool]>,
        seeds: &SeedTree,
    ) -> Result<bool> {
        let n = self.problem.clients();
        let d = self.problem.dim();
        if state.clients() != n || state.dim() != d {
            return Err(Error::input("state shape does not match the problem"));
        }
        if let Some(mask) = active {
            if mask.len() != n {
                return Err(Error::input("participation mask has the wrong length"));
            }
            if self.params.rho != 1.0 && mask.iter().any(|a| !a) {
                return Err(Error::config("partial participation requires ρ = 1"));
            }
        }
        let AlgoParams { gamma, rho, .. } = self.params;

        // Local gradient steps corrected by the duals.
        let LocodlState { x, y, u, v, xhat, msgs, grad, .. } = state;
        for i in 0..n {
            self.problem.local(i).gradient_into(&x[i], grad);
            let xh = &mut xhat[i];
            for j in 0..d {
                xh[j] = x[i][j] - gamma * grad[j] + gamma * u[i][j];
            }
        }
        self.problem.shared().gradient_into(y, grad);
        let yhat: Vec<f64> = (0..d).map(|j| y[j] - gamma * grad[j] + gamma * v[j]).collect();

        if !coin {
            for i in 0..n {
                x[i].copy_from_slice(&xhat[i]);
            }
            y.copy_from_slice(&yhat);
            state.t += 1;
            return Ok(false);
        }

        let mut dbar = vec![0.0; d];
        let mut saturated = 0u64;
        for i in 0..n {
            let participates = active.is_none_or(|m| m[i]);
            let msg = &mut msgs[i];
            if participates {
                for j in 0..d {
                    grad[j] = xhat[i][j] - yhat[j];
                }
                let mut rng = seeds.client(i, state.t);
                saturated += u64::from(self.specs[i].compress_into(grad, msg, &mut rng)?);
                state.bits_uplink[i] += self.specs[i].bit_cost();
            } else {
                msg.iter_mut().for_each(|m| *m = 0.0);
            }
            axpy(1.0, msg, &mut dbar);
        }
        let inv_2n = 0.5 / n as f64;
        dbar.iter_mut().for_each(|v| *v *= inv_2n);

        let lambda = self.params.dual_step();
        for i in 0..n {
            for j in 0..d {
                x[i][j] = (1.0 - rho) * xhat[i][j] + rho * (yhat[j] + dbar[j]);
                u[i][j] += lambda * (dbar[j] - msgs[i][j]);
            }
        }
        for j in 0..d {
            y[j] = yhat[j] + rho * dbar[j];
            v[j] += lambda * dbar[j];
        }
        state.saturated += saturated;
        state.rounds += 1;
        state.t += 1;
        Ok(true)
    }
}

/// One LoCoDL iteration (validates on every call; use [`Locodl`] in loops).
pub fn locodl_step(
    state: &mut LocodlState,
    problem: &Problem,
    specs: &[CompressorSpec],
    params: &AlgoParams,
    seeds: &SeedTree,
) -> Result<bool> {
    Locodl::new(problem, specs, *params)?.step(state, seeds)
}
