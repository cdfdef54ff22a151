//! Baselines. Each runs on the averaged functions `f_i + g`, i.e. `g` is
//! folded into every client.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compressors::{CompressorSpec, FLOAT_BITS};
use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::objectives::Problem;
use crate::rng::SeedTree;

fn uncompressed_bits(d: usize) -> u64 {
    FLOAT_BITS * d as u64
}

/// Distributed gradient descent: every iteration is one round in which each
/// client uploads its full gradient.
#[derive(Debug, Clone)]
pub struct GdState {
    pub x: Vec<f64>,
    pub t: u64,
    pub rounds: u64,
    pub bits_uplink: Vec<u64>,
    grad: Vec<f64>,
    scratch: Vec<f64>,
}

impl GdState {
    pub fn new(x: Vec<f64>, n: usize) -> Self {
        let d = x.len();
        Self { x, t: 0, rounds: 0, bits_uplink: vec![0; n], grad: vec![0.0; d], scratch: vec![0.0; d] }
    }
}

/// `1/L` for the combined functions `f_i + g`.
pub fn gd_default_stepsize(problem: &Problem) -> f64 {
    1.0 / problem.combined_smoothness()
}

pub fn gd_step(state: &mut GdState, problem: &Problem, gamma: f64) -> Result<()> {
    if state.x.len() != problem.dim() || state.bits_uplink.len() != problem.clients() {
        return Err(Error::input("state shape does not match the problem"));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::config(format!("gradient descent stepsize must be nonnegative, got {gamma}")));
    }
    problem.gradient_into(&state.x, &mut state.grad, &mut state.scratch);
    axpy(-gamma, &state.grad, &mut state.x);
    let bits = uncompressed_bits(problem.dim());
    state.bits_uplink.iter_mut().for_each(|b| *b += bits);
    state.t += 1;
    state.rounds += 1;
    Ok(())
}

/// DIANA: compressed gradient differences against learned shifts `h_i`.
#[derive(Debug, Clone)]
pub struct DianaState {
    pub x: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    /// Running mean of the shifts, known to the server.
    pub h_mean: Vec<f64>,
    pub t: u64,
    pub rounds: u64,
    pub bits_uplink: Vec<u64>,
    grad: Vec<f64>,
    scratch: Vec<f64>,
    msg: Vec<f64>,
    acc: Vec<f64>,
}

impl DianaState {
    /// Starts at `x` with zero shifts.
    pub fn new(x: Vec<f64>, n: usize) -> Self {
        let d = x.len();
        Self {
            x,
            h: vec![vec![0.0; d]; n],
            h_mean: vec![0.0; d],
            t: 0,
            rounds: 0,
            bits_uplink: vec![0; n],
            grad: vec![0.0; d],
            scratch: vec![0.0; d],
            msg: vec![0.0; d],
            acc: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DianaParams {
    pub gamma: f64,
    /// Shift learning rate.
    pub alpha: f64,
}

/// `α = 1/(1+ω)` and `γ = 1/(L(1 + 2ω/n))` with `L` the smoothness of `f_i + g`.
pub fn diana_default_params(problem: &Problem, spec: &CompressorSpec) -> DianaParams {
    let omega = spec.omega();
    let n = problem.clients() as f64;
    DianaParams {
        gamma: 1.0 / (problem.combined_smoothness() * (1.0 + 2.0 * omega / n)),
        alpha: 1.0 / (1.0 + omega),
    }
}

pub fn diana_step(
    state: &mut DianaState,
    problem: &Problem,
    specs: &[CompressorSpec],
    params: &DianaParams,
    seeds: &SeedTree,
) -> Result<()> {
    let n = problem.clients();
    if specs.len() != n || state.h.len() != n || state.x.len() != problem.dim() {
        return Err(Error::input("state or compressors do not match the problem"));
    }
    if !(params.alpha > 0.0 && params.alpha <= 1.0) || !(params.gamma > 0.0) {
        return Err(Error::config(format!("invalid DIANA parameters {params:?}")));
    }
    let DianaState { x, h, h_mean, grad, scratch, msg, acc, .. } = state;
    acc.iter_mut().for_each(|a| *a = 0.0);
    for i in 0..n {
        problem.combined_local_gradient_into(i, x, grad, scratch);
        for (g, hv) in grad.iter_mut().zip(&h[i]) {
            *g -= hv;
        }
        let mut rng = seeds.client(i, state.t);
        specs[i].compress_into(grad, msg, &mut rng)?;
        axpy(1.0, msg, acc);
        axpy(params.alpha, msg, &mut h[i]);
        state.bits_uplink[i] += specs[i].bit_cost();
    }
    let inv_n = 1.0 / n as f64;
    for j in 0..x.len() {
        let mean_msg = acc[j] * inv_n;
        x[j] -= params.gamma * (h_mean[j] + mean_msg);
        h_mean[j] += params.alpha * mean_msg;
    }
    state.t += 1;
    state.rounds += 1;
    Ok(())
}

/// Scaffnew: local gradient steps with control variates and averaging with
/// probability `p`, using the same shared coin as LoCoDL.
#[derive(Debug, Clone)]
pub struct ScaffnewState {
    pub x: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub t: u64,
    pub rounds: u64,
    pub bits_uplink: Vec<u64>,
    grad: Vec<f64>,
    scratch: Vec<f64>,
}

impl ScaffnewState {
    /// All clients start at `x` with zero control variates.
    pub fn new(x: Vec<f64>, n: usize) -> Self {
        let d = x.len();
        Self {
            x: vec![x; n],
            h: vec![vec![0.0; d]; n],
            t: 0,
            rounds: 0,
            bits_uplink: vec![0; n],
            grad: vec![0.0; d],
            scratch: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaffnewParams {
    pub gamma: f64,
    pub p: f64,
}

/// `γ = 1/L` and `p = 1/√κ` for the combined functions `f_i + g`.
pub fn scaffnew_default_params(problem: &Problem) -> ScaffnewParams {
    let l = problem.combined_smoothness();
    let kappa = l / problem.combined_strong_convexity();
    ScaffnewParams { gamma: 1.0 / l, p: (1.0 / kappa.sqrt()).min(1.0) }
}

pub fn scaffnew_step(
    state: &mut ScaffnewState,
    problem: &Problem,
    params: &ScaffnewParams,
    seeds: &SeedTree,
) -> Result<bool> {
    let coin = seeds.coin(state.t).random::<f64>() < params.p;
    scaffnew_step_with_coin(state, problem, params, coin)
}

pub fn scaffnew_step_with_coin(
    state: &mut ScaffnewState,
    problem: &Problem,
    params: &ScaffnewParams,
    coin: bool,
) -> Result<bool> {
    let n = problem.clients();
    let d = problem.dim();
    if state.x.len() != n || state.x[0].len() != d {
        return Err(Error::input("state shape does not match the problem"));
    }
    if !(params.gamma > 0.0 && params.gamma * problem.combined_smoothness() < 2.0) {
        return Err(Error::config(format!("Scaffnew needs 0 < γ < 2/L, got γ = {}", params.gamma)));
    }
    if !(params.p > 0.0 && params.p <= 1.0) {
        return Err(Error::config(format!("Scaffnew needs 0 < p <= 1, got p = {}", params.p)));
    }
    let ScaffnewState { x, h, grad, scratch, .. } = state;
    for i in 0..n {
        problem.combined_local_gradient_into(i, &x[i], grad, scratch);
        for j in 0..d {
            x[i][j] -= params.gamma * (grad[j] - h[i][j]);
        }
    }
    if coin {
        let mean = crate::linalg::mean_of(x, d);
        let c = params.p / params.gamma;
        for i in 0..n {
            for j in 0..d {
                h[i][j] += c * (mean[j] - x[i][j]);
            }
            x[i].copy_from_slice(&mean);
        }
        let bits = uncompressed_bits(d);
        state.bits_uplink.iter_mut().for_each(|b| *b += bits);
        state.rounds += 1;
    }
    state.t += 1;
    Ok(coin)
}
