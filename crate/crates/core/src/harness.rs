//! Experiment harness: reference solutions, problem construction from a
//! config, trajectory runs with metric traces, CSV output and the
//! communication-exponent fit.

use std::io::Write;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::{
    default_params, diana_default_params, diana_step, gd_default_stepsize, gd_step, lyapunov, rate_bound,
    scaffnew_default_params, scaffnew_step, AlgoParams, DianaParams, DianaState, GdState, Locodl, LocodlState,
    ReferenceSolution, ScaffnewParams, ScaffnewState,
};
use crate::compressors::{CompressorKind, CompressorSpec};
use crate::data::{adult_like, dirichlet_synthetic, gaussian_logistic, partition, read_libsvm, Dataset, ADULT_ROWS};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, norm_inf, sqdist};
use crate::objectives::{reduce_g_zero, regularization_for_kappa, LocalFunction, Problem, Shard};
use crate::rng::SeedTree;

/// Default relative accuracy of reference solutions.
pub const DEFAULT_REFERENCE_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 200;
const QUADRATIC_STREAM: u64 = 6;

/// CSV header of every trace file.
pub const CSV_HEADER: [&str; 14] = [
    "algorithm",
    "dataset",
    "n",
    "d",
    "kappa",
    "compressor",
    "seed",
    "t",
    "rounds",
    "bits_per_client",
    "sqdist_mean",
    "sqdist_ybar",
    "obj_gap",
    "lyapunov",
];

/// Minimizes `(1/n) Σ f_i + g` by damped Newton steps and returns the primal
/// and dual optimum.
///
/// Stops once the Newton step is below `tol·(1 + ‖x‖)` or the gradient is
/// below `tol·µ·(1 + ‖x‖)`; both bound `‖x − x*‖` by about `tol` relative.
pub fn solve_reference(problem: &Problem, tol: f64) -> Result<ReferenceSolution> {
    if !(tol > 0.0) {
        return Err(Error::input(format!("reference tolerance must be positive, got {tol}")));
    }
    let d = problem.dim();
    let mu = problem.combined_strong_convexity().min(problem.strong_convexity());
    let mut x = vec![0.0; d];
    let mut value = problem.objective(&x);
    for _ in 0..NEWTON_MAX_ITER {
        let grad = problem.gradient(&x);
        let scale = 1.0 + norm(&x);
        if norm(&grad) <= tol * mu * scale {
            return Ok(finish(problem, x));
        }
        let hess = DMatrix::from_row_slice(d, d, &problem.hessian(&x));
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::Convergence { iterations: 0, residual: norm(&grad) })?;
        let step = chol.solve(&DVector::from_column_slice(&grad));
        let decrement = dot(step.as_slice(), &grad);
        let mut t = 1.0;
        let mut candidate: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
        // Near the optimum the objective no longer resolves the decrease.
        if decrement > 1e-10 * (1.0 + value.abs()) {
            let mut cand_value = problem.objective(&candidate);
            while cand_value > value - 0.25 * t * decrement && t > 1e-10 {
                t *= 0.5;
                candidate = x.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
                cand_value = problem.objective(&candidate);
            }
        }
        let moved = t * norm(step.as_slice());
        x = candidate;
        value = problem.objective(&x);
        if t == 1.0 && moved <= tol * (1.0 + norm(&x)) {
            return Ok(finish(problem, x));
        }
    }
    Err(Error::Convergence { iterations: NEWTON_MAX_ITER, residual: norm(&problem.gradient(&x)) })
}

fn finish(problem: &Problem, x: Vec<f64>) -> ReferenceSolution {
    let u_star: Vec<Vec<f64>> = problem.locals().iter().map(|f| f.gradient(&x)).collect();
    let v_star = problem.shared().gradient(&x);
    let residual = norm(&problem.gradient(&x));
    ReferenceSolution { f_star: problem.objective(&x), x_star: x, u_star, v_star, residual }
}

/// Where the clients' functions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum ProblemSource {
    /// Random quadratics `½xᵀA_ix − b_iᵀx + (µ/2)‖x‖²` with `L = 1`.
    Quadratic { dim: usize },
    /// Logistic regression on Gaussian features.
    Gaussian {
        dim: usize,
        rows_per_client: usize,
        #[serde(default = "default_signal")]
        signal: f64,
    },
    /// Logistic regression on a LibSVM file.
    Libsvm { path: PathBuf, dim: Option<usize> },
    /// Logistic regression on the census-shaped surrogate.
    AdultLike {
        #[serde(default = "default_adult_rows")]
        rows: usize,
    },
    /// Logistic regression on one Dirichlet sample per client.
    Dirichlet { dim: usize, alpha: f64 },
}

fn default_signal() -> f64 {
    3.0
}

fn default_adult_rows() -> usize {
    ADULT_ROWS
}

/// How `g` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharedMode {
    /// `g = (µ/2)‖x‖²` next to regularized `f_i`.
    #[default]
    Ridge,
    /// No natural `g`; the problem is rewritten by moving `(µ/4)‖x‖²` out of
    /// every `f_i`.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    #[serde(flatten)]
    pub source: ProblemSource,
    pub clients: usize,
    pub kappa: f64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub shared: SharedMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Locodl,
    Diana,
    Gd,
    Scaffnew,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Locodl => "locodl",
            Algorithm::Diana => "diana",
            Algorithm::Gd => "gd",
            Algorithm::Scaffnew => "scaffnew",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "locodl" => Ok(Algorithm::Locodl),
            "diana" => Ok(Algorithm::Diana),
            "gd" => Ok(Algorithm::Gd),
            "scaffnew" => Ok(Algorithm::Scaffnew),
            other => Err(Error::input(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Parameters that replace the theoretical defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    pub gamma: Option<f64>,
    pub chi: Option<f64>,
    pub rho: Option<f64>,
    pub p: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Stop once `Ψ^t/Ψ^0` reaches the target (LoCoDL only).
    PsiRatio(f64),
    /// Stop once `sqdist_mean` relative to its initial value reaches the target.
    SqdistRatio(f64),
}

impl StopRule {
    fn target(&self) -> f64 {
        match *self {
            StopRule::PsiRatio(r) | StopRule::SqdistRatio(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub algorithm: Algorithm,
    pub compressor: CompressorKind,
    #[serde(default)]
    pub params: ParamOverrides,
    pub seeds: Vec<u64>,
    pub stop: Option<StopRule>,
    pub max_iterations: u64,
    /// Record every `record_every`-th iteration.
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    /// Also record after every communication round.
    #[serde(default = "default_true")]
    pub record_rounds: bool,
    #[serde(default = "default_reference_tol")]
    pub reference_tol: f64,
    /// Probability that a client takes part in a round (LoCoDL with `ρ = 1`).
    pub participation: Option<f64>,
}

fn default_record_every() -> u64 {
    100
}

fn default_true() -> bool {
    true
}

fn default_reference_tol() -> f64 {
    DEFAULT_REFERENCE_TOL
}

impl ExperimentConfig {
    /// A config with default cadence, tolerance and full participation.
    pub fn new(problem: ProblemSpec, algorithm: Algorithm, compressor: CompressorKind, seeds: Vec<u64>) -> Self {
        Self {
            problem,
            algorithm,
            compressor,
            params: ParamOverrides::default(),
            seeds,
            stop: None,
            max_iterations: 1000,
            record_every: default_record_every(),
            record_rounds: true,
            reference_tol: DEFAULT_REFERENCE_TOL,
            participation: None,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::input("at least one seed is required"));
        }
        if let Some(stop) = self.stop {
            if !(stop.target() > 0.0) {
                return Err(Error::input("stop target must be positive"));
            }
            if matches!(stop, StopRule::PsiRatio(_)) && self.algorithm != Algorithm::Locodl {
                return Err(Error::config("the Lyapunov stop rule applies to LoCoDL only"));
            }
        }
        if self.record_every == 0 {
            return Err(Error::input("record_every must be positive"));
        }
        if let Some(q) = self.participation {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::input(format!("participation must be in (0, 1], got {q}")));
            }
            if self.algorithm != Algorithm::Locodl {
                return Err(Error::config("partial participation is implemented for LoCoDL only"));
            }
        }
        if matches!(self.algorithm, Algorithm::Gd | Algorithm::Scaffnew) && self.compressor != CompressorKind::Identity
        {
            return Err(Error::config(format!("{} sends uncompressed vectors", self.algorithm.name())));
        }
        Ok(())
    }
}

/// A problem instance together with its reference solution.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub problem: Problem,
    pub reference: ReferenceSolution,
    /// Dataset label for traces.
    pub dataset: String,
    /// Notes recorded in trace metadata.
    pub notes: Vec<(String, String)>,
}

/// Builds the problem described by `spec` and solves it to `reference_tol`.
pub fn prepare(spec: &ProblemSpec, reference_tol: f64) -> Result<Prepared> {
    let (problem, dataset, notes) = build_problem(spec)?;
    let reference = solve_reference(&problem, reference_tol)?;
    Ok(Prepared { problem, reference, dataset, notes })
}

/// Regularized logistic clients with `µ` chosen so that the worst client has
/// condition number `kappa`.
pub fn logistic_problem(shards: Vec<Shard>, kappa: f64, shared: SharedMode) -> Result<Problem> {
    let mu = shards
        .iter()
        .map(|s| regularization_for_kappa(s, kappa))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    match shared {
        SharedMode::Ridge => {
            let dim = shards[0].dim();
            let locals = shards.into_iter().map(|s| LocalFunction::logistic(s, mu)).collect::<Result<_>>()?;
            Problem::new(locals, LocalFunction::ridge(dim, mu)?)
        }
        SharedMode::Reduced => {
            let locals = shards.into_iter().map(|s| LocalFunction::logistic(s, mu)).collect::<Result<_>>()?;
            reduce_g_zero(locals, mu)
        }
    }
}

/// `n` random quadratics `½xᵀA_ix − b_iᵀx + (µ/2)‖x‖²` of dimension `d`
/// with `µ = 1/κ`: each `A_i` has spectrum in `[0, 1 − µ]` with the top
/// eigenvalue attained, so every function is 1-smooth and µ-strongly convex.
pub fn random_quadratics(n: usize, d: usize, kappa: f64, seed: u64) -> Result<Vec<LocalFunction>> {
    if n == 0 || d == 0 {
        return Err(Error::input("need at least one client and one dimension"));
    }
    if !(kappa > 1.0) {
        return Err(Error::input(format!("condition number must exceed 1, got {kappa}")));
    }
    let mu = 1.0 / kappa;
    let tree = SeedTree::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = tree.stream(QUADRATIC_STREAM, i as u64);
            let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let q = g.qr().q();
            let top = 1.0 - mu;
            let eig: Vec<f64> = (0..d).map(|j| if j == 0 { top } else { top * rng.random::<f64>() }).collect();
            let a = &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
            let a = (&a + a.transpose()) * 0.5;
            let b: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            LocalFunction::quadratic(a.as_slice().to_vec(), b, mu)
        })
        .collect()
}

/// [`random_quadratics`] with `g = (µ/2)‖x‖²` or the reduced split.
pub fn quadratic_problem(n: usize, d: usize, kappa: f64, seed: u64, shared: SharedMode) -> Result<Problem> {
    let locals = random_quadratics(n, d, kappa, seed)?;
    let mu = 1.0 / kappa;
    match shared {
        SharedMode::Ridge => Problem::new(locals, LocalFunction::ridge(d, mu)?),
        SharedMode::Reduced => reduce_g_zero(locals, mu),
    }
}

fn shards_from(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<Shard>> {
    partition(dataset, n, seed)
}

fn build_problem(spec: &ProblemSpec) -> Result<(Problem, String, Vec<(String, String)>)> {
    let n = spec.clients;
    let mut notes = Vec::new();
    let (problem, label) = match &spec.source {
        ProblemSource::Quadratic { dim } => {
            (quadratic_problem(n, *dim, spec.kappa, spec.data_seed, spec.shared)?, "quadratic".to_string())
        }
        ProblemSource::Gaussian { dim, rows_per_client, signal } => {
            let ds = gaussian_logistic(n * rows_per_client, *dim, *signal, spec.data_seed)?;
            let shards = shards_from(&ds, n, spec.data_seed)?;
            (logistic_problem(shards, spec.kappa, spec.shared)?, "gaussian".to_string())
        }
        ProblemSource::Libsvm { path, dim } => {
            let mut ds = read_libsvm(path)?;
            if let Some(d) = dim {
                ds = ds.with_dim(*d)?;
            }
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let shards = shards_from(&ds, n, spec.data_seed)?;
            notes.push(("discarded_rows".into(), (ds.len() - n * (ds.len() / n)).to_string()));
            (logistic_problem(shards, spec.kappa, spec.shared)?, label)
        }
        ProblemSource::AdultLike { rows } => {
            let ds = adult_like(*rows, spec.data_seed)?;
            let shards = shards_from(&ds, n, spec.data_seed)?;
            notes.push(("surrogate".into(), "census-shaped synthetic data, not a5a".into()));
            notes.push(("discarded_rows".into(), (ds.len() - n * (ds.len() / n)).to_string()));
            (logistic_problem(shards, spec.kappa, spec.shared)?, "adult-like".to_string())
        }
        ProblemSource::Dirichlet { dim, alpha } => {
            let ds = dirichlet_synthetic(n, *dim, *alpha, spec.data_seed)?;
            let shards = shards_from(&ds, n, spec.data_seed)?;
            notes.push(("label_rule".into(), "fair coin".into()));
            (logistic_problem(shards, spec.kappa, spec.shared)?, "dirichlet".to_string())
        }
    };
    Ok((problem, label, notes))
}

/// Parameters a run actually used. Feeding them back as overrides
/// reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    pub algorithm: Algorithm,
    pub compressor: String,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub omega: f64,
    pub omega_av: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl ResolvedParams {
    pub fn as_overrides(&self) -> ParamOverrides {
        ParamOverrides { gamma: Some(self.gamma), chi: self.chi, rho: self.rho, p: self.p, alpha: self.alpha }
    }
}

enum Resolved {
    Locodl(AlgoParams, f64),
    Diana(DianaParams),
    Gd(f64),
    Scaffnew(ScaffnewParams),
}

/// Resolves the parameters of `config` on `problem` and checks them.
pub fn resolve_params(config: &ExperimentConfig, problem: &Problem) -> Result<ResolvedParams> {
    let spec = CompressorSpec::new(config.compressor, problem.dim())?;
    Ok(describe(config, &spec, problem, &resolve(config, &spec, problem)?))
}

fn resolve(config: &ExperimentConfig, spec: &CompressorSpec, problem: &Problem) -> Result<Resolved> {
    let o = &config.params;
    let n = problem.clients();
    Ok(match config.algorithm {
        Algorithm::Locodl => {
            if !problem.has_shared() {
                return Err(Error::config("LoCoDL needs a strongly convex shared function g"));
            }
            let (l, mu) = (problem.smoothness(), problem.strong_convexity());
            let mut params = default_params(l, mu, spec, n);
            params.gamma = o.gamma.unwrap_or(params.gamma);
            params.chi = o.chi.unwrap_or(params.chi);
            params.rho = o.rho.unwrap_or(params.rho);
            params.p = o.p.unwrap_or(params.p);
            if o.alpha.is_some() {
                return Err(Error::config("alpha is a DIANA parameter"));
            }
            let tau = rate_bound(&params, l, mu)?;
            if config.participation.is_some_and(|q| q < 1.0) && params.rho != 1.0 {
                return Err(Error::config("partial participation requires ρ = 1"));
            }
            Resolved::Locodl(params, tau)
        }
        Algorithm::Diana => {
            let mut params = diana_default_params(problem, spec);
            params.gamma = o.gamma.unwrap_or(params.gamma);
            params.alpha = o.alpha.unwrap_or(params.alpha);
            if o.chi.is_some() || o.rho.is_some() || o.p.is_some() {
                return Err(Error::config("DIANA takes only gamma and alpha"));
            }
            if !(params.gamma > 0.0) || !(params.alpha > 0.0 && params.alpha <= 1.0) {
                return Err(Error::config(format!("invalid DIANA parameters {params:?}")));
            }
            Resolved::Diana(params)
        }
        Algorithm::Gd => {
            if o.chi.is_some() || o.rho.is_some() || o.p.is_some() || o.alpha.is_some() {
                return Err(Error::config("gradient descent takes only gamma"));
            }
            let gamma = o.gamma.unwrap_or_else(|| gd_default_stepsize(problem));
            if !(gamma > 0.0 && gamma * problem.combined_smoothness() < 2.0) {
                return Err(Error::config(format!("condition 0 < γ < 2/L violated: γ = {gamma:e}")));
            }
            Resolved::Gd(gamma)
        }
        Algorithm::Scaffnew => {
            if o.chi.is_some() || o.rho.is_some() || o.alpha.is_some() {
                return Err(Error::config("Scaffnew takes only gamma and p"));
            }
            let mut params = scaffnew_default_params(problem);
            params.gamma = o.gamma.unwrap_or(params.gamma);
            params.p = o.p.unwrap_or(params.p);
            if !(params.gamma > 0.0 && params.gamma * problem.combined_smoothness() < 2.0) {
                return Err(Error::config(format!("condition 0 < γ < 2/L violated: γ = {:e}", params.gamma)));
            }
            if !(params.p > 0.0 && params.p <= 1.0) {
                return Err(Error::config(format!("condition 0 < p <= 1 violated: p = {:e}", params.p)));
            }
            Resolved::Scaffnew(params)
        }
    })
}

fn describe(config: &ExperimentConfig, spec: &CompressorSpec, problem: &Problem, r: &Resolved) -> ResolvedParams {
    let n = problem.clients();
    let base = ResolvedParams {
        algorithm: config.algorithm,
        compressor: spec.to_string(),
        gamma: 0.0,
        chi: None,
        rho: None,
        p: None,
        alpha: None,
        omega: spec.omega(),
        omega_av: spec.omega_av(n),
        tau: None,
    };
    match *r {
        Resolved::Locodl(p, tau) => ResolvedParams {
            gamma: p.gamma,
            chi: Some(p.chi),
            rho: Some(p.rho),
            p: Some(p.p),
            omega: p.omega,
            omega_av: p.omega_av,
            tau: Some(tau),
            ..base
        },
        Resolved::Diana(p) => ResolvedParams { gamma: p.gamma, alpha: Some(p.alpha), ..base },
        Resolved::Gd(gamma) => ResolvedParams { gamma, ..base },
        Resolved::Scaffnew(p) => ResolvedParams { gamma: p.gamma, p: Some(p.p), ..base },
    }
}

/// One recorded step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    pub rounds: u64,
    /// Mean cumulative uplink bits over clients.
    pub bits_per_client: f64,
    /// `(1/n) Σ ‖x_i − x*‖²` over the clients' models.
    pub sqdist_mean: f64,
    /// Squared distance of the server model to `x*`.
    pub sqdist_ybar: f64,
    /// Objective gap at the server model.
    pub obj_gap: f64,
    /// LoCoDL's Lyapunov value, NaN for the baselines.
    pub lyapunov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub algorithm: Algorithm,
    pub dataset: String,
    pub n: usize,
    pub d: usize,
    pub kappa: f64,
    pub compressor: String,
    pub seed: u64,
    pub config_hash: String,
    pub params: ResolvedParams,
    pub smoothness: f64,
    pub strong_convexity: f64,
    pub reference_residual: f64,
    /// Largest `‖(1/n) Σ u_i + v‖_∞ / (1 + max_i ‖u_i‖_∞)` seen (LoCoDL).
    pub max_dual_violation: f64,
    pub saturations: u64,
    pub iterations: u64,
    pub reached_target: bool,
    pub notes: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTrace {
    pub meta: TraceMeta,
    pub rows: Vec<TraceRow>,
}

impl ExperimentTrace {
    /// Bits per client at the first recorded step where `sqdist_mean` has
    /// dropped by `ratio` relative to the first row.
    pub fn bits_to_sqdist_ratio(&self, ratio: f64) -> Option<f64> {
        let first = self.rows.first()?.sqdist_mean;
        self.rows.iter().find(|r| r.sqdist_mean <= ratio * first).map(|r| r.bits_per_client)
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("a trace has at least its initial row")
    }
}

/// Builds the problem, then runs every seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentTrace>> {
    config.validate()?;
    let prepared = prepare(&config.problem, config.reference_tol)?;
    run_prepared(config, &prepared)
}

/// Runs every seed of `config` on an already prepared problem, in parallel.
pub fn run_prepared(config: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<ExperimentTrace>> {
    config.validate()?;
    let spec = CompressorSpec::new(config.compressor, prepared.problem.dim())?;
    let resolved = resolve(config, &spec, &prepared.problem)?;
    config.seeds.par_iter().map(|&seed| run_seed(config, prepared, &spec, &resolved, seed)).collect()
}

enum Runner<'a> {
    Locodl(Locodl<'a>, LocodlState),
    Diana(DianaParams, &'a [CompressorSpec], DianaState),
    Gd(f64, GdState),
    Scaffnew(ScaffnewParams, ScaffnewState),
}

impl Runner<'_> {
    fn step(&mut self, problem: &Problem, seeds: &SeedTree, participation: Option<f64>) -> Result<()> {
        match self {
            Runner::Locodl(algo, state) => match participation {
                Some(q) if q < 1.0 => {
                    let t = state.t;
                    let coin = seeds.coin(t).random::<f64>() < algo.params().p;
                    let mut rng = seeds.participation(t);
                    let mask: Vec<bool> = (0..problem.clients()).map(|_| rng.random::<f64>() < q).collect();
                    algo.step_with_coin(state, coin, Some(&mask), seeds)?;
                }
                _ => {
                    algo.step(state, seeds)?;
                }
            },
            Runner::Diana(params, specs, state) => diana_step(state, problem, specs, params, seeds)?,
            Runner::Gd(gamma, state) => gd_step(state, problem, *gamma)?,
            Runner::Scaffnew(params, state) => {
                scaffnew_step(state, problem, params, seeds)?;
            }
        }
        Ok(())
    }

    fn t(&self) -> u64 {
        match self {
            Runner::Locodl(_, s) => s.t,
            Runner::Diana(_, _, s) => s.t,
            Runner::Gd(_, s) => s.t,
            Runner::Scaffnew(_, s) => s.t,
        }
    }

    fn rounds(&self) -> u64 {
        match self {
            Runner::Locodl(_, s) => s.rounds,
            Runner::Diana(_, _, s) => s.rounds,
            Runner::Gd(_, s) => s.rounds,
            Runner::Scaffnew(_, s) => s.rounds,
        }
    }

    fn bits(&self) -> &[u64] {
        match self {
            Runner::Locodl(_, s) => &s.bits_uplink,
            Runner::Diana(_, _, s) => &s.bits_uplink,
            Runner::Gd(_, s) => &s.bits_uplink,
            Runner::Scaffnew(_, s) => &s.bits_uplink,
        }
    }

    fn sqdist_mean(&self, x_star: &[f64]) -> f64 {
        let mean_over = |xs: &[Vec<f64>]| xs.iter().map(|x| sqdist(x, x_star)).sum::<f64>() / xs.len() as f64;
        match self {
            Runner::Locodl(_, s) => mean_over(&s.x),
            Runner::Diana(_, _, s) => sqdist(&s.x, x_star),
            Runner::Gd(_, s) => sqdist(&s.x, x_star),
            Runner::Scaffnew(_, s) => mean_over(&s.x),
        }
    }

    fn server_model(&self) -> Vec<f64> {
        match self {
            Runner::Locodl(_, s) => s.y.clone(),
            Runner::Diana(_, _, s) => s.x.clone(),
            Runner::Gd(_, s) => s.x.clone(),
            Runner::Scaffnew(_, s) => crate::linalg::mean_of(&s.x, s.x[0].len()),
        }
    }

    fn lyapunov(&self, reference: &ReferenceSolution) -> f64 {
        match self {
            Runner::Locodl(algo, s) => lyapunov(s, reference, algo.params()),
            _ => f64::NAN,
        }
    }

    fn dual_violation(&self) -> f64 {
        match self {
            Runner::Locodl(_, s) => s.dual_residual() / s.dual_scale(),
            _ => 0.0,
        }
    }

    fn saturations(&self) -> u64 {
        match self {
            Runner::Locodl(_, s) => s.saturated,
            _ => 0,
        }
    }
}

fn run_seed(
    config: &ExperimentConfig,
    prepared: &Prepared,
    spec: &CompressorSpec,
    resolved: &Resolved,
    seed: u64,
) -> Result<ExperimentTrace> {
    let problem = &prepared.problem;
    let reference = &prepared.reference;
    let (n, d) = (problem.clients(), problem.dim());
    let specs = vec![*spec; n];
    let seeds = SeedTree::new(seed);
    let mut runner = match *resolved {
        Resolved::Locodl(params, _) => Runner::Locodl(Locodl::new(problem, &specs, params)?, LocodlState::zeros(n, d)),
        Resolved::Diana(params) => Runner::Diana(params, &specs, DianaState::new(vec![0.0; d], n)),
        Resolved::Gd(gamma) => Runner::Gd(gamma, GdState::new(vec![0.0; d], n)),
        Resolved::Scaffnew(params) => Runner::Scaffnew(params, ScaffnewState::new(vec![0.0; d], n)),
    };

    let record = |runner: &Runner| {
        let model = runner.server_model();
        let bits = runner.bits();
        TraceRow {
            t: runner.t(),
            rounds: runner.rounds(),
            bits_per_client: bits.iter().sum::<u64>() as f64 / bits.len() as f64,
            sqdist_mean: runner.sqdist_mean(&reference.x_star),
            sqdist_ybar: sqdist(&model, &reference.x_star),
            obj_gap: problem.objective(&model) - reference.f_star,
            lyapunov: runner.lyapunov(reference),
        }
    };
    let stop_metric = |runner: &Runner| match config.stop {
        Some(StopRule::PsiRatio(_)) => runner.lyapunov(reference),
        _ => runner.sqdist_mean(&reference.x_star),
    };

    let mut rows = vec![record(&runner)];
    let initial = stop_metric(&runner);
    let mut max_violation = runner.dual_violation();
    let mut reached = config.stop.is_some_and(|s| initial <= 0.0 || s.target() >= 1.0);
    while !reached && runner.t() < config.max_iterations {
        let rounds_before = runner.rounds();
        runner.step(problem, &seeds, config.participation)?;
        max_violation = max_violation.max(runner.dual_violation());
        if let Some(stop) = config.stop {
            reached = stop_metric(&runner) <= stop.target() * initial;
        }
        let t = runner.t();
        let due = t % config.record_every == 0
            || (config.record_rounds && runner.rounds() != rounds_before)
            || reached
            || t == config.max_iterations;
        if due {
            rows.push(record(&runner));
        }
    }

    let mut notes = prepared.notes.clone();
    if let Some(stop) = config.stop {
        let name = match stop {
            StopRule::PsiRatio(_) => "psi-ratio",
            StopRule::SqdistRatio(_) => "sqdist-ratio",
        };
        notes.push(("stop_rule".into(), format!("{name} {:e}", stop.target())));
    }
    Ok(ExperimentTrace {
        meta: TraceMeta {
            algorithm: config.algorithm,
            dataset: prepared.dataset.clone(),
            n,
            d,
            kappa: config.problem.kappa,
            compressor: spec.to_string(),
            seed,
            config_hash: config.hash(),
            params: describe(config, spec, problem, resolved),
            smoothness: problem.smoothness(),
            strong_convexity: problem.strong_convexity(),
            reference_residual: reference.residual,
            max_dual_violation: max_violation,
            saturations: runner.saturations(),
            iterations: runner.t(),
            reached_target: reached,
            notes,
        },
        rows,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    algorithm: &'a str,
    dataset: &'a str,
    n: usize,
    d: usize,
    kappa: f64,
    compressor: &'a str,
    seed: u64,
    t: u64,
    rounds: u64,
    bits_per_client: f64,
    sqdist_mean: f64,
    sqdist_ybar: f64,
    obj_gap: f64,
    lyapunov: f64,
}

/// Writes traces as CSV with [`CSV_HEADER`] as the header row.
pub fn write_csv<W: Write>(traces: &[ExperimentTrace], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for trace in traces {
        let m = &trace.meta;
        for r in &trace.rows {
            w.serialize(CsvRow {
                algorithm: m.algorithm.name(),
                dataset: &m.dataset,
                n: m.n,
                d: m.d,
                kappa: m.kappa,
                compressor: &m.compressor,
                seed: m.seed,
                t: r.t,
                rounds: r.rounds,
                bits_per_client: r.bits_per_client,
                sqdist_mean: r.sqdist_mean,
                sqdist_ybar: r.sqdist_ybar,
                obj_gap: r.obj_gap,
                lyapunov: r.lyapunov,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn csv_bytes(traces: &[ExperimentTrace]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(traces, &mut buf)?;
    Ok(buf)
}

/// `key=value` lines describing one run.
pub fn metadata_text(meta: &TraceMeta) -> String {
    let p = &meta.params;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
    let mut lines = vec![
        format!("algorithm={}", meta.algorithm.name()),
        format!("dataset={}", meta.dataset),
        format!("n={}", meta.n),
        format!("d={}", meta.d),
        format!("kappa={}", meta.kappa),
        format!("compressor={}", meta.compressor),
        format!("seed={}", meta.seed),
        format!("config_hash={}", meta.config_hash),
        format!("gamma={}", p.gamma),
        format!("chi={}", opt(p.chi)),
        format!("rho={}", opt(p.rho)),
        format!("p={}", opt(p.p)),
        format!("alpha={}", opt(p.alpha)),
        format!("omega={}", p.omega),
        format!("omega_av={}", p.omega_av),
        format!("tau={}", opt(p.tau)),
        format!("smoothness={}", meta.smoothness),
        format!("strong_convexity={}", meta.strong_convexity),
        format!("reference_residual={:e}", meta.reference_residual),
        format!("max_dual_violation={:e}", meta.max_dual_violation),
        format!("saturations={}", meta.saturations),
        format!("iterations={}", meta.iterations),
        format!("reached_target={}", meta.reached_target),
    ];
    lines.extend(meta.notes.iter().map(|(k, v)| format!("{k}={v}")));
    lines.join("\n") + "\n"
}

/// Git-style content hash (`blob <len>\0<bytes>`, SHA-256) over several
/// inputs, hex encoded.
pub fn content_hash(parts: &[&[u8]]) -> String {
    let mut outer = Sha256::new();
    for part in parts {
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", part.len()).as_bytes());
        h.update(part);
        outer.update(h.finalize());
    }
    hex::encode(outer.finalize())
}

/// Least-squares slope of `log(bits)` against `log(κ)`.
pub fn fit_communication_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::input(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(k, b)| !(k > 0.0 && b > 0.0 && k.is_finite() && b.is_finite())) {
        return Err(Error::input("condition numbers and bit counts must be positive"));
    }
    let (lo, hi) = points.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &(k, _)| (lo.min(k), hi.max(k)));
    if (hi / lo).log10() < 2.0 - 1e-9 {
        return Err(Error::input("condition numbers must span at least two decades"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(k, b)| (k.ln(), b.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Median of finite values; `None` if there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

/// `‖(1/n) Σ u_i* + v*‖_∞` of a reference solution.
pub fn stationarity(reference: &ReferenceSolution) -> f64 {
    let d = reference.v_star.len();
    let mut s = crate::linalg::mean_of(&reference.u_star, d);
    crate::linalg::axpy(1.0, &reference.v_star, &mut s);
    norm_inf(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_spec(kappa: f64) -> ProblemSpec {
        ProblemSpec {
            source: ProblemSource::Quadratic { dim: 10 },
            clients: 5,
            kappa,
            data_seed: 1,
            shared: SharedMode::Ridge,
        }
    }

    fn diag_problem(diag: &[f64], b: &[f64]) -> Problem {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = diag[i];
        }
        Problem::without_shared(vec![LocalFunction::quadratic(a, b.to_vec(), 0.0).unwrap()]).unwrap()
    }

    #[test]
    fn reference_of_a_diagonal_quadratic() {
        let r = solve_reference(&diag_problem(&[1.0, 2.0], &[1.0, 2.0]), 1e-12).unwrap();
        assert!((r.x_star[0] - 1.0).abs() < 1e-12 && (r.x_star[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reference_of_a_shifted_sqnorm() {
        // ½‖x − c‖² up to a constant is ½‖x‖² − cᵀx.
        let c = [3.0, -1.0, 0.5];
        let r = solve_reference(&diag_problem(&[1.0; 3], &c), 1e-12).unwrap();
        assert!(sqdist(&r.x_star, &c) < 1e-24);
    }

    #[test]
    fn reference_is_stationary_on_logistic_data() {
        let spec = ProblemSpec {
            source: ProblemSource::Gaussian { dim: 8, rows_per_client: 6, signal: 3.0 },
            clients: 4,
            kappa: 1e4,
            data_seed: 3,
            shared: SharedMode::Ridge,
        };
        let prepared = prepare(&spec, 1e-12).unwrap();
        assert!(stationarity(&prepared.reference) <= 1e-12);
        let kappa = prepared.problem.kappa();
        assert!((kappa / 1e4 - 1.0).abs() < 1e-6, "{kappa}");
    }

    #[test]
    fn quadratic_problem_has_the_requested_condition_number() {
        let p = quadratic_problem(5, 10, 100.0, 0, SharedMode::Ridge).unwrap();
        assert!((p.smoothness() - 1.0).abs() < 1e-9);
        assert!((p.kappa() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn halving_the_reference_tolerance_changes_nothing_visible() {
        let mut config = ExperimentConfig::new(quad_spec(100.0), Algorithm::Locodl, CompressorKind::RandK { k: 1 }, vec![0]);
        config.max_iterations = 3000;
        let a = run_experiment(&config).unwrap();
        config.reference_tol = DEFAULT_REFERENCE_TOL / 2.0;
        let b = run_experiment(&config).unwrap();
        for (ra, rb) in a[0].rows.iter().zip(&b[0].rows) {
            assert!((ra.sqdist_mean / rb.sqdist_mean - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn psi_stop_rule_terminates_below_target() {
        let mut config = ExperimentConfig::new(quad_spec(100.0), Algorithm::Locodl, CompressorKind::RandK { k: 1 }, vec![0, 1]);
        config.stop = Some(StopRule::PsiRatio(1e-8));
        config.max_iterations = 1_000_000;
        for trace in run_experiment(&config).unwrap() {
            assert!(trace.meta.reached_target);
            assert!(trace.last().lyapunov <= 1e-8 * trace.rows[0].lyapunov);
            assert!(trace.meta.max_dual_violation <= 1e-9);
            let rows = &trace.rows;
            assert!(rows.windows(2).all(|w| w[0].rounds <= w[1].rounds && w[0].bits_per_client <= w[1].bits_per_client));
            let cost = CompressorSpec::new(CompressorKind::RandK { k: 1 }, 10).unwrap().bit_cost() as f64;
            assert!(rows.iter().all(|r| r.bits_per_client == r.rounds as f64 * cost));
            assert!(rows.iter().all(|r| r.lyapunov >= 0.0));
        }
    }

    #[test]
    fn zero_iterations_record_only_the_start() {
        let mut config = ExperimentConfig::new(quad_spec(100.0), Algorithm::Locodl, CompressorKind::Identity, vec![4]);
        config.max_iterations = 0;
        let traces = run_experiment(&config).unwrap();
        assert_eq!(traces[0].rows.len(), 1);
        assert_eq!(traces[0].rows[0].bits_per_client, 0.0);
        assert_eq!(traces[0].rows[0].t, 0);
    }

    #[test]
    fn same_seed_gives_identical_csv_bytes() {
        for algorithm in [Algorithm::Locodl, Algorithm::Diana, Algorithm::Scaffnew, Algorithm::Gd] {
            let compressor = match algorithm {
                Algorithm::Locodl | Algorithm::Diana => CompressorKind::RandKNatural { k: 2 },
                _ => CompressorKind::Identity,
            };
            let mut config = ExperimentConfig::new(quad_spec(100.0), algorithm, compressor, vec![5, 6]);
            config.max_iterations = 500;
            let a = csv_bytes(&run_experiment(&config).unwrap()).unwrap();
            let b = csv_bytes(&run_experiment(&config).unwrap()).unwrap();
            assert_eq!(a, b);
            let text = String::from_utf8(a).unwrap();
            let mut lines = text.lines();
            assert_eq!(lines.next(), Some(CSV_HEADER.join(",").as_str()));
            assert!(lines.all(|l| l.starts_with(algorithm.name())));
        }
    }

    #[test]
    fn resolved_params_round_trip_as_overrides() {
        let mut config = ExperimentConfig::new(quad_spec(100.0), Algorithm::Locodl, CompressorKind::RandK { k: 3 }, vec![2]);
        config.max_iterations = 400;
        let first = run_experiment(&config).unwrap();
        config.params = first[0].meta.params.as_overrides();
        let second = run_experiment(&config).unwrap();
        assert_eq!(csv_bytes(&first).unwrap(), csv_bytes(&second).unwrap());
    }

    #[test]
    fn invalid_overrides_are_configuration_errors() {
        let mut config = ExperimentConfig::new(quad_spec(100.0), Algorithm::Locodl, CompressorKind::RandK { k: 1 }, vec![0]);
        config.params.chi = Some(1.0);
        match run_experiment(&config) {
            Err(Error::Config(msg)) => assert!(msg.contains("2ρ − ρ²(1+ω_av) − χ ≥ 0"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut config = ExperimentConfig::new(quad_spec(100.0), Algorithm::Gd, CompressorKind::Identity, vec![0]);
        config.stop = Some(StopRule::PsiRatio(1e-3));
        assert!(matches!(run_experiment(&config), Err(Error::Config(_))));
        let mut config = ExperimentConfig::new(quad_spec(100.0), Algorithm::Locodl, CompressorKind::Identity, vec![]);
        config.max_iterations = 1;
        assert!(matches!(run_experiment(&config), Err(Error::Input(_))));
    }

    #[test]
    fn partial_participation_runs_with_rho_one() {
        let mut config = ExperimentConfig::new(quad_spec(100.0), Algorithm::Locodl, CompressorKind::RandK { k: 2 }, vec![0]);
        config.participation = Some(0.5);
        config.max_iterations = 100;
        assert!(matches!(run_experiment(&config), Err(Error::Config(_))));
        // ρ = 1 with χ small enough for the stepsize condition.
        config.params.rho = Some(1.0);
        let omega_av = CompressorSpec::new(CompressorKind::RandK { k: 2 }, 10).unwrap().omega_av(5);
        config.params.chi = Some(1.0 - omega_av);
        config.stop = Some(StopRule::SqdistRatio(1e-6));
        config.max_iterations = 200_000;
        let trace = &run_experiment(&config).unwrap()[0];
        assert!(trace.meta.reached_target);
        assert!(trace.meta.max_dual_violation <= 1e-9);
    }

    #[test]
    fn reduced_problem_runs_locodl() {
        let mut spec = quad_spec(50.0);
        spec.shared = SharedMode::Reduced;
        let mut config = ExperimentConfig::new(spec, Algorithm::Locodl, CompressorKind::Identity, vec![0]);
        config.stop = Some(StopRule::SqdistRatio(1e-10));
        config.max_iterations = 100_000;
        assert!(run_experiment(&config).unwrap()[0].meta.reached_target);
    }

    #[test]
    fn exponent_of_exact_power_laws() {
        let sqrt: Vec<(f64, f64)> = [1e2, 1e3, 1e4].iter().map(|&k: &f64| (k, 7.0 * k.sqrt())).collect();
        assert!((fit_communication_exponent(&sqrt).unwrap() - 0.5).abs() < 1e-9);
        let lin: Vec<(f64, f64)> = [1e1, 1e2, 1e3, 1e4].iter().map(|&k| (k, 3.0 * k)).collect();
        assert!((fit_communication_exponent(&lin).unwrap() - 1.0).abs() < 1e-9);
        assert!(fit_communication_exponent(&sqrt[..2]).is_err());
        assert!(fit_communication_exponent(&[(1.0, 1.0), (2.0, 2.0), (10.0, 3.0)]).is_err());
    }

    #[test]
    fn median_of_odd_and_even_lists() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn config_hash_depends_on_content() {
        let a = ExperimentConfig::new(quad_spec(100.0), Algorithm::Locodl, CompressorKind::Identity, vec![0]);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds.push(1);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
