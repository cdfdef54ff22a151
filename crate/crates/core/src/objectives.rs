//! Strongly convex objectives: the local functions `f_i`, the shared
//! function `g`, and the problem that averages them.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, power_iteration, sqnorm};

/// Tolerance and iteration cap for smoothness estimates by power iteration.
pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 10_000;

/// One client's data: `m` dense rows of dimension `d` with labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

impl Shard {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("shard rows have different dimensions"));
        }
        Self::from_flat(rows.concat(), labels, dim)
    }

    /// Builds a shard from row-major features.
    pub fn from_flat(features: Vec<f64>, labels: Vec<f64>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::input("a shard needs at least one row"));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::input(format!(
                "feature matrix has {} entries, expected {} rows x {} columns",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(b) = labels.iter().find(|&&b| b != 1.0 && b != -1.0) {
            return Err(Error::input(format!("label {b} is not -1 or +1")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite feature value"));
        }
        Ok(Self { features, labels, dim })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.features[s * self.dim..(s + 1) * self.dim]
    }

    pub fn label(&self, s: usize) -> f64 {
        self.labels[s]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Stacks shards vertically (used to estimate global constants).
    pub fn concat(shards: &[Shard]) -> Result<Shard> {
        let dim = shards.first().map(|s| s.dim).unwrap_or(0);
        if shards.iter().any(|s| s.dim != dim) {
            return Err(Error::input("shards have different dimensions"));
        }
        let features = shards.iter().flat_map(|s| s.features.iter().copied()).collect();
        let labels = shards.iter().flat_map(|s| s.labels.iter().copied()).collect();
        Shard::from_flat(features, labels, dim)
    }

    /// Largest eigenvalue of `AᵀA`.
    pub fn gram_spectral_norm(&self) -> f64 {
        let mut av = vec![0.0; self.rows()];
        power_iteration(
            self.dim,
            |v, out| {
                for (s, a) in av.iter_mut().enumerate() {
                    *a = dot(self.row(s), v);
                }
                out.iter_mut().for_each(|o| *o = 0.0);
                for (s, a) in av.iter().enumerate() {
                    axpy(*a, self.row(s), out);
                }
            },
            POWER_TOL,
            POWER_MAX_ITER,
        )
    }
}

/// `log(1 + exp(t))` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_dim(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::input(format!("vector has dimension {}, expected {dim}", x.len())));
    }
    Ok(())
}

/// Regularized logistic loss `(1/m) Σ log(1 + exp(-b_s a_sᵀx)) + (µ/2)‖x‖²`.
pub fn logistic_loss(x: &[f64], shard: &Shard, mu: f64) -> Result<f64> {
    check_dim(x, shard.dim())?;
    Ok(logistic_loss_unchecked(x, shard, mu))
}

fn logistic_loss_unchecked(x: &[f64], shard: &Shard, mu: f64) -> f64 {
    let m = shard.rows() as f64;
    let data: f64 = (0..shard.rows())
        .map(|s| softplus(-shard.label(s) * dot(shard.row(s), x)))
        .sum();
    data / m + 0.5 * mu * sqnorm(x)
}

/// Gradient of [`logistic_loss`].
pub fn grad_logistic(x: &[f64], shard: &Shard, mu: f64) -> Result<Vec<f64>> {
    check_dim(x, shard.dim())?;
    let mut out = vec![0.0; x.len()];
    grad_logistic_into(x, shard, mu, &mut out);
    Ok(out)
}

fn grad_logistic_into(x: &[f64], shard: &Shard, mu: f64, out: &mut [f64]) {
    let inv_m = 1.0 / shard.rows() as f64;
    out.iter_mut().for_each(|o| *o = 0.0);
    for s in 0..shard.rows() {
        let a = shard.row(s);
        let b = shard.label(s);
        let coef = -b * sigmoid(-b * dot(a, x)) * inv_m;
        axpy(coef, a, out);
    }
    axpy(mu, x, out);
}

/// Smoothness constant `λ_max(AᵀA)/(4m) + µ` of the regularized logistic loss.
pub fn logistic_smoothness(shard: &Shard, mu: f64) -> f64 {
    shard.gram_spectral_norm() / (4.0 * shard.rows() as f64) + mu
}

/// The regularization `µ` for which `logistic_smoothness(shard, µ) / µ`
/// equals `kappa_target`.
pub fn regularization_for_kappa(shard: &Shard, kappa_target: f64) -> Result<f64> {
    if !(kappa_target > 1.0) || !kappa_target.is_finite() {
        return Err(Error::input(format!("target condition number must exceed 1, got {kappa_target}")));
    }
    let data_smoothness = shard.gram_spectral_norm() / (4.0 * shard.rows() as f64);
    if data_smoothness == 0.0 {
        return Err(Error::input("all-zero feature matrix: condition number is undefined"));
    }
    Ok(data_smoothness / (kappa_target - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FunctionKind {
    /// Regularized logistic loss on a shard.
    Logistic { shard: Shard, mu: f64 },
    /// `½xᵀAx − bᵀx + (µ/2)‖x‖²` with `A` symmetric PSD, stored row-major.
    Quadratic { a: Vec<f64>, b: Vec<f64>, mu: f64 },
    /// `(µ/2)‖x‖²`.
    Ridge { mu: f64 },
    /// `base − (c/2)‖x‖²`.
    Shifted { base: Box<LocalFunction>, removed_curvature: f64 },
}

/// A smooth strongly convex function together with its constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFunction {
    kind: FunctionKind,
    dim: usize,
    smoothness: f64,
    strong_convexity: f64,
}

impl LocalFunction {
    pub fn logistic(shard: Shard, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::input(format!("logistic regularization must be positive, got {mu}")));
        }
        let dim = shard.dim();
        let smoothness = logistic_smoothness(&shard, mu);
        Ok(Self { kind: FunctionKind::Logistic { shard, mu }, dim, smoothness, strong_convexity: mu })
    }

    /// Quadratic with constants from the exact spectrum of `A`.
    pub fn quadratic(a: Vec<f64>, b: Vec<f64>, mu: f64) -> Result<Self> {
        let dim = b.len();
        if a.len() != dim * dim || dim == 0 {
            return Err(Error::input("quadratic matrix must be d x d with d = len(b)"));
        }
        if mu < 0.0 {
            return Err(Error::input("quadratic regularization must be nonnegative"));
        }
        for i in 0..dim {
            for j in 0..i {
                let (x, y) = (a[i * dim + j], a[j * dim + i]);
                if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                    return Err(Error::input("quadratic matrix is not symmetric"));
                }
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &a)).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo < -1e-10 * hi.abs().max(1.0) {
            return Err(Error::input("quadratic matrix is not positive semidefinite"));
        }
        let strong_convexity = lo.max(0.0) + mu;
        if !(strong_convexity > 0.0) {
            return Err(Error::input("quadratic is not strongly convex"));
        }
        Ok(Self {
            kind: FunctionKind::Quadratic { a, b, mu },
            dim,
            smoothness: hi.max(0.0) + mu,
            strong_convexity,
        })
    }

    /// `(µ/2)‖x‖²`. A zero `mu` gives the zero function.
    pub fn ridge(dim: usize, mu: f64) -> Result<Self> {
        if mu < 0.0 || !mu.is_finite() {
            return Err(Error::input("ridge coefficient must be nonnegative"));
        }
        Ok(Self { kind: FunctionKind::Ridge { mu }, dim, smoothness: mu, strong_convexity: mu })
    }

    /// `base − (c/2)‖x‖²`; requires `c` strictly below the strong convexity of `base`.
    pub fn shifted(base: LocalFunction, removed_curvature: f64) -> Result<Self> {
        if !(removed_curvature < base.strong_convexity) {
            return Err(Error::input("cannot remove more curvature than the function has"));
        }
        Ok(Self {
            dim: base.dim,
            smoothness: base.smoothness - removed_curvature,
            strong_convexity: base.strong_convexity - removed_curvature,
            kind: FunctionKind::Shifted { base: Box::new(base), removed_curvature },
        })
    }

    pub fn kind(&self) -> &FunctionKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            FunctionKind::Logistic { shard, mu } => logistic_loss_unchecked(x, shard, *mu),
            FunctionKind::Quadratic { a, b, mu } => {
                let d = self.dim;
                let quad: f64 = (0..d).map(|i| x[i] * dot(&a[i * d..(i + 1) * d], x)).sum();
                0.5 * quad - dot(b, x) + 0.5 * mu * sqnorm(x)
            }
            FunctionKind::Ridge { mu } => 0.5 * mu * sqnorm(x),
            FunctionKind::Shifted { base, removed_curvature } => {
                base.value(x) - 0.5 * removed_curvature * sqnorm(x)
            }
        }
    }

    /// Writes `∇f(x)` into `out`.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        match &self.kind {
            FunctionKind::Logistic { shard, mu } => grad_logistic_into(x, shard, *mu, out),
            FunctionKind::Quadratic { a, b, mu } => {
                let d = self.dim;
                for i in 0..d {
                    out[i] = dot(&a[i * d..(i + 1) * d], x) - b[i] + mu * x[i];
                }
            }
            FunctionKind::Ridge { mu } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = mu * xi;
                }
            }
            FunctionKind::Shifted { base, removed_curvature } => {
                base.gradient_into(x, out);
                axpy(-removed_curvature, x, out);
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.gradient_into(x, &mut out);
        out
    }

    /// Adds `weight * ∇²f(x)` to the row-major `d x d` matrix `out`.
    pub fn add_hessian(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        let d = self.dim;
        let add_identity = |out: &mut [f64], c: f64| {
            for i in 0..d {
                out[i * d + i] += c;
            }
        };
        match &self.kind {
            FunctionKind::Logistic { shard, mu } => {
                let inv_m = weight / shard.rows() as f64;
                for s in 0..shard.rows() {
                    let a = shard.row(s);
                    let sig = sigmoid(dot(a, x));
                    let c = sig * (1.0 - sig) * inv_m;
                    if c == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        if a[i] != 0.0 {
                            axpy(c * a[i], a, &mut out[i * d..(i + 1) * d]);
                        }
                    }
                }
                add_identity(out, weight * mu);
            }
            FunctionKind::Quadratic { a, mu, .. } => {
                axpy(weight, a, out);
                add_identity(out, weight * mu);
            }
            FunctionKind::Ridge { mu } => add_identity(out, weight * mu),
            FunctionKind::Shifted { base, removed_curvature } => {
                base.add_hessian(x, weight, out);
                add_identity(out, -weight * removed_curvature);
            }
        }
    }
}

/// `min_x (1/n) Σ f_i(x) + g(x)` with common constants `(L, µ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    locals: Vec<LocalFunction>,
    shared: LocalFunction,
    dim: usize,
    smoothness: f64,
    strong_convexity: f64,
}

impl Problem {
    /// Takes `L` as the largest and `µ` as the smallest constant over all
    /// functions, so every function is `L`-smooth and `µ`-strongly convex.
    pub fn new(locals: Vec<LocalFunction>, shared: LocalFunction) -> Result<Self> {
        if shared.strong_convexity <= 0.0 {
            return Err(Error::input("the shared function must be strongly convex"));
        }
        Self::build(locals, shared)
    }

    /// A problem without a shared function (`g = 0`). Solvable by the
    /// reference solver and the baselines; LoCoDL needs [`reduce_g_zero`].
    pub fn without_shared(locals: Vec<LocalFunction>) -> Result<Self> {
        let dim = locals.first().map(LocalFunction::dim).unwrap_or(0);
        Self::build(locals, LocalFunction::ridge(dim, 0.0)?)
    }

    fn build(locals: Vec<LocalFunction>, shared: LocalFunction) -> Result<Self> {
        if locals.is_empty() {
            return Err(Error::input("a problem needs at least one client"));
        }
        let dim = shared.dim;
        if locals.iter().any(|f| f.dim != dim) {
            return Err(Error::input("local and shared functions have different dimensions"));
        }
        if let Some(f) = locals.iter().find(|f| !(f.strong_convexity > 0.0)) {
            return Err(Error::input(format!(
                "local function is not strongly convex (µ = {})",
                f.strong_convexity
            )));
        }
        let all = || locals.iter().chain(std::iter::once(&shared).filter(|g| g.smoothness > 0.0));
        let smoothness = all().map(|f| f.smoothness).fold(0.0, f64::max);
        let strong_convexity = all().map(|f| f.strong_convexity).fold(f64::INFINITY, f64::min);
        Ok(Self { locals, shared, dim, smoothness, strong_convexity })
    }

    pub fn clients(&self) -> usize {
        self.locals.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn locals(&self) -> &[LocalFunction] {
        &self.locals
    }

    pub fn local(&self, i: usize) -> &LocalFunction {
        &self.locals[i]
    }

    pub fn shared(&self) -> &LocalFunction {
        &self.shared
    }

    /// Whether `g` is a genuine strongly convex function (not the zero function).
    pub fn has_shared(&self) -> bool {
        self.shared.strong_convexity > 0.0
    }

    /// Common smoothness constant `L`.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// Common strong convexity constant `µ`.
    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn kappa(&self) -> f64 {
        self.smoothness / self.strong_convexity
    }

    /// Smoothness of each `f_i + g` (baselines fold `g` into every client).
    pub fn combined_smoothness(&self) -> f64 {
        self.locals.iter().map(|f| f.smoothness).fold(0.0, f64::max) + self.shared.smoothness
    }

    pub fn combined_strong_convexity(&self) -> f64 {
        self.locals.iter().map(|f| f.strong_convexity).fold(f64::INFINITY, f64::min)
            + self.shared.strong_convexity
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = self.clients() as f64;
        self.locals.iter().map(|f| f.value(x)).sum::<f64>() / n + self.shared.value(x)
    }

    /// `∇[(1/n) Σ f_i + g](x)`, using `scratch` of length `d`.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let inv_n = 1.0 / self.clients() as f64;
        self.shared.gradient_into(x, out);
        for f in &self.locals {
            f.gradient_into(x, scratch);
            axpy(inv_n, scratch, out);
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        self.gradient_into(x, &mut out, &mut scratch);
        out
    }

    /// `∇(f_i + g)(x)`.
    pub fn combined_local_gradient_into(&self, i: usize, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        self.locals[i].gradient_into(x, out);
        self.shared.gradient_into(x, scratch);
        axpy(1.0, scratch, out);
    }

    /// Row-major Hessian of the full objective.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim * self.dim];
        let inv_n = 1.0 / self.clients() as f64;
        for f in &self.locals {
            f.add_hessian(x, inv_n, &mut h);
        }
        self.shared.add_hessian(x, 1.0, &mut h);
        h
    }
}

/// Rewrites `min (1/n) Σ f_i` as `min (1/n) Σ f̃_i + g̃` with
/// `f̃_i = f_i − (µ/4)‖·‖²` and `g̃ = (µ/4)‖·‖²`, so that LoCoDL can run
/// without a natural shared function.
///
/// The constants become `L̃ = L − µ/2` and `µ̃ = µ/2`.
pub fn reduce_g_zero(locals_only: Vec<LocalFunction>, mu: f64) -> Result<Problem> {
    if !(mu > 0.0) {
        return Err(Error::input(format!("reduction needs a positive strong convexity, got {mu}")));
    }
    let dim = locals_only.first().map(LocalFunction::dim).unwrap_or(0);
    if let Some(f) = locals_only.iter().find(|f| f.strong_convexity < mu * (1.0 - 1e-12)) {
        return Err(Error::input(format!(
            "local function has strong convexity {} below µ = {mu}",
            f.strong_convexity
        )));
    }
    let shifted = locals_only
        .into_iter()
        .map(|f| LocalFunction::shifted(f, mu / 2.0))
        .collect::<Result<Vec<_>>>()?;
    Problem::new(shifted, LocalFunction::ridge(dim, mu / 2.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm, sqdist};
    use crate::rng::SeedTree;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn random_shard(rng: &mut impl Rng, m: usize, d: usize) -> Shard {
        let rows = (0..m).map(|_| gaussian(rng, d)).collect();
        let labels = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        Shard::new(rows, labels).unwrap()
    }

    fn random_quadratic(rng: &mut impl Rng, d: usize, mu: f64) -> LocalFunction {
        let m = gaussian(rng, d * d);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| m[k * d + i] * m[k * d + j]).sum::<f64>() / d as f64;
            }
        }
        LocalFunction::quadratic(a, gaussian(rng, d), mu).unwrap()
    }

    fn sample_functions() -> Vec<LocalFunction> {
        let mut rng = SeedTree::rng(11);
        let d = 5;
        let logistic = LocalFunction::logistic(random_shard(&mut rng, 7, d), 0.1).unwrap();
        let quad = random_quadratic(&mut rng, d, 0.2);
        vec![
            logistic.clone(),
            quad.clone(),
            LocalFunction::ridge(d, 0.3).unwrap(),
            LocalFunction::shifted(logistic, 0.05).unwrap(),
            LocalFunction::shifted(quad, 0.1).unwrap(),
        ]
    }

    #[test]
    fn logistic_gradient_cancels_for_opposite_labels() {
        let a = vec![0.3, -1.2, 2.0];
        let shard = Shard::new(vec![a.clone(), a], vec![1.0, -1.0]).unwrap();
        let g = grad_logistic(&[0.0; 3], &shard, 0.0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn logistic_gradient_at_origin_is_half_the_feature() {
        let shard = Shard::new(vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        let g = grad_logistic(&[0.0, 0.0], &shard, 0.0).unwrap();
        assert_eq!(g, vec![-0.5, 0.0]);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let mut rng = SeedTree::rng(3);
        let shard = random_shard(&mut rng, 7, 5);
        let x = gaussian(&mut rng, 5);
        let g = grad_logistic(&x, &shard, 0.0).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (logistic_loss(&xp, &shard, 0.0).unwrap() - logistic_loss(&xm, &shard, 0.0).unwrap())
                / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1e-3), "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn logistic_gradient_rejects_dimension_mismatch() {
        let shard = Shard::new(vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        assert!(matches!(grad_logistic(&[0.0; 3], &shard, 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn logistic_is_finite_for_huge_margins() {
        let shard = Shard::new(vec![vec![1e6, -1e6]], vec![1.0]).unwrap();
        for x in [[1e6, 0.0], [-1e6, 0.0], [0.0, 1e6]] {
            assert!(logistic_loss(&x, &shard, 0.0).unwrap().is_finite());
            assert!(grad_logistic(&x, &shard, 0.0).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn smoothness_of_single_unit_row() {
        let shard = Shard::new(vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        assert!((logistic_smoothness(&shard, 0.0) - 0.25).abs() < 1e-8);
        assert!((logistic_smoothness(&shard, 0.01) - 0.26).abs() < 1e-8);
    }

    #[test]
    fn smoothness_of_zero_features_is_mu() {
        let shard = Shard::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![1.0, -1.0]).unwrap();
        assert_eq!(logistic_smoothness(&shard, 0.3), 0.3);
        assert!(regularization_for_kappa(&shard, 10.0).is_err());
    }

    #[test]
    fn regularization_hits_the_target_kappa() {
        // λ_max(AᵀA)/(4m) = 1 for a single row of norm 2.
        let shard = Shard::new(vec![vec![2.0, 0.0]], vec![1.0]).unwrap();
        let mu = regularization_for_kappa(&shard, 1e4).unwrap();
        assert!((mu - 1.0 / 9999.0).abs() < 1e-14);
        assert!((regularization_for_kappa(&shard, 2.0).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = SeedTree::rng(5);
        let shard = random_shard(&mut rng, 30, 8);
        for kappa in [10.0, 1e3, 1e4] {
            let mu = regularization_for_kappa(&shard, kappa).unwrap();
            let k = logistic_smoothness(&shard, mu) / mu;
            assert!((k / kappa - 1.0).abs() < 1e-10, "{k} vs {kappa}");
        }
        assert!(matches!(regularization_for_kappa(&shard, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_kind() {
        let mut rng = SeedTree::rng(17);
        for f in sample_functions() {
            for _ in 0..20 {
                let x: Vec<f64> = gaussian(&mut rng, f.dim()).iter().map(|v| 2.0 * v).collect();
                let g = f.gradient(&x);
                let h = 1e-6 * (1.0 + norm(&x));
                let fd: Vec<f64> = (0..f.dim())
                    .map(|j| {
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[j] += h;
                        xm[j] -= h;
                        (f.value(&xp) - f.value(&xm)) / (2.0 * h)
                    })
                    .collect();
                let err = sqdist(&fd, &g).sqrt();
                assert!(err <= 1e-5 * norm(&g).max(1.0), "{:?}: err {err}", f.kind());
            }
        }
    }

    #[test]
    fn lipschitz_and_monotonicity_at_random_pairs() {
        let mut rng = SeedTree::rng(23);
        for f in sample_functions() {
            assert!(0.0 < f.strong_convexity() && f.strong_convexity() <= f.smoothness());
            for _ in 0..100 {
                let x = gaussian(&mut rng, f.dim());
                let y: Vec<f64> = gaussian(&mut rng, f.dim()).iter().map(|v| 3.0 * v).collect();
                let gx = f.gradient(&x);
                let gy = f.gradient(&y);
                let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                let dg: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
                let slack = 1e-10 * (1.0 + sqnorm(&dx));
                assert!(norm(&dg) <= f.smoothness() * norm(&dx) + slack);
                assert!(dot(&dg, &dx) >= f.strong_convexity() * sqnorm(&dx) - slack);
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let mut rng = SeedTree::rng(29);
        for f in sample_functions() {
            let d = f.dim();
            let x = gaussian(&mut rng, d);
            let mut hess = vec![0.0; d * d];
            f.add_hessian(&x, 1.0, &mut hess);
            let h = 1e-6;
            for j in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let gp = f.gradient(&xp);
                let gm = f.gradient(&xm);
                for i in 0..d {
                    let fd = (gp[i] - gm[i]) / (2.0 * h);
                    assert!((fd - hess[i * d + j]).abs() < 1e-6, "{fd} vs {}", hess[i * d + j]);
                }
            }
        }
    }

    #[test]
    fn reduction_preserves_objective_and_constants() {
        let c = vec![1.0, -2.0, 0.5];
        let d = c.len();
        let mut identity = vec![0.0; d * d];
        (0..d).for_each(|i| identity[i * d + i] = 1.0);
        // ½‖x − c‖² up to a constant: ½xᵀx − cᵀx.
        let f = LocalFunction::quadratic(identity, c.clone(), 0.0).unwrap();
        let original = Problem::without_shared(vec![f.clone(), f.clone()]).unwrap();
        let reduced = reduce_g_zero(vec![f.clone(), f], 1.0).unwrap();
        let mut rng = SeedTree::rng(31);
        for _ in 0..20 {
            let x = gaussian(&mut rng, d);
            let (a, b) = (original.objective(&x), reduced.objective(&x));
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()) * 4.0, "{a} vs {b}");
        }
        assert!((reduced.smoothness() - 0.5).abs() < 1e-12);
        assert!((reduced.strong_convexity() - 0.5).abs() < 1e-12);
        // The minimizer is still c.
        let g = reduced.gradient(&c);
        assert!(norm(&g) < 1e-14);
    }

    #[test]
    fn reduced_kappa_within_factor_two() {
        let mut rng = SeedTree::rng(37);
        let locals: Vec<_> = (0..3).map(|_| random_quadratic(&mut rng, 4, 0.05)).collect();
        let original = Problem::without_shared(locals.clone()).unwrap();
        let mu = original.strong_convexity();
        let reduced = reduce_g_zero(locals, mu).unwrap();
        let kappa = original.kappa();
        let expected = (original.smoothness() - mu / 2.0) / (mu / 2.0);
        assert!((reduced.kappa() - expected).abs() <= 1e-9 * expected);
        assert!(reduced.kappa() >= kappa * (1.0 - 1e-12) && reduced.kappa() <= 2.0 * kappa);
    }

    #[test]
    fn reduced_shared_step_is_a_scaling() {
        let gamma = 0.7;
        let mu = 0.4;
        let f = LocalFunction::ridge(3, 1.0).unwrap();
        let reduced = reduce_g_zero(vec![f], mu).unwrap();
        let y = vec![1.0, -2.0, 3.0];
        let g = reduced.shared().gradient(&y);
        for j in 0..3 {
            assert!((g[j] - mu / 2.0 * y[j]).abs() < 1e-15);
            let step = y[j] - gamma * g[j];
            assert!((step - (1.0 - gamma * mu / 2.0) * y[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn reduction_rejects_nonpositive_mu() {
        let f = LocalFunction::ridge(2, 1.0).unwrap();
        assert!(matches!(reduce_g_zero(vec![f.clone()], 0.0), Err(Error::Input(_))));
        assert!(matches!(reduce_g_zero(vec![f], -1.0), Err(Error::Input(_))));
    }

    #[test]
    fn shard_rejects_bad_labels() {
        assert!(Shard::new(vec![vec![1.0]], vec![0.0]).is_err());
        assert!(Shard::new(vec![], vec![]).is_err());
    }
}
