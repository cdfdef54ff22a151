//! Dense vector helpers on `f64` slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sqnorm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    sqnorm(a).sqrt()
}

#[inline]
pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn mean_of(vectors: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    if vectors.is_empty() {
        return out;
    }
    for v in vectors {
        axpy(1.0, v, &mut out);
    }
    let inv = 1.0 / vectors.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Largest eigenvalue of a symmetric positive semidefinite operator given by
/// its action `apply(v, out)`, by power iteration.
///
/// Stops when successive Rayleigh quotients agree to relative `tol` or after
/// `max_iter` iterations. Returns 0 for the zero operator.
pub fn power_iteration<F>(dim: usize, mut apply: F, tol: f64, max_iter: usize) -> f64
where
    F: FnMut(&[f64], &mut [f64]),
{
    if dim == 0 {
        return 0.0;
    }
    // Deterministic start with no special alignment to coordinate axes.
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + ((i * 7919) % 97) as f64 / 97.0).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = vec![0.0; dim];
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        apply(&v, &mut w);
        let next = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        if (next - lambda).abs() <= tol * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_on_diagonal() {
        let diag = [1.0, 5.0, 2.0, 0.5];
        let l = power_iteration(
            4,
            |v, out| {
                for i in 0..4 {
                    out[i] = diag[i] * v[i];
                }
            },
            1e-12,
            10_000,
        );
        assert!((l - 5.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn power_iteration_zero_operator() {
        let l = power_iteration(3, |_, out| out.iter_mut().for_each(|o| *o = 0.0), 1e-8, 100);
        assert_eq!(l, 0.0);
    }
}
