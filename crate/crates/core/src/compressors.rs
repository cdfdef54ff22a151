//! Unbiased random compressors with exact variance and bit bookkeeping.
//!
//! Every compressor `C` here satisfies `E[C(x)] = x` and
//! `E‖C(x) − x‖² ≤ ω‖x‖²`. Payloads are kept at full precision; the bit
//! count is what the declared encoding would put on the wire, and every
//! payload is exactly representable by that encoding.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sqdist, sqnorm};
use crate::rng::{SeedTree, StreamRng};

/// Bits of one IEEE single-precision float.
pub const FLOAT_BITS: u64 = 32;
/// Bits of one natural-compression value: sign plus an 8-bit exponent.
pub const NATURAL_BITS: u64 = 9;
/// Smallest and largest exponent carried by the 8-bit natural encoding.
pub const NATURAL_MIN_EXP: i32 = -126;
pub const NATURAL_MAX_EXP: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CompressorKind {
    Identity,
    RandK { k: usize },
    Natural,
    RandKNatural { k: usize },
    L1Selection,
}

impl CompressorKind {
    /// Parses a kind name (`identity`, `rand-k`, `natural`, `rand-k-natural`,
    /// `l1-selection`); `k` is required by the two sparsifiers.
    pub fn from_name(name: &str, k: Option<usize>) -> Result<Self> {
        let need_k = || k.ok_or_else(|| Error::input(format!("compressor `{name}` needs k")));
        Ok(match name {
            "identity" => CompressorKind::Identity,
            "rand-k" => CompressorKind::RandK { k: need_k()? },
            "natural" => CompressorKind::Natural,
            "rand-k-natural" => CompressorKind::RandKNatural { k: need_k()? },
            "l1-selection" => CompressorKind::L1Selection,
            other => return Err(Error::input(format!("unknown compressor `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompressorKind::Identity => "identity",
            CompressorKind::RandK { .. } => "rand-k",
            CompressorKind::Natural => "natural",
            CompressorKind::RandKNatural { .. } => "rand-k-natural",
            CompressorKind::L1Selection => "l1-selection",
        }
    }
}

/// A compressor bound to a dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressorSpec {
    kind: CompressorKind,
    dim: usize,
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CompressorKind::RandK { k } => write!(f, "rand-{k}"),
            CompressorKind::RandKNatural { k } => write!(f, "rand-{k}-natural"),
            other => f.write_str(other.name()),
        }
    }
}

/// A compressed vector and its metered wire size.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub payload: Vec<f64>,
    pub bits: u64,
    /// Natural-compression values clamped to the exponent range.
    pub saturated: u32,
}

/// `⌈log₂ d⌉`, the bits needed to address one of `d` coordinates.
pub fn index_bits(dim: usize) -> u64 {
    if dim <= 1 {
        0
    } else {
        u64::from(usize::BITS - (dim - 1).leading_zeros())
    }
}

impl CompressorSpec {
    pub fn new(kind: CompressorKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("compressor dimension must be positive"));
        }
        if let CompressorKind::RandK { k } | CompressorKind::RandKNatural { k } = kind {
            if k == 0 || k > dim {
                return Err(Error::input(format!("rand-k needs 1 <= k <= d, got k = {k}, d = {dim}")));
            }
        }
        Ok(Self { kind, dim })
    }

    pub fn identity(dim: usize) -> Self {
        Self { kind: CompressorKind::Identity, dim }
    }

    pub fn kind(&self) -> CompressorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Variance parameter `ω` of the class `𝕌(ω)`.
    pub fn omega(&self) -> f64 {
        let d = self.dim as f64;
        match self.kind {
            CompressorKind::Identity => 0.0,
            CompressorKind::RandK { k } => d / k as f64 - 1.0,
            CompressorKind::Natural => 1.0 / 8.0,
            CompressorKind::RandKNatural { k } => 9.0 * d / (8.0 * k as f64) - 1.0,
            CompressorKind::L1Selection => d - 1.0,
        }
    }

    /// Joint variance parameter for `n` mutually independent copies.
    pub fn omega_av(&self, n: usize) -> f64 {
        self.omega() / n.max(1) as f64
    }

    /// Uplink bits of one compressed message.
    pub fn bit_cost(&self) -> u64 {
        let d = self.dim as u64;
        let idx = index_bits(self.dim);
        match self.kind {
            CompressorKind::Identity => FLOAT_BITS * d,
            CompressorKind::RandK { k } => (FLOAT_BITS + idx) * k as u64,
            CompressorKind::Natural => NATURAL_BITS * d,
            CompressorKind::RandKNatural { k } => (NATURAL_BITS + idx) * k as u64,
            CompressorKind::L1Selection => FLOAT_BITS + idx,
        }
    }

    pub fn compress(&self, x: &[f64], rng: &mut StreamRng) -> Result<CompressedMessage> {
        let mut payload = vec![0.0; self.dim];
        let saturated = self.compress_into(x, &mut payload, rng)?;
        Ok(CompressedMessage { payload, bits: self.bit_cost(), saturated })
    }

    /// Writes `C(x)` into `out` and returns the number of saturated
    /// natural-compression values.
    pub fn compress_into(&self, x: &[f64], out: &mut [f64], rng: &mut StreamRng) -> Result<u32> {
        if x.len() != self.dim || out.len() != self.dim {
            return Err(Error::input(format!(
                "compressor expects dimension {}, got {}",
                self.dim,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("cannot compress a non-finite vector"));
        }
        let mut saturated = 0;
        match self.kind {
            CompressorKind::Identity => out.copy_from_slice(x),
            CompressorKind::Natural => {
                for (o, &v) in out.iter_mut().zip(x) {
                    let (r, sat) = natural_round(v, rng);
                    *o = r;
                    saturated += u32::from(sat);
                }
            }
            CompressorKind::RandK { k } | CompressorKind::RandKNatural { k } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let scale = self.dim as f64 / k as f64;
                let natural = matches!(self.kind, CompressorKind::RandKNatural { .. });
                for j in sample_subset(self.dim, k, rng) {
                    let v = scale * x[j];
                    out[j] = if natural {
                        let (r, sat) = natural_round(v, rng);
                        saturated += u32::from(sat);
                        r
                    } else {
                        v
                    };
                }
            }
            CompressorKind::L1Selection => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let l1: f64 = x.iter().map(|v| v.abs()).sum();
                if l1 > 0.0 {
                    let j = sample_proportional(x, l1, rng);
                    out[j] = l1.copysign(x[j]);
                }
            }
        }
        Ok(saturated)
    }
}

/// Uniform `k`-subset of `0..d` by Floyd's algorithm, in insertion order.
fn sample_subset(d: usize, k: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut mask = if k > 64 { Some(vec![false; d]) } else { None };
    for j in d - k..d {
        let t = rng.random_range(0..=j);
        let taken = match &mask {
            Some(m) => m[t],
            None => chosen.contains(&t),
        };
        let pick = if taken { j } else { t };
        chosen.push(pick);
        if let Some(m) = mask.as_mut() {
            m[pick] = true;
        }
    }
    chosen
}

/// Index `j` with probability `|x_j| / ‖x‖₁` by inverse CDF. Zero
/// coordinates are never chosen.
fn sample_proportional(x: &[f64], l1: f64, rng: &mut StreamRng) -> usize {
    let u = rng.random::<f64>() * l1;
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (j, v) in x.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        acc += v.abs();
        last_nonzero = j;
        if u < acc {
            return j;
        }
    }
    // u landed past the rounded cumulative sum.
    last_nonzero
}

/// Unbiased stochastic rounding of `v` to a signed power of two.
///
/// With `2^a ≤ |v| < 2^(a+1)`, returns `2^a` with probability
/// `(2^(a+1) − |v|) / 2^a` and `2^(a+1)` otherwise. Values outside the 8-bit
/// exponent range saturate to the nearest representable power of two; the
/// flag reports that.
pub fn natural_round(v: f64, rng: &mut StreamRng) -> (f64, bool) {
    if v == 0.0 {
        return (0.0, false);
    }
    let mag = v.abs();
    let min = 2f64.powi(NATURAL_MIN_EXP);
    let max = 2f64.powi(NATURAL_MAX_EXP);
    if mag < min {
        return (min.copysign(v), true);
    }
    if mag > max {
        return (max.copysign(v), true);
    }
    let bits = mag.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32 - 1023;
    if bits & ((1u64 << 52) - 1) == 0 {
        return (v, false);
    }
    let low = 2f64.powi(exp);
    let high = 2.0 * low;
    let p_low = (high - mag) / low;
    let r = if rng.random::<f64>() < p_low { low } else { high };
    if exp + 1 > NATURAL_MAX_EXP && r == high {
        return (max.copysign(v), true);
    }
    (r.copysign(v), false)
}

/// `(1/trials) Σ ‖C_t(x) − x‖² / ‖x‖²`.
pub fn empirical_variance_ratio(
    spec: &CompressorSpec,
    x: &[f64],
    trials: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::input("trials must be at least 1"));
    }
    let norm2 = sqnorm(x);
    if norm2 == 0.0 {
        return Err(Error::input("variance ratio is undefined for x = 0"));
    }
    let mut out = vec![0.0; spec.dim()];
    let mut total = 0.0;
    for _ in 0..trials {
        spec.compress_into(x, &mut out, rng)?;
        total += sqdist(&out, x);
    }
    Ok(total / trials as f64 / norm2)
}

/// Outcome of a statistical check of unbiasedness and the variance bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Certification {
    pub trials: usize,
    /// Largest per-coordinate `|mean − x_j|` in units of standard errors.
    pub max_standard_errors: f64,
    pub variance_ratio: f64,
    pub declared_omega: f64,
    /// `declared_omega · 1.05 + 5/√trials`.
    pub variance_bound: f64,
    pub unbiased: bool,
    pub variance_ok: bool,
}

impl Certification {
    pub fn passed(&self) -> bool {
        self.unbiased && self.variance_ok
    }
}

/// Maximum deviation of the empirical mean, in standard errors.
pub const UNBIASED_STANDARD_ERRORS: f64 = 4.0;

/// Compresses `x` `trials` times and checks the empirical mean against `x`
/// (within 4 standard errors per coordinate) and the empirical variance
/// ratio against `declared_omega · 1.05 + 5/√trials`.
pub fn certify(
    spec: &CompressorSpec,
    x: &[f64],
    trials: usize,
    seed: u64,
    declared_omega: f64,
) -> Result<Certification> {
    if trials < 2 {
        return Err(Error::input("certification needs at least 2 trials"));
    }
    let norm2 = sqnorm(x);
    if norm2 == 0.0 {
        return Err(Error::input("certification probe must be nonzero"));
    }
    let d = spec.dim();
    let tree = SeedTree::new(seed);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut err_total = 0.0;
    let mut out = vec![0.0; d];
    for t in 0..trials {
        let mut rng = tree.client(0, t as u64);
        spec.compress_into(x, &mut out, &mut rng)?;
        for j in 0..d {
            // Centered on x_j to keep the variance accumulation stable.
            let e = out[j] - x[j];
            sum[j] += e;
            sum_sq[j] += e * e;
        }
        err_total += sqdist(&out, x);
    }
    let tn = trials as f64;
    let mut max_se: f64 = 0.0;
    for j in 0..d {
        let mean_err = sum[j] / tn;
        let var = ((sum_sq[j] - tn * mean_err * mean_err) / (tn - 1.0)).max(0.0);
        let se = (var / tn).sqrt();
        let dev = mean_err.abs();
        let z = if se > 0.0 {
            dev / se
        } else if dev <= 1e-12 * (1.0 + x[j].abs()) {
            0.0
        } else {
            f64::INFINITY
        };
        max_se = max_se.max(z);
    }
    let variance_ratio = err_total / tn / norm2;
    let variance_bound = declared_omega * 1.05 + 5.0 / tn.sqrt();
    Ok(Certification {
        trials,
        max_standard_errors: max_se,
        variance_ratio,
        declared_omega,
        variance_bound,
        unbiased: max_se <= UNBIASED_STANDARD_ERRORS,
        variance_ok: variance_ratio <= variance_bound,
    })
}
