//! Seeded random sources, uniform simplex sampling, Gaussian parameter
//! perturbations and the Gaussian tail bound.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mlp::Architecture;
use crate::real::Real;

/// Independent random streams, one per purpose, so that toggling one
/// consumer never shifts another consumer's draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Perturbation = 2,
    Simplex = 3,
    Shuffle = 4,
    LabelNoise = 5,
    Tasks = 6,
    Subset = 7,
    Diagnostics = 8,
    Finetune = 9,
    MonteCarlo = 10,
}

/// ChaCha8 generator identified by `(seed, stream)`; the same pair yields
/// the same sequence on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    pub fn for_purpose(seed: u64, purpose: Stream) -> Self {
        Self::new(seed, purpose as u64)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A child generator keyed by `index`, independent of how much of the
    /// parent has been consumed.
    pub fn child(&self, index: u64) -> SeededRng {
        let mixed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x9e37)) ^ splitmix64(index));
        SeededRng::new(mixed, self.stream)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Exponential(1) by inversion, with `u` drawn from `(0, 1]`.
pub fn sample_exponential<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    -u.ln()
}

/// `n` points drawn uniformly from the unit simplex in `R^d` by normalising
/// i.i.d. Exponential(1) coordinates.
pub fn sample_simplex<T: Real, R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<T>> {
    assert!(d >= 1, "simplex dimension must be positive");
    let mut e = vec![0.0f64; d];
    (0..n)
        .map(|_| loop {
            for v in e.iter_mut() {
                *v = sample_exponential(rng);
            }
            let total: f64 = e.iter().sum();
            // every draw was exactly u = 1; astronomically rare
            if total > 0.0 {
                break e.iter().map(|&v| T::of(v / total)).collect();
            }
        })
        .collect()
}

/// Per-parameter standard deviations of the Gaussian neighbourhood.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec<T> {
    sigma: Vec<T>,
    scale: f64,
}

impl<T: Real> PerturbationSpec<T> {
    /// Weight entries get `s / sqrt(n_in)`, bias entries `s / sqrt(n_out)`.
    pub fn for_architecture(arch: &Architecture, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!(
                "perturbation scale must be positive, got {scale}"
            )));
        }
        let mut sigma = Vec::with_capacity(arch.param_count());
        for layer in arch.layers() {
            let w = T::of((scale * scale / layer.n_in as f64).sqrt());
            let b = T::of((scale * scale / layer.n_out as f64).sqrt());
            sigma.extend(std::iter::repeat_n(w, layer.n_in * layer.n_out));
            sigma.extend(std::iter::repeat_n(b, layer.n_out));
        }
        Ok(PerturbationSpec { sigma, scale })
    }

    pub fn from_sigma(sigma: Vec<T>, scale: f64) -> Result<Self> {
        if let Some(bad) = sigma.iter().find(|s| !(**s > T::zero() && s.is_finite())) {
            return Err(Error::Domain(format!(
                "perturbation standard deviations must be positive, found {bad}"
            )));
        }
        Ok(PerturbationSpec { sigma, scale })
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Largest variance, the `α*` of the tail bound.
    pub fn max_variance(&self) -> f64 {
        self.sigma.iter().map(|s| s.as_f64().powi(2)).fold(0.0, f64::max)
    }
}

/// Draws `ε ~ N(0, diag(σ²))`.
pub fn sample_perturbation<T: Real, R: Rng + ?Sized>(spec: &PerturbationSpec<T>, rng: &mut R) -> Vec<T> {
    spec.sigma.iter().map(|&s| s * T::std_normal(rng)).collect()
}

/// Writes `base + ε` into `out`, drawing `ε` as [`sample_perturbation`] would.
pub fn perturb_into<T: Real, R: Rng + ?Sized>(spec: &PerturbationSpec<T>, base: &[T], rng: &mut R, out: &mut [T]) {
    assert_eq!(base.len(), spec.len());
    assert_eq!(out.len(), spec.len());
    for ((o, &b), &s) in out.iter_mut().zip(base).zip(&spec.sigma) {
        *o = b + s * T::std_normal(rng);
    }
}

/// Upper bound on `P(||ε|| >= r)` for `ε ~ N(0, diag(σ²))` with
/// `max σ² = alpha_star` over `m` coordinates:
/// `exp(-min(η², mη) / 8)` with `η = r² / (m α*) - 1`.
///
/// Defined only when `r² > m α*`.
pub fn gaussian_tail_bound(m: usize, alpha_star: f64, r: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("parameter count must be at least 1".into()));
    }
    if alpha_star.is_nan() || alpha_star <= 0.0 {
        return Err(Error::Domain(format!("alpha* must be positive, got {alpha_star}")));
    }
    let m_alpha = m as f64 * alpha_star;
    if r.is_nan() || r * r <= m_alpha {
        return Err(Error::Domain(format!(
            "tail bound requires r^2 > m*alpha* (r^2 = {}, m*alpha* = {m_alpha})",
            r * r
        )));
    }
    let eta = r * r / m_alpha - 1.0;
    Ok((-(eta * eta).min(m as f64 * eta) / 8.0).exp())
}

/// Monte-Carlo estimate of `P(||ε|| >= r)` for `ε ~ N(0, diag(σ²))`.
pub fn tail_probability_mc<R: Rng + ?Sized>(sigma: &[f64], r: f64, draws: usize, rng: &mut R) -> f64 {
    let r2 = r * r;
    let mut hits = 0usize;
    for _ in 0..draws {
        let mut acc = 0.0;
        for &s in sigma {
            let z = f64::std_normal(rng) * s;
            acc += z * z;
        }
        if acc >= r2 {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

/// One-sample Kolmogorov–Smirnov statistic of `samples` against U(0, 1).
pub fn ks_uniform_statistic(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let x = x.clamp(0.0, 1.0);
        let above = (i as f64 + 1.0) / n - x;
        let below = x - i as f64 / n;
        d.max(above).max(below)
    })
}

/// Asymptotic critical value of the one-sample KS statistic at level
/// `alpha`: `sqrt(-ln(alpha / 2) / 2) / sqrt(n)`.
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}
