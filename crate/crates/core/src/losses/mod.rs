//! The uniformity loss `L^uni`, the degenerate-softmax loss `L^sd`, the
//! input-output-detachment loss `L^iod`, and their weighted sum
//! `L = L^uni + λ L^sd + ξ L^iod`, each with its gradient in `θ₀`.
//!
//! Perturbed models `θ₀ + ε_j` are evaluated in a fixed number of chunks and
//! the chunk gradients are summed in chunk order, so results do not depend
//! on the rayon pool size.

pub mod reference;

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};
use crate::mlp::{backward_batch, forward_batch, softmax_backward, BatchTrace, ParamSet};
use crate::ndcore::{GradRecord, Matrix};
use crate::real::Real;
use crate::stochastics::{perturb_into, sample_simplex, PerturbationSpec, SeededRng, Stream};

/// Number of work units the perturbations are split into.
const CHUNKS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of `L^sd`.
    pub lambda: f64,
    /// Weight of `L^iod`.
    pub xi: f64,
    pub n_perturb: usize,
    pub n_uniform: usize,
    /// Perturbation scale `s`; weight std is `s/√n_in`, bias std `s/√n_out`.
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.4,
            xi: 1.0,
            n_perturb: 256,
            n_uniform: 256,
            scale: 0.5f64.sqrt(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be >= 0, got {}", self.xi)));
        }
        if self.n_perturb < 2 || self.n_uniform < 2 {
            return Err(Error::Config("n_perturb and n_uniform must be at least 2".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "perturbation scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub uni: f64,
    pub sd: f64,
    pub iod: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(uni: f64, sd: f64, iod: f64, lambda: f64, xi: f64) -> Self {
        LossBreakdown {
            uni,
            sd,
            iod,
            total: uni + lambda * sd + xi * iod,
        }
    }
}

/// The random draws of one loss evaluation: a seed per perturbation (the
/// perturbation is regenerated from it when needed) and the simplex sample.
#[derive(Clone, Debug)]
pub struct FrozenNoise<T> {
    seeds: Vec<u64>,
    uniform: Matrix<T>,
}

impl<T: Real> FrozenNoise<T> {
    pub fn draw<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        n_perturb: usize,
        n_uniform: usize,
        d: usize,
        perturb_rng: &mut R1,
        simplex_rng: &mut R2,
    ) -> Self {
        let seeds = (0..n_perturb).map(|_| perturb_rng.random::<u64>()).collect();
        let rows = sample_simplex::<T, _>(d, n_uniform, simplex_rng);
        let uniform = Matrix::from_rows(&rows).expect("simplex rows share a length");
        FrozenNoise { seeds, uniform }
    }

    pub fn from_parts(seeds: Vec<u64>, uniform: Matrix<T>) -> Self {
        FrozenNoise { seeds, uniform }
    }

    pub fn n_perturb(&self) -> usize {
        self.seeds.len()
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn uniform(&self) -> &Matrix<T> {
        &self.uniform
    }

    /// Writes `θ₀ + ε_j` into `out`.
    pub fn perturbed(&self, j: usize, spec: &PerturbationSpec<T>, base: &[T], out: &mut [T]) {
        let mut rng = SeededRng::for_purpose(self.seeds[j], Stream::Perturbation);
        perturb_into(spec, base, &mut rng, out);
    }

    /// The perturbation `ε_j` itself.
    pub fn epsilon(&self, j: usize, spec: &PerturbationSpec<T>) -> Vec<T> {
        let zero = vec![T::zero(); spec.len()];
        let mut out = vec![T::zero(); spec.len()];
        self.perturbed(j, spec, &zero, &mut out);
        out
    }
}

/// Value, gradient and the bandwidths used by one evaluation.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    pub grad: Vec<T>,
    pub kernel: Option<KernelSpec>,
}

#[derive(Clone, Copy)]
struct Weights {
    uni: f64,
    sd: f64,
    iod: f64,
}

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    let k = CHUNKS.min(n).max(1);
    (0..k).map(|c| (c * n / k)..((c + 1) * n / k)).collect()
}

fn check_inputs<T: Real>(params: &ParamSet<T>, x: &Matrix<T>) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Domain("loss needs a nonempty batch".into()));
    }
    if x.cols() != params.arch().input_dim() {
        return Err(Error::dims("loss batch", params.arch().input_dim(), x.cols()));
    }
    Ok(())
}

fn check_noise<T: Real>(params: &ParamSet<T>, spec: &PerturbationSpec<T>, noise: &FrozenNoise<T>) -> Result<()> {
    if spec.len() != params.len() {
        return Err(Error::dims("perturbation spec", params.len(), spec.len()));
    }
    if noise.n_perturb() < 2 || noise.uniform.rows() < 2 {
        return Err(Error::Domain(
            "need at least two perturbations and two simplex samples".into(),
        ));
    }
    if noise.uniform.cols() != params.arch().output_dim() {
        return Err(Error::dims(
            "simplex samples",
            params.arch().output_dim(),
            noise.uniform.cols(),
        ));
    }
    Ok(())
}

/// Forward pass of every perturbed model on the batch.
fn perturbed_traces<T: Real>(
    params: &ParamSet<T>,
    x: &Matrix<T>,
    spec: &PerturbationSpec<T>,
    noise: &FrozenNoise<T>,
) -> Result<Vec<BatchTrace<T>>> {
    let arch = params.arch();
    let parts: Vec<Result<Vec<BatchTrace<T>>>> = chunk_ranges(noise.n_perturb())
        .into_par_iter()
        .map(|range| {
            let mut theta = vec![T::zero(); params.len()];
            range
                .map(|j| {
                    noise.perturbed(j, spec, params.flat(), &mut theta);
                    forward_batch(arch, &theta, x)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(noise.n_perturb());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Back-propagates per-model softmax-output gradients and sums them into
/// one gradient over `θ₀`.
fn perturbed_backward<T: Real>(
    params: &ParamSet<T>,
    x: &Matrix<T>,
    spec: &PerturbationSpec<T>,
    noise: &FrozenNoise<T>,
    traces: &[BatchTrace<T>],
    dprobs: &[Matrix<T>],
) -> Result<Vec<T>> {
    let arch = params.arch();
    let parts: Vec<Result<Vec<T>>> = chunk_ranges(noise.n_perturb())
        .into_par_iter()
        .map(|range| {
            let mut theta = vec![T::zero(); params.len()];
            let mut grad = vec![T::zero(); params.len()];
            for j in range {
                noise.perturbed(j, spec, params.flat(), &mut theta);
                let dlogits = softmax_backward(&traces[j].probs, &dprobs[j]);
                backward_batch(arch, &theta, x, &traces[j], &dlogits, &mut grad)?;
            }
            Ok(grad)
        })
        .collect();
    let mut total = vec![T::zero(); params.len()];
    for p in parts {
        for (t, g) in total.iter_mut().zip(p?) {
            *t += g;
        }
    }
    Ok(total)
}

/// Outputs of every perturbed model for batch row `b`, one model per row.
fn outputs_for_example<T: Real>(traces: &[BatchTrace<T>], b: usize) -> Matrix<T> {
    let d = traces[0].probs.cols();
    let mut m = Matrix::zeros(traces.len(), d);
    for (j, t) in traces.iter().enumerate() {
        m.row_mut(j).copy_from_slice(t.probs.row(b));
    }
    m
}

/// Median-heuristic bandwidths for one step, pooling the pairwise
/// distances of every example in the batch.
pub fn step_bandwidth<T: Real>(traces: &[BatchTrace<T>], uniform: &Matrix<T>) -> Result<KernelSpec> {
    let batch = traces[0].probs.rows();
    let sets: Vec<Matrix<T>> = (0..batch).map(|b| outputs_for_example(traces, b)).collect();
    kernels::median_bandwidth_pooled(sets.iter().map(|s| (s, uniform)))
}

/// Mean over the batch of MMD² between perturbed outputs and the simplex
/// sample. Adds `weight ·` its gradient with respect to each model's
/// softmax outputs into `dprobs`.
fn uni_terms<T: Real>(
    traces: &[BatchTrace<T>],
    uniform: &Matrix<T>,
    kernel: &KernelSpec,
    weight: f64,
    dprobs: &mut [Matrix<T>],
) -> Result<f64> {
    let batch = traces[0].probs.rows();
    let yy = kernels::mean_kernel(uniform, uniform, kernel);
    let per_example: Vec<Result<(T, Matrix<T>)>> = (0..batch)
        .into_par_iter()
        .map(|b| kernels::mmd2_grad_x(&outputs_for_example(traces, b), uniform, yy, kernel))
        .collect();
    let scale = T::of(weight / batch as f64);
    let mut value = 0.0;
    for (b, r) in per_example.into_iter().enumerate() {
        let (v, g) = r?;
        value += v.as_f64();
        if weight != 0.0 {
            for (j, dp) in dprobs.iter_mut().enumerate() {
                for (o, &gv) in dp.row_mut(b).iter_mut().zip(g.row(j)) {
                    *o += scale * gv;
                }
            }
        }
    }
    Ok(value / batch as f64)
}

/// Hinge on the largest mean vertex distance, averaged over models. Adds
/// `weight ·` its gradient into `dprobs`.
fn sd_terms<T: Real>(traces: &[BatchTrace<T>], weight: f64, dprobs: &mut [Matrix<T>]) -> f64 {
    let batch = traces[0].probs.rows();
    let d = traces[0].probs.cols();
    let threshold = (1.0 / d as f64).sqrt();
    let m = traces.len();
    let mut value = 0.0;
    for (t, dp) in traces.iter().zip(dprobs.iter_mut()) {
        let (dist, farthest) = farthest_vertex(&t.probs);
        let mean = dist[farthest];
        if mean <= threshold {
            continue;
        }
        value += mean - threshold;
        if weight == 0.0 {
            continue;
        }
        let scale = weight / (m * batch) as f64;
        for b in 0..batch {
            let p = t.probs.row(b);
            let n = vertex_distance(p, farthest);
            if n == 0.0 {
                continue;
            }
            for (k, o) in dp.row_mut(b).iter_mut().enumerate() {
                let v = if k == farthest { 1.0 } else { 0.0 };
                *o += T::of(scale * (p[k].as_f64() - v) / n);
            }
        }
    }
    value / m as f64
}

/// `||v^(i) - p||`.
fn vertex_distance<T: Real>(p: &[T], i: usize) -> f64 {
    p.iter()
        .enumerate()
        .map(|(k, &pk)| {
            let diff = if k == i { 1.0 - pk.as_f64() } else { pk.as_f64() };
            diff * diff
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean distance from the rows of `probs` to each vertex, and the index of
/// the largest (lowest index on ties).
fn farthest_vertex<T: Real>(probs: &Matrix<T>) -> (Vec<f64>, usize) {
    let d = probs.cols();
    let mut mean = vec![0.0; d];
    for b in 0..probs.rows() {
        for (i, m) in mean.iter_mut().enumerate() {
            *m += vertex_distance(probs.row(b), i);
        }
    }
    for m in &mut mean {
        *m /= probs.rows() as f64;
    }
    let far = crate::ndcore::argmax(&mean);
    (mean, far)
}

/// Mean over the batch of `(1/d) Σ_i max_l (1 - ||J^(i)(x_l)||)²` at `θ₀`,
/// with `weight ·` its gradient added into `grad`.
fn iod_terms<T: Real>(params: &ParamSet<T>, x: &Matrix<T>, weight: f64, grad: Option<&mut [T]>) -> Result<f64> {
    let arch = params.arch();
    let trace = forward_batch(arch, params.flat(), x)?;
    let batch = x.rows();
    let d = arch.output_dim();
    let depth = arch.depth();
    let want = grad.is_some() && weight != 0.0;
    let per_example: Vec<(f64, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut g = if want {
                vec![T::zero(); params.len()]
            } else {
                Vec::new()
            };
            let masks: Vec<Vec<bool>> = (1..depth)
                .map(|l| trace.pre[l - 1].row(b).iter().map(|&v| v > T::zero()).collect())
                .collect();
            let mut value = 0.0;
            for i in 0..d {
                // rows[l] is the Jacobian row with respect to x_l.
                let mut rows: Vec<Vec<T>> = vec![Vec::new(); depth];
                let mut h = vec![T::zero(); d];
                h[i] = T::one();
                for l in (0..depth).rev() {
                    let s = arch.layers()[l];
                    let mut q = crate::ndcore::matvec_t(params.weights(l), s.n_out, s.n_in, &h);
                    if l > 0 {
                        for (qv, &alive) in q.iter_mut().zip(&masks[l - 1]) {
                            if !alive {
                                *qv = T::zero();
                            }
                        }
                    }
                    h = q.clone();
                    rows[l] = q;
                }
                let norms: Vec<f64> = rows.iter().map(|r| crate::ndcore::norm(r).as_f64()).collect();
                let penalties: Vec<f64> = norms.iter().map(|n| (1.0 - n) * (1.0 - n)).collect();
                let worst = crate::ndcore::argmax(&penalties);
                value += penalties[worst];
                if !want || norms[worst] == 0.0 {
                    continue;
                }
                // d/dr of (1 - ||r||)² is -2 (1 - ||r||) r / ||r||.
                let coef = T::of(-2.0 * (1.0 - norms[worst]) / norms[worst] * weight / (batch * d) as f64);
                let mut adj: Vec<T> = rows[worst].iter().map(|&v| coef * v).collect();
                for l in worst..depth {
                    let s = arch.layers()[l];
                    if l > 0 {
                        for (a, &alive) in adj.iter_mut().zip(&masks[l - 1]) {
                            if !alive {
                                *a = T::zero();
                            }
                        }
                    }
                    // rows[l] = mask ⊙ W_lᵀ h_{l+1}; the upstream vector h_{l+1}
                    // is rows[l+1], or the unit vector at the top.
                    let gw = &mut g[s.weight_range()];
                    if l + 1 < depth {
                        let up = &rows[l + 1];
                        for (o, &u) in up.iter().enumerate() {
                            if u == T::zero() {
                                continue;
                            }
                            for (gv, &a) in gw[o * s.n_in..(o + 1) * s.n_in].iter_mut().zip(&adj) {
                                *gv += u * a;
                            }
                        }
                        adj = crate::ndcore::matvec(params.weights(l), s.n_out, s.n_in, &adj);
                    } else {
                        for (gv, &a) in gw[i * s.n_in..(i + 1) * s.n_in].iter_mut().zip(&adj) {
                            *gv += a;
                        }
                    }
                }
            }
            (value, g)
        })
        .collect();
    let mut value = 0.0;
    match grad {
        Some(out) if weight != 0.0 => {
            for (v, g) in per_example {
                value += v;
                for (o, gv) in out.iter_mut().zip(g) {
                    *o += gv;
                }
            }
        }
        _ => value = per_example.iter().map(|(v, _)| v).sum(),
    }
    Ok(value / (batch * d) as f64)
}

fn evaluate_weighted<T: Real>(
    params: &ParamSet<T>,
    x: &Matrix<T>,
    spec: &PerturbationSpec<T>,
    noise: &FrozenNoise<T>,
    kernel: Option<KernelSpec>,
    w: Weights,
) -> Result<(f64, f64, f64, Vec<T>, KernelSpec)> {
    check_inputs(params, x)?;
    check_noise(params, spec, noise)?;
    let traces = perturbed_traces(params, x, spec, noise)?;
    if traces.iter().any(|t| !t.probs.is_finite()) {
        return Err(Error::NonFinite("perturbed model outputs"));
    }
    let kernel = match kernel {
        Some(k) => k,
        None => step_bandwidth(&traces, &noise.uniform)?,
    };
    let d = params.arch().output_dim();
    let mut dprobs: Vec<Matrix<T>> = (0..traces.len()).map(|_| Matrix::zeros(x.rows(), d)).collect();
    let uni = uni_terms(&traces, &noise.uniform, &kernel, w.uni, &mut dprobs)?;
    let sd = sd_terms(&traces, w.sd, &mut dprobs);
    let mut grad = if w.uni != 0.0 || w.sd != 0.0 {
        perturbed_backward(params, x, spec, noise, &traces, &dprobs)?
    } else {
        vec![T::zero(); params.len()]
    };
    let iod = iod_terms(params, x, w.iod, Some(&mut grad))?;
    Ok((uni, sd, iod, grad, kernel))
}

/// Full objective with its gradient. `kernel` overrides the median
/// heuristic (used to freeze bandwidths across finite-difference probes).
pub fn evaluate<T: Real>(
    params: &ParamSet<T>,
    x: &Matrix<T>,
    config: &LossConfig,
    spec: &PerturbationSpec<T>,
    noise: &FrozenNoise<T>,
    kernel: Option<KernelSpec>,
) -> Result<LossOutput<T>> {
    config.validate()?;
    let w = Weights {
        uni: 1.0,
        sd: config.lambda,
        iod: config.xi,
    };
    let (uni, sd, iod, grad, kernel) = evaluate_weighted(params, x, spec, noise, kernel, w)?;
    let breakdown = LossBreakdown::combine(uni, sd, iod, config.lambda, config.xi);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossOutput {
        breakdown,
        grad,
        kernel: Some(kernel),
    })
}

/// Draws fresh noise from `rng` (perturbation seeds first, then the simplex
/// sample) and evaluates the full objective.
pub fn loss_total<T: Real, R: Rng + ?Sized>(
    params: &ParamSet<T>,
    x: &Matrix<T>,
    config: &LossConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, GradRecord<T>)> {
    config.validate()?;
    let spec = PerturbationSpec::for_architecture(params.arch(), config.scale)?;
    let seeds = (0..config.n_perturb).map(|_| rng.random::<u64>()).collect();
    let rows = sample_simplex::<T, _>(params.arch().output_dim(), config.n_uniform, rng);
    let noise = FrozenNoise::from_parts(seeds, Matrix::from_rows(&rows)?);
    let out = evaluate(params, x, config, &spec, &noise, None)?;
    let total = T::of(out.breakdown.total);
    Ok((out.breakdown, GradRecord::new(total, out.grad)?))
}

/// `L^uni` alone, with the bandwidths it used.
pub fn loss_uni<T: Real>(
    params: &ParamSet<T>,
    x: &Matrix<T>,
    spec: &PerturbationSpec<T>,
    noise: &FrozenNoise<T>,
    kernel: Option<KernelSpec>,
) -> Result<(GradRecord<T>, KernelSpec)> {
    let w = Weights {
        uni: 1.0,
        sd: 0.0,
        iod: 0.0,
    };
    let (uni, _, _, grad, kernel) = evaluate_weighted(params, x, spec, noise, kernel, w)?;
    Ok((GradRecord::new(T::of(uni), grad)?, kernel))
}

/// `L^sd` alone.
pub fn loss_sd<T: Real>(
    params: &ParamSet<T>,
    x: &Matrix<T>,
    spec: &PerturbationSpec<T>,
    noise: &FrozenNoise<T>,
) -> Result<GradRecord<T>> {
    check_inputs(params, x)?;
    check_noise(params, spec, noise)?;
    let traces = perturbed_traces(params, x, spec, noise)?;
    let d = params.arch().output_dim();
    let mut dprobs: Vec<Matrix<T>> = (0..traces.len()).map(|_| Matrix::zeros(x.rows(), d)).collect();
    let sd = sd_terms(&traces, 1.0, &mut dprobs);
    let grad = perturbed_backward(params, x, spec, noise, &traces, &dprobs)?;
    GradRecord::new(T::of(sd), grad)
}

/// `L^iod` alone, evaluated at the unperturbed parameters.
pub fn loss_iod<T: Real>(params: &ParamSet<T>, x: &Matrix<T>) -> Result<GradRecord<T>> {
    check_inputs(params, x)?;
    let mut grad = vec![T::zero(); params.len()];
    let v = iod_terms(params, x, 1.0, Some(&mut grad))?;
    GradRecord::new(T::of(v), grad)
}

/// `L^sd` of a fixed set of softmax outputs from one model (rows = inputs).
pub fn degenerate_softmax_penalty<T: Real>(probs: &Matrix<T>) -> f64 {
    let (dist, far) = farthest_vertex(probs);
    let threshold = (1.0 / probs.cols() as f64).sqrt();
    (dist[far] - threshold).max(0.0)
}

/// Lower bound `1 - √d · E||v^(i) - f||` on the probability that a
/// prediction falls in the region of the simplex where class `i` wins,
/// given the mean distance to vertex `i`.
pub fn vertex_probability_bound(mean_vertex_distance: f64, d: usize) -> f64 {
    1.0 - (d as f64).sqrt() * mean_vertex_distance
}

/// Mean distance from each row of `probs` to every vertex.
pub fn mean_vertex_distances<T: Real>(probs: &Matrix<T>) -> Vec<f64> {
    farthest_vertex(probs).0
}
