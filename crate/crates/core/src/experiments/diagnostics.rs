use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{csv_writer, finish, sig6, MeanStd};
use crate::error::{Error, Result};
use crate::losses::{mean_vertex_distances, vertex_probability_bound};
use crate::mlp::{dead_neuron_stats, forward_batch, ParamSet};
use crate::ndcore::{argmax, Matrix};
use crate::real::Real;
use crate::stochastics::{gaussian_tail_bound, perturb_into, tail_probability_mc, PerturbationSpec, SeededRng, Stream};

/// Samples per anchor in the prediction-density dump.
pub const DENSITY_SAMPLES: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub n_perturb: usize,
    pub scale: f64,
    pub seed: u64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig {
            batches: 128,
            batch_size: 32,
            n_perturb: 256,
            scale: 0.5f64.sqrt(),
            seed: 0,
        }
    }
}

impl DiagnosticConfig {
    /// Disjoint mini-batches drawn without replacement.
    fn draw_batches(&self, rows: usize) -> Result<Vec<Vec<usize>>> {
        if self.batches == 0 || self.batch_size == 0 || self.n_perturb == 0 {
            return Err(Error::Config(format!("diagnostic settings must be positive: {self:?}")));
        }
        let need = self.batches * self.batch_size;
        if rows < need {
            return Err(Error::Domain(format!(
                "{} batches of {} need {need} examples, dataset has {rows}",
                self.batches, self.batch_size
            )));
        }
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.shuffle(&mut SeededRng::for_purpose(self.seed, Stream::Diagnostics));
        Ok(idx[..need].chunks(self.batch_size).map(|c| c.to_vec()).collect())
    }
}

fn gather<T: Real>(data: &Matrix<T>, idx: &[usize]) -> Matrix<T> {
    let mut x = Matrix::zeros(idx.len(), data.cols());
    for (r, &i) in idx.iter().enumerate() {
        x.row_mut(r).copy_from_slice(data.row(i));
    }
    x
}

fn check<T: Real>(params: &ParamSet<T>, data: &Matrix<T>) -> Result<()> {
    if data.cols() != params.arch().input_dim() {
        return Err(Error::dims("diagnostic inputs", params.arch().input_dim(), data.cols()));
    }
    Ok(())
}

/// Number of distinct argmax classes over the rows of `probs`.
fn classes_covered<T: Real>(probs: &Matrix<T>) -> usize {
    (0..probs.rows())
        .map(|r| argmax(probs.row(r)))
        .collect::<HashSet<_>>()
        .len()
}

/// Percentage of perturbed models whose argmax predictions on a mini-batch
/// cover fewer than `d` classes, summarised over the mini-batches.
pub fn diagnose_ds<T: Real>(params: &ParamSet<T>, data: &Matrix<T>, config: &DiagnosticConfig) -> Result<MeanStd> {
    check(params, data)?;
    let batches = config.draw_batches(data.rows())?;
    let spec = PerturbationSpec::for_architecture(params.arch(), config.scale)?;
    let d = params.arch().output_dim();
    let per_batch: Vec<f64> = batches
        .par_iter()
        .enumerate()
        .map(|(b, idx)| {
            let x = gather(data, idx);
            let mut rng = SeededRng::for_purpose(config.seed, Stream::Perturbation).child(b as u64);
            let mut theta = vec![T::zero(); params.len()];
            let mut degenerate = 0usize;
            for _ in 0..config.n_perturb {
                perturb_into(&spec, params.flat(), &mut rng, &mut theta);
                let trace = forward_batch(params.arch(), &theta, &x)?;
                if classes_covered(&trace.probs) < d {
                    degenerate += 1;
                }
            }
            Ok(100.0 * degenerate as f64 / config.n_perturb as f64)
        })
        .collect::<Result<_>>()?;
    Ok(MeanStd::of(&per_batch))
}

/// Percentage of fully dead units at each hidden layer, summarised over
/// the mini-batches.
pub fn diagnose_dead<T: Real>(
    params: &ParamSet<T>,
    data: &Matrix<T>,
    config: &DiagnosticConfig,
) -> Result<Vec<MeanStd>> {
    check(params, data)?;
    let batches = config.draw_batches(data.rows())?;
    let per_batch: Vec<Vec<f64>> = batches
        .par_iter()
        .map(|idx| dead_neuron_stats(params, &gather(data, idx)))
        .collect::<Result<_>>()?;
    let hidden = params.arch().depth() - 1;
    Ok((0..hidden)
        .map(|l| MeanStd::of(&per_batch.iter().map(|f| 100.0 * f[l]).collect::<Vec<_>>()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityMode {
    /// Many perturbations for each fixed input.
    PerInput,
    /// Many inputs for each fixed perturbation.
    PerPerturbation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityRow {
    pub anchor: usize,
    pub sample: usize,
    pub p_class0: f64,
}

/// Raw class-0 probabilities: for each of `anchors` fixed inputs (or fixed
/// perturbations), 1024 perturbed predictions (or 1024 inputs).
pub fn dump_prediction_density<T: Real>(
    params: &ParamSet<T>,
    data: &Matrix<T>,
    config: &DiagnosticConfig,
    mode: DensityMode,
    anchors: usize,
) -> Result<Vec<DensityRow>> {
    check(params, data)?;
    let spec = PerturbationSpec::for_architecture(params.arch(), config.scale)?;
    let mut pick = SeededRng::for_purpose(config.seed, Stream::Diagnostics);
    let arch = params.arch();
    let mut theta = vec![T::zero(); params.len()];
    let mut rows = Vec::with_capacity(anchors * DENSITY_SAMPLES);
    match mode {
        DensityMode::PerInput => {
            if data.rows() < anchors {
                return Err(Error::Domain(format!(
                    "need {anchors} inputs, dataset has {}",
                    data.rows()
                )));
            }
            let idx: Vec<usize> = rand::seq::index::sample(&mut pick, data.rows(), anchors).into_vec();
            for (a, &i) in idx.iter().enumerate() {
                let x = gather(data, &[i]);
                let mut rng = SeededRng::for_purpose(config.seed, Stream::Perturbation).child(a as u64);
                for s in 0..DENSITY_SAMPLES {
                    perturb_into(&spec, params.flat(), &mut rng, &mut theta);
                    let p = forward_batch(arch, &theta, &x)?.probs.get(0, 0).as_f64();
                    rows.push(DensityRow {
                        anchor: a,
                        sample: s,
                        p_class0: p,
                    });
                }
            }
        }
        DensityMode::PerPerturbation => {
            if data.rows() < DENSITY_SAMPLES {
                return Err(Error::Domain(format!(
                    "need {DENSITY_SAMPLES} inputs, dataset has {}",
                    data.rows()
                )));
            }
            for a in 0..anchors {
                let mut rng = SeededRng::for_purpose(config.seed, Stream::Perturbation).child(a as u64);
                perturb_into(&spec, params.flat(), &mut rng, &mut theta);
                let idx = rand::seq::index::sample(&mut pick, data.rows(), DENSITY_SAMPLES).into_vec();
                let probs = forward_batch(arch, &theta, &gather(data, &idx))?.probs;
                for s in 0..DENSITY_SAMPLES {
                    rows.push(DensityRow {
                        anchor: a,
                        sample: s,
                        p_class0: probs.get(s, 0).as_f64(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VertexBoundRow {
    pub class: usize,
    /// Mean over perturbations of `1 - √d E_x ||v_i - f(x)||`.
    pub bound: f64,
    /// Mean over perturbations of the fraction of inputs classified as `class`.
    pub empirical: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundsReport {
    pub m: usize,
    pub alpha_star: f64,
    pub r: f64,
    /// `None` when `r² <= m α*`, where the tail bound does not apply.
    pub tail_bound: Option<f64>,
    pub tail_mc: f64,
    pub vertex: Vec<VertexBoundRow>,
}

/// Evaluates the Gaussian tail bound for the checkpoint's perturbation
/// covariance next to a Monte-Carlo estimate, and the per-class vertex
/// distance bound next to the observed class frequencies on one mini-batch.
pub fn bounds_probe<T: Real>(
    params: &ParamSet<T>,
    data: &Matrix<T>,
    config: &DiagnosticConfig,
    r: f64,
    mc_draws: usize,
) -> Result<BoundsReport> {
    check(params, data)?;
    if !(r > 0.0 && r.is_finite()) || mc_draws == 0 {
        return Err(Error::Config(format!(
            "bounds probe needs r > 0 and draws > 0 (r = {r}, draws = {mc_draws})"
        )));
    }
    let spec = PerturbationSpec::for_architecture(params.arch(), config.scale)?;
    let m = spec.len();
    let alpha_star = spec.max_variance();
    let tail_bound = gaussian_tail_bound(m, alpha_star, r).ok();
    let sigma: Vec<f64> = spec.sigma().iter().map(|s: &T| s.as_f64()).collect();
    let tail_mc = tail_probability_mc(
        &sigma,
        r,
        mc_draws,
        &mut SeededRng::for_purpose(config.seed, Stream::MonteCarlo),
    );

    let one = DiagnosticConfig { batches: 1, ..*config };
    let x = gather(data, &one.draw_batches(data.rows())?[0]);
    let d = params.arch().output_dim();
    let mut bound = vec![0.0; d];
    let mut empirical = vec![0.0; d];
    let mut rng = SeededRng::for_purpose(config.seed, Stream::Perturbation);
    let mut theta = vec![T::zero(); params.len()];
    for _ in 0..config.n_perturb {
        perturb_into(&spec, params.flat(), &mut rng, &mut theta);
        let probs = forward_batch(params.arch(), &theta, &x)?.probs;
        for (i, dist) in mean_vertex_distances(&probs).into_iter().enumerate() {
            bound[i] += vertex_probability_bound(dist, d);
        }
        for r in 0..probs.rows() {
            empirical[argmax(probs.row(r))] += 1.0 / probs.rows() as f64;
        }
    }
    let k = config.n_perturb as f64;
    Ok(BoundsReport {
        m,
        alpha_star,
        r,
        tail_bound,
        tail_mc,
        vertex: (0..d)
            .map(|class| VertexBoundRow {
                class,
                bound: bound[class] / k,
                empirical: empirical[class] / k,
            })
            .collect(),
    })
}

pub fn write_ds_csv(path: &Path, ds: &MeanStd) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["ds_mean", "ds_std"])?;
    w.write_record([sig6(ds.mean), sig6(ds.std)])?;
    finish(w, path)
}

pub fn write_dead_csv(path: &Path, layers: &[MeanStd]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["hidden_layer", "dead_mean", "dead_std"])?;
    for (l, s) in layers.iter().enumerate() {
        w.write_record([(l + 1).to_string(), sig6(s.mean), sig6(s.std)])?;
    }
    finish(w, path)
}

pub fn write_density_csv(path: &Path, rows: &[DensityRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["anchor", "sample", "p_class0"])?;
    for r in rows {
        w.write_record([r.anchor.to_string(), r.sample.to_string(), sig6(r.p_class0)])?;
    }
    finish(w, path)
}

/// `quantity,class,bound,estimate`: one `tail` row, then one `vertex` row
/// per class. An inapplicable tail bound is left empty.
pub fn write_bounds_csv(path: &Path, report: &BoundsReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["quantity", "class", "bound", "estimate"])?;
    w.write_record([
        "tail".to_string(),
        String::new(),
        report.tail_bound.map(sig6).unwrap_or_default(),
        sig6(report.tail_mc),
    ])?;
    for v in &report.vertex {
        w.write_record([
            "vertex".to_string(),
            v.class.to_string(),
            sig6(v.bound),
            sig6(v.empirical),
        ])?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{init_xavier, Architecture};
    use proptest::prelude::*;

    fn data(n: usize, dim: usize, seed: u64) -> Matrix<f32> {
        let mut rng = SeededRng::new(seed, 77);
        Matrix::from_vec(n, dim, (0..n * dim).map(|_| f32::std_normal(&mut rng)).collect()).unwrap()
    }

    fn small() -> DiagnosticConfig {
        DiagnosticConfig {
            batches: 16,
            batch_size: 32,
            n_perturb: 32,
            seed: 1,
            ..DiagnosticConfig::default()
        }
    }

    #[test]
    fn protocol_defaults() {
        let c = DiagnosticConfig::default();
        assert_eq!((c.batches, c.batch_size, c.n_perturb), (128, 32, 256));
    }

    #[test]
    fn batches_are_disjoint() {
        let b = small().draw_batches(600).unwrap();
        let all: HashSet<usize> = b.iter().flatten().copied().collect();
        assert_eq!(all.len(), 16 * 32);
        assert!(small().draw_batches(100).is_err());
    }

    #[test]
    fn forced_collapse_is_fully_degenerate() {
        let mut p = init_xavier::<f32>(&[5, 8, 2], 1).unwrap();
        p.bias_mut(1)[0] = 1e4;
        let ds = diagnose_ds(&p, &data(600, 5, 1), &small()).unwrap();
        assert_eq!((ds.mean, ds.std), (100.0, 0.0));
    }

    #[test]
    fn random_xavier_is_mixed() {
        let p = init_xavier::<f32>(&[20, 64, 64, 2], 3).unwrap();
        let ds = diagnose_ds(&p, &data(600, 20, 2), &small()).unwrap();
        assert!(ds.mean > 0.0 && ds.mean < 100.0, "{ds:?}");
    }

    #[test]
    fn dead_layer_reads_100_percent() {
        let mut p = init_xavier::<f32>(&[5, 8, 6, 2], 1).unwrap();
        p.weights_mut(1).iter_mut().for_each(|w| *w = 0.0);
        p.bias_mut(1).iter_mut().for_each(|b| *b = -1.0);
        let dead = diagnose_dead(&p, &data(600, 5, 1), &small()).unwrap();
        assert_eq!(dead.len(), 2);
        assert_eq!((dead[1].mean, dead[1].std), (100.0, 0.0));
        assert!(dead[0].mean < 100.0);
    }

    #[test]
    fn density_rows() {
        let p = init_xavier::<f32>(&[5, 8, 2], 1).unwrap();
        let x = data(1100, 5, 3);
        for mode in [DensityMode::PerInput, DensityMode::PerPerturbation] {
            let rows = dump_prediction_density(&p, &x, &small(), mode, 2).unwrap();
            assert_eq!(rows.len(), 2 * DENSITY_SAMPLES);
            assert_eq!(rows.iter().filter(|r| r.anchor == 1).count(), DENSITY_SAMPLES);
            assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.p_class0)));
        }
        assert!(dump_prediction_density(&p, &data(100, 5, 3), &small(), DensityMode::PerPerturbation, 1).is_err());
    }

    #[test]
    fn bounds_probe_columns() {
        let p = ParamSet::<f32>::zeros(Architecture::new(&[3, 4, 2]).unwrap());
        // m = 26; α* = s²/n_min = 0.5/2 from the output bias.
        let rep = bounds_probe(&p, &data(64, 3, 1), &small(), 5.0, 20_000).unwrap();
        assert_eq!(rep.m, 26);
        assert!((rep.alpha_star - 0.25).abs() < 1e-6);
        let bound = rep.tail_bound.unwrap();
        assert!(rep.tail_mc <= bound, "{} > {bound}", rep.tail_mc);
        assert!(bounds_probe(&p, &data(64, 3, 1), &small(), 1.0, 100)
            .unwrap()
            .tail_bound
            .is_none());
        for v in &rep.vertex {
            assert!(v.bound <= v.empirical + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn vertex_bound_never_exceeds_class_frequency(seed in 0u64..10_000, width in 2usize..12, d in 2usize..5) {
            let p = init_xavier::<f64>(&[4, width, d], seed).unwrap();
            let mut rng = SeededRng::new(seed, 5);
            let x = Matrix::from_vec(40, 4, (0..160).map(|_| 3.0 * f64::std_normal(&mut rng)).collect()).unwrap();
            let probs = forward_batch(p.arch(), p.flat(), &x).unwrap().probs;
            let freq: Vec<f64> = (0..d)
                .map(|i| (0..40).filter(|&r| argmax(probs.row(r)) == i).count() as f64 / 40.0)
                .collect();
            for (i, dist) in mean_vertex_distances(&probs).into_iter().enumerate() {
                prop_assert!(vertex_probability_bound(dist, d) <= freq[i] + 1e-12);
            }
        }
    }
}
