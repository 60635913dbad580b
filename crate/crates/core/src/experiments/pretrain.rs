use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{csv_writer, finish, sig6};
use crate::error::{Error, Result};
use crate::experiments::finetune::cross_entropy;
use crate::losses::{evaluate, FrozenNoise, LossBreakdown, LossConfig};
use crate::mlp::ParamSet;
use crate::ndcore::Matrix;
use crate::optim::{AdamConfig, AdamState};
use crate::real::Real;
use crate::stochastics::{PerturbationSpec, SeededRng, Stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps per checkpoint-selection window.
    pub window: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 2e-4,
            batch_size: 32,
            epochs: 5,
            window: 100,
            loss: LossConfig::default(),
            seed: 0,
            max_steps: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.batch_size == 0
            || self.epochs == 0
            || self.window == 0
            || self.max_steps == Some(0)
        {
            return Err(Error::Config(format!(
                "pre-training settings must be positive: {self:?}"
            )));
        }
        self.loss.validate()
    }
}

/// Mean per-batch loss over one selection window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowRecord {
    /// Global step count at the end of the window (1-based).
    pub end_step: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    /// Parameters at the end of the selected window.
    pub params: ParamSet<T>,
    pub windows: Vec<WindowRecord>,
    pub selected: usize,
    pub steps: usize,
}

/// Index of the window with the smallest mean total loss (earliest on ties).
/// A trailing partial window competes only when no window is complete.
pub fn select_window(windows: &[WindowRecord]) -> Option<usize> {
    let full = windows.iter().map(|w| w.steps).max()?;
    let mut best: Option<usize> = None;
    for (i, w) in windows.iter().enumerate() {
        if w.steps == full && best.is_none_or(|b| w.mean.total < windows[b].mean.total) {
            best = Some(i);
        }
    }
    best
}

fn run<T: Real>(
    data: &Matrix<T>,
    init: ParamSet<T>,
    config: &PretrainConfig,
    mut objective: impl FnMut(&ParamSet<T>, &Matrix<T>) -> Result<(LossBreakdown, Vec<T>)>,
) -> Result<PretrainOutcome<T>> {
    config.validate()?;
    if data.rows() == 0 {
        return Err(Error::Domain("pre-training needs at least one example".into()));
    }
    if data.cols() != init.arch().input_dim() {
        return Err(Error::dims("pre-training inputs", init.arch().input_dim(), data.cols()));
    }
    let mut params = init;
    let mut adam = AdamState::new(params.len(), AdamConfig::with_lr(config.lr))?;
    let shuffle = SeededRng::for_purpose(config.seed, Stream::Shuffle);
    let limit = config.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut windows = Vec::new();
    let mut best: Option<(f64, ParamSet<T>)> = None;
    let mut sums = [0.0f64; 4];
    let mut in_window = 0usize;
    let mut step = 0usize;

    let mut close = |step: usize, sums: &mut [f64; 4], in_window: &mut usize, params: &ParamSet<T>| {
        let n = *in_window as f64;
        let mean = LossBreakdown {
            uni: sums[0] / n,
            sd: sums[1] / n,
            iod: sums[2] / n,
            total: sums[3] / n,
        };
        windows.push(WindowRecord {
            end_step: step,
            steps: *in_window,
            mean,
        });
        let complete = *in_window == config.window;
        if (complete || best.is_none()) && best.as_ref().is_none_or(|(b, _)| mean.total < *b) {
            best = Some((mean.total, params.clone()));
        }
        *sums = [0.0; 4];
        *in_window = 0;
    };

    'epochs: for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut shuffle.child(epoch as u64));
        for batch in order.chunks(config.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let mut x = Matrix::zeros(batch.len(), data.cols());
            for (r, &i) in batch.iter().enumerate() {
                x.row_mut(r).copy_from_slice(data.row(i));
            }
            let diverged = Error::Divergence { step: step + 1 };
            let (loss, grad) = match objective(&params, &x) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(diverged);
            }
            match adam.step(params.flat_mut(), &grad) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient { .. }) => return Err(diverged),
                Err(e) => return Err(e),
            }
            step += 1;
            for (s, v) in sums.iter_mut().zip([loss.uni, loss.sd, loss.iod, loss.total]) {
                *s += v;
            }
            in_window += 1;
            if in_window == config.window {
                close(step, &mut sums, &mut in_window, &params);
            }
        }
    }
    if in_window > 0 {
        close(step, &mut sums, &mut in_window, &params);
    }
    let selected = select_window(&windows).expect("at least one step runs");
    let (_, params) = best.expect("at least one window closes");
    log::info!(
        "pre-training finished after {step} steps; selected window ending at step {} (mean loss {})",
        windows[selected].end_step,
        sig6(windows[selected].mean.total)
    );
    Ok(PretrainOutcome {
        params,
        windows,
        selected,
        steps: step,
    })
}

/// Minimises `L^uni + λ L^sd + ξ L^iod` with Adam over shuffled mini-batches
/// and keeps the parameters from the window with the lowest mean loss.
pub fn pretrain<T: Real>(data: &Matrix<T>, init: ParamSet<T>, config: &PretrainConfig) -> Result<PretrainOutcome<T>> {
    let spec = PerturbationSpec::for_architecture(init.arch(), config.loss.scale)?;
    let d = init.arch().output_dim();
    let mut perturb = SeededRng::for_purpose(config.seed, Stream::Perturbation);
    let mut simplex = SeededRng::for_purpose(config.seed, Stream::Simplex);
    let loss = config.loss;
    run(data, init, config, |params, x| {
        let noise = FrozenNoise::draw(loss.n_perturb, loss.n_uniform, d, &mut perturb, &mut simplex);
        let out = evaluate(params, x, &loss, &spec, &noise, None)?;
        Ok((out.breakdown, out.grad))
    })
}

/// Cross-entropy against labels drawn uniformly over the classes afresh
/// for every mini-batch (Bernoulli(0.5) for two classes). Only the `total`
/// component of the logged breakdown is meaningful.
pub fn pretrain_random_label<T: Real>(
    data: &Matrix<T>,
    init: ParamSet<T>,
    config: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    let d = init.arch().output_dim();
    let mut labels = SeededRng::for_purpose(config.seed, Stream::LabelNoise);
    run(data, init, config, |params, x| {
        let y: Vec<u8> = (0..x.rows()).map(|_| labels.random_range(0..d) as u8).collect();
        let (ce, grad) = cross_entropy(params, x, &y)?;
        if !ce.is_finite() {
            return Err(Error::NonFinite("cross-entropy"));
        }
        Ok((
            LossBreakdown {
                uni: 0.0,
                sd: 0.0,
                iod: 0.0,
                total: ce,
            },
            grad,
        ))
    })
}

/// Writes `step,uni,sd,iod,total`, one row per window. With
/// `components = false` only `total` is filled in.
pub fn write_loss_log(path: &Path, windows: &[WindowRecord], components: bool) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "uni", "sd", "iod", "total"])?;
    for r in windows {
        let m = r.mean;
        let parts = if components {
            [sig6(m.uni), sig6(m.sd), sig6(m.iod)]
        } else {
            Default::default()
        };
        w.write_record([
            r.end_step.to_string(),
            parts[0].clone(),
            parts[1].clone(),
            parts[2].clone(),
            sig6(m.total),
        ])?;
    }
    finish(w, path)
}
