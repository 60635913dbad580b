use rand::seq::SliceRandom;

use crate::data::{derive_labels, sample_labelled_subset, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::mlp::{backward_batch, forward_batch, ParamSet};
use crate::ndcore::{argmax, Matrix};
use crate::optim::{AdamConfig, AdamState};
use crate::real::Real;
use crate::stochastics::{SeededRng, Stream};

/// Rows evaluated per forward pass when scoring large splits.
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-3,
            batch_size: 50,
            epochs: 10,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!("fine-tune settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Inputs with integer class labels.
#[derive(Clone, Debug)]
pub struct LabelledSplit<T> {
    pub x: Matrix<T>,
    pub y: Vec<u8>,
}

impl<T: Real> LabelledSplit<T> {
    pub fn new(x: Matrix<T>, y: Vec<u8>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dims("labelled split", x.rows(), y.len()));
        }
        Ok(LabelledSplit { x, y })
    }

    fn rows(&self, idx: &[usize]) -> (Matrix<T>, Vec<u8>) {
        let mut x = Matrix::zeros(idx.len(), self.x.cols());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
        }
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    /// Test accuracy (%) at the epoch of minimum validation loss.
    pub test_accuracy: f64,
    /// 1-based epoch whose parameters were scored.
    pub best_epoch: usize,
    pub val_losses: Vec<f64>,
}

/// Mean cross-entropy over the batch and its gradient.
pub fn cross_entropy<T: Real>(params: &ParamSet<T>, x: &Matrix<T>, labels: &[u8]) -> Result<(f64, Vec<T>)> {
    if x.rows() != labels.len() || x.rows() == 0 {
        return Err(Error::dims("cross-entropy labels", x.rows(), labels.len()));
    }
    let arch = params.arch();
    let d = arch.output_dim();
    let trace = forward_batch(arch, params.flat(), x)?;
    let n = x.rows();
    let inv = T::of(1.0 / n as f64);
    let mut loss = 0.0;
    let mut dlogits = trace.probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= d {
            return Err(Error::Domain(format!("label {y} outside {d} classes")));
        }
        loss -= trace.probs.get(r, y).as_f64().max(f64::MIN_POSITIVE).ln();
        let row = dlogits.row_mut(r);
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    let mut grad = vec![T::zero(); params.len()];
    backward_batch(arch, params.flat(), x, &trace, &dlogits, &mut grad)?;
    Ok((loss / n as f64, grad))
}

fn for_chunks<T: Real>(params: &ParamSet<T>, x: &Matrix<T>, mut f: impl FnMut(usize, &Matrix<T>)) -> Result<()> {
    let cols = x.cols();
    let mut start = 0;
    while start < x.rows() {
        let end = (start + EVAL_CHUNK).min(x.rows());
        let chunk = Matrix::from_vec(end - start, cols, x.data()[start * cols..end * cols].to_vec())?;
        let trace = forward_batch(params.arch(), params.flat(), &chunk)?;
        f(start, &trace.probs);
        start = end;
    }
    Ok(())
}

/// Mean cross-entropy without the gradient.
pub fn mean_cross_entropy<T: Real>(params: &ParamSet<T>, x: &Matrix<T>, labels: &[u8]) -> Result<f64> {
    let mut loss = 0.0;
    for_chunks(params, x, |start, probs| {
        for r in 0..probs.rows() {
            loss -= probs
                .get(r, labels[start + r] as usize)
                .as_f64()
                .max(f64::MIN_POSITIVE)
                .ln();
        }
    })?;
    Ok(loss / x.rows() as f64)
}

/// Percentage of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy<T: Real>(params: &ParamSet<T>, x: &Matrix<T>, labels: &[u8]) -> Result<f64> {
    let mut hits = 0usize;
    for_chunks(params, x, |start, probs| {
        for r in 0..probs.rows() {
            if argmax(probs.row(r)) == labels[start + r] as usize {
                hits += 1;
            }
        }
    })?;
    Ok(100.0 * hits as f64 / x.rows() as f64)
}

/// Trains with Adam on cross-entropy, scores validation loss after every
/// epoch and reports test accuracy at the epoch of minimum validation loss
/// (the earliest on ties).
pub fn finetune_on<T: Real>(
    init: &ParamSet<T>,
    train: &LabelledSplit<T>,
    val: &LabelledSplit<T>,
    test_x: &Matrix<T>,
    test_y: &[u8],
    config: &FinetuneConfig,
    shuffle: &mut SeededRng,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if train.y.is_empty() || val.y.is_empty() || test_y.is_empty() || test_x.rows() != test_y.len() {
        return Err(Error::Domain(
            "fine-tuning needs nonempty train, validation and test splits".into(),
        ));
    }
    let mut params = init.clone();
    let mut adam = AdamState::new(params.len(), AdamConfig::with_lr(config.lr))?;
    let mut order: Vec<usize> = (0..train.y.len()).collect();
    let mut val_losses = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, f64)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(shuffle);
        for batch in order.chunks(config.batch_size) {
            let (x, y) = train.rows(batch);
            let (_, grad) = cross_entropy(&params, &x, &y)?;
            adam.step(params.flat_mut(), &grad)?;
        }
        let v = mean_cross_entropy(&params, &val.x, &val.y)?;
        val_losses.push(v);
        if best.is_none_or(|(b, _, _)| v < b) {
            best = Some((v, epoch, accuracy(&params, test_x, test_y)?));
        }
    }
    let (_, best_epoch, test_accuracy) = best.expect("at least one epoch runs");
    Ok(FinetuneOutcome {
        test_accuracy,
        best_epoch,
        val_losses,
    })
}

/// Fine-tunes `init` on a labelled subset of `train` (N per digit plus N/5
/// validation per digit, relabelled by `task`) and scores every example of
/// `test`. The subset and batch order are keyed by `(config.seed, task)`.
pub fn finetune_eval<T: Real>(
    init: &ParamSet<T>,
    task: TaskSpec,
    n: usize,
    train: &Dataset<T>,
    test: &Dataset<T>,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if init.arch().output_dim() != 2 {
        return Err(Error::dims("binary task output", 2, init.arch().output_dim()));
    }
    let key = task.mask() as u64;
    let subset = sample_labelled_subset(
        &train.labels,
        n,
        &mut SeededRng::for_purpose(config.seed, Stream::Subset).child(key),
    )?;
    let tr = LabelledSplit::new(
        train.gather(&subset.train),
        subset.train.iter().map(|&i| task.label(train.labels[i])).collect(),
    )?;
    let va = LabelledSplit::new(
        train.gather(&subset.val),
        subset.val.iter().map(|&i| task.label(train.labels[i])).collect(),
    )?;
    let test_y = derive_labels(task, &test.labels);
    let mut shuffle = SeededRng::for_purpose(config.seed, Stream::Finetune).child(key);
    finetune_on(init, &tr, &va, &test.images, &test_y, config, &mut shuffle)
}
