use crate::error::{Error, Result};
use crate::mlp::Architecture;
use crate::ndcore::{gemm, softmax_in_place, Matrix};
use crate::real::{Real, Trans};

/// Forward activations for a mini-batch (one input per row).
#[derive(Clone, Debug)]
pub struct BatchTrace<T> {
    /// Pre-activations of every layer; the last entry holds the logits.
    pub pre: Vec<Matrix<T>>,
    /// `ReLU` of every hidden pre-activation.
    pub acts: Vec<Matrix<T>>,
    pub probs: Matrix<T>,
}

impl<T: Real> BatchTrace<T> {
    pub fn logits(&self) -> &Matrix<T> {
        self.pre.last().expect("at least one layer")
    }
}

/// Runs the network given by the flat parameters `theta` over every row of `x`.
pub fn forward_batch<T: Real>(arch: &Architecture, theta: &[T], x: &Matrix<T>) -> Result<BatchTrace<T>> {
    if theta.len() != arch.param_count() {
        return Err(Error::dims("forward_batch params", arch.param_count(), theta.len()));
    }
    if x.cols() != arch.input_dim() {
        return Err(Error::dims("forward_batch input", arch.input_dim(), x.cols()));
    }
    let b = x.rows();
    let depth = arch.depth();
    let mut pre: Vec<Matrix<T>> = Vec::with_capacity(depth);
    let mut acts: Vec<Matrix<T>> = Vec::with_capacity(depth - 1);
    for (l, s) in arch.layers().iter().enumerate() {
        let input = if l == 0 { x } else { &acts[l - 1] };
        let mut z = Matrix::zeros(b, s.n_out);
        gemm(
            Trans::No,
            Trans::Yes,
            b,
            s.n_out,
            s.n_in,
            T::one(),
            input.data(),
            &theta[s.weight_range()],
            T::zero(),
            z.data_mut(),
        );
        let bias = &theta[s.bias_range()];
        for r in 0..b {
            for (zv, &bv) in z.row_mut(r).iter_mut().zip(bias) {
                *zv += bv;
            }
        }
        if l + 1 < depth {
            let mut a = z.clone();
            for v in a.data_mut() {
                if *v <= T::zero() {
                    *v = T::zero();
                }
            }
            acts.push(a);
        }
        pre.push(z);
    }
    let mut probs = pre[depth - 1].clone();
    for r in 0..b {
        softmax_in_place(probs.row_mut(r));
    }
    Ok(BatchTrace { pre, acts, probs })
}

/// Back-propagates `dlogits` (one row per input) through the network and
/// adds the parameter gradient into `grad`.
pub fn backward_batch<T: Real>(
    arch: &Architecture,
    theta: &[T],
    x: &Matrix<T>,
    trace: &BatchTrace<T>,
    dlogits: &Matrix<T>,
    grad: &mut [T],
) -> Result<()> {
    if grad.len() != arch.param_count() {
        return Err(Error::dims("backward_batch grad", arch.param_count(), grad.len()));
    }
    let b = x.rows();
    if dlogits.rows() != b || dlogits.cols() != arch.output_dim() {
        return Err(Error::dims(
            "backward_batch dlogits",
            b * arch.output_dim(),
            dlogits.data().len(),
        ));
    }
    let mut delta = dlogits.clone();
    for (l, s) in arch.layers().iter().enumerate().rev() {
        let input = if l == 0 { x } else { &trace.acts[l - 1] };
        gemm(
            Trans::Yes,
            Trans::No,
            s.n_out,
            s.n_in,
            b,
            T::one(),
            delta.data(),
            input.data(),
            T::one(),
            &mut grad[s.weight_range()],
        );
        let gb = &mut grad[s.bias_range()];
        for r in 0..b {
            for (g, &d) in gb.iter_mut().zip(delta.row(r)) {
                *g += d;
            }
        }
        if l > 0 {
            let mut prev = Matrix::zeros(b, s.n_in);
            gemm(
                Trans::No,
                Trans::No,
                b,
                s.n_in,
                s.n_out,
                T::one(),
                delta.data(),
                &theta[s.weight_range()],
                T::zero(),
                prev.data_mut(),
            );
            let z = &trace.pre[l - 1];
            for (p, &zv) in prev.data_mut().iter_mut().zip(z.data()) {
                if zv <= T::zero() {
                    *p = T::zero();
                }
            }
            delta = prev;
        }
    }
    Ok(())
}

/// Gradient of the softmax: maps `dL/dp` rows to `dL/dz` rows.
pub(crate) fn softmax_backward<T: Real>(probs: &Matrix<T>, dprobs: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = dprobs.row(r);
        let gp = crate::ndcore::dot(g, p);
        for ((o, &pi), &gi) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - gp);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{forward, init_he};
    use crate::ndcore::finite_diff_grad;

    #[test]
    fn batch_forward_matches_single_forward() {
        let p = init_he::<f64>(&[4, 6, 5, 3], 2).unwrap();
        let x = Matrix::from_vec(2, 4, vec![0.3, -1.0, 2.0, 0.1, -0.5, 0.7, 0.2, 1.4]).unwrap();
        let t = forward_batch(p.arch(), p.flat(), &x).unwrap();
        for r in 0..2 {
            let single = forward(&p, x.row(r)).unwrap();
            for (a, b) in single.logits.iter().zip(t.logits().row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in single.probs.iter().zip(t.probs.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut p = init_he::<f64>(&[3, 5, 4, 2], 5).unwrap();
        // Nonzero biases keep pre-activations off the ReLU kink.
        for l in 0..3 {
            for (j, b) in p.bias_mut(l).iter_mut().enumerate() {
                *b = 0.1 + 0.03 * j as f64;
            }
        }
        let x = Matrix::from_vec(3, 3, vec![0.3, -1.0, 2.0, 0.1, -0.5, 0.7, 0.2, 1.4, -0.9]).unwrap();
        let coef = Matrix::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let loss = |theta: &[f64]| {
            let t = forward_batch(p.arch(), theta, &x).unwrap();
            t.probs.data().iter().zip(coef.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let t = forward_batch(p.arch(), p.flat(), &x).unwrap();
        let dlogits = softmax_backward(&t.probs, &coef);
        let mut grad = vec![0.0; p.len()];
        backward_batch(p.arch(), p.flat(), &x, &t, &dlogits, &mut grad).unwrap();
        let fd = finite_diff_grad(loss, p.flat(), 1e-6);
        for (a, n) in grad.iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-7 + 1e-5 * n.abs(), "{a} vs {n}");
        }
    }
}
