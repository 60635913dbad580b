use crate::error::{Error, Result};
use crate::mlp::{LayerTrace, ParamSet};
use crate::ndcore::{self, matvec_t, Matrix};
use crate::real::Real;

/// Rows `J^(i)(x_l)` of the Jacobian of logit `i` with respect to every
/// layer input `x_l`, `l = 0 … L-1`, from one reverse sweep. ReLU masks are
/// taken from `trace` and held constant.
pub fn jacobian_rows<T: Real>(params: &ParamSet<T>, trace: &LayerTrace<T>, logit: usize) -> Vec<Vec<T>> {
    let arch = params.arch();
    let depth = arch.depth();
    let mut rows: Vec<Vec<T>> = vec![Vec::new(); depth];
    let mut h = vec![T::zero(); arch.output_dim()];
    h[logit] = T::one();
    for l in (0..depth).rev() {
        let s = arch.layers()[l];
        let mut q = matvec_t(params.weights(l), s.n_out, s.n_in, &h);
        if l > 0 {
            for (qv, &xv) in q.iter_mut().zip(trace.layer_input(l)) {
                if xv <= T::zero() {
                    *qv = T::zero();
                }
            }
        }
        rows[l] = q.clone();
        h = q;
    }
    rows
}

/// `d × L` matrix whose entry `(i, l)` is `||J^(i)(x_l)||_F` on the logits.
pub fn jacobian_row_norms<T: Real>(params: &ParamSet<T>, trace: &LayerTrace<T>) -> Result<Matrix<T>> {
    let arch = params.arch();
    if trace.pre_activations.len() + 1 != arch.depth() || trace.input.len() != arch.input_dim() {
        return Err(Error::Domain("trace was not produced by these parameters".into()));
    }
    let d = arch.output_dim();
    let mut out = Matrix::zeros(d, arch.depth());
    for i in 0..d {
        for (l, row) in jacobian_rows(params, trace, i).iter().enumerate() {
            out.set(i, l, ndcore::norm(row));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{forward, init_he, Architecture};

    /// Explicit masked product `W_L D_{L-1} … W_{l+1} D_l` (no `D_0`).
    fn explicit_jacobian(params: &ParamSet<f64>, trace: &LayerTrace<f64>, l: usize) -> Matrix<f64> {
        let depth = params.arch().depth();
        let mut acc = params.weight_matrix(depth - 1);
        for k in (l..depth - 1).rev() {
            let mask = ndcore::relu_mask(trace.layer_input(k + 1));
            let mut d = Matrix::zeros(mask.len(), mask.len());
            for (i, m) in mask.iter().enumerate() {
                d.set(i, i, *m);
            }
            acc = acc.matmul(&d).unwrap().matmul(&params.weight_matrix(k)).unwrap();
        }
        if l > 0 {
            let mask = ndcore::relu_mask(trace.layer_input(l));
            for r in 0..acc.rows() {
                for (c, m) in mask.iter().enumerate() {
                    acc.set(r, c, acc.get(r, c) * m);
                }
            }
        }
        acc
    }

    #[test]
    fn chain_of_scalars() {
        let (w1, w2) = (1.5f64, -0.8f64);
        let p = ParamSet::from_layers(&[
            (Matrix::from_vec(1, 1, vec![w1]).unwrap(), vec![0.0]),
            (Matrix::from_vec(1, 1, vec![w2]).unwrap(), vec![0.0]),
        ])
        .unwrap();
        let t = forward(&p, &[2.0]).unwrap();
        assert!(t.pre_activations[0][0] > 0.0);
        let n = jacobian_row_norms(&p, &t).unwrap();
        assert!((n.get(0, 0) - (w1 * w2).abs()).abs() < 1e-15);
        assert!((n.get(0, 1) - w2.abs()).abs() < 1e-15);
    }

    #[test]
    fn dead_layer_zeroes_everything_below() {
        let mut p = init_he::<f64>(&[4, 5, 6, 3], 1).unwrap();
        p.bias_mut(1).iter_mut().for_each(|b| *b = -1e3);
        let t = forward(&p, &[0.1, 0.2, -0.3, 0.4]).unwrap();
        let n = jacobian_row_norms(&p, &t).unwrap();
        for i in 0..3 {
            assert_eq!(n.get(i, 0), 0.0);
            assert_eq!(n.get(i, 1), 0.0);
            assert_eq!(n.get(i, 2), 0.0);
        }
        let mut p = init_he::<f64>(&[4, 5, 6, 3], 1).unwrap();
        p.bias_mut(0).iter_mut().for_each(|b| *b = -1e3);
        let t = forward(&p, &[0.1, 0.2, -0.3, 0.4]).unwrap();
        let n = jacobian_row_norms(&p, &t).unwrap();
        for i in 0..3 {
            assert_eq!(n.get(i, 0), 0.0);
            assert_eq!(n.get(i, 1), 0.0);
        }
    }

    #[test]
    fn sweep_matches_explicit_products() {
        for (seed, dims) in [
            (1u64, vec![3usize, 4, 2]),
            (2, vec![5, 8, 7, 3]),
            (3, vec![8, 6, 8, 5, 4]),
        ] {
            let arch = Architecture::new(&dims).unwrap();
            let p = init_he::<f64>(arch.dims(), seed).unwrap();
            let x: Vec<f64> = (0..dims[0]).map(|i| ((i + 1) as f64 * 0.77).sin()).collect();
            let t = forward(&p, &x).unwrap();
            let n = jacobian_row_norms(&p, &t).unwrap();
            for l in 0..arch.depth() {
                let j = explicit_jacobian(&p, &t, l);
                for i in 0..arch.output_dim() {
                    let row_norm = ndcore::norm(j.row(i));
                    assert!((row_norm - n.get(i, l)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rejects_foreign_trace() {
        let p = init_he::<f64>(&[3, 4, 2], 1).unwrap();
        let q = init_he::<f64>(&[3, 4, 4, 2], 1).unwrap();
        let t = forward(&q, &[1.0, 2.0, 3.0]).unwrap();
        assert!(jacobian_row_norms(&p, &t).is_err());
    }
}
