//! Gaussian kernels, the median-heuristic bandwidth set and the squared
//! MMD estimator.
//!
//! Sample sets are matrices with one point per row.

use log::warn;

use crate::error::{Error, Result};
use crate::ndcore::{sq_dist, Matrix};
use crate::real::Real;

/// Exponents `i` of the bandwidths `2^i · γ_med`.
pub const BANDWIDTH_EXPONENTS: std::ops::RangeInclusive<i32> = -4..=4;

/// Median of `values`, averaging the two central entries for even length.
/// Reorders `values`. Returns `None` when empty.
pub fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mid = n / 2;
    let (lower, &mut m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        return Some(m);
    }
    let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(0.5 * (below + m))
}

/// `exp(-||x - y||² / (2γ²))`.
pub fn gaussian_kernel<T: Real>(x: &[T], y: &[T], gamma: T) -> T {
    debug_assert_eq!(x.len(), y.len());
    (-sq_dist(x, y) / (T::of(2.0) * gamma * gamma)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    gamma_med: f64,
    bandwidths: [f64; 9],
}

impl KernelSpec {
    pub fn from_median(gamma_med: f64) -> Result<Self> {
        if !(gamma_med.is_finite() && gamma_med > 0.0) {
            return Err(Error::Domain(format!(
                "median bandwidth must be positive, got {gamma_med}"
            )));
        }
        let mut bandwidths = [0.0; 9];
        for (b, i) in bandwidths.iter_mut().zip(BANDWIDTH_EXPONENTS) {
            *b = 2f64.powi(i) * gamma_med;
        }
        Ok(KernelSpec { gamma_med, bandwidths })
    }

    pub fn gamma_med(&self) -> f64 {
        self.gamma_med
    }

    /// Ascending.
    pub fn bandwidths(&self) -> &[f64; 9] {
        &self.bandwidths
    }

    /// `1 / (2γ_i²)` for each bandwidth, in the working precision.
    fn inv_two_sq<T: Real>(&self) -> [T; 9] {
        self.bandwidths.map(|g| T::of(1.0 / (2.0 * g * g)))
    }
}

/// Appends the pairwise distances of one `(X, Y)` pair: all unordered
/// pairs within `X`, all cross pairs, all unordered pairs within `Y`.
pub fn push_pairwise_distances<T: Real>(x: &Matrix<T>, y: &Matrix<T>, out: &mut Vec<f64>) {
    for set in [x, y] {
        for a in 0..set.rows() {
            for b in a + 1..set.rows() {
                out.push(sq_dist(set.row(a), set.row(b)).as_f64().sqrt());
            }
        }
    }
    for a in 0..x.rows() {
        for b in 0..y.rows() {
            out.push(sq_dist(x.row(a), y.row(b)).as_f64().sqrt());
        }
    }
}

/// Median-heuristic spec from a single pair of sample sets.
pub fn median_bandwidth<T: Real>(x: &Matrix<T>, y: &Matrix<T>) -> Result<KernelSpec> {
    median_bandwidth_pooled(std::iter::once((x, y)))
}

/// Median-heuristic spec with the pairwise distances of every `(X, Y)`
/// pair pooled into one median. Falls back to `γ_med = 1` when the median
/// distance is zero.
pub fn median_bandwidth_pooled<'a, T: Real>(
    pairs: impl IntoIterator<Item = (&'a Matrix<T>, &'a Matrix<T>)>,
) -> Result<KernelSpec> {
    let mut dists = Vec::new();
    for (x, y) in pairs {
        if x.cols() != y.cols() {
            return Err(Error::dims("median_bandwidth", x.cols(), y.cols()));
        }
        push_pairwise_distances(x, y, &mut dists);
    }
    median_from_distances(&mut dists)
}

/// Median-heuristic spec from an already enumerated distance list.
pub fn median_from_distances(dists: &mut [f64]) -> Result<KernelSpec> {
    let m = median(dists).ok_or_else(|| Error::Domain("median bandwidth needs at least two points".into()))?;
    if !m.is_finite() {
        return Err(Error::NonFinite("median bandwidth"));
    }
    if m <= 0.0 {
        warn!("median pairwise distance is zero; using bandwidth 1");
        return KernelSpec::from_median(1.0);
    }
    KernelSpec::from_median(m)
}

/// Sum of the nine Gaussian kernels.
pub fn multi_kernel<T: Real>(x: &[T], y: &[T], spec: &KernelSpec) -> T {
    multi_kernel_sq(sq_dist(x, y), &spec.inv_two_sq())
}

#[inline]
fn multi_kernel_sq<T: Real>(d2: T, inv: &[T; 9]) -> T {
    let mut s = T::zero();
    for &c in inv {
        s += (-d2 * c).exp();
    }
    s
}

/// Kernel sum and its derivative with respect to the squared distance.
#[inline]
fn multi_kernel_sq_grad<T: Real>(d2: T, inv: &[T; 9]) -> (T, T) {
    let mut s = T::zero();
    let mut ds = T::zero();
    for &c in inv {
        let k = (-d2 * c).exp();
        s += k;
        ds -= c * k;
    }
    (s, ds)
}

fn check_sets<T: Real>(x: &Matrix<T>, y: &Matrix<T>) -> Result<()> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Domain("MMD needs two nonempty sample sets".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::dims("mmd2", x.cols(), y.cols()));
    }
    Ok(())
}

/// Mean of the multi-kernel over all ordered pairs of rows of `x` and `y`.
pub fn mean_kernel<T: Real>(x: &Matrix<T>, y: &Matrix<T>, spec: &KernelSpec) -> T {
    let inv = spec.inv_two_sq();
    let mut s = T::zero();
    if std::ptr::eq(x, y) {
        for a in 0..x.rows() {
            s += T::of(9.0);
            for b in a + 1..x.rows() {
                s += T::of(2.0) * multi_kernel_sq(sq_dist(x.row(a), x.row(b)), &inv);
            }
        }
    } else {
        for a in 0..x.rows() {
            for b in 0..y.rows() {
                s += multi_kernel_sq(sq_dist(x.row(a), y.row(b)), &inv);
            }
        }
    }
    s / T::of((x.rows() * y.rows()) as f64)
}

/// Biased (V-statistic) squared MMD between the rows of `x` and `y`.
pub fn mmd2<T: Real>(x: &Matrix<T>, y: &Matrix<T>, spec: &KernelSpec) -> Result<T> {
    check_sets(x, y)?;
    Ok(mean_kernel(x, x, spec) + mean_kernel(y, y, spec) - T::of(2.0) * mean_kernel(x, y, spec))
}

/// [`mmd2`] together with its gradient with respect to every row of `x`,
/// bandwidths held fixed. `yy` is the precomputed mean kernel within `y`.
pub fn mmd2_grad_x<T: Real>(x: &Matrix<T>, y: &Matrix<T>, yy: T, spec: &KernelSpec) -> Result<(T, Matrix<T>)> {
    check_sets(x, y)?;
    let inv = spec.inv_two_sq();
    let (m, n, d) = (x.rows(), y.rows(), x.cols());
    let mut grad = Matrix::zeros(m, d);
    let two = T::of(2.0);
    // d/dx_a of k(x_a, z) is 2 k'(d2) (x_a - z).
    let cxx = two / T::of((m * m) as f64);
    let cxy = two / T::of((m * n) as f64);
    let mut sxx = T::of(9.0 * m as f64);
    let mut sxy = T::zero();
    let mut diff = vec![T::zero(); d];
    for a in 0..m {
        let xa = x.row(a);
        for b in a + 1..m {
            let xb = x.row(b);
            let mut d2 = T::zero();
            for ((df, &p), &q) in diff.iter_mut().zip(xa).zip(xb) {
                *df = p - q;
                d2 += *df * *df;
            }
            let (k, dk) = multi_kernel_sq_grad(d2, &inv);
            sxx += two * k;
            // Pair (a, b) appears twice in the double sum.
            let coef = two * cxx * dk;
            for (j, &df) in diff.iter().enumerate() {
                let g = coef * df;
                let ga = grad.get(a, j);
                grad.set(a, j, ga + g);
                let gb = grad.get(b, j);
                grad.set(b, j, gb - g);
            }
        }
        for b in 0..n {
            let yb = y.row(b);
            let mut d2 = T::zero();
            for ((df, &p), &q) in diff.iter_mut().zip(xa).zip(yb) {
                *df = p - q;
                d2 += *df * *df;
            }
            let (k, dk) = multi_kernel_sq_grad(d2, &inv);
            sxy += k;
            let coef = two * cxy * dk;
            let ga = grad.row_mut(a);
            for (g, &df) in ga.iter_mut().zip(&diff) {
                *g -= coef * df;
            }
        }
    }
    let value = sxx / T::of((m * m) as f64) + yy - two * sxy / T::of((m * n) as f64);
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::{sample_simplex, SeededRng, Stream};
    use rand::Rng;

    fn brute_mmd2(x: &Matrix<f64>, y: &Matrix<f64>, spec: &KernelSpec) -> f64 {
        let k = |a: &[f64], b: &[f64]| -> f64 { spec.bandwidths().iter().map(|&g| gaussian_kernel(a, b, g)).sum() };
        let mut xx = 0.0;
        for a in 0..x.rows() {
            for b in 0..x.rows() {
                xx += k(x.row(a), x.row(b));
            }
        }
        let mut yy = 0.0;
        for a in 0..y.rows() {
            for b in 0..y.rows() {
                yy += k(y.row(a), y.row(b));
            }
        }
        let mut xy = 0.0;
        for a in 0..x.rows() {
            for b in 0..y.rows() {
                xy += k(x.row(a), y.row(b));
            }
        }
        let (m, n) = (x.rows() as f64, y.rows() as f64);
        xx / (m * m) + yy / (n * n) - 2.0 * xy / (m * n)
    }

    fn random_set(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&mut []), None);
        assert_eq!(median(&mut [3.0]), Some(3.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut [5.0, 1.0, 3.0]), Some(3.0));
    }

    #[test]
    fn gaussian_kernel_values() {
        let x = [0.3, -1.2];
        assert_eq!(gaussian_kernel(&x, &x, 0.7), 1.0);
        let g = 0.8f64;
        let y = [0.3 + g * 2f64.sqrt(), -1.2];
        assert!((gaussian_kernel(&x, &y, g) - (-1f64).exp()).abs() < 1e-12);
        assert!(gaussian_kernel(&x, &[5.0, 5.0], 1e6) > 1.0 - 1e-10);
    }

    #[test]
    fn median_bandwidth_enumeration() {
        let x = Matrix::from_rows(&[vec![0.0], vec![3.0]]).unwrap();
        let empty = Matrix::<f64>::zeros(0, 1);
        assert_eq!(median_bandwidth(&x, &empty).unwrap().gamma_med(), 3.0);

        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![2.0]]).unwrap();
        // Distances {1} within X, {2, 1} across.
        assert_eq!(median_bandwidth(&x, &y).unwrap().gamma_med(), 1.0);

        let mut rng = SeededRng::new(3, 0);
        let x = random_set(&mut rng, 5, 3);
        let y = random_set(&mut rng, 4, 3);
        let mut all = Vec::new();
        for a in 0..5 {
            for b in a + 1..5 {
                all.push(sq_dist(x.row(a), x.row(b)).sqrt());
            }
            for b in 0..4 {
                all.push(sq_dist(x.row(a), y.row(b)).sqrt());
            }
        }
        for a in 0..4 {
            for b in a + 1..4 {
                all.push(sq_dist(y.row(a), y.row(b)).sqrt());
            }
        }
        assert_eq!(all.len(), 10 + 20 + 6);
        all.sort_by(f64::total_cmp);
        let expect = 0.5 * (all[17] + all[18]);
        assert_eq!(median_bandwidth(&x, &y).unwrap().gamma_med(), expect);
    }

    #[test]
    fn identical_points_fall_back_to_unit_bandwidth() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(median_bandwidth(&x, &x.clone()).unwrap().gamma_med(), 1.0);
    }

    #[test]
    fn bandwidths_are_powers_of_two() {
        let s = KernelSpec::from_median(0.5).unwrap();
        assert_eq!(s.bandwidths()[0], 0.5 / 16.0);
        assert_eq!(s.bandwidths()[4], 0.5);
        assert_eq!(s.bandwidths()[8], 8.0);
        assert!(s.bandwidths().windows(2).all(|w| w[0] < w[1]));
        assert!(KernelSpec::from_median(0.0).is_err());
    }

    #[test]
    fn multi_kernel_decomposes() {
        let s = KernelSpec::from_median(0.37).unwrap();
        let x = [0.1, 0.9, -0.4];
        let y = [0.5, 0.2, 0.3];
        assert_eq!(multi_kernel(&x, &x, &s), 9.0);
        assert_eq!(multi_kernel(&x, &y, &s), multi_kernel(&y, &x, &s));
        let parts: f64 = s.bandwidths().iter().map(|&g| gaussian_kernel(&x, &y, g)).sum();
        assert!((multi_kernel(&x, &y, &s) - parts).abs() < 1e-12);
    }

    #[test]
    fn mmd2_matches_brute_force() {
        let mut rng = SeededRng::new(11, 0);
        for _ in 0..20 {
            let m = rng.random_range(2..=16);
            let n = rng.random_range(2..=16);
            let d = rng.random_range(1..=4);
            let x = random_set(&mut rng, m, d);
            let y = random_set(&mut rng, n, d);
            let spec = median_bandwidth(&x, &y).unwrap();
            let v = mmd2(&x, &y, &spec).unwrap();
            assert!((v - brute_mmd2(&x, &y, &spec)).abs() < 1e-12);
            assert!((v - mmd2(&y, &x, &spec).unwrap()).abs() < 1e-12);
            assert!(mmd2(&x, &x.clone(), &spec).unwrap().abs() < 1e-10);
            let yy = mean_kernel(&y, &y, &spec);
            let (vg, _) = mmd2_grad_x(&x, &y, yy, &spec).unwrap();
            assert!((vg - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd2_rejects_empty_sets() {
        let spec = KernelSpec::from_median(1.0).unwrap();
        let x = Matrix::<f64>::zeros(0, 2);
        let y = Matrix::<f64>::zeros(3, 2);
        assert!(mmd2(&x, &y, &spec).is_err());
        assert!(mmd2(&y, &x, &spec).is_err());
    }

    #[test]
    fn point_masses_far_apart() {
        let spec = KernelSpec::from_median(1.0).unwrap();
        let far = 10.0 * spec.bandwidths()[8];
        let x = Matrix::from_rows(&vec![vec![0.0, 0.0]; 4]).unwrap();
        let y = Matrix::from_rows(&vec![vec![far, 0.0]; 5]).unwrap();
        assert!((mmd2(&x, &y, &spec).unwrap() - 18.0).abs() < 1e-9);
    }

    #[test]
    fn same_distribution_is_small() {
        let mut rng = SeededRng::for_purpose(4, Stream::Simplex);
        let x = Matrix::from_rows(&sample_simplex::<f64, _>(2, 512, &mut rng)).unwrap();
        let y = Matrix::from_rows(&sample_simplex::<f64, _>(2, 512, &mut rng)).unwrap();
        let spec = median_bandwidth(&x, &y).unwrap();
        let v = mmd2(&x, &y, &spec).unwrap();
        assert!(v < 0.05, "{v}");
        // The same statistic on a shifted sample is far larger.
        let shifted: Vec<Vec<f64>> = (0..512)
            .map(|r| vec![0.5 * x.get(r, 0), 1.0 - 0.5 * x.get(r, 0)])
            .collect();
        let z = Matrix::from_rows(&shifted).unwrap();
        assert!(mmd2(&z, &y, &spec).unwrap() > 4.0 * v);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(5, 0);
        let x = random_set(&mut rng, 6, 3);
        let y = random_set(&mut rng, 5, 3);
        let spec = median_bandwidth(&x, &y).unwrap();
        let yy = mean_kernel(&y, &y, &spec);
        let (_, g) = mmd2_grad_x(&x, &y, yy, &spec).unwrap();
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (mmd2(&xp, &y, &spec).unwrap() - mmd2(&xm, &y, &spec).unwrap()) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "{a} vs {fd}");
        }
    }
}
