//! Fully connected ReLU classifiers.
//!
//! Layer `l` (0-based) maps `n_l` units to `n_{l+1}` units. The raw input
//! is fed to the first affine map without a ReLU; every later affine map
//! consumes `ReLU` of the previous pre-activation. Parameters live in one
//! flat vector in canonical order: for each layer, the row-major weight
//! matrix (`n_out × n_in`) followed by the bias.

mod batch;
mod checkpoint;
mod jacobian;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::{self, Matrix};
use crate::real::Real;
use crate::stochastics::{SeededRng, Stream};

pub(crate) use batch::softmax_backward;
pub use batch::{backward_batch, forward_batch, BatchTrace};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use jacobian::{jacobian_row_norms, jacobian_rows};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub n_in: usize,
    pub n_out: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl LayerShape {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.w_offset..self.w_offset + self.n_in * self.n_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.b_offset..self.b_offset + self.n_out
    }
}

/// Layer widths `(n_0, …, n_L)` and the derived flat-parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    dims: Vec<usize>,
    layers: Vec<LayerShape>,
}

impl Architecture {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "an architecture needs at least an input and an output width, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive, got {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for w in dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            layers.push(LayerShape {
                n_in,
                n_out,
                w_offset: offset,
                b_offset: offset + n_in * n_out,
            });
            offset += n_in * n_out + n_out;
        }
        Ok(Architecture {
            dims: dims.to_vec(),
            layers,
        })
    }

    /// The classifier shape used throughout: at least one hidden layer and
    /// at least two classes.
    pub fn classifier(dims: &[usize]) -> Result<Self> {
        let arch = Self::new(dims)?;
        if arch.depth() < 2 || arch.output_dim() < 2 {
            return Err(Error::Config(format!(
                "a classifier needs L >= 2 layers and d >= 2 outputs, got {dims:?}"
            )));
        }
        Ok(arch)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    /// Number of affine layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("nonempty dims")
    }

    /// Widths of the hidden layers `n_1 … n_{L-1}`.
    pub fn hidden_dims(&self) -> &[usize] {
        &self.dims[1..self.dims.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.b_offset + l.n_out)
    }
}

/// All weights and biases of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    arch: Architecture,
    flat: Vec<T>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(arch: Architecture) -> Self {
        let flat = vec![T::zero(); arch.param_count()];
        ParamSet { arch, flat }
    }

    pub fn from_flat(arch: Architecture, flat: Vec<T>) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::dims("ParamSet::from_flat", arch.param_count(), flat.len()));
        }
        Ok(ParamSet { arch, flat })
    }

    /// Builds parameters from per-layer `(W, b)` pairs.
    pub fn from_layers(layers: &[(Matrix<T>, Vec<T>)]) -> Result<Self> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        if let Some((w, _)) = layers.first() {
            dims.push(w.cols());
        }
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.cols() != dims[i] {
                return Err(Error::dims("ParamSet::from_layers weight cols", dims[i], w.cols()));
            }
            if b.len() != w.rows() {
                return Err(Error::dims("ParamSet::from_layers bias", w.rows(), b.len()));
            }
            dims.push(w.rows());
        }
        let arch = Architecture::new(&dims)?;
        let mut flat = Vec::with_capacity(arch.param_count());
        for (w, b) in layers {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b);
        }
        Ok(ParamSet { arch, flat })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn flat(&self) -> &[T] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<T> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.flat[self.arch.layers[layer].weight_range()]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        let r = self.arch.layers[layer].weight_range();
        &mut self.flat[r]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        &self.flat[self.arch.layers[layer].bias_range()]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let r = self.arch.layers[layer].bias_range();
        &mut self.flat[r]
    }

    pub fn weight_matrix(&self, layer: usize) -> Matrix<T> {
        let s = self.arch.layers[layer];
        Matrix::from_vec(s.n_out, s.n_in, self.weights(layer).to_vec()).expect("layout is consistent")
    }

    /// Converts to another float width.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            arch: self.arch.clone(),
            flat: self.flat.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Glorot-uniform weights, `U(-a, a)` with `a = sqrt(6 / (n_in + n_out))`;
    /// zero biases.
    pub fn xavier<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for l in 0..p.arch.depth() {
            let s = p.arch.layers[l];
            let a = (6.0 / (s.n_in + s.n_out) as f64).sqrt();
            for w in p.weights_mut(l) {
                *w = T::of(rng.random_range(-a..a));
            }
        }
        p
    }

    /// He-normal weights, `N(0, 2 / n_in)`; zero biases.
    pub fn he<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for l in 0..p.arch.depth() {
            let std = T::of((2.0 / p.arch.layers[l].n_in as f64).sqrt());
            for w in p.weights_mut(l) {
                *w = std * T::std_normal(rng);
            }
        }
        p
    }
}

pub fn init_xavier<T: Real>(dims: &[usize], seed: u64) -> Result<ParamSet<T>> {
    let arch = Architecture::new(dims)?;
    Ok(ParamSet::xavier(arch, &mut SeededRng::for_purpose(seed, Stream::Init)))
}

pub fn init_he<T: Real>(dims: &[usize], seed: u64) -> Result<ParamSet<T>> {
    let arch = Architecture::new(dims)?;
    Ok(ParamSet::he(arch, &mut SeededRng::for_purpose(seed, Stream::Init)))
}

/// Everything one forward pass produces for a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    pub input: Vec<T>,
    /// Hidden pre-activations `x_1 … x_{L-1}`.
    pub pre_activations: Vec<Vec<T>>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> LayerTrace<T> {
    /// Pre-activation `x_l` for `l` in `0..L`, with `x_0` the input.
    pub fn layer_input(&self, l: usize) -> &[T] {
        if l == 0 {
            &self.input
        } else {
            &self.pre_activations[l - 1]
        }
    }
}

pub fn forward<T: Real>(params: &ParamSet<T>, x: &[T]) -> Result<LayerTrace<T>> {
    let arch = params.arch();
    if x.len() != arch.input_dim() {
        return Err(Error::dims("forward input", arch.input_dim(), x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward input"));
    }
    let mut pre = Vec::with_capacity(arch.depth().saturating_sub(1));
    let mut current = x.to_vec();
    for (l, s) in arch.layers().iter().enumerate() {
        let act = if l == 0 { current } else { ndcore::relu(&current) };
        let mut z = ndcore::matvec(params.weights(l), s.n_out, s.n_in, &act);
        for (zi, &bi) in z.iter_mut().zip(params.bias(l)) {
            *zi += bi;
        }
        if l + 1 < arch.depth() {
            pre.push(z.clone());
        }
        current = z;
    }
    let probs = ndcore::softmax(&current);
    Ok(LayerTrace {
        input: x.to_vec(),
        pre_activations: pre,
        logits: current,
        probs,
    })
}

/// For each hidden layer, the fraction of units whose pre-activation is
/// `<= 0` on every row of `batch`.
pub fn dead_neuron_stats<T: Real>(params: &ParamSet<T>, batch: &Matrix<T>) -> Result<Vec<f64>> {
    if batch.rows() == 0 {
        return Err(Error::Domain("dead-neuron statistics need a nonempty batch".into()));
    }
    let trace = forward_batch(params.arch(), params.flat(), batch)?;
    Ok(dead_fractions(&trace))
}

pub(crate) fn dead_fractions<T: Real>(trace: &BatchTrace<T>) -> Vec<f64> {
    let hidden = trace.pre.len().saturating_sub(1);
    (0..hidden)
        .map(|l| {
            let z = &trace.pre[l];
            let dead = (0..z.cols())
                .filter(|&c| (0..z.rows()).all(|r| z.get(r, c) <= T::zero()))
                .count();
            dead as f64 / z.cols() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fcn_parameter_count() {
        let arch = Architecture::new(&[784, 392, 392, 392, 2]).unwrap();
        assert_eq!(
            arch.param_count(),
            784 * 392 + 392 + 2 * (392 * 392 + 392) + 392 * 2 + 2
        );
        assert_eq!(arch.param_count(), 616_618);
        assert_eq!(arch.hidden_dims(), &[392, 392, 392]);
    }

    #[test]
    fn classifier_shape_is_enforced() {
        assert!(Architecture::classifier(&[4, 2]).is_err());
        assert!(Architecture::classifier(&[4, 3, 1]).is_err());
        assert!(Architecture::classifier(&[4, 3, 2]).is_ok());
        assert!(Architecture::new(&[4]).is_err());
        assert!(Architecture::new(&[4, 0, 2]).is_err());
    }

    #[test]
    fn initializer_moments() {
        // 392 x 256 = 100,352 draws per layer.
        let dims = [392, 256, 2];
        let x = init_xavier::<f64>(&dims, 1).unwrap();
        let h = init_he::<f64>(&dims, 1).unwrap();
        let var = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let vx = var(x.weights(0));
        let vh = var(h.weights(0));
        assert!((vx / (2.0 / (392.0 + 256.0)) - 1.0).abs() < 0.05, "{vx}");
        assert!((vh / (2.0 / 392.0) - 1.0).abs() < 0.05, "{vh}");
        let a = (6.0f64 / 648.0).sqrt();
        assert!(x.weights(0).iter().all(|w| w.abs() <= a));
        for l in 0..2 {
            assert!(x.bias(l).iter().all(|&b| b == 0.0));
            assert!(h.bias(l).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn initializers_are_seed_deterministic() {
        let dims = [5, 4, 3];
        assert_eq!(
            init_xavier::<f32>(&dims, 9).unwrap(),
            init_xavier::<f32>(&dims, 9).unwrap()
        );
        assert_eq!(init_he::<f64>(&dims, 9).unwrap(), init_he::<f64>(&dims, 9).unwrap());
        assert_ne!(init_he::<f64>(&dims, 9).unwrap(), init_he::<f64>(&dims, 10).unwrap());
    }

    #[test]
    fn zero_network_is_uniform() {
        let p = ParamSet::<f64>::zeros(Architecture::new(&[3, 4, 5]).unwrap());
        let t = forward(&p, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(t.logits, vec![0.0; 5]);
        assert!(t.probs.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_identity_layer() {
        let p = ParamSet::from_layers(&[(Matrix::<f64>::identity(2), vec![0.0, 0.0])]).unwrap();
        let t = forward(&p, &[1.0, 0.0]).unwrap();
        assert_eq!(t.logits, vec![1.0, 0.0]);
        assert!(t.pre_activations.is_empty());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_xavier::<f64>(&[3, 4, 2], 0).unwrap();
        assert!(forward(&p, &[1.0, f64::NAN, 0.0]).is_err());
        assert!(forward(&p, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dead_neurons_forced_by_bias() {
        let mut p = init_he::<f64>(&[6, 5, 4, 2], 3).unwrap();
        p.bias_mut(0).iter_mut().for_each(|b| *b = -1e6);
        let batch = Matrix::from_vec(3, 6, (0..18).map(|i| i as f64 / 7.0 - 1.0).collect()).unwrap();
        let stats = dead_neuron_stats(&p, &batch).unwrap();
        assert_eq!(stats[0], 1.0);
        // everything downstream of a dead layer sees only its bias (zero)
        assert_eq!(stats[1], 1.0);

        let z = ParamSet::<f64>::zeros(Architecture::new(&[6, 5, 4, 2]).unwrap());
        assert_eq!(dead_neuron_stats(&z, &batch).unwrap(), vec![1.0, 1.0]);
        assert!(dead_neuron_stats(&z, &Matrix::zeros(0, 6)).is_err());
    }
}
