//! A slow second implementation of the objective, written as one expression
//! graph over scalar-vector primitives and differentiated by the generic
//! reverse-mode tape. It shares no code with the batched path beyond the
//! noise draws and exists to cross-check it on small networks.

use crate::error::Result;
use crate::kernels::{KernelSpec, BANDWIDTH_EXPONENTS};
use crate::losses::{FrozenNoise, LossBreakdown};
use crate::mlp::ParamSet;
use crate::ndcore::{GradRecord, Graph, Matrix, NodeId};
use crate::real::Real;
use crate::stochastics::PerturbationSpec;

/// Value and gradient of `L^uni + λ L^sd + ξ L^iod` for the frozen draws.
/// With `kernel = None` the bandwidth is the stop-gradient median of the
/// pooled pairwise distances.
pub fn reference_objective<T: Real>(
    params: &ParamSet<T>,
    x: &Matrix<T>,
    lambda: f64,
    xi: f64,
    spec: &PerturbationSpec<T>,
    noise: &FrozenNoise<T>,
    kernel: Option<KernelSpec>,
) -> Result<(LossBreakdown, GradRecord<T>)> {
    let arch = params.arch();
    let depth = arch.depth();
    let d = arch.output_dim();
    let batch = x.rows();
    let mut g = Graph::new(params.flat());

    let mut layers = Vec::with_capacity(depth);
    for s in arch.layers() {
        let w = g.param(s.w_offset, s.n_in * s.n_out)?;
        let b = g.param(s.b_offset, s.n_out)?;
        layers.push((w, b));
    }
    let inputs: Vec<NodeId> = (0..batch).map(|b| g.constant(x.row(b).to_vec())).collect();

    // Softmax outputs of every perturbed model: probs[j][b].
    let mut probs = Vec::with_capacity(noise.n_perturb());
    for j in 0..noise.n_perturb() {
        let eps = noise.epsilon(j, spec);
        let mut perturbed = Vec::with_capacity(depth);
        for (s, &(w, b)) in arch.layers().iter().zip(&layers) {
            let ew = g.constant(eps[s.weight_range()].to_vec());
            let eb = g.constant(eps[s.bias_range()].to_vec());
            perturbed.push((g.add(w, ew)?, g.add(b, eb)?));
        }
        let mut row = Vec::with_capacity(batch);
        for &input in &inputs {
            let z = forward(&mut g, arch.layers(), &perturbed, input)?.0;
            row.push(g.softmax(z));
        }
        probs.push(row);
    }
    let uniform: Vec<NodeId> = (0..noise.uniform().rows())
        .map(|k| g.constant(noise.uniform().row(k).to_vec()))
        .collect();

    let gammas: Vec<NodeId> = match kernel {
        Some(k) => k.bandwidths().iter().map(|&v| g.constant(vec![T::of(v)])).collect(),
        None => {
            let mut dists = Vec::new();
            for b in 0..batch {
                let set: Vec<NodeId> = probs.iter().map(|row| row[b]).collect();
                pairwise_norms(&mut g, &set, &set, true, &mut dists)?;
                pairwise_norms(&mut g, &set, &uniform, false, &mut dists)?;
                pairwise_norms(&mut g, &uniform, &uniform, true, &mut dists)?;
            }
            let all = g.concat(&dists);
            let med = g.median(all)?;
            let med = g.stop_gradient(med);
            BANDWIDTH_EXPONENTS.map(|i| g.scale(med, 2f64.powi(i))).collect()
        }
    };

    let mut per_example = Vec::with_capacity(batch);
    for b in 0..batch {
        let set: Vec<NodeId> = probs.iter().map(|row| row[b]).collect();
        let xx = mean_multi_kernel(&mut g, &set, &set, &gammas)?;
        let yy = mean_multi_kernel(&mut g, &uniform, &uniform, &gammas)?;
        let xy = mean_multi_kernel(&mut g, &set, &uniform, &gammas)?;
        let two_xy = g.scale(xy, 2.0);
        let s = g.add(xx, yy)?;
        per_example.push(g.sub(s, two_xy)?);
    }
    let uni = mean_of(&mut g, &per_example)?;

    let threshold = (1.0 / d as f64).sqrt();
    let mut per_model = Vec::with_capacity(probs.len());
    for row in &probs {
        let mut means = Vec::with_capacity(d);
        for i in 0..d {
            let mut v = vec![T::zero(); d];
            v[i] = T::one();
            let vertex = g.constant(v);
            let mut dists = Vec::with_capacity(batch);
            for &p in row {
                let diff = g.sub(vertex, p)?;
                dists.push(g.norm(diff));
            }
            means.push(mean_of(&mut g, &dists)?);
        }
        let all = g.concat(&means);
        let far = g.max(all)?;
        let hinge = g.clamp_min(far, threshold);
        per_model.push(g.add_scalar(hinge, -threshold));
    }
    let sd = mean_of(&mut g, &per_model)?;

    let mut per_input = Vec::with_capacity(batch);
    for &input in &inputs {
        let pre = forward(&mut g, arch.layers(), &layers, input)?.1;
        let mut worst = Vec::with_capacity(d);
        for i in 0..d {
            let mut e = vec![T::zero(); d];
            e[i] = T::one();
            let mut h = g.constant(e);
            let mut penalties = Vec::with_capacity(depth);
            for l in (0..depth).rev() {
                let s = arch.layers()[l];
                let mut q = g.matvec_t(layers[l].0, h, s.n_out, s.n_in)?;
                if l > 0 {
                    let mask = g.relu_mask(pre[l - 1]);
                    q = g.mul(q, mask)?;
                }
                let n = g.norm(q);
                let neg = g.scale(n, -1.0);
                let gap = g.add_scalar(neg, 1.0);
                penalties.push(g.square(gap));
                h = q;
            }
            let all = g.concat(&penalties);
            worst.push(g.max(all)?);
        }
        let all = g.concat(&worst);
        per_input.push(g.mean(all)?);
    }
    let iod = mean_of(&mut g, &per_input)?;

    let weighted_sd = g.scale(sd, lambda);
    let weighted_iod = g.scale(iod, xi);
    let partial = g.add(uni, weighted_sd)?;
    let total = g.add(partial, weighted_iod)?;

    let grads = g.backward(total)?;
    let breakdown = LossBreakdown {
        uni: g.scalar(uni).as_f64(),
        sd: g.scalar(sd).as_f64(),
        iod: g.scalar(iod).as_f64(),
        total: g.scalar(total).as_f64(),
    };
    Ok((breakdown, GradRecord::new(g.scalar(total), grads)?))
}

/// Logits for one input, plus the hidden pre-activations.
fn forward<T: Real>(
    g: &mut Graph<T>,
    shapes: &[crate::mlp::LayerShape],
    layers: &[(NodeId, NodeId)],
    input: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let mut h = input;
    let mut pre = Vec::new();
    for (l, (s, &(w, b))) in shapes.iter().zip(layers).enumerate() {
        let wx = g.matvec(w, h, s.n_out, s.n_in)?;
        let z = g.add(wx, b)?;
        if l + 1 == shapes.len() {
            return Ok((z, pre));
        }
        pre.push(z);
        h = g.relu(z);
    }
    unreachable!("architectures have at least one layer")
}

fn pairwise_norms<T: Real>(
    g: &mut Graph<T>,
    a: &[NodeId],
    b: &[NodeId],
    within: bool,
    out: &mut Vec<NodeId>,
) -> Result<()> {
    for (i, &p) in a.iter().enumerate() {
        let start = if within { i + 1 } else { 0 };
        for &q in &b[start..] {
            let diff = g.sub(p, q)?;
            out.push(g.norm(diff));
        }
    }
    Ok(())
}

fn mean_multi_kernel<T: Real>(g: &mut Graph<T>, a: &[NodeId], b: &[NodeId], gammas: &[NodeId]) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(a.len() * b.len());
    for &p in a {
        for &q in b {
            let mut ks = Vec::with_capacity(gammas.len());
            for &gamma in gammas {
                ks.push(g.gauss_kernel(p, q, gamma)?);
            }
            let all = g.concat(&ks);
            terms.push(g.sum(all));
        }
    }
    mean_of(g, &terms)
}

fn mean_of<T: Real>(g: &mut Graph<T>, parts: &[NodeId]) -> Result<NodeId> {
    let all = g.concat(parts);
    g.mean(all)
}
