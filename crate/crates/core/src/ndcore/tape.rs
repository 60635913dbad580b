//! A small tape-based reverse-mode engine over vector-valued nodes.
//!
//! Values are computed eagerly as nodes are added; [`Graph::backward`] walks
//! the tape in reverse. Subgradient conventions match the analytic path:
//! ReLU has slope 0 at 0, `max` routes its gradient to the lowest maximal
//! index, a clamp `max(a, c)` passes no gradient where `a <= c`, and a
//! Euclidean norm of a zero vector has zero gradient. ReLU masks are
//! constants.

use crate::error::{Error, Result};
use crate::ndcore::GradRecord;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Param {
        offset: usize,
    },
    Const,
    MatVec {
        w: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    MatTVec {
        w: NodeId,
        y: NodeId,
        rows: usize,
        cols: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    ReluMask,
    Softmax(NodeId),
    SqNorm(NodeId),
    Norm(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    Index(NodeId, usize),
    Max(NodeId),
    ClampMin(NodeId, f64),
    Square(NodeId),
    GaussKernel {
        x: NodeId,
        y: NodeId,
        gamma: NodeId,
    },
    Median,
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Vec<T>,
    needs_grad: bool,
}

/// Expression graph whose leaves are slices of one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    params: Vec<T>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new(params: &[T]) -> Self {
        Graph {
            params: params.to_vec(),
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    fn push(&mut self, op: Op, value: Vec<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Param { .. } => true,
            Op::Const | Op::ReluMask | Op::StopGradient => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn same_len(&self, a: NodeId, b: NodeId, ctx: &'static str) -> Result<()> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        if la != lb {
            return Err(Error::dims(ctx, la, lb));
        }
        Ok(())
    }

    /// Leaf bound to `params[offset..offset + len]`.
    pub fn param(&mut self, offset: usize, len: usize) -> Result<NodeId> {
        if offset + len > self.params.len() {
            return Err(Error::dims("Graph::param", self.params.len(), offset + len));
        }
        let v = self.params[offset..offset + len].to_vec();
        Ok(self.push(Op::Param { offset }, v, &[]))
    }

    pub fn constant(&mut self, value: Vec<T>) -> NodeId {
        self.push(Op::Const, value, &[])
    }

    /// `W x` with `W` a row-major `rows×cols` node.
    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.len_of(w) != rows * cols {
            return Err(Error::dims("Graph::matvec weight", rows * cols, self.len_of(w)));
        }
        if self.len_of(x) != cols {
            return Err(Error::dims("Graph::matvec input", cols, self.len_of(x)));
        }
        let v = super::matvec(self.value(w), rows, cols, self.value(x));
        Ok(self.push(Op::MatVec { w, x, rows, cols }, v, &[w, x]))
    }

    /// `Wᵀ y` with `W` a row-major `rows×cols` node.
    pub fn matvec_t(&mut self, w: NodeId, y: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.len_of(w) != rows * cols {
            return Err(Error::dims("Graph::matvec_t weight", rows * cols, self.len_of(w)));
        }
        if self.len_of(y) != rows {
            return Err(Error::dims("Graph::matvec_t input", rows, self.len_of(y)));
        }
        let v = super::matvec_t(self.value(w), rows, cols, self.value(y));
        Ok(self.push(Op::MatTVec { w, y, rows, cols }, v, &[w, y]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "Graph::add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "Graph::sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "Graph::mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = T::of(c);
        let v = self.value(a).iter().map(|&x| x * k).collect();
        self.push(Op::Scale(a, c), v, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = T::of(c);
        let v = self.value(a).iter().map(|&x| x + k).collect();
        self.push(Op::AddScalar(a), v, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = super::relu(self.value(a));
        self.push(Op::Relu(a), v, &[a])
    }

    /// `1(a > 0)` as a constant (no gradient flows through the mask).
    pub fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let v = super::relu_mask(self.value(a));
        self.push(Op::ReluMask, v, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = super::softmax(self.value(a));
        self.push(Op::Softmax(a), v, &[a])
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let v = vec![super::dot(self.value(a), self.value(a))];
        self.push(Op::SqNorm(a), v, &[a])
    }

    pub fn norm(&mut self, a: NodeId) -> NodeId {
        let v = vec![super::norm(self.value(a))];
        self.push(Op::Norm(a), v, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = vec![self.value(a).iter().copied().sum()];
        self.push(Op::Sum(a), v, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.len_of(a);
        if n == 0 {
            return Err(Error::Domain("mean of an empty node".into()));
        }
        let v = vec![self.value(a).iter().copied().sum::<T>() / T::of(n as f64)];
        Ok(self.push(Op::Mean(a), v, &[a]))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let v = parts.iter().flat_map(|p| self.value(*p).to_vec()).collect();
        self.push(Op::Concat(parts.to_vec()), v, parts)
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let n = self.len_of(a);
        if i >= n {
            return Err(Error::dims("Graph::index", n, i + 1));
        }
        let v = vec![self.value(a)[i]];
        Ok(self.push(Op::Index(a, i), v, &[a]))
    }

    pub fn max(&mut self, a: NodeId) -> Result<NodeId> {
        if self.len_of(a) == 0 {
            return Err(Error::Domain("max of an empty node".into()));
        }
        let vals = self.value(a);
        let v = vec![vals[super::argmax(vals)]];
        Ok(self.push(Op::Max(a), v, &[a]))
    }

    /// Elementwise `max(a, c)`.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = T::of(c);
        let v = self.value(a).iter().map(|&x| if x > k { x } else { k }).collect();
        self.push(Op::ClampMin(a, c), v, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| x * x).collect();
        self.push(Op::Square(a), v, &[a])
    }

    /// `exp(-||x - y||² / (2γ²))` with `gamma` a scalar node.
    pub fn gauss_kernel(&mut self, x: NodeId, y: NodeId, gamma: NodeId) -> Result<NodeId> {
        self.same_len(x, y, "Graph::gauss_kernel")?;
        if self.len_of(gamma) != 1 {
            return Err(Error::dims("Graph::gauss_kernel gamma", 1, self.len_of(gamma)));
        }
        let g = self.scalar(gamma);
        if g <= T::zero() {
            return Err(Error::Domain("kernel bandwidth must be positive".into()));
        }
        let d2 = super::sq_dist(self.value(x), self.value(y));
        let v = vec![(-d2 / (T::of(2.0) * g * g)).exp()];
        Ok(self.push(Op::GaussKernel { x, y, gamma }, v, &[x, y, gamma]))
    }

    /// Median of the entries (mean of the two central values for even
    /// length). Has no derivative; wrap it in [`Graph::stop_gradient`]
    /// before using it inside a differentiated expression.
    pub fn median(&mut self, a: NodeId) -> Result<NodeId> {
        let mut vals: Vec<f64> = self.value(a).iter().map(|v| v.as_f64()).collect();
        let m = crate::kernels::median(&mut vals).ok_or_else(|| Error::Domain("median of an empty node".into()))?;
        Ok(self.push(Op::Median, vec![T::of(m)], &[a]))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).to_vec();
        self.push(Op::StopGradient, v, &[a])
    }

    /// Reverse sweep from a scalar node; returns the gradient over the flat
    /// parameter vector.
    pub fn backward(&self, output: NodeId) -> Result<Vec<T>> {
        if self.len_of(output) != 1 {
            return Err(Error::dims("Graph::backward output", 1, self.len_of(output)));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(vec![T::one()]);
        let mut grads = vec![T::zero(); self.params.len()];

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |target: NodeId, delta: Vec<T>, adj: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[target.0].needs_grad {
                    return;
                }
                match &mut adj[target.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Param { offset } => {
                    for (gi, &v) in grads[*offset..].iter_mut().zip(&g) {
                        *gi += v;
                    }
                }
                Op::Const | Op::ReluMask | Op::StopGradient => {}
                Op::MatVec { w, x, rows, cols } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let mut dw = vec![T::zero(); rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dw[r * cols + c] = g[r] * xv[c];
                        }
                    }
                    let dx = super::matvec_t(wv, *rows, *cols, &g);
                    send(*w, dw, &mut adj);
                    send(*x, dx, &mut adj);
                }
                Op::MatTVec { w, y, rows, cols } => {
                    let wv = self.value(*w);
                    let yv = self.value(*y);
                    let mut dw = vec![T::zero(); rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dw[r * cols + c] = yv[r] * g[c];
                        }
                    }
                    let dy = super::matvec(wv, *rows, *cols, &g);
                    send(*w, dw, &mut adj);
                    send(*y, dy, &mut adj);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|&v| -v).collect();
                    send(*a, g, &mut adj);
                    send(*b, neg, &mut adj);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b)).map(|(&gi, &bi)| gi * bi).collect();
                    let db = g.iter().zip(self.value(*a)).map(|(&gi, &ai)| gi * ai).collect();
                    send(*a, da, &mut adj);
                    send(*b, db, &mut adj);
                }
                Op::Scale(a, c) => {
                    let k = T::of(*c);
                    send(*a, g.iter().map(|&v| v * k).collect(), &mut adj);
                }
                Op::AddScalar(a) => send(*a, g, &mut adj),
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                        .collect();
                    send(*a, d, &mut adj);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let gp = super::dot(&g, p);
                    let d = p.iter().zip(&g).map(|(&pi, &gi)| pi * (gi - gp)).collect();
                    send(*a, d, &mut adj);
                }
                Op::SqNorm(a) => {
                    let two = T::of(2.0);
                    let d = self.value(*a).iter().map(|&x| two * x * g[0]).collect();
                    send(*a, d, &mut adj);
                }
                Op::Norm(a) => {
                    let n = node.value[0];
                    let d = if n > T::zero() {
                        self.value(*a).iter().map(|&x| x / n * g[0]).collect()
                    } else {
                        vec![T::zero(); self.len_of(*a)]
                    };
                    send(*a, d, &mut adj);
                }
                Op::Sum(a) => send(*a, vec![g[0]; self.len_of(*a)], &mut adj),
                Op::Mean(a) => {
                    let n = T::of(self.len_of(*a) as f64);
                    send(*a, vec![g[0] / n; self.len_of(*a)], &mut adj);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let l = self.len_of(*p);
                        send(*p, g[start..start + l].to_vec(), &mut adj);
                        start += l;
                    }
                }
                Op::Index(a, i) => {
                    let mut d = vec![T::zero(); self.len_of(*a)];
                    d[*i] = g[0];
                    send(*a, d, &mut adj);
                }
                Op::Max(a) => {
                    let mut d = vec![T::zero(); self.len_of(*a)];
                    d[super::argmax(self.value(*a))] = g[0];
                    send(*a, d, &mut adj);
                }
                Op::ClampMin(a, c) => {
                    let k = T::of(*c);
                    let d = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(&gi, &x)| if x > k { gi } else { T::zero() })
                        .collect();
                    send(*a, d, &mut adj);
                }
                Op::Square(a) => {
                    let two = T::of(2.0);
                    let d = g.iter().zip(self.value(*a)).map(|(&gi, &x)| two * x * gi).collect();
                    send(*a, d, &mut adj);
                }
                Op::GaussKernel { x, y, gamma } => {
                    let k = node.value[0];
                    let gm = self.scalar(*gamma);
                    let xv = self.value(*x);
                    let yv = self.value(*y);
                    let inv = g[0] * k / (gm * gm);
                    let dx: Vec<T> = xv.iter().zip(yv).map(|(&a, &b)| -(a - b) * inv).collect();
                    let dy = dx.iter().map(|&v| -v).collect();
                    let d2 = super::sq_dist(xv, yv);
                    let dgamma = vec![g[0] * k * d2 / (gm * gm * gm)];
                    send(*x, dx, &mut adj);
                    send(*y, dy, &mut adj);
                    send(*gamma, dgamma, &mut adj);
                }
                Op::Median => return Err(Error::UnsupportedPrimitive("median")),
            }
        }
        Ok(grads)
    }
}

/// Evaluates the graph produced by `build` at `params` and differentiates it.
pub fn value_and_grad<T, F>(build: F, params: &[T]) -> Result<GradRecord<T>>
where
    T: Real,
    F: FnOnce(&mut Graph<T>) -> Result<NodeId>,
{
    let mut graph = Graph::new(params);
    let out = build(&mut graph)?;
    let grads = graph.backward(out)?;
    GradRecord::new(graph.scalar(out), grads)
}
