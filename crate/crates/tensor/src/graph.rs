//! Define-by-run reverse-mode differentiation.
//!
//! Every operator call appends a node holding its output value. `backward`
//! walks the tape in reverse and returns gradients for the bound parameters.

use crate::conv::{conv_backward, conv_forward, ConvGeometry};
use crate::kernels::{self, NormStats};
use crate::{Element, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Same parameters at another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    /// Returns how many tensors were affected.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = false;
            n += 1;
        }
        n
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { geo: ConvGeometry, has_bias: bool },
    InstanceNorm(NormStats<T>),
    Relu,
    Sigmoid,
    Add,
    Concat(Vec<usize>),
    Upsample([usize; 3]),
    MeanDepth,
    AdaptiveMaxPool(Vec<usize>),
    /// Scalar whose gradient w.r.t. its single parent was computed outside.
    External(Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of every parameter bound on the graph, indexed like the store.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    /// Adds another gradient set into this one.
    pub fn accumulate(&mut self, other: Grads<T>) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (mine, theirs) in self.by_param.iter_mut().zip(other.by_param) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(&t),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale(s);
        }
    }
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph that records values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<usize>, op: Op<T>) -> Var {
        let needs_grad = self.grad_enabled
            && match op {
                Op::Input => false,
                Op::Param(_) => true,
                _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
            };
        self.nodes.push(Node { value, parents, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        if p.trainable {
            self.push(p.value.clone(), Vec::new(), Op::Param(id))
        } else {
            self.push(p.value.clone(), Vec::new(), Op::Input)
        }
    }

    pub fn conv(&mut self, x: Var, w: Var, bias: Option<Var>, geo: ConvGeometry) -> Var {
        let out = conv_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), geo);
        let mut parents = vec![x.0, w.0];
        parents.extend(bias.map(|b| b.0));
        self.push(out, parents, Op::Conv { geo, has_bias: bias.is_some() })
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (y, stats) = kernels::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(y, vec![x.0, gamma.0, beta.0], Op::InstanceNorm(stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, vec![x.0], Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, vec![x.0], Op::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, vec![a.0, b.0], Op::Add)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let channels = values.iter().map(|v| v.shape()[1]).collect();
        let y = kernels::concat_channels(&values);
        self.push(y, parts.iter().map(|p| p.0).collect(), Op::Concat(channels))
    }

    pub fn upsample(&mut self, x: Var, factors: [usize; 3]) -> Var {
        let y = kernels::upsample_nearest(self.value(x), factors);
        self.push(y, vec![x.0], Op::Upsample(factors))
    }

    /// Averages the depth axis down to a single slice.
    pub fn mean_depth(&mut self, x: Var) -> Var {
        let y = kernels::mean_depth(self.value(x));
        self.push(y, vec![x.0], Op::MeanDepth)
    }

    /// Adaptive max pooling of `(H, W)`; a no-op node is avoided when the size already matches.
    pub fn adaptive_max_pool(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let s = self.shape(x);
        if s[2] == th && s[3] == tw {
            return x;
        }
        let (y, arg) = kernels::adaptive_max_pool_hw(self.value(x), th, tw);
        self.push(y, vec![x.0], Op::AdaptiveMaxPool(arg))
    }

    /// Records a scalar `value` with precomputed gradient `grad` w.r.t. `x`.
    pub fn external_scalar(&mut self, x: Var, value: T, grad: Tensor<T>) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "external gradient shape");
        self.push(Tensor::scalar(value), vec![x.0], Op::External(grad))
    }

    /// Gradients of the scalar node `loss` w.r.t. every parameter bound on this graph.
    pub fn backward(&self, loss: Var, n_params: usize) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut by_param: Vec<Option<Tensor<T>>> = vec![None; n_params];
        if !self.nodes[loss.0].needs_grad {
            return Grads { by_param };
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let parents = &node.parents;
            let pval = |i: usize| &self.nodes[parents[i]].value;
            let wants = |i: usize| self.nodes[parents[i]].needs_grad;
            let mut out: Vec<(usize, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let slot = &mut by_param[pid.0];
                    match slot {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Op::Conv { geo, has_bias } => {
                    let (dx, dw, db) = conv_backward(pval(0), pval(1), *geo, &g, wants(0));
                    if let Some(dx) = dx {
                        out.push((0, dx));
                    }
                    out.push((1, dw));
                    if *has_bias {
                        out.push((2, db));
                    }
                }
                Op::InstanceNorm(stats) => {
                    let (dx, dg, db) = kernels::instance_norm_backward(pval(0), pval(1), stats, &g);
                    out.extend([(0, dx), (1, dg), (2, db)]);
                }
                Op::Relu => {
                    let y = &node.value;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    out.push((0, dx));
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d = *d * v * (T::one() - v);
                    }
                    out.push((0, dx));
                }
                Op::Add => {
                    out.push((0, g.clone()));
                    out.push((1, g));
                }
                Op::Concat(channels) => {
                    for (i, part) in kernels::split_channels(&g, channels).into_iter().enumerate() {
                        out.push((i, part));
                    }
                }
                Op::Upsample(f) => out.push((0, kernels::upsample_nearest_backward(pval(0).shape(), *f, &g))),
                Op::MeanDepth => out.push((0, kernels::mean_depth_backward(pval(0).shape(), &g))),
                Op::AdaptiveMaxPool(arg) => out.push((0, kernels::scatter_argmax(pval(0).shape(), arg, &g))),
                Op::External(local) => {
                    let mut dx = local.clone();
                    dx.scale(g.data()[0]);
                    out.push((0, dx));
                }
            }
            for (i, gi) in out {
                let p = parents[i];
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Grads { by_param }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Builds a small network touching every operator and returns Σ r ⊙ out.
    fn tiny_net(g: &mut Graph<f64>, store: &ParamStore<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Var {
        let xi = g.input(x.clone());
        let w1 = g.param(store, ParamId(0));
        let b1 = g.param(store, ParamId(1));
        let ga = g.param(store, ParamId(2));
        let be = g.param(store, ParamId(3));
        let w2 = g.param(store, ParamId(4));
        let h = g.conv(xi, w1, Some(b1), ConvGeometry::same([3, 3, 3]).with_stride([1, 1, 2]));
        let h = g.instance_norm(h, ga, be, 1e-5);
        let h = g.relu(h);
        let p = g.mean_depth(h);
        let q = g.adaptive_max_pool(p, 2, 3);
        let u = g.upsample(q, [2, 1, 1]);
        let c = g.concat(&[u, u]);
        let s = g.conv(c, w2, None, ConvGeometry::pointwise());
        let s = g.add(s, s);
        let y = g.sigmoid(s);
        let yv = g.value(y).clone();
        let value: f64 = yv.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        g.external_scalar(y, value, r.clone())
    }

    #[test]
    fn every_operator_backpropagates_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("w1", rand_tensor([3, 2, 3, 3, 3], &mut rng));
        store.add("b1", rand_tensor([1, 3, 1, 1, 1], &mut rng));
        store.add("gamma", Tensor::from_fn([1, 3, 1, 1, 1], |_| 1.0 + rng.random_range(-0.2..0.2)));
        store.add("beta", rand_tensor([1, 3, 1, 1, 1], &mut rng));
        store.add("w2", rand_tensor([1, 6, 1, 1, 1], &mut rng));
        let x = rand_tensor([1, 2, 5, 7, 4], &mut rng);
        let r = rand_tensor([1, 1, 4, 3, 1], &mut rng);

        let mut g = Graph::new();
        let loss = tiny_net(&mut g, &store, &x, &r);
        let grads = g.backward(loss, store.len());

        let eval = |s: &ParamStore<f64>| {
            let mut g = Graph::inference();
            let l = tiny_net(&mut g, s, &x, &r);
            g.value(l).data()[0]
        };
        let h = 1e-6;
        for pid in 0..store.len() {
            let analytic = grads.get(ParamId(pid)).expect("grad present");
            for i in 0..analytic.len() {
                let mut plus = store.clone();
                plus.get_mut(ParamId(pid)).value.data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(ParamId(pid)).value.data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!((fd - a).abs() <= 1e-6 + 1e-5 * fd.abs(), "param {pid}[{i}]: fd {fd} vs {a}");
            }
        }
    }

    #[test]
    fn frozen_params_get_no_gradient_and_are_not_counted() {
        let mut store = ParamStore::<f64>::new();
        store.add("enc.w", Tensor::full([1, 1, 1, 1, 1], 2.0));
        store.add("head.w", Tensor::full([1, 1, 1, 1, 1], 3.0));
        assert_eq!(store.count_trainable(), 2);
        assert_eq!(store.freeze_prefix("enc."), 1);
        assert_eq!(store.count_trainable(), 1);

        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 1, 1, 1, 1], 1.0));
        let w0 = g.param(&store, ParamId(0));
        let w1 = g.param(&store, ParamId(1));
        let h = g.conv(x, w0, None, ConvGeometry::pointwise());
        let y = g.conv(h, w1, None, ConvGeometry::pointwise());
        let l = g.external_scalar(y, g.value(y).data()[0], Tensor::full([1, 1, 1, 1, 1], 1.0));
        let grads = g.backward(l, store.len());
        assert!(grads.get(ParamId(0)).is_none());
        assert_eq!(grads.get(ParamId(1)).unwrap().data()[0], 2.0);
    }

    #[test]
    fn inference_graph_has_no_gradients() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full([1, 1, 1, 1, 1], 2.0));
        let mut g = Graph::inference();
        let x = g.input(Tensor::full([1, 1, 1, 1, 1], 1.0));
        let w = g.param(&store, id);
        let y = g.conv(x, w, None, ConvGeometry::pointwise());
        let l = g.external_scalar(y, 2.0, Tensor::full([1, 1, 1, 1, 1], 1.0));
        assert!(g.backward(l, 1).get(id).is_none());
    }
}
