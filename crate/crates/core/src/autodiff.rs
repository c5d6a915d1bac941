//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward pass needs. Parents always precede children, so the backward
//! pass is a single reverse sweep over the node list.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, ConvMode, NormStats, ShuffleDir};
use crate::tensor::{ensure_same, Real, Shape, Tensor};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        mode: ConvMode,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    SimpleGate {
        x: Var,
    },
    Pool {
        x: Var,
    },
    ChannelMul {
        x: Var,
        s: Var,
    },
    GateMul {
        x: Var,
        gates: Var,
        expert: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        alpha: T,
    },
    Shuffle {
        x: Var,
        dir: ShuffleDir,
    },
    Softmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    L1 {
        pred: Var,
        target: Var,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Clamp applied to probabilities before taking logs in the NLL loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
pub struct Graph<T = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} does not belong to this tape")));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.index]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    /// Tracked parameter; receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("foreign variable")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, mode: ConvMode) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let out = ops::conv2d(&self.node(x).value, &self.node(w).value, &self.node(b).value, mode)?;
        Ok(self.push(out, Op::Conv { x, w, b, mode }, &[x, w, b]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let (out, stats) = ops::layer_norm_channels(
            &self.node(x).value,
            &self.node(gamma).value,
            &self.node(beta).value,
            eps,
        )?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn simple_gate(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = ops::simple_gate(&self.node(x).value)?;
        Ok(self.push(out, Op::SimpleGate { x }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = ops::global_avg_pool(&self.node(x).value);
        Ok(self.push(out, Op::Pool { x }, &[x]))
    }

    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        let out = ops::channel_mul(&self.node(x).value, &self.node(s).value)?;
        Ok(self.push(out, Op::ChannelMul { x, s }, &[x, s]))
    }

    /// Simplified channel attention: `x * pointwise(pool(x))` per channel.
    pub fn sca(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let c = self.value(x).shape().c;
        let ws = self.value(w).shape();
        if ws.n != c || ws.c != c {
            return Err(Error::shape(format!(
                "channel attention: weight {ws} does not map {c} channels to {c}"
            )));
        }
        let pooled = self.global_avg_pool(x)?;
        let scale = self.conv2d(pooled, w, b, ConvMode::Pointwise)?;
        self.channel_mul(x, scale)
    }

    /// Scale sample `n` of `x` by `gates[n, expert]`; `gates` is (N, E, 1, 1).
    pub fn gate_mul(&mut self, x: Var, gates: Var, expert: usize) -> Result<Var> {
        self.check(x)?;
        self.check(gates)?;
        let (xs, gs) = (self.node(x).value.shape(), self.node(gates).value.shape());
        if gs.n != xs.n || gs.h != 1 || gs.w != 1 || expert >= gs.c {
            return Err(Error::shape(format!(
                "gate_mul: gates {gs} incompatible with input {xs} and expert {expert}"
            )));
        }
        let gv = &self.node(gates).value;
        let mut out = self.node(x).value.clone();
        let sample = xs.sample();
        for (n, chunk) in out.data_mut().chunks_mut(sample.max(1)).enumerate() {
            let g = gv.data()[n * gs.c + expert];
            chunk.iter_mut().for_each(|v| *v = *v * g);
        }
        Ok(self.push(out, Op::GateMul { x, gates, expert }, &[x, gates]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::elementwise(&self.node(a).value, &self.node(b).value, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::elementwise(&self.node(a).value, &self.node(b).value, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.check(x)?;
        let alpha = T::of(alpha);
        let out = self.node(x).value.map(|v| v * alpha);
        Ok(self.push(out, Op::Scale { x, alpha }, &[x]))
    }

    pub fn pixel_shuffle(&mut self, x: Var, dir: ShuffleDir) -> Result<Var> {
        self.check(x)?;
        let out = ops::pixel_shuffle(&self.node(x).value, dir, 2)?;
        Ok(self.push(out, Op::Shuffle { x, dir }, &[x]))
    }

    /// Softmax across the channel axis of an (N, E, 1, 1) tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.node(x).value.shape();
        if xs.h != 1 || xs.w != 1 {
            return Err(Error::shape(format!("softmax expects (N, E, 1, 1), got {xs}")));
        }
        let mut data = Vec::with_capacity(xs.numel());
        for row in self.node(x).value.data().chunks(xs.c.max(1)) {
            data.extend(ops::softmax(row)?);
        }
        let out = Tensor::from_vec(xs, data)?;
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = ops::sum_slice(self.node(x).value.data());
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    /// Mean absolute error over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check(pred)?;
        self.check(target)?;
        let (p, t) = (&self.node(pred).value, &self.node(target).value);
        ensure_same(p.shape(), t.shape(), "l1 loss")?;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .sum();
        let v = T::of(total / p.len().max(1) as f64);
        Ok(self.push(Tensor::scalar(v), Op::L1 { pred, target }, &[pred, target]))
    }

    /// Mean over the batch of `-ln(max(p[n, label_n], floor))`.
    pub fn nll_loss(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        self.check(probs)?;
        let ps = self.node(probs).value.shape();
        if ps.h != 1 || ps.w != 1 || ps.n != labels.len() {
            return Err(Error::shape(format!(
                "nll loss: probabilities {ps} do not match {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= ps.c) {
            return Err(Error::invalid(format!("label {bad} out of range for {} classes", ps.c)));
        }
        let p = self.node(probs).value.data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &l)| -(p[n * ps.c + l].as_f64().max(PROB_FLOOR)).ln())
            .sum();
        let v = T::of(total / labels.len().max(1) as f64);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), T::one()));

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            for (p, pg) in contributions {
                if !self.nodes[p.index].requires_grad {
                    continue;
                }
                match &mut grads[p.index] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
            graph: self.id,
        })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.index].value;
        let needs = |v: Var| self.nodes[v.index].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, mode } => {
                let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), g, *mode)?;
                let db = db.reshape(val(*b).shape())?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) = ops::layer_norm_backward(val(*x), val(*gamma), stats, g)?;
                vec![(*x, dx), (*gamma, dg), (*beta, db.reshape(val(*beta).shape())?)]
            }
            Op::SimpleGate { x } => vec![(*x, ops::simple_gate_backward(val(*x), g))],
            Op::Pool { x } => vec![(*x, ops::global_avg_pool_backward(val(*x).shape(), g))],
            Op::ChannelMul { x, s } => {
                let (dx, ds) = ops::channel_mul_backward(val(*x), val(*s), g);
                vec![(*x, dx), (*s, ds)]
            }
            Op::GateMul { x, gates, expert } => {
                let xv = val(*x);
                let gv = val(*gates);
                let gs = gv.shape();
                let sample = xv.shape().sample().max(1);
                let mut out = Vec::with_capacity(2);
                if needs(*x) {
                    let mut dx = g.clone();
                    for (n, chunk) in dx.data_mut().chunks_mut(sample).enumerate() {
                        let f = gv.data()[n * gs.c + expert];
                        chunk.iter_mut().for_each(|v| *v = *v * f);
                    }
                    out.push((*x, dx));
                }
                if needs(*gates) {
                    let mut dg = Tensor::zeros(gs);
                    for n in 0..gs.n {
                        let xs = &xv.data()[n * sample..(n + 1) * sample];
                        let gsmp = &g.data()[n * sample..(n + 1) * sample];
                        dg.data_mut()[n * gs.c + expert] = ops::dot(gsmp, xs);
                    }
                    out.push((*gates, dg));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let da = ops::elementwise(g, val(*b), "mul backward", |x, y| x * y)?;
                let db = ops::elementwise(g, val(*a), "mul backward", |x, y| x * y)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, alpha } => vec![(*x, g.map(|v| v * *alpha))],
            Op::Shuffle { x, dir } => {
                let inverse = match dir {
                    ShuffleDir::Up => ShuffleDir::Down,
                    ShuffleDir::Down => ShuffleDir::Up,
                };
                vec![(*x, ops::pixel_shuffle(g, inverse, 2)?)]
            }
            Op::Softmax { x } => {
                let p = &node.value;
                let e = p.shape().c.max(1);
                let mut dx = Tensor::zeros(p.shape());
                for ((dr, pr), gr) in dx
                    .data_mut()
                    .chunks_mut(e)
                    .zip(p.data().chunks(e))
                    .zip(g.data().chunks(e))
                {
                    let s: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..pr.len() {
                        dr[k] = pr[k] * (gr[k] - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::L1 { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let k = g.data()[0] / T::of(p.len().max(1) as f64);
                let dp = ops::elementwise(p, t, "l1 backward", |a, b| {
                    if a > b {
                        k
                    } else if a < b {
                        -k
                    } else {
                        T::zero()
                    }
                })?;
                let dt = dp.map(|v| -v);
                vec![(*pred, dp), (*target, dt)]
            }
            Op::Nll { probs, labels } => {
                let p = val(*probs);
                let c = p.shape().c;
                let k = g.data()[0] / T::of(labels.len().max(1) as f64);
                let mut dp = Tensor::zeros(p.shape());
                for (n, &l) in labels.iter().enumerate() {
                    let pv = p.data()[n * c + l];
                    if pv.as_f64() > PROB_FLOOR {
                        dp.data_mut()[n * c + l] = -k / pv;
                    }
                }
                vec![(*probs, dp)]
            }
        })
    }
}

/// Result of a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    graph: u32,
    shapes: Vec<Shape>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        assert_eq!(v.graph, self.graph, "variable from another tape");
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.index]),
        }
    }

    /// Move the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        assert_eq!(v.graph, self.graph, "variable from another tape");
        self.grads[v.index]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index]))
    }
}
