//! Forward pass: encoder, router, middle blocks and the mixture-of-experts
//! decoder, all recorded on an autodiff [`Graph`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::FusionMode;
use super::layout::{block_name, expert_name};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{ConvMode, ShuffleDir};
use crate::tensor::{Shape, Tensor};

pub const NORM_EPS: f64 = 1e-6;

/// Gate vector produced by the router: non-negative, sums to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterWeights(Vec<f32>);

impl RouterWeights {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(w: Vec<f32>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::invalid("router weights cannot be empty"));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!(
                "router weights must be finite and non-negative: {w:?}"
            )));
        }
        let s: f64 = w.iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::invalid(format!("router weights sum to {s}, not 1")));
        }
        Ok(RouterWeights(w))
    }

    pub fn uniform(n: usize) -> Self {
        RouterWeights(vec![1.0 / n as f32; n])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Auto,
    Manual,
}

/// Experts evaluated by a MoE block and their (renormalized) weights.
/// Indices are kept in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSelection {
    pub mode: SelectionMode,
    pub indices: Vec<usize>,
    pub weights: Vec<f32>,
}

impl ExpertSelection {
    /// The `k` largest router weights, renormalized over the selected mass.
    pub fn top_k(w: &RouterWeights, k: usize) -> Result<Self> {
        let n = w.len();
        if k == 0 || k > n {
            return Err(Error::invalid(format!("top-k needs 1 <= k <= {n}, got {k}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| w.0[b].total_cmp(&w.0[a]).then(a.cmp(&b)));
        let mut indices = order[..k].to_vec();
        indices.sort_unstable();
        let mass: f64 = indices.iter().map(|&i| w.0[i] as f64).sum();
        let weights = if mass > 0.0 {
            indices.iter().map(|&i| (w.0[i] as f64 / mass) as f32).collect()
        } else {
            vec![(1.0 / k as f64) as f32; k]
        };
        Ok(ExpertSelection {
            mode: SelectionMode::Auto,
            indices,
            weights,
        })
    }

    /// User-forced single expert with weight one.
    pub fn manual(expert: usize, num_experts: usize) -> Result<Self> {
        if expert >= num_experts {
            return Err(Error::invalid(format!(
                "expert override {expert} out of range for {num_experts} experts"
            )));
        }
        Ok(ExpertSelection {
            mode: SelectionMode::Manual,
            indices: vec![expert],
            weights: vec![1.0],
        })
    }

    /// Dense gate row of length `n` (zeros outside the selection).
    pub fn dense(&self, n: usize) -> Vec<f32> {
        let mut row = vec![0.0; n];
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            row[i] = w;
        }
        row
    }
}

/// How the decoder gates its experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSpec {
    /// Full softmax gate, every expert active (training).
    Soft,
    /// Per-sample top-k over the router weights.
    TopK(usize),
    /// Forced single expert.
    Manual(usize),
}

/// Binds checkpoint parameters to graph leaves, each at most once per graph.
pub struct ParamBinder<'c> {
    ckpt: &'c Checkpoint,
    vars: HashMap<usize, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'c>,
}

impl<'c> ParamBinder<'c> {
    /// Every parameter enters the graph as a constant.
    pub fn frozen(ckpt: &'c Checkpoint) -> Self {
        Self::with_trainable(ckpt, |_| false)
    }

    pub fn with_trainable(ckpt: &'c Checkpoint, trainable: impl Fn(&str) -> bool + 'c) -> Self {
        ParamBinder {
            ckpt,
            vars: HashMap::new(),
            trainable: Box::new(trainable),
        }
    }

    pub fn checkpoint(&self) -> &'c Checkpoint {
        self.ckpt
    }

    pub fn bind(&mut self, g: &mut Graph<f32>, name: &str) -> Result<Var> {
        let idx = self
            .ckpt
            .position(name)
            .ok_or_else(|| Error::MalformedRecord(format!("missing parameter {name}")))?;
        if let Some(&v) = self.vars.get(&idx) {
            return Ok(v);
        }
        let t = self.ckpt.records()[idx].tensor();
        let v = if (self.trainable)(name) { g.param(t) } else { g.input(t) };
        self.vars.insert(idx, v);
        Ok(v)
    }

    /// Bound trainable parameters as (record index, variable), in record order.
    pub fn trainable_vars(&self, g: &Graph<f32>) -> Vec<(usize, Var)> {
        let mut out: Vec<(usize, Var)> = self
            .vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(&i, &v)| (i, v))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }

    fn conv(&mut self, g: &mut Graph<f32>, prefix: &str, x: Var, mode: ConvMode) -> Result<Var> {
        let w = self.bind(g, &format!("{prefix}.weight"))?;
        let b = self.bind(g, &format!("{prefix}.bias"))?;
        g.conv2d(x, w, b, mode)
    }
}

/// One residual block: channel attention branch then feed-forward branch,
/// each added back through a learnable per-channel scale.
pub fn naf_block(g: &mut Graph<f32>, p: &mut ParamBinder, prefix: &str, inp: Var) -> Result<Var> {
    let g1 = p.bind(g, &format!("{prefix}.norm1.gamma"))?;
    let b1 = p.bind(g, &format!("{prefix}.norm1.beta"))?;
    let mut x = g.layer_norm(inp, g1, b1, NORM_EPS)?;
    x = p.conv(g, &format!("{prefix}.conv1"), x, ConvMode::Pointwise)?;
    x = p.conv(g, &format!("{prefix}.conv2"), x, ConvMode::Depthwise3x3)?;
    x = g.simple_gate(x)?;
    let sw = p.bind(g, &format!("{prefix}.sca.weight"))?;
    let sb = p.bind(g, &format!("{prefix}.sca.bias"))?;
    x = g.sca(x, sw, sb)?;
    x = p.conv(g, &format!("{prefix}.conv3"), x, ConvMode::Pointwise)?;
    let beta = p.bind(g, &format!("{prefix}.beta"))?;
    x = g.channel_mul(x, beta)?;
    let y = g.add(inp, x)?;

    let g2 = p.bind(g, &format!("{prefix}.norm2.gamma"))?;
    let b2 = p.bind(g, &format!("{prefix}.norm2.beta"))?;
    let mut x = g.layer_norm(y, g2, b2, NORM_EPS)?;
    x = p.conv(g, &format!("{prefix}.conv4"), x, ConvMode::Pointwise)?;
    x = g.simple_gate(x)?;
    x = p.conv(g, &format!("{prefix}.conv5"), x, ConvMode::Pointwise)?;
    let gamma = p.bind(g, &format!("{prefix}.gamma"))?;
    x = g.channel_mul(x, gamma)?;
    g.add(y, x)
}

/// Gated combination of expert blocks. `gates` is (N, E, 1, 1); only the
/// listed experts are evaluated, in the given order.
pub fn moe_block(
    g: &mut Graph<f32>,
    p: &mut ParamBinder,
    level: usize,
    block: usize,
    h: Var,
    gates: Var,
    experts: &[usize],
    fusion: FusionMode,
) -> Result<Var> {
    if experts.is_empty() {
        return Err(Error::invalid("MoE block needs at least one selected expert"));
    }
    let mut acc: Option<Var> = None;
    for &e in experts {
        let out = naf_block(g, p, &expert_name(level, block, e), h)?;
        let scaled = g.gate_mul(out, gates, e)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    let acc = acc.expect("non-empty");
    match fusion {
        FusionMode::WeightedSum => Ok(acc),
        FusionMode::AdditionResidual => g.add(h, acc),
        FusionMode::AttentionConnection => g.mul(h, acc),
    }
}

pub struct EncoderOut {
    pub skips: Vec<Var>,
    pub deep: Var,
}

pub fn encoder(g: &mut Graph<f32>, p: &mut ParamBinder, input: Var) -> Result<EncoderOut> {
    let cfg = *p.checkpoint().config();
    let s = g.value(input).shape();
    check_input(s, cfg.stride())?;
    let mut x = p.conv(g, "intro", input, ConvMode::Pointwise)?;
    let mut skips = Vec::with_capacity(cfg.num_levels);
    for l in 0..cfg.num_levels {
        for k in 0..cfg.enc_blocks {
            x = naf_block(g, p, &block_name("enc", Some(l), k), x)?;
        }
        skips.push(x);
        x = p.conv(g, &format!("enc{l}.down"), x, ConvMode::Down2x2)?;
    }
    Ok(EncoderOut { skips, deep: x })
}

/// Router head on the deepest encoder feature. Returns the softmax
/// probabilities, shape (N, classes, 1, 1). `logit_noise`, when given, is
/// added to the logits before the softmax.
pub fn router(g: &mut Graph<f32>, p: &mut ParamBinder, deep: Var, logit_noise: Option<Var>) -> Result<Var> {
    if !p.checkpoint().config().has_router() {
        return Err(Error::invalid("checkpoint has no router"));
    }
    let ng = p.bind(g, "router.norm.gamma")?;
    let nb = p.bind(g, "router.norm.beta")?;
    let mut x = g.layer_norm(deep, ng, nb, NORM_EPS)?;
    let sw = p.bind(g, "router.sca.weight")?;
    let sb = p.bind(g, "router.sca.bias")?;
    x = g.sca(x, sw, sb)?;
    x = g.global_avg_pool(x)?;
    x = p.conv(g, "router.fc1", x, ConvMode::Pointwise)?;
    x = g.simple_gate(x)?;
    let mut logits = p.conv(g, "router.fc2", x, ConvMode::Pointwise)?;
    if let Some(noise) = logit_noise {
        logits = g.add(logits, noise)?;
    }
    g.softmax(logits)
}

fn check_input(s: Shape, stride: usize) -> Result<()> {
    if s.c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image batch, got {s}")));
    }
    if s.h == 0 || s.w == 0 || s.h % stride != 0 || s.w % stride != 0 {
        return Err(Error::shape(format!(
            "spatial extents of {s} must be positive multiples of {stride}"
        )));
    }
    Ok(())
}

pub struct ForwardOut {
    pub restored: Var,
    /// Router probabilities, when the network has a router.
    pub probs: Option<Var>,
    /// Per-sample selection actually applied by the decoder.
    pub selections: Vec<ExpertSelection>,
}

/// Full network: `restored = y + ending(decoder(middle(encoder(y))))`.
pub fn forward(
    g: &mut Graph<f32>,
    p: &mut ParamBinder,
    input: Var,
    gate: GateSpec,
    logit_noise: Option<Var>,
) -> Result<ForwardOut> {
    let cfg = *p.checkpoint().config();
    let batch = g.value(input).shape().n;
    let enc = encoder(g, p, input)?;
    let probs = if cfg.has_router() {
        Some(router(g, p, enc.deep, logit_noise)?)
    } else {
        None
    };

    let e = cfg.num_experts;
    let (gates, experts, selections) = if e == 1 {
        match gate {
            GateSpec::Soft | GateSpec::TopK(1) | GateSpec::Manual(0) => {}
            other => return Err(Error::invalid(format!("single-expert network cannot apply {other:?}"))),
        }
        let sel = ExpertSelection {
            mode: match gate {
                GateSpec::Manual(_) => SelectionMode::Manual,
                _ => SelectionMode::Auto,
            },
            indices: vec![0],
            weights: vec![1.0],
        };
        let gates = g.input(Tensor::full([batch, 1, 1, 1], 1.0));
        (gates, vec![0], vec![sel; batch])
    } else {
        let probs = probs.expect("validated: experts imply a router");
        match gate {
            GateSpec::Soft => {
                let sels = router_weights(g.value(probs))?
                    .into_iter()
                    .map(|w| ExpertSelection {
                        mode: SelectionMode::Auto,
                        indices: (0..e).collect(),
                        weights: w.0,
                    })
                    .collect();
                (probs, (0..e).collect(), sels)
            }
            GateSpec::TopK(_) | GateSpec::Manual(_) => {
                let sels = router_weights(g.value(probs))?
                    .iter()
                    .map(|w| match gate {
                        GateSpec::TopK(k) => ExpertSelection::top_k(w, k),
                        GateSpec::Manual(j) => ExpertSelection::manual(j, e),
                        GateSpec::Soft => unreachable!(),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut dense = Vec::with_capacity(batch * e);
                let mut used = vec![false; e];
                for s in &sels {
                    dense.extend(s.dense(e));
                    for &i in &s.indices {
                        used[i] = true;
                    }
                }
                let gates = g.input(Tensor::from_vec([batch, e, 1, 1], dense)?);
                let experts = (0..e).filter(|&i| used[i]).collect();
                (gates, experts, sels)
            }
        }
    };

    let mut x = enc.deep;
    for k in 0..cfg.mid_blocks {
        x = naf_block(g, p, &block_name("mid", None, k), x)?;
    }
    for l in (0..cfg.num_levels).rev() {
        x = p.conv(g, &format!("dec{l}.up"), x, ConvMode::Pointwise)?;
        x = g.pixel_shuffle(x, ShuffleDir::Up)?;
        x = g.add(x, enc.skips[l])?;
        for k in 0..cfg.dec_blocks {
            x = moe_block(g, p, l, k, x, gates, &experts, cfg.fusion)?;
        }
    }
    x = p.conv(g, "ending", x, ConvMode::Pointwise)?;
    let restored = g.add(x, input)?;
    Ok(ForwardOut {
        restored,
        probs,
        selections,
    })
}

/// Split an (N, E, 1, 1) probability tensor into per-sample weight vectors.
pub fn router_weights(probs: &Tensor<f32>) -> Result<Vec<RouterWeights>> {
    let e = probs.shape().c.max(1);
    probs
        .data()
        .chunks(e)
        .map(|row| RouterWeights::new(row.to_vec()))
        .collect()
}

/// Evaluate one named residual block on a tensor.
pub fn naf_block_forward(ckpt: &Checkpoint, prefix: &str, h: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let mut p = ParamBinder::frozen(ckpt);
    let x = g.input(h.clone());
    let out = naf_block(&mut g, &mut p, prefix, x)?;
    Ok(g.value(out).clone())
}

/// Evaluate MoE block `block` of decoder level `level` with a fixed selection.
pub fn moe_block_forward(
    ckpt: &Checkpoint,
    level: usize,
    block: usize,
    h: &Tensor<f32>,
    sel: &ExpertSelection,
) -> Result<Tensor<f32>> {
    let e = ckpt.config().num_experts;
    if sel.indices.is_empty() {
        return Err(Error::invalid("empty expert selection"));
    }
    if let Some(&bad) = sel.indices.iter().find(|&&i| i >= e) {
        return Err(Error::invalid(format!("expert {bad} out of range for {e} experts")));
    }
    let n = h.shape().n;
    let row = sel.dense(e);
    let dense: Vec<f32> = (0..n).flat_map(|_| row.iter().copied()).collect();
    let mut g = Graph::new();
    let mut p = ParamBinder::frozen(ckpt);
    let x = g.input(h.clone());
    let gates = g.input(Tensor::from_vec([n, e, 1, 1], dense)?);
    let out = moe_block(
        &mut g,
        &mut p,
        level,
        block,
        x,
        gates,
        &sel.indices,
        ckpt.config().fusion,
    )?;
    Ok(g.value(out).clone())
}

/// Encoder features: per-level skip tensors and the deepest feature.
pub fn encoder_forward(ckpt: &Checkpoint, y: &Tensor<f32>) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
    let mut g = Graph::new();
    let mut p = ParamBinder::frozen(ckpt);
    let x = g.input(y.clone());
    let out = encoder(&mut g, &mut p, x)?;
    Ok((
        out.skips.iter().map(|&v| g.value(v).clone()).collect(),
        g.value(out.deep).clone(),
    ))
}

/// Router weights for every sample of a deepest-feature batch.
pub fn router_forward(ckpt: &Checkpoint, deep: &Tensor<f32>) -> Result<Vec<RouterWeights>> {
    let cfg = ckpt.config();
    let s = deep.shape();
    if s.c != cfg.deep_width() {
        return Err(Error::shape(format!(
            "router expects {} channels, got {s}",
            cfg.deep_width()
        )));
    }
    let mut g = Graph::new();
    let mut p = ParamBinder::frozen(ckpt);
    let x = g.input(deep.clone());
    let probs = router(&mut g, &mut p, x, None)?;
    router_weights(g.value(probs))
}

/// Result of an inference pass over a batch.
#[derive(Clone, Debug)]
pub struct Restoration {
    pub restored: Tensor<f32>,
    /// Router output per sample; empty for router-less baselines.
    pub weights: Vec<RouterWeights>,
    pub selections: Vec<ExpertSelection>,
}

/// Inference: top-`k` gating, or a forced expert when `override_expert` is
/// set. Samples run one at a time so each gets its own selection.
pub fn demoe_forward(
    ckpt: &Checkpoint,
    y: &Tensor<f32>,
    k: usize,
    override_expert: Option<usize>,
) -> Result<Restoration> {
    let e = ckpt.config().num_experts;
    if let Some(j) = override_expert {
        if j >= e {
            return Err(Error::invalid(format!(
                "expert override {j} out of range for {e} experts"
            )));
        }
    }
    if k == 0 || k > e {
        return Err(Error::invalid(format!("k must be in 1..={e}, got {k}")));
    }
    let gate = match override_expert {
        Some(j) => GateSpec::Manual(j),
        None => GateSpec::TopK(k),
    };
    let n = y.shape().n;
    let mut restored = Vec::with_capacity(n);
    let mut weights = Vec::new();
    let mut selections = Vec::with_capacity(n);
    for i in 0..n {
        let mut g = Graph::new();
        let mut p = ParamBinder::frozen(ckpt);
        let x = g.input(y.slice_batch(i, 1)?);
        let out = forward(&mut g, &mut p, x, gate, None)?;
        restored.push(g.value(out.restored).clone());
        if let Some(pv) = out.probs {
            weights.extend(router_weights(g.value(pv))?);
        }
        selections.extend(out.selections);
    }
    Ok(Restoration {
        restored: Tensor::stack(&restored)?,
        weights,
        selections,
    })
}

/// Batched forward with the full softmax gate (every expert active).
pub fn soft_forward(ckpt: &Checkpoint, y: &Tensor<f32>) -> Result<Restoration> {
    let mut g = Graph::new();
    let mut p = ParamBinder::frozen(ckpt);
    let x = g.input(y.clone());
    let out = forward(&mut g, &mut p, x, GateSpec::Soft, None)?;
    let weights = match out.probs {
        Some(pv) => router_weights(g.value(pv))?,
        None => Vec::new(),
    };
    Ok(Restoration {
        restored: g.value(out.restored).clone(),
        weights,
        selections: out.selections,
    })
}
