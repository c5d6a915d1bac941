//! Analytic gradients against central finite differences in f64.

use demoe::ops::{ConvMode, ShuffleDir};
use demoe::{Graph, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Loss = sum(out * r) for a fixed random `r`, so every output element matters.
fn loss_of(build: &Build, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let rv = g.input(r.clone());
    let m = if g.value(out).len() == 1 {
        out
    } else {
        g.mul(out, rv).unwrap()
    };
    let s = g.sum(m).unwrap();
    g.value(s).data()[0]
}

/// Norm-wise relative error between analytic and numeric gradients.
fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let o = build(&mut g, &vars);
        g.value(o).shape()
    };
    let r = Tensor::rand_uniform(out_shape, -1.0, 1.0, &mut rng);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let rv = g.input(r.clone());
    let m = if g.value(out).len() == 1 {
        out
    } else {
        g.mul(out, rv).unwrap()
    };
    let loss = g.sum(m).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            numeric[i] = (loss_of(build, &plus, &r) - loss_of(build, &minus, &r)) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-8);
        if !(rel <= TOL) {
            return Err(format!("{name}: input {k} relative error {rel:e} (seed {seed})"));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

pub type Make = fn(&mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>);

pub struct Case {
    pub name: &'static str,
    pub make: Make,
}

/// Worst relative error over `INSTANCES` random instances of one case.
pub fn run_case(case: &Case) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (build, inputs) = (case.make)(&mut rng);
        worst = worst.max(check(case.name, &*build, inputs, seed)?);
    }
    Ok(worst)
}

pub fn case(name: &str) -> &'static Case {
    CASES.iter().find(|c| c.name == name).expect("known case")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.gen_range(1..3),
        rng.gen_range(1..4),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    )
}

fn bias(rng: &mut ChaCha8Rng, c: usize) -> Tensor<f64> {
    rand_t(rng, [1, c, 1, 1], -1.0, 1.0)
}

pub static CASES: &[Case] = &[
    Case {
        name: "conv pointwise",
        make: case_conv_pointwise,
    },
    Case {
        name: "conv depthwise 3x3",
        make: case_conv_depthwise_3x3,
    },
    Case {
        name: "conv down 2x2",
        make: case_conv_down_2x2,
    },
    Case {
        name: "layer norm",
        make: case_layer_norm,
    },
    Case {
        name: "simple gate",
        make: case_simple_gate,
    },
    Case {
        name: "global average pool",
        make: case_global_average_pool,
    },
    Case {
        name: "channel mul",
        make: case_channel_mul,
    },
    Case {
        name: "simplified channel attention",
        make: case_simplified_channel_attention,
    },
    Case {
        name: "gate mul",
        make: case_gate_mul,
    },
    Case {
        name: "add",
        make: case_add,
    },
    Case {
        name: "mul",
        make: case_mul,
    },
    Case {
        name: "scale",
        make: case_scale,
    },
    Case {
        name: "pixel shuffle up",
        make: case_pixel_shuffle_up,
    },
    Case {
        name: "pixel shuffle down",
        make: case_pixel_shuffle_down,
    },
    Case {
        name: "softmax",
        make: case_softmax,
    },
    Case {
        name: "sum",
        make: case_sum,
    },
    Case {
        name: "l1 loss",
        make: case_l1_loss,
    },
    Case {
        name: "nll loss",
        make: case_nll_loss,
    },
    Case {
        name: "composed conv-norm-gate-sca-l1",
        make: case_composed_conv_norm_gate_sca_l1,
    },
];

fn case_conv_pointwise(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let co = rng.gen_range(1..4);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let wt = rand_t(rng, [co, c, 1, 1], -1.0, 1.0);
    let b = rand_t(rng, [co, 1, 1, 1], -1.0, 1.0).reshape([co, 1, 1, 1]).unwrap();
    let b = Tensor::from_vec([1, co, 1, 1], b.into_data()).unwrap();
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], v[2], ConvMode::Pointwise).unwrap()),
        vec![x, wt, b],
    )
}

fn case_conv_depthwise_3x3(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let wt = rand_t(rng, [c, 1, 3, 3], -1.0, 1.0);
    let b = bias(rng, c);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], v[2], ConvMode::Depthwise3x3).unwrap()),
        vec![x, wt, b],
    )
}

fn case_conv_down_2x2(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, _, _) = dims(rng);
    let (h, w) = (2 * rng.gen_range(1..3), 2 * rng.gen_range(1..3));
    let co = rng.gen_range(1..4);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let wt = rand_t(rng, [co, c, 2, 2], -1.0, 1.0);
    let b = bias(rng, co);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], v[2], ConvMode::Down2x2).unwrap()),
        vec![x, wt, b],
    )
}

fn case_layer_norm(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, _, h, w) = dims(rng);
    let c = rng.gen_range(3..6);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let gm = rand_t(rng, [1, c, 1, 1], 0.5, 1.5);
    let bt = bias(rng, c);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()),
        vec![x, gm, bt],
    )
}

fn case_simple_gate(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let x = rand_t(rng, [n, 2 * c, h, w], -1.0, 1.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.simple_gate(v[0]).unwrap()),
        vec![x],
    )
}

fn case_global_average_pool(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.global_avg_pool(v[0]).unwrap()),
        vec![x],
    )
}

fn case_channel_mul(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let sn = if rng.gen_bool(0.5) { n } else { 1 };
    let s = rand_t(rng, [sn, c, 1, 1], -1.0, 1.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.channel_mul(v[0], v[1]).unwrap()),
        vec![x, s],
    )
}

fn case_simplified_channel_attention(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let wt = rand_t(rng, [c, c, 1, 1], -1.0, 1.0);
    let b = bias(rng, c);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sca(v[0], v[1], v[2]).unwrap()),
        vec![x, wt, b],
    )
}

fn case_gate_mul(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let e = rng.gen_range(1..6);
    let j = rng.gen_range(0..e);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let gates = rand_t(rng, [n, e, 1, 1], 0.0, 1.0);
    (
        Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.gate_mul(v[0], v[1], j).unwrap()),
        vec![x, gates],
    )
}

fn case_add(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let a = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let b = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.add(v[0], v[1]).unwrap()),
        vec![a, b],
    )
}

fn case_mul(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let a = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let b = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.mul(v[0], v[1]).unwrap()),
        vec![a, b],
    )
}

fn case_scale(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let a = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let alpha = rng.gen_range(-2.0..2.0);
    (
        Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.scale(v[0], alpha).unwrap()),
        vec![a],
    )
}

fn case_pixel_shuffle_up(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let x = rand_t(rng, [n, 4 * c, h, w], -1.0, 1.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.pixel_shuffle(v[0], ShuffleDir::Up).unwrap()),
        vec![x],
    )
}

fn case_pixel_shuffle_down(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let x = rand_t(rng, [n, c, 2 * h, 2 * w], -1.0, 1.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.pixel_shuffle(v[0], ShuffleDir::Down).unwrap()),
        vec![x],
    )
}

fn case_softmax(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let n = rng.gen_range(1..4);
    let e = rng.gen_range(1..7);
    let x = rand_t(rng, [n, e, 1, 1], -3.0, 3.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.softmax(v[0]).unwrap()),
        vec![x],
    )
}

fn case_sum(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    (Box::new(|g: &mut Graph<f64>, v: &[Var]| g.sum(v[0]).unwrap()), vec![x])
}

fn case_l1_loss(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, c, h, w) = dims(rng);
    let target = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    // keep every residual well away from the kink at zero
    let mut pred = target.clone();
    for v in pred.data_mut() {
        let d: f64 = rng.gen_range(0.05..0.5);
        *v += if rng.gen_bool(0.5) { d } else { -d };
    }
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| g.l1_loss(v[0], v[1]).unwrap()),
        vec![pred, target],
    )
}

fn case_nll_loss(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let n = rng.gen_range(1..4);
    let e = rng.gen_range(2..6);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..e)).collect();
    let p = rand_t(rng, [n, e, 1, 1], 0.05, 1.0);
    (
        Box::new(move |g: &mut Graph<f64>, v: &[Var]| g.nll_loss(v[0], &labels).unwrap()),
        vec![p],
    )
}

fn case_composed_conv_norm_gate_sca_l1(rng: &mut ChaCha8Rng) -> (Box<Build>, Vec<Tensor<f64>>) {
    let (n, _, h, w) = dims(rng);
    let c = rng.gen_range(1..3);
    let x = rand_t(rng, [n, c, h, w], -1.0, 1.0);
    let w1 = rand_t(rng, [4 * c, c, 1, 1], -1.0, 1.0);
    let b1 = bias(rng, 4 * c);
    let gm = rand_t(rng, [1, 4 * c, 1, 1], 0.5, 1.5);
    let bt = bias(rng, 4 * c);
    let ws = rand_t(rng, [2 * c, 2 * c, 1, 1], -1.0, 1.0);
    let bs = bias(rng, 2 * c);
    let target = rand_t(rng, [n, 2 * c, h, w], 5.0, 6.0);
    (
        Box::new(|g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], v[2], ConvMode::Pointwise).unwrap();
            let y = g.layer_norm(y, v[3], v[4], 1e-6).unwrap();
            let y = g.simple_gate(y).unwrap();
            let y = g.sca(y, v[5], v[6]).unwrap();
            g.l1_loss(y, v[7]).unwrap()
        }),
        vec![x, w1, b1, gm, bt, ws, bs, target],
    )
}
