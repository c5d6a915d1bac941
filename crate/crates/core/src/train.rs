//! Losses and the two-stage training procedure.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{psnr, router_accuracy, ssim, Psnr};
use crate::net::forward::{demoe_forward, forward, GateSpec, ParamBinder, RouterWeights};
use crate::net::{init_checkpoint, replicate_experts, ArchConfig, Checkpoint, Stage};
use crate::ops::{flip_horizontal, flip_vertical};
use crate::optim::{adamw_step, cosine_anneal, AdamWConfig, OptimState};
use crate::synth::Pair;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_pixel: f64,
    pub lambda_class: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_pixel: 1.0,
            lambda_class: 0.001,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_pixel", self.lambda_pixel), ("lambda_class", self.lambda_class)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean absolute error.
pub fn pixel_loss(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("pixel loss: {} vs {}", pred.shape(), gt.shape())));
    }
    if pred.is_empty() {
        return Err(Error::shape("pixel loss of empty tensors"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

/// Cross-entropy against a hard label.
pub fn class_loss(w: &RouterWeights, label: usize) -> Result<f64> {
    let p = *w
        .as_slice()
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range for {} classes", w.len())))?;
    Ok(-(p as f64).max(crate::autodiff::PROB_FLOOR).ln())
}

pub fn combined_loss(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    w: &RouterWeights,
    label: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.lambda_pixel * pixel_loss(pred, gt)? + cfg.lambda_class * class_loss(w, label)?)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub label: usize,
}

impl From<Pair> for Sample {
    fn from(p: Pair) -> Self {
        Sample {
            degraded: p.degraded,
            clean: p.clean,
            label: p.label,
        }
    }
}

#[cfg(feature = "io")]
pub fn load_samples(manifest: &crate::synth::DatasetManifest, root: &std::path::Path) -> Result<Vec<Sample>> {
    use crate::io::read_png;
    use crate::synth::manifest::resolve;
    manifest
        .records
        .iter()
        .map(|r| {
            let degraded = read_png(resolve(root, &r.degraded))?;
            let clean = read_png(resolve(root, &r.clean))?;
            if degraded.shape() != clean.shape() {
                return Err(Error::Dataset(format!("{} and {} differ in size", r.degraded, r.clean)));
            }
            Ok(Sample {
                degraded,
                clean,
                label: r.label,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub patch: usize,
    pub batch: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub hflip: bool,
    pub vflip: bool,
    pub loss: LossConfig,
    pub optim: AdamWConfig,
    /// Std of Gaussian noise added to router logits during stage 1 (0 = off).
    pub router_noise: f64,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            arch: ArchConfig::toy(),
            patch: 32,
            batch: 8,
            epochs_stage1: 30,
            epochs_stage2: 30,
            lr0: 1e-3,
            lr_min: 1e-6,
            seed: 0,
            hflip: true,
            vflip: true,
            loss: LossConfig::default(),
            optim: AdamWConfig::default(),
            router_noise: 0.0,
        }
    }

    /// Reference values of the full-scale schedule.
    pub fn full() -> Self {
        TrainConfig {
            arch: ArchConfig::full(),
            patch: 384,
            batch: 32,
            lr_min: 1e-7,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        let stride = self.arch.stride();
        if self.patch == 0 || self.patch % stride != 0 {
            return Err(Error::invalid(format!(
                "patch size {} must be a positive multiple of {stride}",
                self.patch
            )));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr_min > 0.0) || self.lr0 < self.lr_min {
            return Err(Error::invalid(format!(
                "learning rates need lr0 >= lr_min > 0, got {} and {}",
                self.lr0, self.lr_min
            )));
        }
        if !(self.router_noise >= 0.0) {
            return Err(Error::invalid("router_noise must be >= 0"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Apply the same random flips to both members of a pair.
pub fn augment(
    degraded: &Tensor<f32>,
    clean: &Tensor<f32>,
    hflip: bool,
    vflip: bool,
    rng: &mut impl Rng,
) -> (Tensor<f32>, Tensor<f32>) {
    let (mut d, mut c) = (degraded.clone(), clean.clone());
    if hflip && rng.gen_bool(0.5) {
        d = flip_horizontal(&d);
        c = flip_horizontal(&c);
    }
    if vflip && rng.gen_bool(0.5) {
        d = flip_vertical(&d);
        c = flip_vertical(&c);
    }
    (d, c)
}

/// Random `patch`×`patch` window taken at the same place in both images.
pub fn random_crop(
    degraded: &Tensor<f32>,
    clean: &Tensor<f32>,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = degraded.shape();
    if s != clean.shape() || s.n != 1 {
        return Err(Error::shape(format!(
            "crop needs two equal single images, got {s} and {}",
            clean.shape()
        )));
    }
    if s.h < patch || s.w < patch {
        return Err(Error::shape(format!("image {s} is smaller than the {patch}px patch")));
    }
    if s.h == patch && s.w == patch {
        return Ok((degraded.clone(), clean.clone()));
    }
    let top = rng.gen_range(0..=s.h - patch);
    let left = rng.gen_range(0..=s.w - patch);
    let cut = |t: &Tensor<f32>| {
        let mut out = Vec::with_capacity(s.c * patch * patch);
        for c in 0..s.c {
            for y in top..top + patch {
                let o = t.offset(0, c, y, left);
                out.extend_from_slice(&t.data()[o..o + patch]);
            }
        }
        Tensor::from_vec([1, s.c, patch, patch], out)
    };
    Ok((cut(degraded)?, cut(clean)?))
}

/// One epoch of sample indices: every class is cycled (in shuffled order) up
/// to the size of the largest class, then everything is shuffled together.
pub fn balanced_epoch(labels: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let classes = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(target * classes);
    for members in &mut by_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        order.extend(members.iter().cycle().take(target).copied());
    }
    order.shuffle(rng);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

struct StageSpec<'a> {
    stage: Stage,
    epochs: usize,
    trainable: &'a dyn Fn(&str) -> bool,
    class_loss: bool,
    stream: u64,
}

fn check_samples(samples: &[Sample], classes: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for s in samples {
        if s.label >= classes.max(1) {
            return Err(Error::Dataset(format!("label {} outside 0..{classes}", s.label)));
        }
        seen.insert(s.label);
    }
    if classes > 0 && seen.len() != classes {
        let missing: Vec<usize> = (0..classes).filter(|c| !seen.contains(c)).collect();
        return Err(Error::Dataset(format!("no training samples for classes {missing:?}")));
    }
    Ok(())
}

fn run_stage(ckpt: &mut Checkpoint, samples: &[Sample], cfg: &TrainConfig, spec: StageSpec) -> Result<TrainLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(spec.stream);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let steps_per_epoch = balanced_epoch(&labels, &mut rng.clone()).len().div_ceil(cfg.batch);
    let total = (steps_per_epoch * spec.epochs) as u64;
    let classes = ckpt.config().router_classes;
    let mut state = OptimState::new(cfg.optim);
    let mut log = TrainLog {
        stage: spec.stage,
        epoch_loss: Vec::with_capacity(spec.epochs),
        steps: 0,
    };

    for _ in 0..spec.epochs {
        let order = balanced_epoch(&labels, &mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut deg = Vec::with_capacity(chunk.len());
            let mut cln = Vec::with_capacity(chunk.len());
            let mut lab = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let (d, c) = random_crop(&s.degraded, &s.clean, cfg.patch, &mut rng)?;
                let (d, c) = augment(&d, &c, cfg.hflip, cfg.vflip, &mut rng);
                deg.push(d);
                cln.push(c);
                lab.push(s.label);
            }
            let noise = if spec.class_loss && cfg.router_noise > 0.0 {
                Some(Tensor::randn([chunk.len(), classes, 1, 1], cfg.router_noise, &mut rng))
            } else {
                None
            };

            let (loss_value, indices, grads) = {
                let mut g = Graph::new();
                let mut p = ParamBinder::with_trainable(ckpt, spec.trainable);
                let x = g.input(Tensor::stack(&deg)?);
                let target = g.input(Tensor::stack(&cln)?);
                let noise: Option<Var> = noise.map(|n| g.input(n));
                let out = forward(&mut g, &mut p, x, GateSpec::Soft, noise)?;
                let pix = g.l1_loss(out.restored, target)?;
                let mut loss = g.scale(pix, cfg.loss.lambda_pixel)?;
                if spec.class_loss {
                    let probs = out.probs.ok_or_else(|| Error::invalid("stage 1 needs a router"))?;
                    let nll = g.nll_loss(probs, &lab)?;
                    let term = g.scale(nll, cfg.loss.lambda_class)?;
                    loss = g.add(loss, term)?;
                }
                let mut grads = g.backward(loss)?;
                let vars = p.trainable_vars(&g);
                let value = g.value(loss).data()[0] as f64;
                let indices: Vec<usize> = vars.iter().map(|(i, _)| *i).collect();
                let grads: Vec<Tensor<f32>> = vars.iter().map(|(_, v)| grads.take(*v)).collect();
                (value, indices, grads)
            };
            if !loss_value.is_finite() {
                return Err(Error::invalid(format!("training diverged at step {}", log.steps)));
            }

            let lr = cosine_anneal(cfg.lr0, cfg.lr_min, log.steps, total)?;
            let wanted: BTreeSet<usize> = indices.iter().copied().collect();
            let mut params: Vec<&mut [f32]> = ckpt
                .records_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| wanted.contains(i))
                .map(|(_, r)| &mut r.data[..])
                .collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(|t| t.data()).collect();
            adamw_step(&mut params, &grad_refs, &mut state, lr)?;

            log.steps += 1;
            epoch_sum += loss_value * chunk.len() as f64;
            epoch_n += chunk.len();
        }
        log.epoch_loss.push(epoch_sum / epoch_n as f64);
    }
    ckpt.set_stage(spec.stage);
    Ok(log)
}

/// Train encoder, single decoder path and router with the combined loss.
pub fn stage1_train(samples: &[Sample], cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let arch = cfg.arch.single_expert();
    if !arch.has_router() {
        return Err(Error::invalid(
            "stage 1 trains a router; router_classes must be positive",
        ));
    }
    check_samples(samples, arch.router_classes)?;
    let mut ckpt = init_checkpoint(&arch, cfg.seed)?;
    let log = run_stage(
        &mut ckpt,
        samples,
        cfg,
        StageSpec {
            stage: Stage::Stage1,
            epochs: cfg.epochs_stage1,
            trainable: &|_| true,
            class_loss: true,
            stream: 1,
        },
    )?;
    Ok((ckpt, log))
}

/// Parameters that move in stage 2: upsamplers, experts and the output conv.
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec") || name.starts_with("ending.")
}

/// Replicate the stage-1 decoder into every expert slot, freeze the rest and
/// finetune with the pixel loss under the full softmax gate.
pub fn stage2_finetune(stage1: &Checkpoint, samples: &[Sample], cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if stage1.stage() != Stage::Stage1 {
        return Err(Error::invalid(format!(
            "stage 2 needs a stage-1 checkpoint, got {:?}",
            stage1.stage()
        )));
    }
    let mut ckpt = stage2_init(stage1)?;
    check_samples(samples, ckpt.config().router_classes)?;
    let mut arch = *ckpt.config();
    arch.top_k = cfg.arch.top_k.min(arch.num_experts);
    ckpt.set_inference(arch.top_k, cfg.arch.fusion)?;
    let log = run_stage(
        &mut ckpt,
        samples,
        cfg,
        StageSpec {
            stage: Stage::Stage2,
            epochs: cfg.epochs_stage2,
            trainable: &is_decoder_param,
            class_loss: false,
            stream: 2,
        },
    )?;
    Ok((ckpt, log))
}

/// The untrained stage-2 network: experts replicated from stage 1.
pub fn stage2_init(stage1: &Checkpoint) -> Result<Checkpoint> {
    let n = stage1.config().router_classes;
    replicate_experts(stage1, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub router_accuracy: Option<f64>,
    pub psnr_restored: Psnr,
    pub psnr_degraded: Psnr,
    pub ssim_restored: f64,
    pub ssim_degraded: f64,
}

/// Top-`k` inference over `samples` with image and router metrics.
pub fn evaluate(ckpt: &Checkpoint, samples: &[Sample], k: usize) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let rows = crate::ops::map_samples(samples.len(), |i| -> Result<_> {
        let s = &samples[i];
        let r = demoe_forward(ckpt, &s.degraded, k, None)?;
        let pred = r.weights.first().map(|w| w.argmax());
        let restored = r.restored.map(|v| v.clamp(0.0, 1.0));
        Ok((
            pred,
            psnr(&restored, &s.clean, 1.0)?,
            psnr(&s.degraded, &s.clean, 1.0)?,
            ssim(&restored, &s.clean)?,
            ssim(&s.degraded, &s.clean)?,
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let accuracy = if ckpt.config().has_router() {
        let preds: Vec<usize> = rows.iter().map(|r| r.0.unwrap_or(usize::MAX)).collect();
        let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Some(router_accuracy(&preds, &truth)?)
    } else {
        None
    };
    let n = rows.len() as f64;
    Ok(EvalSummary {
        router_accuracy: accuracy,
        psnr_restored: Psnr::mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>())?,
        psnr_degraded: Psnr::mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>())?,
        ssim_restored: rows.iter().map(|r| r.3).sum::<f64>() / n,
        ssim_degraded: rows.iter().map(|r| r.4).sum::<f64>() / n,
    })
}
