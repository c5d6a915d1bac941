//! Analytic parameter and multiply-accumulate accounting.
//!
//! Only convolutions and the router MLP are counted; normalization,
//! gating and residual additions are elementwise and left out.

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ArchConfig;
use super::layout::{block_name, expert_name};
use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Where a layer sits, for the active/router split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Trunk,
    Router,
    Expert(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub part: Part,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub params: u64,
    /// Parameters touched by a top-k forward pass.
    pub active_params: u64,
    /// MACs of a top-k forward pass over the whole input batch.
    pub macs: u64,
    pub router_params: u64,
    pub router_macs: u64,
}

pub fn pointwise_macs(h: usize, w: usize, cin: usize, cout: usize) -> u64 {
    (h * w * cin * cout) as u64
}

pub fn depthwise_macs(c: usize, h: usize, w: usize) -> u64 {
    (9 * c * h * w) as u64
}

struct Walker {
    layers: Vec<LayerCost>,
    part: Part,
}

impl Walker {
    fn add(&mut self, name: String, params: usize, macs: u64) {
        self.layers.push(LayerCost {
            name,
            part: self.part,
            params: params as u64,
            macs,
        });
    }

    fn pointwise(&mut self, name: &str, cin: usize, cout: usize, h: usize, w: usize) {
        self.add(name.to_owned(), cin * cout + cout, pointwise_macs(h, w, cin, cout));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.add(name.to_owned(), 2 * c, 0);
    }

    fn naf_block(&mut self, p: &str, c: usize, h: usize, w: usize) {
        self.norm(&format!("{p}.norm1"), c);
        self.pointwise(&format!("{p}.conv1"), c, 2 * c, h, w);
        self.add(format!("{p}.conv2"), 2 * c * 9 + 2 * c, depthwise_macs(2 * c, h, w));
        // attention weights act on the pooled 1x1 vector
        self.pointwise(&format!("{p}.sca"), c, c, 1, 1);
        self.pointwise(&format!("{p}.conv3"), c, c, h, w);
        self.norm(&format!("{p}.norm2"), c);
        self.pointwise(&format!("{p}.conv4"), c, 2 * c, h, w);
        self.pointwise(&format!("{p}.conv5"), c, c, h, w);
        self.add(format!("{p}.scales"), 2 * c, 0);
    }
}

/// Per-layer costs of one image of `h`×`w` pixels, in forward order.
pub fn layer_costs(cfg: &ArchConfig, h: usize, w: usize) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    let stride = cfg.stride();
    if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!(
            "spatial extents {h}x{w} must be positive multiples of {stride}"
        )));
    }
    let mut wk = Walker {
        layers: Vec::new(),
        part: Part::Trunk,
    };
    wk.pointwise("intro", 3, cfg.base_width, h, w);
    let (mut hh, mut ww) = (h, w);
    for l in 0..cfg.num_levels {
        let c = cfg.width(l);
        for k in 0..cfg.enc_blocks {
            wk.naf_block(&block_name("enc", Some(l), k), c, hh, ww);
        }
        hh /= 2;
        ww /= 2;
        // 2x2 stride-2: every output pixel reads 4 inputs per channel
        wk.add(
            format!("enc{l}.down"),
            2 * c * c * 4 + 2 * c,
            pointwise_macs(hh, ww, 4 * c, 2 * c),
        );
    }
    let deep = cfg.deep_width();
    if cfg.has_router() {
        wk.part = Part::Router;
        wk.norm("router.norm", deep);
        wk.pointwise("router.sca", deep, deep, 1, 1);
        wk.pointwise("router.fc1", deep, deep, 1, 1);
        wk.pointwise("router.fc2", deep / 2, cfg.router_classes, 1, 1);
        wk.part = Part::Trunk;
    }
    for k in 0..cfg.mid_blocks {
        wk.naf_block(&block_name("mid", None, k), deep, hh, ww);
    }
    for l in (0..cfg.num_levels).rev() {
        let c = cfg.width(l);
        wk.pointwise(&format!("dec{l}.up"), 2 * c, 4 * c, hh, ww);
        hh *= 2;
        ww *= 2;
        for k in 0..cfg.dec_blocks {
            for e in 0..cfg.num_experts {
                wk.part = Part::Expert(e);
                wk.naf_block(&expert_name(l, k, e), c, hh, ww);
            }
            wk.part = Part::Trunk;
        }
    }
    wk.pointwise("ending", cfg.base_width, 3, hh, ww);
    Ok(wk.layers)
}

/// Totals for a batch of `input_shape` with `k` experts active per MoE block.
pub fn count_params_macs(ckpt: &Checkpoint, input_shape: Shape, k: usize) -> Result<CostSummary> {
    count_for_config(ckpt.config(), input_shape, k)
}

pub fn count_for_config(cfg: &ArchConfig, input_shape: Shape, k: usize) -> Result<CostSummary> {
    if k == 0 || k > cfg.num_experts {
        return Err(Error::invalid(format!("k must be in 1..={}, got {k}", cfg.num_experts)));
    }
    if input_shape.c != 3 {
        return Err(Error::shape(format!("expected 3 input channels, got {input_shape}")));
    }
    let n = input_shape.n as u64;
    let mut s = CostSummary::default();
    for l in layer_costs(cfg, input_shape.h, input_shape.w)? {
        s.params += l.params;
        // which k experts run is input dependent, but all slots cost the same
        let active = match l.part {
            Part::Expert(e) => e < k,
            _ => true,
        };
        if active {
            s.active_params += l.params;
            s.macs += l.macs * n;
        }
        if l.part == Part::Router {
            s.router_params += l.params;
            s.router_macs += l.macs * n;
        }
    }
    Ok(s)
}
