//! Canonical parameter layout, initialization and expert surgery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, ParamRecord, Stage, Taxonomy};
use super::config::ArchConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    taxonomy: Taxonomy,
    dims: Vec<usize>,
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn push(&mut self, name: String, taxonomy: Taxonomy, dims: Vec<usize>, init: Init) {
        self.specs.push(Spec {
            name,
            taxonomy,
            dims,
            init,
        });
    }

    /// Weight plus zero bias. `k` is the kernel size, `groups_in` the input
    /// channels seen by each output (1 for depthwise).
    fn conv(&mut self, prefix: &str, cout: usize, groups_in: usize, k: usize, taxonomy: Taxonomy) {
        let bound = 1.0 / ((groups_in * k * k) as f64).sqrt();
        self.push(
            format!("{prefix}.weight"),
            taxonomy,
            vec![cout, groups_in, k, k],
            Init::Uniform(bound),
        );
        self.push(format!("{prefix}.bias"), Taxonomy::Other, vec![cout], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), Taxonomy::LayerNorm, vec![c], Init::Ones);
        self.push(format!("{prefix}.beta"), Taxonomy::LayerNorm, vec![c], Init::Zeros);
    }

    fn naf_block(&mut self, prefix: &str, c: usize) {
        self.norm(&format!("{prefix}.norm1"), c);
        self.conv(&format!("{prefix}.conv1"), 2 * c, c, 1, Taxonomy::Conv1x1);
        self.conv(&format!("{prefix}.conv2"), 2 * c, 1, 3, Taxonomy::Conv3x3);
        self.conv(&format!("{prefix}.sca"), c, c, 1, Taxonomy::Sca);
        self.conv(&format!("{prefix}.conv3"), c, c, 1, Taxonomy::Conv1x1);
        self.norm(&format!("{prefix}.norm2"), c);
        self.conv(&format!("{prefix}.conv4"), 2 * c, c, 1, Taxonomy::Conv1x1);
        self.conv(&format!("{prefix}.conv5"), c, c, 1, Taxonomy::Conv1x1);
        self.push(format!("{prefix}.beta"), Taxonomy::Other, vec![c], Init::Zeros);
        self.push(format!("{prefix}.gamma"), Taxonomy::Other, vec![c], Init::Zeros);
    }
}

pub fn block_name(section: &str, level: Option<usize>, block: usize) -> String {
    match level {
        Some(l) => format!("{section}{l}.blk{block}"),
        None => format!("{section}.blk{block}"),
    }
}

pub fn expert_name(level: usize, block: usize, expert: usize) -> String {
    format!("dec{level}.moe{block}.expert{expert}")
}

fn specs(cfg: &ArchConfig) -> Vec<Spec> {
    let mut b = Builder { specs: Vec::new() };
    b.conv("intro", cfg.base_width, 3, 1, Taxonomy::Conv1x1);
    for l in 0..cfg.num_levels {
        let c = cfg.width(l);
        for k in 0..cfg.enc_blocks {
            b.naf_block(&block_name("enc", Some(l), k), c);
        }
        b.conv(&format!("enc{l}.down"), 2 * c, c, 2, Taxonomy::Other);
    }
    let deep = cfg.deep_width();
    if cfg.has_router() {
        b.push("router.norm.gamma".into(), Taxonomy::Other, vec![deep], Init::Ones);
        b.push("router.norm.beta".into(), Taxonomy::Other, vec![deep], Init::Zeros);
        b.conv("router.sca", deep, deep, 1, Taxonomy::Other);
        b.conv("router.fc1", deep, deep, 1, Taxonomy::Other);
        b.conv("router.fc2", cfg.router_classes, deep / 2, 1, Taxonomy::Other);
    }
    for k in 0..cfg.mid_blocks {
        b.naf_block(&block_name("mid", None, k), deep);
    }
    for l in (0..cfg.num_levels).rev() {
        let c = cfg.width(l);
        b.conv(&format!("dec{l}.up"), 4 * c, 2 * c, 1, Taxonomy::Conv1x1);
        for k in 0..cfg.dec_blocks {
            for e in 0..cfg.num_experts {
                b.naf_block(&expert_name(l, k, e), c);
            }
        }
    }
    b.conv("ending", 3, cfg.base_width, 1, Taxonomy::Conv1x1);
    b.specs
}

/// Names, in canonical order, of every parameter `cfg` defines.
pub fn param_names(cfg: &ArchConfig) -> Vec<String> {
    specs(cfg).into_iter().map(|s| s.name).collect()
}

/// Fresh checkpoint: uniform fan-in weights, zero biases, unit norm scales
/// and zero residual scales (every block starts as the identity).
pub fn init_checkpoint(cfg: &ArchConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = specs(cfg)
        .into_iter()
        .map(|s| {
            let n: usize = s.dims.iter().product();
            let data = match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect(),
            };
            ParamRecord {
                name: s.name,
                taxonomy: s.taxonomy,
                dims: s.dims,
                data,
            }
        })
        .collect();
    Checkpoint::new(*cfg, Stage::Init, records)
}

/// Check that a checkpoint holds exactly the parameters its config defines.
pub fn validate_layout(ckpt: &Checkpoint) -> Result<()> {
    let expected = specs(ckpt.config());
    if expected.len() != ckpt.records().len() {
        return Err(Error::ArchitectureMismatch(format!(
            "config defines {} parameters, checkpoint has {}",
            expected.len(),
            ckpt.records().len()
        )));
    }
    for (s, r) in expected.iter().zip(ckpt.records()) {
        if s.name != r.name || s.dims != r.dims {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} {:?}, found {} {:?}",
                s.name, s.dims, r.name, r.dims
            )));
        }
    }
    Ok(())
}

/// Map a parameter name of the target layout to its source name, or `None`
/// to drop it.
fn rebuild(src: &Checkpoint, cfg: ArchConfig, stage: Stage, source_of: impl Fn(&str) -> String) -> Result<Checkpoint> {
    let records = specs(&cfg)
        .into_iter()
        .map(|s| {
            let from = source_of(&s.name);
            let r = src.require(&from)?;
            if r.dims != s.dims {
                return Err(Error::ArchitectureMismatch(format!(
                    "{from} has dims {:?}, {} needs {:?}",
                    r.dims, s.name, s.dims
                )));
            }
            Ok(ParamRecord {
                name: s.name,
                taxonomy: r.taxonomy,
                dims: s.dims,
                data: r.data.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Checkpoint::new(cfg, stage, records)
}

fn rename_expert(name: &str, to: usize) -> String {
    // dec{l}.moe{b}.expert{e}.rest -> expert{to}
    let mut parts: Vec<String> = name.split('.').map(str::to_owned).collect();
    if parts.len() > 2 && parts[0].starts_with("dec") && parts[1].starts_with("moe") && parts[2].starts_with("expert") {
        parts[2] = format!("expert{to}");
    }
    parts.join(".")
}

/// Single-expert baseline without router, holding expert `j`'s decoder blocks.
pub fn extract_expert(ckpt: &Checkpoint, j: usize) -> Result<Checkpoint> {
    let cfg = *ckpt.config();
    if j >= cfg.num_experts {
        return Err(Error::invalid(format!(
            "expert {j} out of range for {} experts",
            cfg.num_experts
        )));
    }
    rebuild(ckpt, cfg.without_router(), ckpt.stage(), |name| rename_expert(name, j))
}

/// Copy the single decoder path of a one-slot checkpoint into `n` expert slots.
pub fn replicate_experts(ckpt: &Checkpoint, n: usize) -> Result<Checkpoint> {
    let cfg = *ckpt.config();
    if cfg.num_experts != 1 {
        return Err(Error::invalid(format!(
            "replication needs a single-expert checkpoint, got {} experts",
            cfg.num_experts
        )));
    }
    if !cfg.has_router() || cfg.router_classes != n {
        return Err(Error::invalid(format!(
            "replicating into {n} experts needs a router with {n} classes, got {}",
            cfg.router_classes
        )));
    }
    let target = ArchConfig { num_experts: n, ..cfg };
    rebuild(ckpt, target, ckpt.stage(), |name| rename_expert(name, 0))
}
