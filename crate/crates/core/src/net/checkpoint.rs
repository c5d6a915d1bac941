//! Named parameter sets and their binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DMOE"  u32 version
//! config: u32 base_width, num_levels, enc_blocks, mid_blocks, dec_blocks,
//!         num_experts, router_classes, top_k; u8 fusion; u8 stage
//! u32 record count
//! record: u32 name length, UTF-8 name, u8 taxonomy, u8 dtype (0 = f32),
//!         u8 rank, rank x u32 dims, raw f32 payload
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ArchConfig, FusionMode};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"DMOE";
pub const VERSION: u32 = 1;

/// Layer class used by the similarity analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taxonomy {
    Conv1x1,
    Conv3x3,
    LayerNorm,
    Sca,
    Other,
}

impl Taxonomy {
    pub const ANALYZED: [Taxonomy; 4] = [Taxonomy::Conv1x1, Taxonomy::Conv3x3, Taxonomy::LayerNorm, Taxonomy::Sca];

    pub fn code(self) -> u8 {
        match self {
            Taxonomy::Conv1x1 => 0,
            Taxonomy::Conv3x3 => 1,
            Taxonomy::LayerNorm => 2,
            Taxonomy::Sca => 3,
            Taxonomy::Other => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Taxonomy::Conv1x1,
            1 => Taxonomy::Conv3x3,
            2 => Taxonomy::LayerNorm,
            3 => Taxonomy::Sca,
            4 => Taxonomy::Other,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Taxonomy::Conv1x1 => "conv1x1",
            Taxonomy::Conv3x3 => "conv3x3",
            Taxonomy::LayerNorm => "layernorm",
            Taxonomy::Sca => "sca",
            Taxonomy::Other => "other",
        }
    }
}

/// Training stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Stage::Init,
            1 => Stage::Stage1,
            2 => Stage::Stage2,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub taxonomy: Taxonomy,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamRecord {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rank-4 view: 4-d weights keep their shape, vectors become (1, C, 1, 1).
    pub fn shape(&self) -> Shape {
        match self.dims.as_slice() {
            [a, b, c, d] => Shape::new(*a, *b, *c, *d),
            [c] => Shape::new(1, *c, 1, 1),
            other => Shape::new(1, other.iter().product(), 1, 1),
        }
    }

    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(self.shape(), self.data.clone()).expect("record length matches dims")
    }

    /// Name without its final component, e.g. `enc0.blk1.norm1`.
    pub fn layer(&self) -> &str {
        self.name.rsplit_once('.').map_or(self.name.as_str(), |(l, _)| l)
    }
}

/// Ordered named parameters plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    config: ArchConfig,
    stage: Stage,
    records: Vec<ParamRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.stage == other.stage && self.records == other.records
    }
}

impl Checkpoint {
    pub fn new(config: ArchConfig, stage: Stage, records: Vec<ParamRecord>) -> Result<Self> {
        config.validate()?;
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let expected: usize = r.dims.iter().product();
            if expected != r.data.len() {
                return Err(Error::MalformedRecord(format!(
                    "{}: dims {:?} need {expected} values, got {}",
                    r.name,
                    r.dims,
                    r.data.len()
                )));
            }
            if index.insert(r.name.clone(), i).is_some() {
                return Err(Error::MalformedRecord(format!("duplicate parameter {}", r.name)));
            }
        }
        Ok(Checkpoint {
            config,
            stage,
            records,
            index,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    /// Change the gate-related settings that do not affect the parameter set.
    pub fn set_inference(&mut self, top_k: usize, fusion: FusionMode) -> Result<()> {
        let cfg = ArchConfig {
            top_k,
            fusion,
            ..self.config
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn records(&self) -> &[ParamRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [ParamRecord] {
        &mut self.records
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamRecord> {
        self.position(name).map(|i| &self.records[i])
    }

    pub fn require(&self, name: &str) -> Result<&ParamRecord> {
        self.get(name)
            .ok_or_else(|| Error::MalformedRecord(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamRecord> {
        let i = self.position(name)?;
        Some(&mut self.records[i])
    }

    pub fn param_count(&self) -> usize {
        self.records.iter().map(ParamRecord::numel).sum()
    }

    /// Bitwise comparison of every parameter value.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.stage == other.stage
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.name == b.name
                    && a.taxonomy == b.taxonomy
                    && a.dims == b.dims
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.param_count() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.base_width,
            c.num_levels,
            c.enc_blocks,
            c.mid_blocks,
            c.dec_blocks,
            c.num_experts,
            c.router_classes,
            c.top_k,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(c.fusion.code());
        out.push(self.stage.code());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.taxonomy.code());
            out.push(0);
            out.push(r.dims.len() as u8);
            for &d in &r.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let mut vals = [0usize; 8];
        for v in vals.iter_mut() {
            *v = cur.u32("config block")? as usize;
        }
        let fusion_code = cur.u8("config block")?;
        let fusion = FusionMode::from_code(fusion_code)
            .ok_or_else(|| Error::MalformedRecord(format!("unknown fusion code {fusion_code}")))?;
        let stage_code = cur.u8("config block")?;
        let stage = Stage::from_code(stage_code)
            .ok_or_else(|| Error::MalformedRecord(format!("unknown stage code {stage_code}")))?;
        let config = ArchConfig {
            base_width: vals[0],
            num_levels: vals[1],
            enc_blocks: vals[2],
            mid_blocks: vals[3],
            dec_blocks: vals[4],
            num_experts: vals[5],
            router_classes: vals[6],
            top_k: vals[7],
            fusion,
        };
        let count = cur.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let what = format!("record {i}");
            let len = cur.u32(&what)? as usize;
            let name = String::from_utf8(cur.take(len, &what)?.to_vec())
                .map_err(|_| Error::MalformedRecord(format!("record {i}: name is not UTF-8")))?;
            let tax = cur.u8(&what)?;
            let taxonomy = Taxonomy::from_code(tax)
                .ok_or_else(|| Error::MalformedRecord(format!("{name}: unknown taxonomy {tax}")))?;
            let dtype = cur.u8(&what)?;
            if dtype != 0 {
                return Err(Error::MalformedRecord(format!("{name}: unsupported dtype {dtype}")));
            }
            let rank = cur.u8(&what)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32(&what)? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::MalformedRecord(format!("{name}: dims overflow")))?;
            let raw = cur.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::MalformedRecord(format!("{name}: dims overflow")))?,
                &name,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(ParamRecord {
                name,
                taxonomy,
                dims,
                data,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::MalformedRecord(format!(
                "{} trailing bytes after last record",
                bytes.len() - cur.pos
            )));
        }
        Checkpoint::new(config, stage, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, only {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Convenience wrappers matching the free-function style used elsewhere.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
