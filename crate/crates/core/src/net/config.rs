use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the expert outputs of a MoE block are combined with its input `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `sum_i w_i e_i(h)`
    #[default]
    WeightedSum,
    /// `h + sum_i w_i e_i(h)`
    AdditionResidual,
    /// `h * sum_i w_i e_i(h)`
    AttentionConnection,
}

impl FusionMode {
    pub fn code(self) -> u8 {
        match self {
            FusionMode::WeightedSum => 0,
            FusionMode::AdditionResidual => 1,
            FusionMode::AttentionConnection => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FusionMode::WeightedSum),
            1 => Some(FusionMode::AdditionResidual),
            2 => Some(FusionMode::AttentionConnection),
            _ => None,
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_sum" => Ok(FusionMode::WeightedSum),
            "addition_residual" => Ok(FusionMode::AdditionResidual),
            "attention_connection" => Ok(FusionMode::AttentionConnection),
            other => Err(Error::invalid(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Network shape.
///
/// `router_classes` is the length of the router's weight vector (0 means the
/// network has no router, i.e. a plain single-expert baseline).
/// `num_experts` is the number of expert slots in every MoE block: 1 for the
/// stage-1 baseline path, `router_classes` for the full mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub base_width: usize,
    pub num_levels: usize,
    pub enc_blocks: usize,
    pub mid_blocks: usize,
    pub dec_blocks: usize,
    pub num_experts: usize,
    pub router_classes: usize,
    pub top_k: usize,
    pub fusion: FusionMode,
}

impl ArchConfig {
    /// 32 channels, four scales, 2/3/3 blocks, five experts.
    pub fn full() -> Self {
        ArchConfig {
            base_width: 32,
            num_levels: 4,
            enc_blocks: 2,
            mid_blocks: 3,
            dec_blocks: 3,
            num_experts: 5,
            router_classes: 5,
            top_k: 1,
            fusion: FusionMode::WeightedSum,
        }
    }

    /// Desk-scale preset: 8 channels, two scales.
    pub fn toy() -> Self {
        ArchConfig {
            base_width: 8,
            num_levels: 2,
            enc_blocks: 2,
            mid_blocks: 2,
            dec_blocks: 2,
            num_experts: 5,
            router_classes: 5,
            top_k: 1,
            fusion: FusionMode::WeightedSum,
        }
    }

    /// Same shape with a single expert slot (the stage-1 baseline path).
    pub fn single_expert(self) -> Self {
        ArchConfig {
            num_experts: 1,
            top_k: 1,
            ..self
        }
    }

    /// Same shape without the router.
    pub fn without_router(self) -> Self {
        ArchConfig {
            router_classes: 0,
            ..self.single_expert()
        }
    }

    pub fn has_router(&self) -> bool {
        self.router_classes > 0
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn deep_width(&self) -> usize {
        self.width(self.num_levels)
    }

    /// Spatial extents must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.num_levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.base_width % 2 != 0 {
            return Err(Error::invalid(format!(
                "base_width must be a positive even number, got {}",
                self.base_width
            )));
        }
        if self.num_levels == 0 || self.num_levels > 8 {
            return Err(Error::invalid(format!(
                "num_levels must be in 1..=8, got {}",
                self.num_levels
            )));
        }
        if self.num_experts == 0 {
            return Err(Error::invalid("num_experts must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::invalid(format!(
                "top_k must be in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        if self.num_experts > 1 && self.router_classes != self.num_experts {
            return Err(Error::invalid(format!(
                "{} expert slots need a router with {} classes, got {}",
                self.num_experts, self.num_experts, self.router_classes
            )));
        }
        Ok(())
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ArchConfig::full().validate().unwrap();
        ArchConfig::toy().validate().unwrap();
        ArchConfig::toy().single_expert().validate().unwrap();
        ArchConfig::toy().without_router().validate().unwrap();
        assert_eq!(ArchConfig::toy().deep_width(), 32);
        assert_eq!(ArchConfig::full().deep_width(), 512);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let bad_k = ArchConfig {
            top_k: 6,
            ..ArchConfig::toy()
        };
        assert!(bad_k.validate().is_err());
        let no_router = ArchConfig {
            router_classes: 0,
            ..ArchConfig::toy()
        };
        assert!(no_router.validate().is_err());
    }

    #[test]
    fn fusion_codes_round_trip() {
        for m in [
            FusionMode::WeightedSum,
            FusionMode::AdditionResidual,
            FusionMode::AttentionConnection,
        ] {
            assert_eq!(FusionMode::from_code(m.code()), Some(m));
        }
        assert_eq!(FusionMode::from_code(3), None);
    }
}
