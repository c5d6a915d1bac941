//! The mixture-of-experts restoration network.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod layout;
pub mod macs;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamRecord, Stage, Taxonomy};
pub use config::{ArchConfig, FusionMode};
pub use forward::{
    demoe_forward, encoder_forward, moe_block_forward, naf_block_forward, router_forward, soft_forward,
    ExpertSelection, GateSpec, ParamBinder, Restoration, RouterWeights, SelectionMode,
};
pub use layout::{block_name, expert_name, extract_expert, init_checkpoint, replicate_experts, validate_layout};
pub use macs::{count_for_config, count_params_macs, CostSummary};
