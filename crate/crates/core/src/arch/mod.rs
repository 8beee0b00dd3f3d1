//! Architecture descriptions, presets and layer-graph construction.

pub mod config;
pub mod graph;
pub mod presets;

pub use config::{ArchConfig, BlockKind, BlockType, LayerStyle, NormSettings, SplitKind, StageSpec, StemKind};
pub use graph::{block, build, csp_stage, shape_trace, walk, LayerGraph, LayerSpec, Node, SplitNode, TraceRow};
pub use presets::{preset, PRESET_NAMES};
