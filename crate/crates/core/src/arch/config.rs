//! Serializable architecture descriptions.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{config_err, Result};
use crate::ops::norm::{NormKind, BN_EPS, BN_MOMENTUM, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StemKind {
    /// One 4x4 stride-4 conv; stage 1 then runs without a downsampling layer.
    Patchify4,
    /// One 2x2 stride-2 conv; stage 1's 2x2 downsampling conv is the second step.
    TwoStep2,
    /// 3x3 stride-2 conv followed by two 3x3 stride-1 convs.
    ResNetVC,
    /// 2x2 stride-2 conv followed by two 3x3 stride-1 convs.
    Stepped,
}

impl StemKind {
    /// Spatial reduction contributed by the stem alone.
    pub fn stride(self) -> usize {
        match self {
            StemKind::Patchify4 => 4,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitKind {
    /// Channel slice into two halves.
    TensorSplit,
    /// Two 1x1 conv layers, each ch_mid -> ch_mid/2.
    OneByOneConvPair,
    /// No cross-stage partial connection: blocks run on the full ch_out width.
    PassThrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub ch_in: usize,
    pub ch_out: usize,
    pub n_blocks: usize,
    pub use_ch_mid: bool,
    pub split_kind: SplitKind,
}

impl StageSpec {
    pub fn csp(ch_in: usize, ch_out: usize, n_blocks: usize, use_ch_mid: bool, split_kind: SplitKind) -> Self {
        StageSpec { ch_in, ch_out, n_blocks, use_ch_mid, split_kind }
    }

    /// Transition width after downsampling: (ch_in + ch_out) / 2, or ch_out.
    pub fn ch_mid(&self) -> Result<usize> {
        if self.split_kind == SplitKind::PassThrough {
            return Ok(self.ch_out);
        }
        let mid = if self.use_ch_mid {
            if !(self.ch_in + self.ch_out).is_multiple_of(2) {
                return Err(config_err!(
                    "ch_in + ch_out = {} is odd, ch_mid would not be an integer",
                    self.ch_in + self.ch_out
                ));
            }
            (self.ch_in + self.ch_out) / 2
        } else {
            self.ch_out
        };
        if mid % 2 != 0 {
            return Err(config_err!("ch_mid {mid} must be even to split into two branches"));
        }
        Ok(mid)
    }

    /// Width of the block path.
    pub fn branch_width(&self) -> Result<usize> {
        let mid = self.ch_mid()?;
        Ok(if self.split_kind == SplitKind::PassThrough { mid } else { mid / 2 })
    }
}

#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockType {
    /// dw7x7 -> LN (channel-last) -> FC x4 -> GELU -> FC -> LayerScale -> residual
    LNFC,
    /// dw7x7 -> BN -> 1x1 conv x4 -> GELU -> 1x1 conv -> residual
    BNConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockKind {
    pub kind: BlockType,
    pub attention: AttentionKind,
    pub layer_scale_init: Option<f64>,
}

/// How conv layers outside the blocks are arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerStyle {
    /// Stem conv -> LN; downsampling LN -> conv; convs carry bias.
    ConvNeXt,
    /// Every conv layer is conv -> norm -> GELU without conv bias.
    ConvNormAct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSettings {
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ln_eps: f64,
}

impl Default for NormSettings {
    fn default() -> Self {
        NormSettings { bn_eps: BN_EPS, bn_momentum: BN_MOMENTUM, ln_eps: LN_EPS }
    }
}

fn default_stem_mid() -> usize {
    32
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default)]
    pub name: String,
    pub stem: StemKind,
    /// Intermediate width of the three-conv stems (Stepped, ResNetVC).
    #[serde(default = "default_stem_mid")]
    pub stem_mid_channels: usize,
    pub stages: Vec<StageSpec>,
    pub block: BlockKind,
    /// Attention over the concatenated ch_mid map of each CSP stage.
    #[serde(default)]
    pub stage_attention: AttentionKind,
    pub layer_style: LayerStyle,
    /// Normalization used by conv layers outside the blocks.
    pub conv_norm: NormKind,
    #[serde(default)]
    pub head_norm: bool,
    pub num_classes: usize,
    pub input_size: [usize; 2],
    #[serde(default)]
    pub norm: NormSettings,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Set when the widths/depths are engineering choices rather than published ones.
    #[serde(default)]
    pub unpublished_config: bool,
}

impl ArchConfig {
    pub fn stem_out_channels(&self) -> usize {
        self.stages.first().map_or(0, |s| s.ch_in)
    }

    /// Total spatial reduction from input to the last stage.
    pub fn total_stride(&self) -> usize {
        let per_stage: usize = (0..self.stages.len()).map(|i| if self.stage_downsamples(i) { 2 } else { 1 }).product();
        self.stem.stride() * per_stage
    }

    /// Whether stage `i` opens with a 2x downsampling conv.
    pub fn stage_downsamples(&self, i: usize) -> bool {
        !(i == 0 && self.stem == StemKind::Patchify4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(config_err!("expected 4 stages, got {}", self.stages.len()));
        }
        if self.num_classes == 0 {
            return Err(config_err!("num_classes must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.n_blocks == 0 {
                return Err(config_err!("stage {} has zero blocks", i + 1));
            }
            if s.ch_in == 0 || s.ch_out == 0 {
                return Err(config_err!("stage {} has a zero channel count", i + 1));
            }
            if i > 0 && s.ch_in != self.stages[i - 1].ch_out {
                return Err(config_err!(
                    "channel chain broken: stage {} ch_in {} != stage {} ch_out {}",
                    i + 1,
                    s.ch_in,
                    i,
                    self.stages[i - 1].ch_out
                ));
            }
            s.ch_mid().map_err(|e| config_err!("stage {}: {e}", i + 1))?;
            if !self.stage_downsamples(i) {
                let mid = s.ch_mid()?;
                if mid != s.ch_in {
                    return Err(config_err!(
                        "stage 1 after a Patchify4 stem has no downsampling conv, so its ch_mid {mid} must equal ch_in {}",
                        s.ch_in
                    ));
                }
            }
        }
        if matches!(self.stem, StemKind::Stepped | StemKind::ResNetVC) && self.stem_mid_channels == 0 {
            return Err(config_err!("stem_mid_channels must be positive"));
        }
        if self.total_stride() != 32 {
            return Err(config_err!("total downsampling is {}x, expected 32x", self.total_stride()));
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(config_err!("input size {h}x{w} must be a positive multiple of 32"));
        }
        let attn_width = |c: usize| crate::attention::attention_shape(self.block.attention, c).map(|_| ());
        if self.block.attention != AttentionKind::None {
            for s in &self.stages {
                attn_width(s.branch_width()?)?;
            }
        }
        if self.stage_attention != AttentionKind::None {
            if self.stage_attention == AttentionKind::EffStyle {
                return Err(config_err!("EffStyle attention only applies inside blocks"));
            }
            for s in &self.stages {
                crate::attention::attention_shape(self.stage_attention, s.ch_mid()?)?;
            }
        }
        if !(self.norm.bn_eps > 0.0 && self.norm.ln_eps > 0.0) {
            return Err(config_err!("norm eps must be positive"));
        }
        if !(self.norm.bn_momentum > 0.0 && self.norm.bn_momentum < 1.0) {
            return Err(config_err!("batch norm momentum must lie in (0, 1)"));
        }
        if self.conv_norm == NormKind::LayerNormChLast {
            return Err(config_err!("conv layers use channel-first normalization"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ch_mid_formula() {
        let s = StageSpec::csp(64, 128, 3, true, SplitKind::OneByOneConvPair);
        assert_eq!(s.ch_mid().unwrap(), 96);
        assert_eq!(s.branch_width().unwrap(), 48);
        let plain = StageSpec::csp(64, 128, 3, false, SplitKind::TensorSplit);
        assert_eq!(plain.ch_mid().unwrap(), 128);
        assert_eq!(plain.branch_width().unwrap(), 64);
    }

    #[test]
    fn odd_ch_mid_is_rejected() {
        // the misprinted 65 input width
        assert!(StageSpec::csp(65, 128, 3, true, SplitKind::OneByOneConvPair).ch_mid().is_err());
        assert!(StageSpec::csp(64, 130, 3, true, SplitKind::OneByOneConvPair).ch_mid().is_err());
    }
}
