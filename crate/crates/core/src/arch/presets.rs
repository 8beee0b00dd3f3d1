//! Named architecture presets.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::ops::NormKind;

use super::config::*;

pub const PRESET_NAMES: [&str; 7] = [
    "convnext_tiny_ref",
    "csp_original",
    "csp_chmid",
    "csp_final",
    "e_convnext_mini",
    "e_convnext_tiny",
    "e_convnext_small",
];

const TINY_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
const TINY_BLOCKS: [usize; 4] = [3, 3, 9, 3];
const CONVNEXT_WIDTHS: [usize; 4] = [96, 192, 384, 768];

pub fn preset(name: &str) -> Result<ArchConfig> {
    let cfg = match name {
        "convnext_tiny_ref" => convnext_tiny_ref(),
        "csp_original" => csp_lineage(name, false, SplitKind::TensorSplit),
        "csp_chmid" => csp_lineage(name, true, SplitKind::OneByOneConvPair),
        "csp_final" => csp_final(),
        "e_convnext_tiny" => e_convnext_tiny(),
        "e_convnext_mini" => e_convnext_scaled(name, 0.75, [2, 2, 4, 4]),
        "e_convnext_small" => e_convnext_scaled(name, 1.25, [3, 3, 9, 3]),
        "e_convnext_narrow" => e_convnext_narrow(4, 64),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(cfg)
}

fn stages(widths: &[usize; 5], blocks: [usize; 4], use_ch_mid: bool, split: SplitKind) -> Vec<StageSpec> {
    (0..4).map(|i| StageSpec::csp(widths[i], widths[i + 1], blocks[i], use_ch_mid, split)).collect()
}

fn lnfc_block() -> BlockKind {
    BlockKind { kind: BlockType::LNFC, attention: AttentionKind::None, layer_scale_init: Some(1e-6) }
}

/// ConvNeXt-T: patchify stem, plain stages of widths 96..768, LN/FC blocks.
pub fn convnext_tiny_ref() -> ArchConfig {
    let w = CONVNEXT_WIDTHS;
    let stages = (0..4)
        .map(|i| {
            let ch_in = if i == 0 { w[0] } else { w[i - 1] };
            StageSpec::csp(ch_in, w[i], TINY_BLOCKS[i], false, SplitKind::PassThrough)
        })
        .collect();
    ArchConfig {
        name: "convnext_tiny_ref".into(),
        stem: StemKind::Patchify4,
        stem_mid_channels: 32,
        stages,
        block: lnfc_block(),
        stage_attention: AttentionKind::None,
        layer_style: LayerStyle::ConvNeXt,
        conv_norm: NormKind::LayerNormChFirst,
        head_norm: true,
        num_classes: 1000,
        input_size: [224, 224],
        norm: NormSettings::default(),
        init_std: 0.02,
        unpublished_config: false,
    }
}

/// First CSP versions: ConvNeXt-T widths and blocks, 2x stem plus 2x per stage.
fn csp_lineage(name: &str, use_ch_mid: bool, split: SplitKind) -> ArchConfig {
    let w = CONVNEXT_WIDTHS;
    ArchConfig {
        name: name.into(),
        stem: StemKind::TwoStep2,
        stages: stages(&[w[0] / 2, w[0], w[1], w[2], w[3]], TINY_BLOCKS, use_ch_mid, split),
        layer_style: LayerStyle::ConvNormAct,
        head_norm: false,
        ..convnext_tiny_ref()
    }
}

fn csp_final() -> ArchConfig {
    ArchConfig {
        name: "csp_final".into(),
        stages: stages(&TINY_WIDTHS, TINY_BLOCKS, true, SplitKind::OneByOneConvPair),
        ..csp_lineage("csp_final", true, SplitKind::OneByOneConvPair)
    }
}

pub fn e_convnext_tiny() -> ArchConfig {
    ArchConfig {
        name: "e_convnext_tiny".into(),
        stem: StemKind::Stepped,
        stem_mid_channels: 32,
        stages: stages(&TINY_WIDTHS, TINY_BLOCKS, true, SplitKind::OneByOneConvPair),
        block: BlockKind { kind: BlockType::BNConv, attention: AttentionKind::ESE, layer_scale_init: None },
        stage_attention: AttentionKind::ESE,
        layer_style: LayerStyle::ConvNormAct,
        conv_norm: NormKind::BatchNorm,
        head_norm: false,
        num_classes: 1000,
        input_size: [224, 224],
        norm: NormSettings::default(),
        init_std: 0.02,
        unpublished_config: false,
    }
}

/// Rounds to the nearest multiple of 8, never below 8.
pub fn round8(x: f64) -> usize {
    ((x / 8.0).round() as usize).max(1) * 8
}

/// E-ConvNeXt-tiny with every width (stem included) scaled by `width` and
/// rounded to a multiple of 8.
pub fn e_convnext_scaled(name: &str, width: f64, blocks: [usize; 4]) -> ArchConfig {
    let widths: [usize; 5] = std::array::from_fn(|i| round8(TINY_WIDTHS[i] as f64 * width));
    ArchConfig {
        name: name.into(),
        stem_mid_channels: round8(32.0 * width),
        stages: stages(&widths, blocks, true, SplitKind::OneByOneConvPair),
        unpublished_config: true,
        ..e_convnext_tiny()
    }
}

/// A narrow four-stage variant used for desk-scale training.
pub fn e_convnext_narrow(num_classes: usize, input: usize) -> ArchConfig {
    ArchConfig {
        name: "e_convnext_narrow".into(),
        num_classes,
        input_size: [input, input],
        ..e_convnext_scaled("e_convnext_narrow", 0.25, [1, 1, 1, 1])
    }
}

/// A valid configuration with small random widths and structural choices,
/// for property tests and instrumented cost checks.
pub fn random_small<R: Rng + ?Sized>(rng: &mut R) -> ArchConfig {
    let stem = *[StemKind::Patchify4, StemKind::TwoStep2, StemKind::ResNetVC, StemKind::Stepped]
        .choose(rng)
        .expect("nonempty");
    let split = *[SplitKind::TensorSplit, SplitKind::OneByOneConvPair, SplitKind::PassThrough]
        .choose(rng)
        .expect("nonempty");
    let mut widths = [8 * rng.gen_range(1..=2); 5];
    for i in 1..5 {
        let same = i == 1 && stem == StemKind::Patchify4;
        widths[i] = if same { widths[0] } else { widths[i - 1] + 8 * rng.gen_range(0..=2) };
    }
    let use_ch_mid = rng.gen_bool(0.5);
    let blocks = std::array::from_fn(|_| rng.gen_range(1..=2));
    let kind = if rng.gen_bool(0.5) { BlockType::BNConv } else { BlockType::LNFC };
    let attention = *[AttentionKind::None, AttentionKind::SEStyle, AttentionKind::EffStyle, AttentionKind::ESE]
        .choose(rng)
        .expect("nonempty");
    let stage_attention = if split == SplitKind::PassThrough {
        AttentionKind::None
    } else {
        *[AttentionKind::None, AttentionKind::SEStyle, AttentionKind::ESE].choose(rng).expect("nonempty")
    };
    let layer_style = if rng.gen_bool(0.5) { LayerStyle::ConvNeXt } else { LayerStyle::ConvNormAct };
    let conv_norm = if rng.gen_bool(0.5) { NormKind::BatchNorm } else { NormKind::LayerNormChFirst };
    let input = 32 * rng.gen_range(1..=2);
    ArchConfig {
        name: "random_small".into(),
        stem,
        stem_mid_channels: 8,
        stages: stages(&widths, blocks, use_ch_mid, split),
        block: BlockKind { kind, attention, layer_scale_init: (kind == BlockType::LNFC).then_some(0.5) },
        stage_attention,
        layer_style,
        conv_norm,
        head_norm: rng.gen_bool(0.5),
        num_classes: rng.gen_range(2..=10),
        input_size: [input, input],
        norm: NormSettings::default(),
        init_std: 0.1,
        unpublished_config: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn random_configs_validate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let cfg = random_small(&mut rng);
            cfg.validate().unwrap_or_else(|e| panic!("{cfg:?}: {e}"));
            crate::arch::build(&cfg).unwrap();
        }
    }

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.name, name);
        }
        e_convnext_narrow(4, 64).validate().unwrap();
        assert!(matches!(preset("resnet50"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn tiny_preset_layout() {
        let cfg = preset("e_convnext_tiny").unwrap();
        let triples: Vec<_> = cfg.stages.iter().map(|s| (s.ch_in, s.ch_out, s.n_blocks)).collect();
        assert_eq!(triples, vec![(64, 128, 3), (128, 256, 3), (256, 512, 9), (512, 1024, 3)]);
        assert_eq!(cfg.stem, StemKind::Stepped);
        assert_eq!(cfg.block.kind, BlockType::BNConv);
        assert_eq!(cfg.block.attention, AttentionKind::ESE);
        assert!(!cfg.unpublished_config);
    }

    #[test]
    fn csp_original_and_chmid_differ_only_in_stage_flags() {
        let a = preset("csp_original").unwrap();
        let mut b = preset("csp_chmid").unwrap();
        for (sa, sb) in a.stages.iter().zip(b.stages.iter_mut()) {
            assert_eq!((sa.ch_in, sa.ch_out, sa.n_blocks), (sb.ch_in, sb.ch_out, sb.n_blocks));
            sb.use_ch_mid = sa.use_ch_mid;
            sb.split_kind = sa.split_kind;
        }
        b.name = a.name.clone();
        assert_eq!(a, b);
    }

    #[test]
    fn convnext_reference_has_no_csp() {
        let cfg = preset("convnext_tiny_ref").unwrap();
        assert_eq!(cfg.stem, StemKind::Patchify4);
        assert!(cfg.stages.iter().all(|s| s.split_kind == SplitKind::PassThrough));
        assert_eq!(cfg.block.kind, BlockType::LNFC);
    }

    #[test]
    fn scaled_presets_are_flagged() {
        assert!(preset("e_convnext_mini").unwrap().unpublished_config);
        assert!(preset("e_convnext_small").unwrap().unpublished_config);
    }

    #[test]
    fn json_round_trip() {
        let cfg = preset("e_convnext_tiny").unwrap();
        let back = ArchConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validation_errors() {
        let mut cfg = preset("e_convnext_tiny").unwrap();
        cfg.stages[0].ch_in = 65;
        assert!(cfg.validate().is_err());
        let mut cfg = preset("e_convnext_tiny").unwrap();
        cfg.stages[2].n_blocks = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = preset("e_convnext_tiny").unwrap();
        cfg.stages[1].ch_in = 96;
        assert!(cfg.validate().is_err());
        let mut cfg = preset("e_convnext_tiny").unwrap();
        cfg.input_size = [200, 200];
        assert!(cfg.validate().is_err());
        let mut cfg = preset("e_convnext_tiny").unwrap();
        cfg.stem = StemKind::Patchify4;
        assert!(cfg.validate().is_err());
    }
}
