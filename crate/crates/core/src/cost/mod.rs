//! Analytic FLOPs and parameter accounting.
//!
//! One multiply-accumulate counts as one FLOP. Norms, activations, pooling
//! and elementwise ops cost nothing; their affine parameters are counted.

pub mod calibrate;
pub mod targets;
pub mod worked;

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::{walk, LayerGraph, LayerSpec, Node, SplitNode};
use crate::attention::attention_cost;
use crate::error::Result;
use crate::ops::NormKind;
use crate::tensor::Dims;

/// c_in · h_out · w_out · k² · c_out
pub fn conv_flops(c_in: u64, h_out: u64, w_out: u64, k: u64, c_out: u64) -> u64 {
    c_in * h_out * w_out * k * k * c_out
}

/// h_out · w_out · k² · c_out
pub fn dwconv_flops(h_out: u64, w_out: u64, k: u64, c_out: u64) -> u64 {
    h_out * w_out * k * k * c_out
}

/// Learnable parameters of one layer.
pub fn param_count(spec: &LayerSpec) -> u64 {
    match *spec {
        LayerSpec::Conv { c_in, c_out, k, groups, bias, .. } => {
            ((k * k * (c_in / groups) * c_out) + if bias { c_out } else { 0 }) as u64
        }
        LayerSpec::Norm { c, .. } => 2 * c as u64,
        LayerSpec::LayerScale { c, .. } => c as u64,
        LayerSpec::PointwiseFc { c_in, c_out } | LayerSpec::Fc { c_in, c_out } => (c_in * c_out + c_out) as u64,
        LayerSpec::Attention { kind, c } => attention_cost(kind, c).map(|a| a.params).unwrap_or(0),
        LayerSpec::Gelu | LayerSpec::GlobalPool => 0,
    }
}

/// FLOPs of one layer producing `out` (batch included).
pub fn layer_flops(spec: &LayerSpec, out: Dims) -> u64 {
    let (n, h, w) = (out.n as u64, out.h as u64, out.w as u64);
    match *spec {
        LayerSpec::Conv { c_in, c_out, k, groups, .. } => {
            if groups == c_in && groups == c_out {
                n * dwconv_flops(h, w, k as u64, c_out as u64)
            } else {
                n * conv_flops((c_in / groups) as u64, h, w, k as u64, c_out as u64)
            }
        }
        LayerSpec::PointwiseFc { c_in, c_out } => n * conv_flops(c_in as u64, h, w, 1, c_out as u64),
        LayerSpec::Fc { c_in, c_out } => n * (c_in * c_out) as u64,
        LayerSpec::Attention { kind, c } => n * attention_cost(kind, c).map(|a| a.flops).unwrap_or(0),
        LayerSpec::Norm { .. } | LayerSpec::Gelu | LayerSpec::LayerScale { .. } | LayerSpec::GlobalPool => 0,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub out: Dims,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostFlags {
    pub convention: String,
    pub bias_policy: String,
    pub unpublished_config: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub input: Dims,
    pub flags: CostFlags,
    pub rows: Vec<CostRow>,
    pub total_flops: u64,
    pub total_params: u64,
}

/// Costs a list of nodes at input `d`.
pub fn nodes_cost(nodes: &[Node], d: Dims) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    walk(nodes, d, &mut |node, _, out| {
        if let Node::Layer { name, spec } = node {
            rows.push(CostRow { name: name.clone(), out, flops: layer_flops(spec, out), params: param_count(spec) });
        }
    })?;
    Ok(rows)
}

/// Rows of one residual block of width `c` built from `cfg`, at `hw`×`hw`.
pub fn block_cost(cfg: &crate::arch::ArchConfig, c: usize, hw: usize) -> Result<Vec<CostRow>> {
    let node = crate::arch::block(cfg, "block", c)?;
    nodes_cost(std::slice::from_ref(&node), Dims::new(1, c, hw, hw))
}

/// Full cost report of a graph for a single sample at its configured input size.
pub fn model_cost(graph: &LayerGraph) -> Result<CostReport> {
    model_cost_at(graph, graph.input_dims(1), false)
}

/// Full cost report at an arbitrary input; `macs2` doubles every FLOP count.
pub fn model_cost_at(graph: &LayerGraph, input: Dims, macs2: bool) -> Result<CostReport> {
    let mut rows = nodes_cost(&graph.nodes, input)?;
    if macs2 {
        rows.iter_mut().for_each(|r| r.flops *= 2);
    }
    let convention = if macs2 { "2 FLOPs per multiply-accumulate" } else { "1 FLOP per multiply-accumulate" };
    Ok(CostReport {
        model: graph.config.name.clone(),
        input,
        flags: CostFlags {
            convention: format!("{convention}; norms, activations, pooling and elementwise ops count 0"),
            bias_policy: "convs followed by batch norm carry no bias".into(),
            unpublished_config: graph.config.unpublished_config,
        },
        total_flops: rows.iter().map(|r| r.flops).sum(),
        total_params: rows.iter().map(|r| r.params).sum(),
        rows,
    })
}

impl CostReport {
    pub fn empty(model: &str, input: Dims) -> Self {
        CostReport {
            model: model.into(),
            input,
            flags: CostFlags { convention: String::new(), bias_policy: String::new(), unpublished_config: false },
            rows: Vec::new(),
            total_flops: 0,
            total_params: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "model: {}  input: {}", self.model, self.input);
        let _ = writeln!(s, "# {}", self.flags.convention);
        let _ = writeln!(s, "# {}", self.flags.bias_policy);
        if self.flags.unpublished_config {
            let _ = writeln!(s, "# unpublished config: widths and depths chosen to meet cost targets");
        }
        let _ = writeln!(s, "{:<width$}  {:>16}  {:>14}  {:>12}", "layer", "out", "flops", "params");
        for r in &self.rows {
            let out = format!("{}@{}x{}", r.out.c, r.out.h, r.out.w);
            let _ = writeln!(s, "{:<width$}  {:>16}  {:>14}  {:>12}", r.name, out, r.flops, r.params);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>16}  {:>14}  {:>12}",
            "total",
            "",
            format!("{} ({})", self.total_flops, human(self.total_flops)),
            format!("{} ({})", self.total_params, human(self.total_params))
        );
        s
    }
}

/// Three significant digits with a G/M/K suffix.
pub fn human(x: u64) -> String {
    let (v, suffix) = match x {
        x if x >= 1_000_000_000 => (x as f64 / 1e9, "G"),
        x if x >= 1_000_000 => (x as f64 / 1e6, "M"),
        x if x >= 1_000 => (x as f64 / 1e3, "K"),
        x => return x.to_string(),
    };
    let decimals = if v >= 100.0 {
        0
    } else if v >= 10.0 {
        1
    } else {
        2
    };
    format!("{v:.decimals$}{suffix}")
}

/// Relative deviation of `value` from `target`.
pub fn rel_dev(value: f64, target: f64) -> f64 {
    (value - target) / target
}

/// Symbolically folds every batch norm that directly follows a conv into that
/// conv, which gains a bias. Returns the folded graph and the number of folds.
pub fn fold_bn_graph(graph: &LayerGraph) -> (LayerGraph, usize) {
    let mut folds = 0;
    let nodes = fold_nodes(&graph.nodes, &mut folds);
    (LayerGraph { config: graph.config.clone(), nodes }, folds)
}

fn fold_nodes(nodes: &[Node], folds: &mut usize) -> Vec<Node> {
    let mut out: Vec<Node> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let node = match node {
            Node::Residual { name, body } => Node::Residual { name: name.clone(), body: fold_nodes(body, folds) },
            Node::Csp { name, split, blocks, fuse } => Node::Csp {
                name: name.clone(),
                split: match split {
                    SplitNode::Tensor { first } => SplitNode::Tensor { first: *first },
                    SplitNode::ConvPair { bypass, main } => {
                        SplitNode::ConvPair { bypass: fold_nodes(bypass, folds), main: fold_nodes(main, folds) }
                    }
                },
                blocks: fold_nodes(blocks, folds),
                fuse: fold_nodes(fuse, folds),
            },
            other => other.clone(),
        };
        if let Node::Layer { spec: LayerSpec::Norm { kind: NormKind::BatchNorm, .. }, .. } = &node {
            if let Some(Node::Layer { spec: LayerSpec::Conv { bias, .. }, .. }) = out.last_mut() {
                *bias = true;
                *folds += 1;
                continue;
            }
        }
        out.push(node);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build, preset};

    #[test]
    fn formula_examples() {
        assert_eq!(conv_flops(256, 56, 56, 1, 64), 51_380_224);
        assert_eq!(conv_flops(64, 56, 56, 3, 64), 115_605_504);
        assert_eq!(conv_flops(1, 1, 1, 1, 1), 1);
        assert_eq!(dwconv_flops(56, 56, 7, 96), 14_751_744);
        assert_eq!(dwconv_flops(56, 56, 7, 48), 7_375_872);
        assert_eq!(dwconv_flops(1, 1, 1, 1), 1);
    }

    #[test]
    fn param_examples() {
        assert_eq!(param_count(&LayerSpec::conv(96, 128, 1, 1, false)), 12_288);
        assert_eq!(param_count(&LayerSpec::Norm { kind: NormKind::BatchNorm, c: 64 }), 128);
        assert_eq!(param_count(&LayerSpec::depthwise(48, 7, false)), 2_352);
        assert_eq!(param_count(&LayerSpec::Fc { c_in: 1024, c_out: 1000 }), 1_025_000);
    }

    #[test]
    fn totals_are_row_sums() {
        let g = build(&preset("e_convnext_tiny").unwrap()).unwrap();
        let r = model_cost(&g).unwrap();
        assert_eq!(r.total_flops, r.rows.iter().map(|r| r.flops).sum::<u64>());
        assert_eq!(r.total_params, r.rows.iter().map(|r| r.params).sum::<u64>());
        assert_eq!(model_cost(&g).unwrap(), r);
    }

    #[test]
    fn macs2_doubles() {
        let g = build(&preset("convnext_tiny_ref").unwrap()).unwrap();
        let a = model_cost_at(&g, g.input_dims(1), false).unwrap();
        let b = model_cost_at(&g, g.input_dims(1), true).unwrap();
        assert_eq!(b.total_flops, 2 * a.total_flops);
        assert_eq!(b.total_params, a.total_params);
    }

    #[test]
    fn batch_scales_flops() {
        let g = build(&preset("e_convnext_tiny").unwrap()).unwrap();
        let a = model_cost_at(&g, g.input_dims(1), false).unwrap();
        let b = model_cost_at(&g, g.input_dims(3), false).unwrap();
        assert_eq!(b.total_flops, 3 * a.total_flops);
    }

    #[test]
    fn empty_graph_costs_nothing() {
        let rows = nodes_cost(&[], Dims::new(1, 3, 32, 32)).unwrap();
        assert!(rows.is_empty());
        let r = CostReport::empty("none", Dims::new(1, 3, 32, 32));
        assert_eq!((r.total_flops, r.total_params), (0, 0));
    }

    #[test]
    fn graph_blocks_match_worked_totals() {
        let flops = |cfg: &crate::arch::ArchConfig, c| block_cost(cfg, c, 56).unwrap().iter().map(|r| r.flops).sum::<u64>();
        assert_eq!(flops(&preset("convnext_tiny_ref").unwrap(), 96), worked::convnext_block().total());
        let mut plain = preset("e_convnext_tiny").unwrap();
        plain.block.attention = crate::attention::AttentionKind::None;
        assert_eq!(flops(&plain, 48), worked::csp_convnext_block().total());
        // ESE adds c² per sample, independent of resolution
        let ese = preset("e_convnext_tiny").unwrap();
        assert_eq!(flops(&ese, 48), 65_178_624 + 48 * 48);
    }

    #[test]
    fn human_format() {
        assert_eq!(human(2_024_500_000), "2.02G");
        assert_eq!(human(13_238_000), "13.2M");
        assert_eq!(human(218_365_952), "218M");
        assert_eq!(human(999), "999");
    }

    #[test]
    fn fold_removes_bn_rows() {
        let g = build(&preset("e_convnext_tiny").unwrap()).unwrap();
        let mut specs = Vec::new();
        walk(&g.nodes, g.input_dims(1), &mut |n, _, _| {
            if let Node::Layer { spec, .. } = n {
                specs.push(spec.clone());
            }
        })
        .unwrap();
        // every conv in this preset is bias-free when a batch norm follows it,
        // so each fold trades 2c norm parameters for a c-wide bias
        let mut expected_folds = 0;
        let mut expected_delta = 0;
        for w in specs.windows(2) {
            if let (LayerSpec::Conv { bias: false, .. }, LayerSpec::Norm { kind: NormKind::BatchNorm, c }) = (&w[0], &w[1]) {
                expected_folds += 1;
                expected_delta += *c as u64;
            }
        }
        let (f, folds) = fold_bn_graph(&g);
        assert_eq!(folds, expected_folds);
        let a = model_cost(&g).unwrap();
        let b = model_cost(&f).unwrap();
        assert_eq!(b.rows.len(), a.rows.len() - folds);
        assert_eq!(a.total_flops, b.total_flops);
        assert_eq!(a.total_params - b.total_params, expected_delta);
    }
}
