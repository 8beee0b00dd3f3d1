//! Symbolic layer graphs: structure and shapes without weights.

use serde::Serialize;

use crate::attention::{attention_shape, AttentionKind};
use crate::error::{config_err, shape_err, Result};
use crate::ops::conv::conv_out_extent;
use crate::ops::NormKind;
use crate::tensor::Dims;

use super::config::*;

/// One weight-bearing or elementwise layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum LayerSpec {
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize, bias: bool },
    Norm { kind: NormKind, c: usize },
    Gelu,
    /// Linear map over channels at every position, channel-last layout.
    PointwiseFc { c_in: usize, c_out: usize },
    LayerScale { c: usize, init: f64 },
    /// `c` is the block width; EffStyle gates 4c channels.
    Attention { kind: AttentionKind, c: usize },
    GlobalPool,
    Fc { c_in: usize, c_out: usize },
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Self {
        LayerSpec::Conv { c_in, c_out, k, stride, groups: 1, bias }
    }

    pub fn depthwise(c: usize, k: usize, bias: bool) -> Self {
        LayerSpec::Conv { c_in: c, c_out: c, k, stride: 1, groups: c, bias }
    }

    pub fn out_dims(&self, d: Dims) -> Result<Dims> {
        let expect = |c: usize| {
            if d.c == c {
                Ok(())
            } else {
                Err(shape_err!("{self:?} expects {c} channels, got input {d}"))
            }
        };
        match *self {
            LayerSpec::Conv { c_in, c_out, k, stride, groups, .. } => {
                expect(c_in)?;
                if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                    return Err(config_err!("conv {c_in}->{c_out} with {groups} groups"));
                }
                match (conv_out_extent(d.h, k, stride), conv_out_extent(d.w, k, stride)) {
                    (Some(h), Some(w)) => Ok(Dims::new(d.n, c_out, h, w)),
                    _ => Err(shape_err!("conv k={k} s={stride} has no output on {d}")),
                }
            }
            LayerSpec::Norm { c, .. } | LayerSpec::LayerScale { c, .. } => expect(c).map(|_| d),
            LayerSpec::Attention { kind, c } => {
                expect(attention_shape(kind, c)?.width)?;
                Ok(d)
            }
            LayerSpec::Gelu => Ok(d),
            LayerSpec::PointwiseFc { c_in, c_out } => expect(c_in).map(|_| Dims { c: c_out, ..d }),
            LayerSpec::GlobalPool => Ok(Dims::new(d.n, d.c, 1, 1)),
            LayerSpec::Fc { c_in, c_out } => {
                if d.c * d.plane() != c_in {
                    return Err(shape_err!("fc expects {c_in} features, got {d}"));
                }
                Ok(Dims::new(d.n, c_out, 1, 1))
            }
        }
    }
}

/// How a CSP stage divides its ch_mid input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum SplitNode {
    /// Channels [0, first) bypass the blocks, the rest enter them.
    Tensor { first: usize },
    /// `bypass` and `main` each map ch_mid to ch_mid/2.
    ConvPair { bypass: Vec<Node>, main: Vec<Node> },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Node {
    Layer { name: String, spec: LayerSpec },
    /// y = x + body(x)
    Residual { name: String, body: Vec<Node> },
    /// split -> blocks on one part -> concat -> fuse
    Csp { name: String, split: SplitNode, blocks: Vec<Node>, fuse: Vec<Node> },
    /// Named point in the trace, no computation.
    Marker { name: String },
}

impl Node {
    pub fn layer(name: impl Into<String>, spec: LayerSpec) -> Self {
        Node::Layer { name: name.into(), spec }
    }

    pub fn name(&self) -> &str {
        match self {
            Node::Layer { name, .. } | Node::Residual { name, .. } | Node::Csp { name, .. } | Node::Marker { name } => {
                name
            }
        }
    }
}

/// Propagates `d` through `nodes`, calling `visit` on every leaf layer and marker.
pub fn walk(nodes: &[Node], d: Dims, visit: &mut dyn FnMut(&Node, Dims, Dims)) -> Result<Dims> {
    let mut cur = d;
    for node in nodes {
        cur = walk_node(node, cur, visit)?;
    }
    Ok(cur)
}

fn walk_node(node: &Node, d: Dims, visit: &mut dyn FnMut(&Node, Dims, Dims)) -> Result<Dims> {
    match node {
        Node::Layer { spec, .. } => {
            let out = spec.out_dims(d)?;
            visit(node, d, out);
            Ok(out)
        }
        Node::Marker { .. } => {
            visit(node, d, d);
            Ok(d)
        }
        Node::Residual { name, body } => {
            let out = walk(body, d, visit)?;
            if out != d {
                return Err(shape_err!("residual {name} body maps {d} to {out}"));
            }
            Ok(d)
        }
        Node::Csp { name, split, blocks, fuse } => {
            let (a, b) = match split {
                SplitNode::Tensor { first } => {
                    if *first == 0 || *first >= d.c {
                        return Err(shape_err!("{name}: split at {first} of {}", d.c));
                    }
                    (Dims { c: *first, ..d }, Dims { c: d.c - first, ..d })
                }
                SplitNode::ConvPair { bypass, main } => (walk(bypass, d, visit)?, walk(main, d, visit)?),
            };
            let b = walk(blocks, b, visit)?;
            if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
                return Err(shape_err!("{name}: cannot concat {a} with {b}"));
            }
            walk(fuse, Dims { c: a.c + b.c, ..a }, visit)
        }
    }
}

/// The full layer graph of an architecture.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerGraph {
    pub config: ArchConfig,
    pub nodes: Vec<Node>,
}

impl LayerGraph {
    pub fn input_dims(&self, batch: usize) -> Dims {
        let [h, w] = self.config.input_size;
        Dims::new(batch, 3, h, w)
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        walk(&self.nodes, input, &mut |_, _, _| {})
    }
}

struct Builder<'a> {
    cfg: &'a ArchConfig,
}

impl Builder<'_> {
    fn norm(&self, kind: NormKind, c: usize) -> LayerSpec {
        LayerSpec::Norm { kind, c }
    }

    /// conv -> norm -> GELU, convs without bias.
    fn conv_norm_act(&self, prefix: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Vec<Node> {
        vec![
            Node::layer(format!("{prefix}.conv"), LayerSpec::conv(c_in, c_out, k, stride, false)),
            Node::layer(format!("{prefix}.norm"), self.norm(self.cfg.conv_norm, c_out)),
            Node::layer(format!("{prefix}.act"), LayerSpec::Gelu),
        ]
    }

    fn stem(&self) -> Vec<Node> {
        let out = self.cfg.stem_out_channels();
        let mid = self.cfg.stem_mid_channels;
        match (self.cfg.stem, self.cfg.layer_style) {
            (StemKind::Patchify4, LayerStyle::ConvNeXt) => vec![
                Node::layer("stem.conv", LayerSpec::conv(3, out, 4, 4, true)),
                Node::layer("stem.norm", self.norm(NormKind::LayerNormChFirst, out)),
            ],
            (StemKind::Patchify4, _) => self.conv_norm_act("stem", 3, out, 4, 4),
            (StemKind::TwoStep2, LayerStyle::ConvNeXt) => vec![
                Node::layer("stem.conv", LayerSpec::conv(3, out, 2, 2, true)),
                Node::layer("stem.norm", self.norm(NormKind::LayerNormChFirst, out)),
            ],
            (StemKind::TwoStep2, _) => self.conv_norm_act("stem", 3, out, 2, 2),
            (StemKind::Stepped | StemKind::ResNetVC, _) => {
                let (k0, s0) = if self.cfg.stem == StemKind::Stepped { (2, 2) } else { (3, 2) };
                let mut v = self.conv_norm_act("stem.0", 3, mid, k0, s0);
                v.extend(self.conv_norm_act("stem.1", mid, mid, 3, 1));
                v.extend(self.conv_norm_act("stem.2", mid, out, 3, 1));
                v
            }
        }
    }

    fn downsample(&self, prefix: &str, c_in: usize, c_out: usize) -> Vec<Node> {
        match self.cfg.layer_style {
            LayerStyle::ConvNeXt => vec![
                Node::layer(format!("{prefix}.norm"), self.norm(NormKind::LayerNormChFirst, c_in)),
                Node::layer(format!("{prefix}.conv"), LayerSpec::conv(c_in, c_out, 2, 2, true)),
            ],
            LayerStyle::ConvNormAct => self.conv_norm_act(prefix, c_in, c_out, 2, 2),
        }
    }

    fn stage(&self, i: usize, spec: &StageSpec) -> Result<Vec<Node>> {
        let prefix = format!("stage{}", i + 1);
        let mid = spec.ch_mid()?;
        let mut nodes = Vec::new();
        if self.cfg.stage_downsamples(i) {
            nodes.extend(self.downsample(&format!("{prefix}.down"), spec.ch_in, mid));
        } else if spec.ch_in != mid {
            return Err(config_err!("{prefix} has no downsampling layer but changes width {} -> {mid}", spec.ch_in));
        }
        if spec.split_kind == SplitKind::PassThrough {
            for b in 0..spec.n_blocks {
                nodes.push(block(self.cfg, &format!("{prefix}.block{b}"), mid)?);
            }
        } else {
            nodes.push(csp_stage(self.cfg, &prefix, spec, mid)?);
            nodes.extend(self.conv_norm_act(&format!("{prefix}.merge"), mid, spec.ch_out, 1, 1));
        }
        nodes.push(Node::Marker { name: format!("{prefix}_out") });
        Ok(nodes)
    }

    fn head(&self, c: usize) -> Vec<Node> {
        let mut v = vec![Node::layer("head.pool", LayerSpec::GlobalPool)];
        if self.cfg.head_norm {
            v.push(Node::layer("head.norm", self.norm(NormKind::LayerNormChFirst, c)));
        }
        v.push(Node::layer("head.fc", LayerSpec::Fc { c_in: c, c_out: self.cfg.num_classes }));
        v
    }
}

/// The CSP body of a stage at width `mid` (split, blocks, concat, stage
/// attention). Zero-block stages are allowed here.
pub fn csp_stage(cfg: &ArchConfig, prefix: &str, spec: &StageSpec, mid: usize) -> Result<Node> {
    let half = mid / 2;
    if !mid.is_multiple_of(2) || half == 0 {
        return Err(config_err!("{prefix}: ch_mid {mid} cannot be halved"));
    }
    let b = Builder { cfg };
    let split = match spec.split_kind {
        SplitKind::TensorSplit => SplitNode::Tensor { first: half },
        SplitKind::OneByOneConvPair => SplitNode::ConvPair {
            bypass: b.conv_norm_act(&format!("{prefix}.split.bypass"), mid, half, 1, 1),
            main: b.conv_norm_act(&format!("{prefix}.split.main"), mid, half, 1, 1),
        },
        SplitKind::PassThrough => return Err(config_err!("{prefix}: pass-through stage has no CSP body")),
    };
    let blocks = (0..spec.n_blocks).map(|i| block(cfg, &format!("{prefix}.block{i}"), half)).collect::<Result<_>>()?;
    let mut fuse = Vec::new();
    if cfg.stage_attention != AttentionKind::None {
        fuse.push(Node::layer(format!("{prefix}.attn_norm"), LayerSpec::Norm { kind: NormKind::BatchNorm, c: mid }));
        fuse.push(Node::layer(format!("{prefix}.attn"), LayerSpec::Attention { kind: cfg.stage_attention, c: mid }));
    }
    Ok(Node::Csp { name: format!("{prefix}.csp"), split, blocks, fuse })
}

/// One inverted-bottleneck residual block of width `c`.
pub fn block(cfg: &ArchConfig, prefix: &str, c: usize) -> Result<Node> {
    let bk = &cfg.block;
    let hidden = 4 * c;
    let p = |s: &str| format!("{prefix}.{s}");
    let attn = bk.attention;
    let mut body = Vec::new();
    let lnfc = bk.kind == BlockType::LNFC;
    body.push(Node::layer(p("dwconv"), LayerSpec::depthwise(c, 7, lnfc)));
    if lnfc {
        body.push(Node::layer(p("norm"), LayerSpec::Norm { kind: NormKind::LayerNormChLast, c }));
        body.push(Node::layer(p("pwconv1"), LayerSpec::PointwiseFc { c_in: c, c_out: hidden }));
    } else {
        body.push(Node::layer(p("norm"), LayerSpec::Norm { kind: NormKind::BatchNorm, c }));
        body.push(Node::layer(p("pwconv1"), LayerSpec::conv(c, hidden, 1, 1, true)));
    }
    body.push(Node::layer(p("act"), LayerSpec::Gelu));
    if attn == AttentionKind::EffStyle {
        body.push(Node::layer(p("attn_norm"), LayerSpec::Norm { kind: NormKind::BatchNorm, c: hidden }));
        body.push(Node::layer(p("attn"), LayerSpec::Attention { kind: attn, c }));
    }
    let gated_after = matches!(attn, AttentionKind::SEStyle | AttentionKind::ESE);
    if lnfc {
        body.push(Node::layer(p("pwconv2"), LayerSpec::PointwiseFc { c_in: hidden, c_out: c }));
    } else {
        // a conv feeding a batch norm carries no bias
        body.push(Node::layer(p("pwconv2"), LayerSpec::conv(hidden, c, 1, 1, !gated_after)));
    }
    if let Some(init) = bk.layer_scale_init {
        body.push(Node::layer(p("layer_scale"), LayerSpec::LayerScale { c, init }));
    }
    if gated_after {
        body.push(Node::layer(p("attn_norm"), LayerSpec::Norm { kind: NormKind::BatchNorm, c }));
        body.push(Node::layer(p("attn"), LayerSpec::Attention { kind: attn, c }));
    }
    Ok(Node::Residual { name: prefix.to_string(), body })
}

/// Builds the layer graph of a validated configuration.
pub fn build(config: &ArchConfig) -> Result<LayerGraph> {
    config.validate()?;
    let b = Builder { cfg: config };
    let mut nodes = b.stem();
    nodes.push(Node::Marker { name: "stem_out".into() });
    for (i, s) in config.stages.iter().enumerate() {
        nodes.extend(b.stage(i, s)?);
    }
    nodes.extend(b.head(config.stages[3].ch_out));
    nodes.push(Node::Marker { name: "logits".into() });
    let graph = LayerGraph { config: config.clone(), nodes };
    let out = graph.output_dims(graph.input_dims(1))?;
    if out != Dims::new(1, config.num_classes, 1, 1) {
        return Err(shape_err!("graph ends at {out}, expected {} logits", config.num_classes));
    }
    Ok(graph)
}

/// One row of a shape trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceRow {
    pub name: String,
    pub dims: Dims,
}

/// Symbolic shape propagation for a single input sample.
pub fn shape_trace(config: &ArchConfig) -> Result<Vec<TraceRow>> {
    let graph = build(config)?;
    let mut rows = Vec::new();
    walk(&graph.nodes, graph.input_dims(1), &mut |node, _, out| {
        rows.push(TraceRow { name: node.name().to_string(), dims: out });
    })?;
    Ok(rows)
}
