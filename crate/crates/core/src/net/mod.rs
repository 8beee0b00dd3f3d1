//! Executable networks built from layer graphs.

mod layer;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{build, ArchConfig, LayerGraph, Node, SplitNode};
use crate::error::{shape_err, Error, Result};
use crate::etf;
use crate::ops::{add, concat_channels, split_channels, Mode};
use crate::tensor::Tensor;

pub use layer::{trunc_normal, Layer};

/// Executable counterpart of a graph node.
#[derive(Clone, Debug)]
pub enum Module {
    Layer { name: String, layer: Layer },
    Residual { name: String, body: Vec<Module> },
    Csp { name: String, split: SplitModule, blocks: Vec<Module>, fuse: Vec<Module>, bypass_c: Option<usize> },
    Marker { name: String },
}

#[derive(Clone, Debug)]
pub enum SplitModule {
    Tensor { first: usize },
    ConvPair { bypass: Vec<Module>, main: Vec<Module> },
}

/// Instantiates graph nodes with freshly initialized weights.
pub fn instantiate(nodes: &[Node], init_std: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Module>> {
    nodes.iter().map(|n| instantiate_node(n, init_std, rng)).collect()
}

fn instantiate_node(node: &Node, std: f64, rng: &mut ChaCha8Rng) -> Result<Module> {
    Ok(match node {
        Node::Layer { name, spec } => Module::Layer { name: name.clone(), layer: Layer::new(spec, std, rng)? },
        Node::Residual { name, body } => Module::Residual { name: name.clone(), body: instantiate(body, std, rng)? },
        Node::Csp { name, split, blocks, fuse } => Module::Csp {
            name: name.clone(),
            split: match split {
                SplitNode::Tensor { first } => SplitModule::Tensor { first: *first },
                SplitNode::ConvPair { bypass, main } => SplitModule::ConvPair {
                    bypass: instantiate(bypass, std, rng)?,
                    main: instantiate(main, std, rng)?,
                },
            },
            blocks: instantiate(blocks, std, rng)?,
            fuse: instantiate(fuse, std, rng)?,
            bypass_c: None,
        },
        Node::Marker { name } => Module::Marker { name: name.clone() },
    })
}

/// Runs `mods` in order, caching what the reverse pass needs.
pub fn forward_seq(mods: &mut [Module], x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut cur = x.clone();
    for m in mods.iter_mut() {
        cur = m.forward(&cur, mode)?;
    }
    Ok(cur)
}

/// Reverse pass through `mods`; returns the gradient at the sequence input.
pub fn backward_seq(mods: &mut [Module], grad: &Tensor) -> Result<Tensor> {
    let mut g = grad.clone();
    for m in mods.iter_mut().rev() {
        g = m.backward(&g)?;
    }
    Ok(g)
}

/// Eval-mode pass without caching.
pub fn infer_seq(mods: &[Module], x: &Tensor) -> Result<Tensor> {
    let mut cur = x.clone();
    for m in mods {
        cur = m.infer(&cur)?;
    }
    Ok(cur)
}

impl Module {
    pub fn name(&self) -> &str {
        match self {
            Module::Layer { name, .. }
            | Module::Residual { name, .. }
            | Module::Csp { name, .. }
            | Module::Marker { name } => name,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Module::Layer { layer, .. } => layer.forward(x, mode),
            Module::Marker { .. } => Ok(x.clone()),
            Module::Residual { body, .. } => add(x, &forward_seq(body, x, mode)?),
            Module::Csp { split, blocks, fuse, bypass_c, .. } => {
                let (a, b) = match split {
                    SplitModule::Tensor { first } => split_channels(x, *first)?,
                    SplitModule::ConvPair { bypass, main } => {
                        (forward_seq(bypass, x, mode)?, forward_seq(main, x, mode)?)
                    }
                };
                *bypass_c = Some(a.dims().c);
                let b = forward_seq(blocks, &b, mode)?;
                forward_seq(fuse, &concat_channels(&a, &b)?, mode)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Module::Layer { layer, .. } => layer.backward(grad),
            Module::Marker { .. } => Ok(grad.clone()),
            Module::Residual { body, .. } => add(grad, &backward_seq(body, grad)?),
            Module::Csp { name, split, blocks, fuse, bypass_c } => {
                let first = bypass_c.ok_or_else(|| Error::Mode(format!("{name}: backward before forward")))?;
                let g = backward_seq(fuse, grad)?;
                let (ga, gb) = split_channels(&g, first)?;
                let gb = backward_seq(blocks, &gb)?;
                match split {
                    SplitModule::Tensor { .. } => concat_channels(&ga, &gb),
                    SplitModule::ConvPair { bypass, main } => {
                        add(&backward_seq(bypass, &ga)?, &backward_seq(main, &gb)?)
                    }
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Module::Layer { layer, .. } => layer.infer(x),
            Module::Marker { .. } => Ok(x.clone()),
            Module::Residual { body, .. } => add(x, &infer_seq(body, x)?),
            Module::Csp { split, blocks, fuse, .. } => {
                let (a, b) = match split {
                    SplitModule::Tensor { first } => split_channels(x, *first)?,
                    SplitModule::ConvPair { bypass, main } => (infer_seq(bypass, x)?, infer_seq(main, x)?),
                };
                let b = infer_seq(blocks, &b)?;
                infer_seq(fuse, &concat_channels(&a, &b)?)
            }
        }
    }

    fn children_mut(&mut self) -> Vec<&mut Vec<Module>> {
        match self {
            Module::Layer { .. } | Module::Marker { .. } => vec![],
            Module::Residual { body, .. } => vec![body],
            Module::Csp { split, blocks, fuse, .. } => {
                let mut v = Vec::new();
                if let SplitModule::ConvPair { bypass, main } = split {
                    v.push(bypass);
                    v.push(main);
                }
                v.push(blocks);
                v.push(fuse);
                v
            }
        }
    }

    fn children(&self) -> Vec<&Vec<Module>> {
        match self {
            Module::Layer { .. } | Module::Marker { .. } => vec![],
            Module::Residual { body, .. } => vec![body],
            Module::Csp { split, blocks, fuse, .. } => {
                let mut v = Vec::new();
                if let SplitModule::ConvPair { bypass, main } = split {
                    v.push(bypass);
                    v.push(main);
                }
                v.push(blocks);
                v.push(fuse);
                v
            }
        }
    }
}

/// Visits every leaf layer with its full name.
pub fn visit_layers<'a>(mods: &'a [Module], f: &mut dyn FnMut(&'a str, &'a Layer)) {
    for m in mods {
        if let Module::Layer { name, layer } = m {
            f(name, layer);
        }
        for c in m.children() {
            visit_layers(c, f);
        }
    }
}

pub fn visit_layers_mut(mods: &mut [Module], f: &mut dyn FnMut(&str, &mut Layer)) {
    for m in mods.iter_mut() {
        if let Module::Layer { name, layer } = m {
            f(name, layer);
        }
        for c in m.children_mut() {
            visit_layers_mut(c, f);
        }
    }
}

/// Trainable parameters as (name, tensor).
pub fn visit_params(mods: &[Module], f: &mut dyn FnMut(&str, &Tensor)) {
    visit_layers(mods, &mut |lname, layer| layer.visit_params(&mut |p, t| f(&format!("{lname}.{p}"), t)));
}

pub fn visit_params_mut(mods: &mut [Module], f: &mut dyn FnMut(&str, &mut Tensor)) {
    visit_layers_mut(mods, &mut |lname, layer| layer.visit_params_mut(&mut |p, t| f(&format!("{lname}.{p}"), t)));
}

/// Parameters followed by running statistics.
pub fn visit_state_mut(mods: &mut [Module], f: &mut dyn FnMut(&str, &mut Tensor)) {
    visit_layers_mut(mods, &mut |lname, layer| {
        layer.visit_params_mut(&mut |p, t| f(&format!("{lname}.{p}"), t));
        layer.visit_buffers_mut(&mut |p, t| f(&format!("{lname}.{p}"), t));
    });
}

/// Replaces every batch norm directly following a conv by folding it into the conv.
pub fn fold_bn_seq(mods: &[Module]) -> Result<Vec<Module>> {
    let mut out: Vec<Module> = Vec::with_capacity(mods.len());
    for m in mods {
        let mut m = m.clone();
        for c in m.children_mut() {
            *c = fold_bn_seq(c)?;
        }
        if let Module::Layer { layer: Layer::Norm { p, .. }, .. } = &m {
            if let Some(Module::Layer { layer: Layer::Conv { p: conv, .. }, .. }) = out.last_mut() {
                if p.kind == crate::ops::NormKind::BatchNorm {
                    *conv = crate::verify::fold_bn_into_conv(conv, p)?;
                    continue;
                }
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// A whole network with its configuration.
#[derive(Clone, Debug)]
pub struct Network {
    pub graph: LayerGraph,
    pub modules: Vec<Module>,
}

impl Network {
    /// Builds and initializes the network for `config`, seeded deterministically.
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        let graph = build(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modules = instantiate(&graph.nodes, config.init_std, &mut rng)?;
        let mut net = Network { graph, modules };
        net.apply_norm_settings();
        Ok(net)
    }

    fn apply_norm_settings(&mut self) {
        let s = self.graph.config.norm;
        visit_layers_mut(&mut self.modules, &mut |_, l| {
            if let Layer::Norm { p, .. } = l {
                if p.kind.is_layer_norm() {
                    p.eps = s.ln_eps;
                } else {
                    p.eps = s.bn_eps;
                    p.momentum = s.bn_momentum;
                }
            }
        });
    }

    pub fn config(&self) -> &ArchConfig {
        &self.graph.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = x.dims();
        if d.c != 3 || !d.h.is_multiple_of(32) || !d.w.is_multiple_of(32) {
            return Err(shape_err!("network input must be (n, 3, 32k, 32k), got {d}"));
        }
        Ok(())
    }

    /// Forward pass that records activations; `mode` selects batch-norm behaviour.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        forward_seq(&mut self.modules, x, mode)
    }

    /// Reverse pass after `forward`; parameter gradients accumulate.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        backward_seq(&mut self.modules, grad_logits)
    }

    /// Eval-mode forward; never mutates the network.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        infer_seq(&self.modules, x)
    }

    /// Logits flattened to one row per sample.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let y = self.infer(x)?;
        let k = y.dims().c;
        Ok(y.data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    pub fn zero_grad(&mut self) {
        visit_params_mut(&mut self.modules, &mut |_, t| t.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        visit_params(&self.modules, &mut |_, t| n += t.numel());
        n
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_params(&self.modules, f)
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_params_mut(&mut self.modules, f)
    }

    /// Copies of all parameters and running statistics by name.
    pub fn state(&mut self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        visit_state_mut(&mut self.modules, &mut |name, t| {
            m.insert(name.to_string(), t.clone());
        });
        m
    }

    /// Writes one ETF file per state tensor into `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut res = Ok(());
        visit_state_mut(&mut self.modules, &mut |name, t| {
            if res.is_ok() {
                res = etf::save(dir.join(format!("{name}.etf")), t, etf::Dtype::F64);
            }
        });
        res
    }

    /// Reads state written by `save`; every tensor must be present with matching dims.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let mut res = Ok(());
        visit_state_mut(&mut self.modules, &mut |name, t| {
            if res.is_err() {
                return;
            }
            res = etf::load(dir.join(format!("{name}.etf"))).and_then(|loaded| {
                if loaded.numel() != t.numel() {
                    return Err(shape_err!("{name}: stored {} but network has {}", loaded.dims(), t.dims()));
                }
                t.data_mut().copy_from_slice(loaded.data());
                Ok(())
            });
        });
        res
    }

    /// Inference copy with every conv-following batch norm folded away.
    pub fn fold_bn(&self) -> Result<Network> {
        let mut eval = self.clone();
        eval.set_mode(Mode::Eval);
        Ok(Network { graph: self.graph.clone(), modules: fold_bn_seq(&eval.modules)? })
    }

    /// Sets the stored mode of every batch norm.
    pub fn set_mode(&mut self, mode: Mode) {
        visit_layers_mut(&mut self.modules, &mut |_, l| {
            if let Layer::Norm { p, .. } = l {
                p.mode = mode;
            }
        });
    }
}
