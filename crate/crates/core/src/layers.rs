//! Composite layers: channel attention, residual blocks and residual groups,
//! plus parameter registration, initialization and exact parameter counts.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Shape, Tensor};

/// Named parameter tensors, keyed by layer path such as `rg3.rb2.conv1.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a fresh path. Paths are unique.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Config(format!("parameter {path} registered twice")));
        }
        self.tensors.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all registered tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Every tensor whose path starts with `prefix`.
    pub fn scalar_count_under(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Set every parameter whose path starts with `prefix` to zero.
    pub fn zero_under(&mut self, prefix: &str) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().fill(0.0);
            }
        }
    }

    /// Register every tensor on a graph as a trainable leaf.
    pub fn bind<G: Graph>(&self, g: &mut G) -> Bound<G::Node> {
        Bound {
            nodes: self.tensors.iter().map(|(k, v)| (k.clone(), g.param(v))).collect(),
        }
    }
}

/// Parameters registered on a graph, looked up by path.
#[derive(Debug)]
pub struct Bound<N> {
    nodes: BTreeMap<String, N>,
}

impl<N> Bound<N> {
    pub fn get(&self, path: &str) -> Result<&N> {
        self.nodes
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &N)> {
        self.nodes.iter()
    }
}

// ---------------------------------------------------------------------------
// Building blocks.

pub fn conv<G: Graph>(g: &mut G, p: &Bound<G::Node>, path: &str, x: &G::Node, padding: usize) -> Result<G::Node> {
    let w = p.get(&format!("{path}.weight"))?;
    let b = p.get(&format!("{path}.bias"))?;
    g.conv2d(x, w, b, 1, padding)
}

pub fn conv_t<G: Graph>(g: &mut G, p: &Bound<G::Node>, path: &str, x: &G::Node, stride: usize) -> Result<G::Node> {
    let w = p.get(&format!("{path}.weight"))?;
    let b = p.get(&format!("{path}.bias"))?;
    g.conv_transpose2d(x, w, b, stride)
}

/// Squeeze-and-excite channel gating: `u * sigmoid(up(relu(down(gap(u)))))`.
pub fn channel_attention<G: Graph>(g: &mut G, p: &Bound<G::Node>, path: &str, u: &G::Node) -> Result<G::Node> {
    let pooled = g.global_avg_pool(u);
    let squeezed = conv(g, p, &format!("{path}.down"), &pooled, 0)?;
    let squeezed = g.relu(&squeezed);
    let expanded = conv(g, p, &format!("{path}.up"), &squeezed, 0)?;
    let gate = g.sigmoid(&expanded);
    g.mul_channelwise(u, &gate)
}

/// `f + [CA](conv(relu(conv(f))))`.
pub fn residual_block<G: Graph>(
    g: &mut G,
    p: &Bound<G::Node>,
    path: &str,
    f: &G::Node,
    use_ca: bool,
) -> Result<G::Node> {
    let y = conv(g, p, &format!("{path}.conv1"), f, 1)?;
    let y = g.relu(&y);
    let mut y = conv(g, p, &format!("{path}.conv2"), &y, 1)?;
    if use_ca {
        y = channel_attention(g, p, &format!("{path}.ca"), &y)?;
    }
    g.add(f, &y)
}

/// `b` residual blocks followed by a 3x3 conv, wrapped in a short skip.
pub fn residual_group<G: Graph>(
    g: &mut G,
    p: &Bound<G::Node>,
    path: &str,
    f: &G::Node,
    blocks: usize,
    use_ca: bool,
) -> Result<G::Node> {
    if blocks == 0 {
        return Err(Error::Config("a residual group needs at least one block".into()));
    }
    let mut y = f.clone();
    for i in 1..=blocks {
        y = residual_block(g, p, &format!("{path}.rb{i}"), &y, use_ca)?;
    }
    let y = conv(g, p, &format!("{path}.conv"), &y, 1)?;
    g.add(f, &y)
}

// ---------------------------------------------------------------------------
// Parameter counting.

pub const fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

pub const fn ca_params(channels: usize, reduction: usize) -> usize {
    let mid = channels / reduction;
    conv_params(channels, mid, 1) + conv_params(mid, channels, 1)
}

pub const fn block_params(channels: usize, use_ca: bool, reduction: usize) -> usize {
    let convs = 2 * conv_params(channels, channels, 3);
    if use_ca {
        convs + ca_params(channels, reduction)
    } else {
        convs
    }
}

pub const fn group_params(channels: usize, blocks: usize, use_ca: bool, reduction: usize) -> usize {
    blocks * block_params(channels, use_ca, reduction) + conv_params(channels, channels, 3)
}

/// Width of the first Multi-FAN reduction layer.
pub const MFAN_REDUCE: usize = 64;
/// Width of the Multi-FAN transposed convolution.
pub const MFAN_UP: usize = 32;

/// Closed-form count of every weight and bias in the configured topology.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.channels;
    let s = cfg.scale;
    let backbone = conv_params(1, c, 3)
        + cfg.groups * group_params(c, cfg.blocks, cfg.use_ca, cfg.ca_reduction)
        + conv_params(c, c, 3)
        + conv_params(c, c, s)
        + conv_params(c, 1, 3);
    if !cfg.use_multifan {
        return backbone;
    }
    backbone + multifan_params(cfg)
}

pub fn multifan_params(cfg: &ModelConfig) -> usize {
    conv_params(cfg.aggregate_channels(), MFAN_REDUCE, 3)
        + conv_params(MFAN_REDUCE, MFAN_UP, cfg.scale)
        + conv_params(MFAN_UP, 1, 3)
        + conv_params(2, 1, 3)
}

// ---------------------------------------------------------------------------
// Initialization.

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    /// Weight `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero bias.
    fn tensor(&mut self, path: &str, shape: Shape, fan_in: usize, bias: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.store.insert(format!("{path}.weight"), w)?;
        self.store
            .insert(format!("{path}.bias"), Tensor::zeros(Shape::new(bias, 1, 1, 1)))
    }

    fn conv(&mut self, path: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.tensor(path, Shape::new(cout, cin, k, k), cin * k * k, cout)
    }

    /// With `k == stride` each output pixel sees exactly `cin` inputs.
    fn conv_t(&mut self, path: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<()> {
        let taps = k.div_ceil(stride).pow(2);
        self.tensor(path, Shape::new(cin, cout, k, k), cin * taps, cout)
    }

    fn group(&mut self, path: &str, cfg: &ModelConfig) -> Result<()> {
        let c = cfg.channels;
        for i in 1..=cfg.blocks {
            let rb = format!("{path}.rb{i}");
            self.conv(&format!("{rb}.conv1"), c, c, 3)?;
            self.conv(&format!("{rb}.conv2"), c, c, 3)?;
            if cfg.use_ca {
                let mid = c / cfg.ca_reduction;
                self.conv(&format!("{rb}.ca.down"), c, mid, 1)?;
                self.conv(&format!("{rb}.ca.up"), mid, c, 1)?;
            }
        }
        self.conv(&format!("{path}.conv"), c, c, 3)
    }
}

/// Deterministic parameters for a validated configuration.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        store: ParamStore::new(),
    };
    let c = cfg.channels;
    init.conv("head", 1, c, 3)?;
    for i in 1..=cfg.groups {
        init.group(&format!("rg{i}"), cfg)?;
    }
    init.conv("body", c, c, 3)?;
    init.conv_t("tail.up", c, c, cfg.scale, cfg.scale)?;
    init.conv("tail.out", c, 1, 3)?;
    if cfg.use_multifan {
        init.conv("mfan.reduce", cfg.aggregate_channels(), MFAN_REDUCE, 3)?;
        init.conv_t("mfan.up", MFAN_REDUCE, MFAN_UP, cfg.scale, cfg.scale)?;
        init.conv("mfan.out", MFAN_UP, 1, 3)?;
        init.conv("merge", 2, 1, 3)?;
    }
    Ok(init.store)
}
