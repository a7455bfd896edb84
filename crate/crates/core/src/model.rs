//! The residual-in-residual backbone (with or without channel attention) and
//! the multi-scale feature aggregation head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::layers::{self, Bound, ParamStore, MFAN_REDUCE, MFAN_UP};
use crate::tensor::{Shape, Tensor};

/// Topology of the network. Fully determines the parameter count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Residual groups.
    pub groups: usize,
    /// Residual blocks per group.
    pub blocks: usize,
    /// Feature channels in the backbone.
    pub channels: usize,
    /// Upsampling factor of the transposed convolutions.
    pub scale: usize,
    pub use_ca: bool,
    pub ca_reduction: usize,
    pub use_multifan: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            groups: 5,
            blocks: 3,
            channels: 64,
            scale: 3,
            use_ca: false,
            ca_reduction: 16,
            use_multifan: false,
        }
    }
}

impl ModelConfig {
    pub fn rcan(groups: usize, blocks: usize) -> Self {
        ModelConfig {
            groups,
            blocks,
            use_ca: true,
            ..ModelConfig::default()
        }
    }

    pub fn rirn(groups: usize, blocks: usize) -> Self {
        ModelConfig {
            groups,
            blocks,
            ..ModelConfig::default()
        }
    }

    pub fn with_multifan(self) -> Self {
        ModelConfig {
            use_multifan: true,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.groups == 0 || self.blocks == 0 || self.channels == 0 || self.scale == 0 {
            return bad(format!(
                "groups, blocks, channels and scale must be positive: {self:?}"
            ));
        }
        if self.use_ca {
            if self.ca_reduction == 0 || self.channels % self.ca_reduction != 0 {
                return bad(format!(
                    "channel attention needs channels ({}) divisible by reduction ({})",
                    self.channels, self.ca_reduction
                ));
            }
            if self.channels / self.ca_reduction == 0 {
                return bad("channel attention bottleneck is empty".into());
            }
        }
        if self.use_multifan && self.groups < 3 {
            return bad(format!(
                "multi-scale aggregation needs at least 3 residual groups, got {}",
                self.groups
            ));
        }
        Ok(())
    }

    /// Channels entering the aggregation head: groups 2..g-1 plus the final map.
    pub fn aggregate_channels(&self) -> usize {
        (self.groups - 1) * self.channels
    }

    /// Display label: RCAN (attention), RIRN (none), optionally `+Multi-FAN`.
    pub fn label(&self) -> String {
        let base = if self.use_ca { "RCAN" } else { "RIRN" };
        if self.use_multifan {
            format!("{base}+Multi-FAN")
        } else {
            base.to_string()
        }
    }

    pub fn param_count(&self) -> usize {
        layers::param_count(self)
    }
}

/// Everything one forward pass produces.
#[derive(Debug)]
pub struct ForwardOutputs<N> {
    /// Backbone reconstruction.
    pub sr1: N,
    /// Aggregation-head reconstruction.
    pub sr2: Option<N>,
    /// Merge of `sr1` and `sr2`.
    pub sr_out: Option<N>,
    /// Output of every residual group, in order.
    pub rg_features: Vec<N>,
    /// Features after the long skip, right before upsampling.
    pub f_final: N,
    /// Concatenated input of the aggregation head.
    pub aggregate: Option<N>,
}

impl<N> ForwardOutputs<N> {
    /// The output used for evaluation: `sr_out` when present, else `sr1`.
    pub fn prediction(&self) -> &N {
        self.sr_out.as_ref().unwrap_or(&self.sr1)
    }

    /// Heads in loss order: `sr1`, `sr2`, `sr_out`.
    pub fn heads(&self) -> Vec<&N> {
        let mut h = vec![&self.sr1];
        h.extend(self.sr2.as_ref());
        h.extend(self.sr_out.as_ref());
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        let params = layers::init_params(&config, seed)?;
        Model::from_parts(config, params)
    }

    /// Wrap an existing parameter set, checking that it fits the topology.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let reference = layers::init_params(&config, 0)?;
        if reference.len() != params.len() {
            return Err(Error::Config(format!(
                "{} parameter tensors given, topology needs {}",
                params.len(),
                reference.len()
            )));
        }
        for (path, t) in reference.iter() {
            let got = params.get(path)?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {path} has shape {}, expected {}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != 1 {
            return Err(Error::Contract(format!("model input must be single-channel, got {shape}")));
        }
        if shape.h == 0 || shape.w == 0 || shape.h % 4 != 0 || shape.w % 4 != 0 {
            return Err(Error::Contract(format!(
                "input height and width must be positive multiples of 4, got {shape}"
            )));
        }
        Ok(())
    }

    /// Forward pass on any executor, with parameters already bound to it.
    pub fn forward<G: Graph>(&self, g: &mut G, p: &Bound<G::Node>, x: &G::Node) -> Result<ForwardOutputs<G::Node>> {
        self.check_input(g.value(x).shape())?;
        let cfg = &self.config;
        let f0 = layers::conv(g, p, "head", x, 1)?;
        let mut rg_features = Vec::with_capacity(cfg.groups);
        let mut f = f0.clone();
        for i in 1..=cfg.groups {
            f = layers::residual_group(g, p, &format!("rg{i}"), &f, cfg.blocks, cfg.use_ca)?;
            rg_features.push(f.clone());
        }
        let body = layers::conv(g, p, "body", &f, 1)?;
        let f_final = g.add(&body, &f0)?;
        let up = layers::conv_t(g, p, "tail.up", &f_final, cfg.scale)?;
        let sr1 = layers::conv(g, p, "tail.out", &up, 1)?;

        if !cfg.use_multifan {
            return Ok(ForwardOutputs {
                sr1,
                sr2: None,
                sr_out: None,
                rg_features,
                f_final,
                aggregate: None,
            });
        }

        // RG_2 .. RG_{g-1}, then the final feature map.
        let mut parts: Vec<G::Node> = rg_features[1..cfg.groups - 1].to_vec();
        parts.push(f_final.clone());
        let aggregate = g.concat_channels(&parts)?;
        let got = g.value(&aggregate).shape().c;
        if got != cfg.aggregate_channels() {
            return Err(Error::Contract(format!(
                "aggregation produced {got} channels, head expects {}",
                cfg.aggregate_channels()
            )));
        }
        let r = layers::conv(g, p, "mfan.reduce", &aggregate, 1)?;
        let r = g.relu(&r);
        let u = layers::conv_t(g, p, "mfan.up", &r, cfg.scale)?;
        let u = g.relu(&u);
        let sr2 = layers::conv(g, p, "mfan.out", &u, 1)?;
        let pair = g.concat_channels(&[sr1.clone(), sr2.clone()])?;
        let sr_out = layers::conv(g, p, "merge", &pair, 1)?;
        Ok(ForwardOutputs {
            sr1,
            sr2: Some(sr2),
            sr_out: Some(sr_out),
            rg_features,
            f_final,
            aggregate: Some(aggregate),
        })
    }

    /// Inference without recording a tape.
    pub fn infer(&self, x: &Tensor) -> Result<ForwardOutputs<Tensor>> {
        let mut g = Eager;
        let p = self.params.bind(&mut g);
        let input = g.input(x.clone());
        let out = self.forward(&mut g, &p, &input)?;
        drop(p);
        let own = |n: std::rc::Rc<Tensor>| std::rc::Rc::try_unwrap(n).unwrap_or_else(|rc| (*rc).clone());
        Ok(ForwardOutputs {
            sr1: own(out.sr1),
            sr2: out.sr2.map(own),
            sr_out: out.sr_out.map(own),
            rg_features: out.rg_features.into_iter().map(own).collect(),
            f_final: own(out.f_final),
            aggregate: out.aggregate.map(own),
        })
    }

    /// Only the evaluation output, dropping intermediates as early as possible.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.infer(x)?;
        Ok(out.sr_out.unwrap_or(out.sr1))
    }
}

// ---------------------------------------------------------------------------
// Multiply-accumulate proxy for inference cost.

fn conv_macs(n: usize, cin: usize, cout: usize, k: usize, h: usize, w: usize) -> u64 {
    (n * cout * h * w * cin * k * k) as u64
}

fn ca_macs(n: usize, c: usize, mid: usize, h: usize, w: usize) -> u64 {
    // pooling accumulate + two pointwise convs + channelwise scaling
    (n * (c * h * w + c * mid + mid * c + c * h * w)) as u64
}

/// Multiply-accumulate count of the backbone for an `n x 1 x h x w` input.
pub fn backbone_flops(cfg: &ModelConfig, input: Shape) -> u64 {
    let (n, h, w, c, s) = (input.n, input.h, input.w, cfg.channels, cfg.scale);
    let conv3 = conv_macs(n, c, c, 3, h, w);
    let mut block = 2 * conv3;
    if cfg.use_ca {
        block += ca_macs(n, c, c / cfg.ca_reduction, h, w);
    }
    let group = cfg.blocks as u64 * block + conv3;
    conv_macs(n, 1, c, 3, h, w)
        + cfg.groups as u64 * group
        + conv3
        + conv_macs(n, c, c, s, h, w)
        + conv_macs(n, c, 1, 3, h * s, w * s)
}

/// Multiply-accumulate count of the aggregation head and the merge layer.
pub fn head_flops(cfg: &ModelConfig, input: Shape) -> u64 {
    let (n, h, w, s) = (input.n, input.h, input.w, cfg.scale);
    conv_macs(n, cfg.aggregate_channels(), MFAN_REDUCE, 3, h, w)
        + conv_macs(n, MFAN_REDUCE, MFAN_UP, s, h, w)
        + conv_macs(n, MFAN_UP, 1, 3, h * s, w * s)
        + conv_macs(n, 2, 1, 3, h * s, w * s)
}

pub fn count_flops(cfg: &ModelConfig, input: Shape) -> u64 {
    let mut total = backbone_flops(cfg, input);
    if cfg.use_multifan {
        total += head_flops(cfg, input);
    }
    total
}
