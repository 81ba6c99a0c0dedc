//! Conformer blocks: half-step feed-forward, relative-position multi-head
//! self-attention, convolution module, half-step feed-forward, final norm.
//!
//! The convolution module normalizes with a per-frame layer norm where the
//! reference design uses batch norm, so a frame's output never depends on
//! other utterances or, in causal mode, on later frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::layers::{LayerNorm, Linear};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    pub causal: bool,
    pub conv_kernel: usize,
    /// Relative offsets beyond ±this share one attention bias.
    #[serde(default = "default_max_rel_pos")]
    pub max_rel_pos: usize,
}

fn default_max_rel_pos() -> usize {
    64
}

impl Default for ConformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            num_heads: 4,
            model_dim: 256,
            ffn_dim: 2048,
            dropout_p: 0.1,
            causal: false,
            conv_kernel: 31,
            max_rel_pos: 64,
        }
    }
}

impl ConformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim),
            up: Linear::new(store, &format!("{name}.up"), cfg.model_dim, cfg.ffn_dim, rng),
            down: Linear::new(store, &format!("{name}.down"), cfg.ffn_dim, cfg.model_dim, rng),
        }
    }

    fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, p: f64, rng: &mut R) -> Var {
        let h = self.norm.forward(g, x);
        let h = self.up.forward(g, h);
        let h = g.silu(h);
        let h = g.dropout(h, p, rng);
        let h = self.down.forward(g, h);
        g.dropout(h, p, rng)
    }
}

#[derive(Debug, Clone)]
struct SelfAttention {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    rel_bias: ParamId,
}

#[derive(Debug, Clone)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise_w: ParamId,
    depthwise_b: ParamId,
    mid_norm: LayerNorm,
    pointwise_out: Linear,
}

#[derive(Debug, Clone)]
pub struct ConformerLayer {
    ff1: FeedForward,
    attn: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: LayerNorm,
}

impl ConformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ConformerConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.model_dim;
        let attn = SelfAttention {
            norm: LayerNorm::new(store, &format!("{name}.attn.norm"), d),
            query: Linear::new(store, &format!("{name}.attn.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), d, d, rng),
            rel_bias: store.add(
                format!("{name}.attn.rel_bias"),
                Tensor::zeros(cfg.num_heads, 2 * cfg.max_rel_pos + 1),
            ),
        };
        let kb = 1.0 / (cfg.conv_kernel as f64).sqrt();
        let conv = ConvModule {
            norm: LayerNorm::new(store, &format!("{name}.conv.norm"), d),
            pointwise_in: Linear::new(store, &format!("{name}.conv.pointwise_in"), d, 2 * d, rng),
            depthwise_w: store.add(
                format!("{name}.conv.depthwise.weight"),
                Tensor::uniform(d, cfg.conv_kernel, kb, rng),
            ),
            depthwise_b: store.add(
                format!("{name}.conv.depthwise.bias"),
                Tensor::uniform(1, d, kb, rng),
            ),
            mid_norm: LayerNorm::new(store, &format!("{name}.conv.mid_norm"), d),
            pointwise_out: Linear::new(store, &format!("{name}.conv.pointwise_out"), d, d, rng),
        };
        Self {
            ff1: FeedForward::new(store, &format!("{name}.ff1"), cfg, rng),
            attn,
            conv,
            ff2: FeedForward::new(store, &format!("{name}.ff2"), cfg, rng),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
        }
    }

    /// Shape-preserving `T × model_dim` transform.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        cfg: &ConformerConfig,
        rng: &mut R,
    ) -> Var {
        let p = cfg.dropout_p;

        let h = self.ff1.forward(g, x, p, rng);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);

        let a = &self.attn;
        let h = a.norm.forward(g, x);
        let q = a.query.forward(g, h);
        let k = a.key.forward(g, h);
        let v = a.value.forward(g, h);
        let h = g.attention(q, k, v, Var::Param(a.rel_bias), cfg.num_heads, cfg.causal);
        let h = a.out.forward(g, h);
        let h = g.dropout(h, p, rng);
        let x = g.add(x, h);

        let c = &self.conv;
        let h = c.norm.forward(g, x);
        let h = c.pointwise_in.forward(g, h);
        let h = g.glu(h);
        let h = g.depthwise_conv(h, Var::Param(c.depthwise_w), Var::Param(c.depthwise_b), cfg.causal);
        let h = c.mid_norm.forward(g, h);
        let h = g.silu(h);
        let h = c.pointwise_out.forward(g, h);
        let h = g.dropout(h, p, rng);
        let x = g.add(x, h);

        let h = self.ff2.forward(g, x, p, rng);
        let h = g.scale(h, 0.5);
        let x = g.add(x, h);

        self.final_norm.forward(g, x)
    }
}

/// A stack of identically configured Conformer layers.
#[derive(Debug, Clone)]
pub struct Conformer {
    pub cfg: ConformerConfig,
    layers: Vec<ConformerLayer>,
}

impl Conformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ConformerConfig,
        rng: &mut R,
    ) -> Self {
        let layers = (0..cfg.num_layers)
            .map(|i| ConformerLayer::new(store, &format!("{name}.{i}"), cfg, rng))
            .collect();
        Self {
            cfg: cfg.clone(),
            layers,
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, rng: &mut R) -> Var {
        self.layers
            .iter()
            .fold(x, |h, layer| layer.forward(g, h, &self.cfg, rng))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}
