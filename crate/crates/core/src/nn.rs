//! Transformer building blocks shared by the image encoder and the text decoder.
//!
//! Layers hold only names and dimensions; their tensors live in a
//! [`ParamStore`] and are pulled onto a [`Tape`] at forward time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::params::{Initializer, ParamStore, INIT_STD};
use crate::tensor::{NormKind, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ff_multiplier: usize,
    pub causal: bool,
    pub norm_kind: NormKind,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.ff_multiplier == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// `y = x·Wᵀ + b`, optionally with a low-rank adapter added on top.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub has_bias: bool,
    pub adapter: Option<LoraAdapter>,
}

impl LinearMap {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let map = LinearMap {
            name: name.to_string(),
            d_in,
            d_out,
            has_bias: bias,
            adapter: None,
        };
        store.insert(
            map.weight_name(),
            init.normal(&[d_out, d_in], INIT_STD).with_requires_grad(true),
        )?;
        if bias {
            store.insert(map.bias_name(), Tensor::zeros(&[d_out]).with_requires_grad(true))?;
        }
        Ok(map)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Forward through the base map only, ignoring any adapter.
    pub fn base_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight_name())?;
        let b = if self.has_bias {
            Some(tape.param(store, &self.bias_name())?)
        } else {
            None
        };
        tape.linear(x, w, b)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match &self.adapter {
            Some(adapter) => adapter.forward(tape, store, self, x),
            None => self.base_forward(tape, store, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub name: String,
    pub kind: NormKind,
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, kind: NormKind, dim: usize) -> Result<Self> {
        store.insert(
            format!("{name}.gain"),
            Tensor::from_fn(&[dim], |_| 1.0).with_requires_grad(true),
        )?;
        if kind == NormKind::LayerNorm {
            store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]).with_requires_grad(true))?;
        }
        Ok(Norm {
            name: name.to_string(),
            kind,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = tape.param(store, &format!("{}.gain", self.name))?;
        let bias = match self.kind {
            NormKind::LayerNorm => Some(tape.param(store, &format!("{}.bias", self.name))?),
            NormKind::RmsNorm => None,
        };
        tape.norm(self.kind, x, gain, bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: LinearMap,
    pub k: LinearMap,
    pub v: LinearMap,
    pub o: LinearMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: LinearMap,
    pub down: LinearMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub cfg: BlockConfig,
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    /// Registers one block's parameters under `prefix`. Linear maps carry
    /// biases iff the block uses layer norm.
    pub fn init(store: &mut ParamStore, init: &mut Initializer, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let bias = cfg.norm_kind == NormKind::LayerNorm;
        let mut lin = |store: &mut ParamStore, name: &str, d_in, d_out| {
            LinearMap::init(store, init, &format!("{prefix}.{name}"), d_in, d_out, bias)
        };
        let attn = Attention {
            q: lin(store, "attn.q", d, d)?,
            k: lin(store, "attn.k", d, d)?,
            v: lin(store, "attn.v", d, d)?,
            o: lin(store, "attn.o", d, d)?,
        };
        let ff = FeedForward {
            up: lin(store, "ff.up", d, cfg.ff_multiplier * d)?,
            down: lin(store, "ff.down", cfg.ff_multiplier * d, d)?,
        };
        Ok(TransformerBlock {
            cfg: cfg.clone(),
            norm1: Norm::init(store, &format!("{prefix}.norm1"), cfg.norm_kind, d)?,
            attn,
            norm2: Norm::init(store, &format!("{prefix}.norm2"), cfg.norm_kind, d)?,
            ff,
        })
    }

    pub fn linear_maps_mut(&mut self) -> [&mut LinearMap; 6] {
        let Attention { q, k, v, o } = &mut self.attn;
        let FeedForward { up, down } = &mut self.ff;
        [q, k, v, o, up, down]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        transformer_block(tape, store, x, self)
    }
}

fn check_width(tape: &Tape, op: &'static str, x: Var, d: usize) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != d {
        return Err(Error::shape(op, s, &[d]));
    }
    Ok(s[0])
}

/// Scaled dot-product attention over `num_heads` column blocks. Returns the
/// output and the per-head attention weight matrices.
pub fn attention_with_weights(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &BlockConfig,
    attn: &Attention,
) -> Result<(Var, Vec<Var>)> {
    check_width(tape, "multi_head_attention", x, cfg.embed_dim)?;
    let q = attn.q.forward(tape, store, x)?;
    let k = attn.k.forward(tape, store, x)?;
    let v = attn.v.forward(tape, store, x)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let p = if cfg.causal {
            tape.causal_softmax(scores)?
        } else {
            tape.softmax(scores)?
        };
        heads.push(tape.matmul(p, vh)?);
        weights.push(p);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok((attn.o.forward(tape, store, merged)?, weights))
}

pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &BlockConfig,
    attn: &Attention,
) -> Result<Var> {
    attention_with_weights(tape, store, x, cfg, attn).map(|(out, _)| out)
}

/// `down(activation(up(x)))`
pub fn feed_forward(tape: &mut Tape, store: &ParamStore, x: Var, cfg: &BlockConfig, ff: &FeedForward) -> Result<Var> {
    check_width(tape, "feed_forward", x, cfg.embed_dim)?;
    let h = ff.up.forward(tape, store, x)?;
    let h = match cfg.activation {
        Activation::Gelu => tape.gelu(h)?,
        Activation::Silu => tape.silu(h)?,
    };
    ff.down.forward(tape, store, h)
}

/// Pre-norm residual block: `x + attn(norm1(x))`, then `+ ff(norm2(·))`.
pub fn transformer_block(tape: &mut Tape, store: &ParamStore, x: Var, block: &TransformerBlock) -> Result<Var> {
    let h = block.norm1.forward(tape, store, x)?;
    let h = multi_head_attention(tape, store, h, &block.cfg, &block.attn)?;
    let x = tape.add(x, h)?;
    let h = block.norm2.forward(tape, store, x)?;
    let h = feed_forward(tape, store, h, &block.cfg, &block.ff)?;
    tape.add(x, h)
}

/// First `len` rows of a learned position table.
pub fn positional_embedding(tape: &mut Tape, store: &ParamStore, table: &str, len: usize) -> Result<Var> {
    let t = tape.param(store, table)?;
    let max = tape.shape(t)[0];
    if len > max {
        return Err(Error::ContextLength { needed: len, max });
    }
    tape.slice_rows(t, 0, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(d: usize, heads: usize, causal: bool) -> BlockConfig {
        BlockConfig {
            embed_dim: d,
            num_heads: heads,
            ff_multiplier: 4,
            causal,
            norm_kind: NormKind::RmsNorm,
            activation: Activation::Silu,
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(cfg(6, 4, false).validate().is_err());
    }

    #[test]
    fn position_table_bounds() {
        let mut store = ParamStore::new();
        store.insert("pos", Tensor::zeros(&[4, 2])).unwrap();
        let mut tape = Tape::new();
        assert!(positional_embedding(&mut tape, &store, "pos", 4).is_ok());
        assert!(matches!(
            positional_embedding(&mut tape, &store, "pos", 5),
            Err(Error::ContextLength { needed: 5, max: 4 })
        ));
    }

    #[test]
    fn attention_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let c = cfg(8, 2, true);
        let block = TransformerBlock::init(&mut store, &mut init, "b", &c).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            multi_head_attention(&mut tape, &store, x, &c, &block.attn),
            Err(Error::Shape { .. })
        ));
    }
}
