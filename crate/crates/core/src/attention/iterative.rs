//! Pre-norm transformer blocks and the Perceiver-style iterative stack.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{cross_attention, multi_head_self_attention, AttentionMask, AttentionParams};
use crate::nn::{Bound, Ffn, ForwardCtx, Init, LayerNorm, ParamStore};
use crate::tensor::{Element, Result, Var};

/// `x + SA(norm(x))`, then `x + FFN(norm(x))`.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: AttentionParams,
    pub norm_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl SelfAttentionBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            attn: AttentionParams::new(store, init, &format!("{name}.attn"), dim),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn: Ffn::new(store, init, &format!("{name}.ffn"), dim, mlp_ratio),
        }
    }

    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        ctx: &ForwardCtx,
        x: &Var<'t, T>,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, T>> {
        let h = self.norm_attn.forward(p, x)?;
        let x = ctx.residual(x, &multi_head_self_attention(p, &self.attn, &h, heads, mask)?)?;
        let h = self.norm_ffn.forward(p, &x)?;
        ctx.residual(&x, &self.ffn.forward(p, &h)?)
    }

    pub fn num_params(&self) -> usize {
        self.norm_attn.num_params() + self.attn.num_params() + self.norm_ffn.num_params() + self.ffn.num_params()
    }
}

/// One-way cross-attention block: latents query tokens, then a latent FFN.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionBlock {
    pub norm_lat: LayerNorm,
    pub norm_tok: LayerNorm,
    pub attn: AttentionParams,
    pub norm_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl CrossAttentionBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            norm_lat: LayerNorm::new(store, &format!("{name}.norm_lat"), dim),
            norm_tok: LayerNorm::new(store, &format!("{name}.norm_tok"), dim),
            attn: AttentionParams::new(store, init, &format!("{name}.attn"), dim),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn: Ffn::new(store, init, &format!("{name}.ffn"), dim, mlp_ratio),
        }
    }

    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        ctx: &ForwardCtx,
        latents: &Var<'t, T>,
        tokens: &Var<'t, T>,
        heads: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t, T>> {
        let lat = self.norm_lat.forward(p, latents)?;
        let tok = self.norm_tok.forward(p, tokens)?;
        let delta = cross_attention(p, &self.attn, &lat, &tok, heads, mask)?.delta;
        let x = ctx.residual(latents, &delta)?;
        let h = self.norm_ffn.forward(p, &x)?;
        ctx.residual(&x, &self.ffn.forward(p, &h)?)
    }

    pub fn num_params(&self) -> usize {
        self.norm_lat.num_params()
            + self.norm_tok.num_params()
            + self.attn.num_params()
            + self.norm_ffn.num_params()
            + self.ffn.num_params()
    }
}

/// Cross-attention parameter sharing across iterative layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareScheme {
    /// Every layer owns its cross-attention parameters.
    #[default]
    None,
    /// One cross-attention parameter set for all layers (†).
    All,
    /// Layer 1 owns a set, every later layer shares a second one (‡).
    AllButFirst,
}

impl ShareScheme {
    /// Index of the cross-attention parameter set used by `layer`.
    pub fn set_for_layer(self, layer: usize) -> usize {
        match self {
            ShareScheme::None => layer,
            ShareScheme::All => 0,
            ShareScheme::AllButFirst => usize::from(layer > 0),
        }
    }

    pub fn num_sets(self, layers: usize) -> usize {
        match self {
            ShareScheme::None => layers,
            ShareScheme::All => layers.min(1),
            ShareScheme::AllButFirst => layers.min(2),
        }
    }
}

impl fmt::Display for ShareScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShareScheme::None => "none",
            ShareScheme::All => "all",
            ShareScheme::AllButFirst => "all_but_first",
        })
    }
}

impl FromStr for ShareScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(ShareScheme::None),
            "all" | "†" => Ok(ShareScheme::All),
            "all_but_first" | "‡" => Ok(ShareScheme::AllButFirst),
            other => Err(format!("unknown share scheme '{other}' (expected none, all, all_but_first)")),
        }
    }
}

/// `layers` blocks of {one-way CA, `sa_count` latent self-attention blocks}.
#[derive(Debug, Clone)]
pub struct IterativeStack {
    pub scheme: ShareScheme,
    pub cross_sets: Vec<CrossAttentionBlock>,
    pub self_blocks: Vec<Vec<SelfAttentionBlock>>,
}

impl IterativeStack {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        layers: usize,
        sa_count: usize,
        scheme: ShareScheme,
        dim: usize,
        mlp_ratio: usize,
    ) -> Self {
        let mut cross_sets = Vec::new();
        let mut self_blocks = Vec::new();
        for layer in 0..layers {
            if scheme.set_for_layer(layer) == cross_sets.len() {
                let name = format!("iterative.cross.{}", cross_sets.len());
                cross_sets.push(CrossAttentionBlock::new(store, init, &name, dim, mlp_ratio));
            }
            self_blocks.push(
                (0..sa_count)
                    .map(|i| SelfAttentionBlock::new(store, init, &format!("iterative.{layer}.sa.{i}"), dim, mlp_ratio))
                    .collect(),
            );
        }
        Self {
            scheme,
            cross_sets,
            self_blocks,
        }
    }

    pub fn layers(&self) -> usize {
        self.self_blocks.len()
    }

    pub fn cross_for_layer(&self, layer: usize) -> &CrossAttentionBlock {
        &self.cross_sets[self.scheme.set_for_layer(layer)]
    }

    pub fn num_params(&self) -> usize {
        self.cross_sets.iter().map(|c| c.num_params()).sum::<usize>()
            + self
                .self_blocks
                .iter()
                .flatten()
                .map(|b| b.num_params())
                .sum::<usize>()
    }
}

/// One iterative layer: latents query the (unrefined) tokens, then self-attend.
#[allow(clippy::too_many_arguments)]
pub fn iterative_cross_attention_block<'t, T: Element>(
    p: &Bound<'t, T>,
    ctx: &ForwardCtx,
    stack: &IterativeStack,
    layer: usize,
    latents: &Var<'t, T>,
    tokens: &Var<'t, T>,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var<'t, T>> {
    let mut x = stack.cross_for_layer(layer).forward(p, ctx, latents, tokens, heads, mask)?;
    for block in &stack.self_blocks[layer] {
        x = block.forward(p, ctx, &x, heads, None)?;
    }
    Ok(x)
}
