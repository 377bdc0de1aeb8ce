//! The ladder architecture, its baselines, heads and parameter accounting.

pub mod checkpoint;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::{
    bidirectional_cross_attention, iterative::iterative_cross_attention_block, sequential_cross_attention,
    AttentionMask, BiDirParams, IterativeStack, SelfAttentionBlock, SequentialParams, ShareScheme,
};
use crate::nn::{Bound, Ffn, ForwardCtx, Init, LayerNorm, Linear, ParamId, ParamStore, INIT_STD};
use crate::rng::substream;
use crate::tensor::{Element, Tensor, Var};
use crate::tokenizers::{PatchSpec, TokenInput, Tokenizer, TokenizerConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    #[default]
    Bidirectional,
    Sequential,
    Iterative,
    FullSelfAttention,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::Bidirectional => "bidirectional",
            AttentionVariant::Sequential => "sequential",
            AttentionVariant::Iterative => "iterative",
            AttentionVariant::FullSelfAttention => "full_self_attention",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Mean over latents (tokens for full self-attention), norm, linear.
    #[default]
    ClassifyMeanLatent,
    /// Norm and a shared linear map per token.
    DenseTokenLinear,
    None,
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub latents: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub variant: AttentionVariant,
    /// Latent self-attention blocks per iterative layer.
    #[serde(default)]
    pub sa_count: usize,
    /// Cross-attention sharing of the iterative variant.
    #[serde(default)]
    pub share: ShareScheme,
    #[serde(default)]
    pub head: HeadKind,
    pub num_classes: usize,
    #[serde(default)]
    pub drop_path: f64,
    pub tokenizer: TokenizerConfig,
}

impl ModelConfig {
    /// Tiny-size image model: 12 layers, 64 latents, width 192, 6 heads, 16x16 patches.
    pub fn bixt_ti16() -> Self {
        Self {
            layers: 12,
            latents: 64,
            dim: 192,
            heads: 6,
            mlp_ratio: 4,
            variant: AttentionVariant::Bidirectional,
            sa_count: 0,
            share: ShareScheme::None,
            head: HeadKind::ClassifyMeanLatent,
            num_classes: 1000,
            drop_path: 0.1,
            tokenizer: TokenizerConfig::Patch(PatchSpec {
                height: 224,
                width: 224,
                channels: 3,
                patch: 16,
                stride: 16,
            }),
        }
    }

    /// Two-layer width-64 model over length-2048 id sequences with 32 symbols.
    pub fn bixt_lra_listops() -> Self {
        Self {
            layers: 2,
            latents: 32,
            dim: 64,
            heads: 2,
            mlp_ratio: 2,
            variant: AttentionVariant::Bidirectional,
            sa_count: 0,
            share: ShareScheme::None,
            head: HeadKind::ClassifyMeanLatent,
            num_classes: 10,
            drop_path: 0.02,
            tokenizer: TokenizerConfig::Ids {
                vocab: 32,
                max_len: 2048,
            },
        }
    }

    /// Vanilla transformer with the same layer and width budget as [`Self::bixt_lra_listops`].
    pub fn transformer_lra_listops() -> Self {
        Self {
            variant: AttentionVariant::FullSelfAttention,
            latents: 0,
            ..Self::bixt_lra_listops()
        }
    }

    /// Smallest useful configuration, sized for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            latents: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            variant: AttentionVariant::Bidirectional,
            sa_count: 0,
            share: ShareScheme::None,
            head: HeadKind::ClassifyMeanLatent,
            num_classes: 3,
            drop_path: 0.0,
            tokenizer: TokenizerConfig::Ids { vocab: 8, max_len: 5 },
        }
    }

    /// Image model with the tiny width but a chosen variant and depth.
    pub fn ti16_variant(variant: AttentionVariant, layers: usize) -> Self {
        Self {
            variant,
            layers,
            ..Self::bixt_ti16()
        }
    }

    /// Perceiver-style image model: `layers` blocks of one cross-attention and `sa_count` self-attentions.
    pub fn iterative_ti16(sa_count: usize, layers: usize, share: ShareScheme) -> Self {
        Self {
            variant: AttentionVariant::Iterative,
            layers,
            sa_count,
            share,
            ..Self::bixt_ti16()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn uses_latents(&self) -> bool {
        self.variant != AttentionVariant::FullSelfAttention
    }

    /// Whether ladder layer `layer` refines the token stream.
    ///
    /// A mean-latent classifier never reads the tokens after the last layer,
    /// so that layer only updates the latents.
    pub fn refines_tokens(&self, layer: usize) -> bool {
        !(self.head == HeadKind::ClassifyMeanLatent && layer + 1 == self.layers)
    }

    /// Checks everything except the layer count.
    pub fn validate_dims(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.heads == 0 {
            return fail("dim and heads must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.uses_latents() && self.latents == 0 {
            return fail("at least one latent is required".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if self.head != HeadKind::None && self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return fail(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        self.tokenizer.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        self.validate_dims()
    }
}

/// Cross-attention of one ladder layer.
#[derive(Debug, Clone, Copy)]
pub enum LadderCross {
    Bidirectional(BiDirParams),
    Sequential(SequentialParams),
}

impl LadderCross {
    pub fn num_params(&self) -> usize {
        match self {
            LadderCross::Bidirectional(p) => p.num_params(),
            LadderCross::Sequential(p) => p.num_params(),
        }
    }

    /// Reference/query/key/value projection parameters only.
    pub fn projection_params(&self) -> usize {
        match self {
            LadderCross::Bidirectional(p) => p.projection_params(),
            LadderCross::Sequential(p) => p.projection_params(),
        }
    }
}

/// Cross-attention on both streams, per-stream FFNs, then latent self-attention.
#[derive(Debug, Clone, Copy)]
pub struct LadderLayer {
    pub norm_lat: LayerNorm,
    pub norm_tok: LayerNorm,
    pub cross: LadderCross,
    pub tok_ffn: Option<(LayerNorm, Ffn)>,
    pub lat_ffn: (LayerNorm, Ffn),
    pub latent_sa: SelfAttentionBlock,
}

impl LadderLayer {
    fn new<T: Element>(store: &mut ParamStore<T>, init: &mut Init, config: &ModelConfig, layer: usize) -> Self {
        let name = format!("layers.{layer}");
        let (d, r) = (config.dim, config.mlp_ratio);
        let refine = config.refines_tokens(layer);
        let norm_lat = LayerNorm::new(store, &format!("{name}.norm_lat"), d);
        let norm_tok = LayerNorm::new(store, &format!("{name}.norm_tok"), d);
        let cross = match config.variant {
            AttentionVariant::Sequential => {
                LadderCross::Sequential(SequentialParams::new(store, init, &format!("{name}.cross"), d, refine))
            }
            _ => LadderCross::Bidirectional(BiDirParams::new(store, init, &format!("{name}.cross"), d, refine)),
        };
        let tok_ffn = refine.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.tok_ffn_norm"), d),
                Ffn::new(store, init, &format!("{name}.tok_ffn"), d, r),
            )
        });
        let lat_ffn = (
            LayerNorm::new(store, &format!("{name}.lat_ffn_norm"), d),
            Ffn::new(store, init, &format!("{name}.lat_ffn"), d, r),
        );
        let latent_sa = SelfAttentionBlock::new(store, init, &format!("{name}.latent_sa"), d, r);
        Self {
            norm_lat,
            norm_tok,
            cross,
            tok_ffn,
            lat_ffn,
            latent_sa,
        }
    }

    pub fn num_params(&self) -> usize {
        self.norm_lat.num_params()
            + self.norm_tok.num_params()
            + self.cross.num_params()
            + self
                .tok_ffn
                .map_or(0, |(n, f)| n.num_params() + f.num_params())
            + self.lat_ffn.0.num_params()
            + self.lat_ffn.1.num_params()
            + self.latent_sa.num_params()
    }
}

/// Attention recorded for one ladder layer, all `[B, H, ..]`.
#[derive(Debug, Clone)]
pub struct LayerAttention<T: Element> {
    pub layer: usize,
    /// Pre-softmax latent→token similarities `[B, H, M, N]`.
    pub lat_tok: Tensor<T>,
    /// Pre-softmax token→latent similarities `[B, H, N, M]`, if tokens were refined.
    pub tok_lat: Option<Tensor<T>>,
    /// Latent-side (row-softmax) attention `[B, H, M, N]`.
    pub latent_attention: Tensor<T>,
    /// Both directions come from one similarity buffer.
    pub shared: bool,
}

/// Optional per-layer transformation of the token stream.
pub trait TokenHook<T: Element> {
    fn apply<'t>(&self, layer: usize, tokens: Var<'t, T>) -> Result<Var<'t, T>>;
}

#[derive(Default)]
pub struct ForwardOptions<'a, T: Element> {
    /// Keep per-layer similarity matrices and attention maps.
    pub export_attention: bool,
    pub token_hook: Option<&'a dyn TokenHook<T>>,
}

pub struct ModelOutput<'t, T: Element> {
    /// `[B, M, D]`; absent for full self-attention.
    pub latents: Option<Var<'t, T>>,
    /// `[B, N, D]`.
    pub tokens: Var<'t, T>,
    pub mask: Option<AttentionMask>,
    pub grid: Option<(usize, usize)>,
    /// Token stream entering the first layer followed by its state after every layer.
    pub token_states: Vec<Var<'t, T>>,
    pub attention: Vec<LayerAttention<T>>,
}

#[derive(Debug, Clone)]
pub enum Body {
    Ladder(Vec<LadderLayer>),
    Iterative(IterativeStack),
    Transformer(Vec<SelfAttentionBlock>),
}

/// Named parameter groups and their sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn group(&self, name: &str) -> Option<usize> {
        self.groups.iter().find(|(g, _)| g == name).map(|&(_, n)| n)
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore<T>,
    pub tokenizer: Tokenizer,
    pub latents: Option<ParamId>,
    pub body: Body,
    pub final_norm: Option<LayerNorm>,
    pub head: Option<Linear>,
}

/// Builds a model with deterministic parameters for `(config, seed)`.
pub fn init_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(substream(seed, "init"));
    let (d, r) = (config.dim, config.mlp_ratio);
    let tokenizer = Tokenizer::new(&mut store, &mut init, &config.tokenizer, d);
    let latents = config
        .uses_latents()
        .then(|| store.add("latents", init.trunc_normal(&[config.latents, d], INIT_STD), false));
    let body = match config.variant {
        AttentionVariant::Bidirectional | AttentionVariant::Sequential => Body::Ladder(
            (0..config.layers)
                .map(|l| LadderLayer::new(&mut store, &mut init, config, l))
                .collect(),
        ),
        AttentionVariant::Iterative => Body::Iterative(IterativeStack::new(
            &mut store,
            &mut init,
            config.layers,
            config.sa_count,
            config.share,
            d,
            r,
        )),
        AttentionVariant::FullSelfAttention => Body::Transformer(
            (0..config.layers)
                .map(|l| SelfAttentionBlock::new(&mut store, &mut init, &format!("blocks.{l}"), d, r))
                .collect(),
        ),
    };
    let (final_norm, head) = match config.head {
        HeadKind::None => (None, None),
        _ => (
            Some(LayerNorm::new(&mut store, "final_norm", d)),
            Some(Linear::zeros(&mut store, "head", d, config.num_classes)),
        ),
    };
    Ok(Model {
        config: config.clone(),
        seed,
        params: store,
        tokenizer,
        latents,
        body,
        final_norm,
        head,
    })
}

impl<T: Element> Model<T> {
    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            seed: self.seed,
            params: self.params.cast(),
            tokenizer: self.tokenizer,
            latents: self.latents,
            body: self.body.clone(),
            final_norm: self.final_norm,
            head: self.head,
        }
    }

    /// Tokenizes `input` and runs the stack.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, T>,
        ctx: &ForwardCtx,
        input: &TokenInput<T>,
        opts: &ForwardOptions<'_, T>,
    ) -> Result<ModelOutput<'t, T>> {
        let tokens = self.tokenizer.forward(p, input)?;
        let mut out = self.forward_tokens(p, ctx, tokens.values, tokens.mask, opts)?;
        out.grid = tokens.grid;
        Ok(out)
    }

    /// Runs the stack on already-embedded `tokens [B, N, D]`.
    pub fn forward_tokens<'t>(
        &self,
        p: &Bound<'t, T>,
        ctx: &ForwardCtx,
        tokens: Var<'t, T>,
        mask: Option<AttentionMask>,
        opts: &ForwardOptions<'_, T>,
    ) -> Result<ModelOutput<'t, T>> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[2] != self.config.dim {
            return Err(Error::Data(format!(
                "tokens must be [B, N, {}], got {shape:?}",
                self.config.dim
            )));
        }
        let heads = self.config.heads;
        let mut lat = match self.latents {
            Some(id) => {
                let zeros = tokens
                    .tape()
                    .constant(Tensor::zeros([shape[0], self.config.latents, self.config.dim]));
                Some(zeros.add(&p[id])?)
            }
            None => None,
        };
        let mut tok = tokens;
        let mut token_states = vec![tok];
        let mut attention = Vec::new();
        let m = mask.as_ref();
        match &self.body {
            Body::Ladder(layers) => {
                for (l, layer) in layers.iter().enumerate() {
                    let (new_lat, new_tok, att) = ladder_layer_forward(
                        p,
                        ctx,
                        layer,
                        l,
                        lat.as_ref().expect("ladder has latents"),
                        &tok,
                        heads,
                        m,
                        opts.export_attention,
                    )?;
                    lat = Some(new_lat);
                    tok = match opts.token_hook {
                        Some(hook) => hook.apply(l, new_tok)?,
                        None => new_tok,
                    };
                    token_states.push(tok);
                    attention.extend(att);
                }
            }
            Body::Iterative(stack) => {
                for l in 0..stack.layers() {
                    let x = lat.as_ref().expect("iterative stack has latents");
                    lat = Some(iterative_cross_attention_block(p, ctx, stack, l, x, &tok, heads, m)?);
                    token_states.push(tok);
                }
            }
            Body::Transformer(blocks) => {
                for block in blocks {
                    tok = block.forward(p, ctx, &tok, heads, m)?;
                    token_states.push(tok);
                }
            }
        }
        Ok(ModelOutput {
            latents: lat,
            tokens: tok,
            mask,
            grid: None,
            token_states,
            attention,
        })
    }

    /// Classification logits `[B, C]` from a forward output.
    pub fn classification_head<'t>(&self, p: &Bound<'t, T>, out: &ModelOutput<'t, T>) -> Result<Var<'t, T>> {
        let (Some(norm), Some(head)) = (self.final_norm, self.head) else {
            return Err(Error::Config("model has no head".into()));
        };
        if self.config.head != HeadKind::ClassifyMeanLatent {
            return Err(Error::Config("model head is not a classifier".into()));
        }
        let pooled = match &out.latents {
            Some(lat) => lat.mean_axis(1)?,
            None => masked_token_mean(&out.tokens, out.mask.as_ref())?,
        };
        Ok(head.forward(p, &norm.forward(p, &pooled)?)?)
    }

    /// Per-token predictions `[B, N, C]`, optionally bilinearly resized to `[B, H*W, C]`.
    pub fn dense_token_head<'t>(
        &self,
        p: &Bound<'t, T>,
        out: &ModelOutput<'t, T>,
        upsample: Option<(usize, usize)>,
    ) -> Result<Var<'t, T>> {
        let (Some(norm), Some(head)) = (self.final_norm, self.head) else {
            return Err(Error::Config("model has no head".into()));
        };
        if self.config.head != HeadKind::DenseTokenLinear {
            return Err(Error::Config("model head is not a dense token head".into()));
        }
        let pred = head.forward(p, &norm.forward(p, &out.tokens)?)?;
        match upsample {
            None => Ok(pred),
            Some(size) => {
                let grid = out
                    .grid
                    .ok_or_else(|| Error::Data("upsampling requires grid-shaped tokens".into()))?;
                bilinear_upsample(&pred, grid, size)
            }
        }
    }

    /// Convenience: tokenize, run, and classify.
    pub fn logits<'t>(&self, p: &Bound<'t, T>, ctx: &ForwardCtx, input: &TokenInput<T>) -> Result<Var<'t, T>> {
        let out = self.forward(p, ctx, input, &ForwardOptions::default())?;
        self.classification_head(p, &out)
    }

    /// Exact parameter counts per group (`tokenizer`, `latents`, `layers.3`, `head`, ...).
    pub fn count_parameters(&self) -> ParamBreakdown {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for entry in self.params.entries() {
            let group = param_group(&entry.name);
            match groups.last_mut() {
                Some((g, n)) if *g == group => *n += entry.value.len(),
                _ => groups.push((group, entry.value.len())),
            }
        }
        let total = groups.iter().map(|(_, n)| n).sum();
        ParamBreakdown { groups, total }
    }
}

fn param_group(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match parts.next() {
        Some(second) if second.parse::<usize>().is_ok() => format!("{first}.{second}"),
        Some("cross") if first == "iterative" => "iterative.cross".into(),
        _ => first.to_string(),
    }
}

/// Mean over valid tokens, `[B, N, D]` to `[B, D]`.
fn masked_token_mean<'t, T: Element>(tokens: &Var<'t, T>, mask: Option<&AttentionMask>) -> Result<Var<'t, T>> {
    let s = tokens.shape();
    let (b, n) = (s[0], s[1]);
    let mut w = vec![T::zero(); b * n];
    for i in 0..b {
        let valid: Vec<usize> = (0..n).filter(|&j| mask.map_or(true, |m| m.is_valid(i, j))).collect();
        let share = T::from_f64_lossy(1.0 / valid.len() as f64);
        for j in valid {
            w[i * n + j] = share;
        }
    }
    let weights = tokens.tape().constant(Tensor::new(vec![b, 1, n], w)?);
    Ok(weights.matmul(tokens)?.reshape(&[b, s[2]])?)
}

/// Align-corners interpolation matrix `[out, len]`.
fn interp_matrix(len: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * len];
    for i in 0..out {
        let src = if out == 1 || len == 1 {
            0.0
        } else {
            i as f64 * (len - 1) as f64 / (out - 1) as f64
        };
        let lo = (src.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        let frac = src - lo as f64;
        m[i * len + lo] += 1.0 - frac;
        m[i * len + hi] += frac;
    }
    m
}

/// Bilinear (align-corners) resize of grid tokens `[B, h*w, C]` to `[B, H*W, C]`.
pub fn bilinear_upsample<'t, T: Element>(
    x: &Var<'t, T>,
    grid: (usize, usize),
    size: (usize, usize),
) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (h, w) = grid;
    let (oh, ow) = size;
    if s.len() != 3 || s[1] != h * w || h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::Data(format!("cannot resize {s:?} on a {h}x{w} grid to {oh}x{ow}")));
    }
    let (b, c) = (s[0], s[2]);
    let tape = x.tape();
    let uh = tape.constant(Tensor::from_f64([oh, h], &interp_matrix(h, oh))?);
    let uw = tape.constant(Tensor::from_f64([ow, w], &interp_matrix(w, ow))?);
    let planes = x.reshape(&[b, h, w, c])?.permute(&[0, 3, 1, 2])?;
    let rows = uh.matmul(&planes)?;
    let full = rows.matmul_t(&uw, false, true)?;
    Ok(full.permute(&[0, 2, 3, 1])?.reshape(&[b, oh * ow, c])?)
}

/// One ladder layer: two-way cross-attention, per-stream FFNs, latent self-attention.
#[allow(clippy::too_many_arguments)]
pub fn ladder_layer_forward<'t, T: Element>(
    p: &Bound<'t, T>,
    ctx: &ForwardCtx,
    layer: &LadderLayer,
    index: usize,
    latents: &Var<'t, T>,
    tokens: &Var<'t, T>,
    heads: usize,
    mask: Option<&AttentionMask>,
    export: bool,
) -> Result<(Var<'t, T>, Var<'t, T>, Option<LayerAttention<T>>)> {
    let lat_n = layer.norm_lat.forward(p, latents)?;
    let tok_n = layer.norm_tok.forward(p, tokens)?;
    let (delta_lat, delta_tok, att) = match &layer.cross {
        LadderCross::Bidirectional(params) => {
            let o = bidirectional_cross_attention(p, params, &lat_n, &tok_n, heads, mask)?;
            let att = export.then(|| LayerAttention {
                layer: index,
                lat_tok: (*o.sim.lat_tok().value()).clone(),
                tok_lat: o.delta_tok.is_some().then(|| o.sim.tok_lat()),
                latent_attention: (*o.latent_attention.value()).clone(),
                shared: true,
            });
            (o.delta_lat, o.delta_tok, att)
        }
        LadderCross::Sequential(params) => {
            let o = sequential_cross_attention(p, params, &lat_n, &tok_n, heads, mask)?;
            let att = if export {
                let scores = o.lat_tok_scores.value();
                let weights = match mask {
                    Some(m) => o.lat_tok_scores.masked_softmax_last(m.valid())?,
                    None => o.lat_tok_scores.softmax(3)?,
                };
                Some(LayerAttention {
                    layer: index,
                    lat_tok: (*scores).clone(),
                    tok_lat: o.tok_lat_scores.map(|s| (*s.value()).clone()),
                    latent_attention: (*weights.value()).clone(),
                    shared: false,
                })
            } else {
                None
            };
            (o.delta_lat, o.delta_tok, att)
        }
    };
    let mut lat = ctx.residual(latents, &delta_lat)?;
    let mut tok = match delta_tok {
        Some(d) => ctx.residual(tokens, &d)?,
        None => *tokens,
    };
    if let Some((norm, ffn)) = &layer.tok_ffn {
        tok = ctx.residual(&tok, &ffn.forward(p, &norm.forward(p, &tok)?)?)?;
    }
    let (norm, ffn) = &layer.lat_ffn;
    lat = ctx.residual(&lat, &ffn.forward(p, &norm.forward(p, &lat)?)?)?;
    lat = layer.latent_sa.forward(p, ctx, &lat, heads, None)?;
    Ok((lat, tok, att))
}
