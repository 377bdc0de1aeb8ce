//! Analytic per-sample cost model: matmul MACs, parameters, activations.
//!
//! The model walks the same matmuls the forward pass records on a tape
//! (with batch size 1), so a traced forward and the analytic count agree
//! exactly. Activations are the output elements of those matmuls.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::ShareScheme;
use crate::model::{AttentionVariant, HeadKind, ModelConfig};
use crate::tokenizers::{TokenizerConfig, DIMS_PER_AXIS};
use crate::{Error, Result};

/// Which matmuls enter the FLOP total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// Every matmul, including the `N x N` products of token self-attention.
    #[default]
    AllMatmuls,
    /// Leaves out the `N x N` score and aggregation products of token
    /// self-attention (projections and FFNs are still counted).
    SkipSelfAttentionProducts,
}

impl FromStr for FlopConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_matmuls" => Ok(FlopConvention::AllMatmuls),
            "skip_self_attention_products" => Ok(FlopConvention::SkipSelfAttentionProducts),
            other => Err(Error::Config(format!("unknown flop convention '{other}'"))),
        }
    }
}

/// One matmul of the forward pass: `batch` products of `[m, k] x [k, n]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatmulCost {
    pub batch: u64,
    pub m: u64,
    pub k: u64,
    pub n: u64,
}

impl MatmulCost {
    pub fn macs(&self) -> u64 {
        self.batch * self.m * self.k * self.n
    }

    pub fn outputs(&self) -> u64 {
        self.batch * self.m * self.n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    /// `tokenizer`, `layers.<i>` or `head`.
    pub name: String,
    pub flops: u64,
    pub activations: u64,
    #[serde(skip)]
    pub matmuls: Vec<MatmulCost>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub seq_len: usize,
    pub convention: FlopConvention,
    pub flops: u64,
    pub params: u64,
    pub activations: u64,
    pub breakdown: Vec<CostEntry>,
}

impl CostReport {
    pub fn entry(&self, name: &str) -> Option<&CostEntry> {
        self.breakdown.iter().find(|e| e.name == name)
    }
}

struct Walker {
    d: u64,
    h: u64,
    r: u64,
    entries: Vec<CostEntry>,
}

impl Walker {
    fn begin(&mut self, name: impl Into<String>) {
        self.entries.push(CostEntry {
            name: name.into(),
            flops: 0,
            activations: 0,
            matmuls: Vec::new(),
        });
    }

    fn mm(&mut self, batch: u64, m: u64, k: u64, n: u64) {
        let e = self.entries.last_mut().expect("entry started");
        let c = MatmulCost { batch, m, k, n };
        e.flops += c.macs();
        e.activations += c.outputs();
        e.matmuls.push(c);
    }

    /// `rows x in` times `in x out`.
    fn linear(&mut self, rows: u64, i: u64, o: u64) {
        self.mm(1, rows, i, o);
    }

    fn ffn(&mut self, rows: u64) {
        let (d, r) = (self.d, self.r);
        self.linear(rows, d, r * d);
        self.linear(rows, r * d, d);
    }

    /// Per-head `[t, dh] x [dh, s]` scores and `[t, s] x [s, dh]` aggregation.
    fn attend(&mut self, t: u64, s: u64) {
        let dh = self.d / self.h;
        self.mm(self.h, t, dh, s);
        self.mm(self.h, t, s, dh);
    }

    /// Query from `t` rows, keys/values from `s` rows, output projection.
    fn one_way(&mut self, t: u64, s: u64) {
        let d = self.d;
        self.linear(t, d, d);
        self.linear(s, d, d);
        self.linear(s, d, d);
        self.attend(t, s);
        self.linear(t, d, d);
    }

    fn self_block(&mut self, rows: u64, products: bool) {
        let d = self.d;
        for _ in 0..3 {
            self.linear(rows, d, d);
        }
        if products {
            self.attend(rows, rows);
        }
        self.linear(rows, d, d);
        self.ffn(rows);
    }
}

/// Token count produced by the config's tokenizer.
pub fn default_seq_len(config: &ModelConfig) -> Option<usize> {
    match config.tokenizer {
        TokenizerConfig::Patch(spec) => Some(spec.num_tokens()),
        TokenizerConfig::Ids { max_len, .. } => Some(max_len),
        TokenizerConfig::Points { .. } => None,
    }
}

/// Analytic costs of one sample of `seq_len` tokens (default: the tokenizer's own length).
pub fn flop_count(config: &ModelConfig, seq_len: Option<usize>, convention: FlopConvention) -> Result<CostReport> {
    config.validate_dims()?;
    let n_tok = seq_len
        .or_else(|| default_seq_len(config))
        .ok_or_else(|| Error::Config("point inputs need an explicit sequence length".into()))?;
    let n = n_tok as u64;
    let m = config.latents as u64;
    let d = config.dim as u64;
    let mut w = Walker {
        d,
        h: config.heads as u64,
        r: config.mlp_ratio as u64,
        entries: Vec::new(),
    };

    w.begin("tokenizer");
    let axes = config.tokenizer.axes() as u64;
    if let TokenizerConfig::Patch(spec) = config.tokenizer {
        w.linear(n, spec.patch_dim() as u64, d);
    }
    w.linear(n, axes * DIMS_PER_AXIS as u64, d);

    for l in 0..config.layers {
        w.begin(format!("layers.{l}"));
        let refine = config.refines_tokens(l);
        match config.variant {
            AttentionVariant::Bidirectional => {
                w.linear(m, d, d);
                w.linear(n, d, d);
                w.linear(n, d, d);
                w.attend(m, n);
                w.linear(m, d, d);
                if refine {
                    w.linear(m, d, d);
                    w.mm(w.h, n, m, d / w.h);
                    w.linear(n, d, d);
                }
            }
            AttentionVariant::Sequential => {
                w.one_way(m, n);
                if refine {
                    w.one_way(n, m);
                }
            }
            AttentionVariant::Iterative => {
                w.one_way(m, n);
                w.ffn(m);
                for _ in 0..config.sa_count {
                    w.self_block(m, true);
                }
            }
            AttentionVariant::FullSelfAttention => {
                w.self_block(n, convention == FlopConvention::AllMatmuls);
            }
        }
        if matches!(config.variant, AttentionVariant::Bidirectional | AttentionVariant::Sequential) {
            if refine {
                w.ffn(n);
            }
            w.ffn(m);
            w.self_block(m, true);
        }
    }

    w.begin("head");
    let c = config.num_classes as u64;
    match config.head {
        HeadKind::ClassifyMeanLatent => {
            if !config.uses_latents() {
                w.mm(1, 1, n, d);
            }
            w.linear(1, d, c);
        }
        HeadKind::DenseTokenLinear => w.linear(n, d, c),
        HeadKind::None => {}
    }

    let flops = w.entries.iter().map(|e| e.flops).sum();
    let activations = w.entries.iter().map(|e| e.activations).sum();
    Ok(CostReport {
        seq_len: n_tok,
        convention,
        flops,
        params: analytic_params(config) as u64,
        activations,
        breakdown: w.entries,
    })
}

/// Closed-form parameter count of the model built from `config`.
pub fn analytic_params(config: &ModelConfig) -> usize {
    let d = config.dim;
    let lin = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let ffn = lin(d, config.mlp_ratio * d) + lin(config.mlp_ratio * d, d);
    let attn = 4 * lin(d, d);
    let self_block = 2 * norm + attn + ffn;

    let pos = lin(config.tokenizer.axes() * DIMS_PER_AXIS, d);
    let tokenizer = match config.tokenizer {
        TokenizerConfig::Patch(spec) => lin(spec.patch_dim(), d) + pos,
        TokenizerConfig::Ids { vocab, .. } => vocab * d + pos,
        TokenizerConfig::Points { .. } => pos,
    };
    let latents = if config.uses_latents() { config.latents * d } else { 0 };

    let body: usize = match config.variant {
        AttentionVariant::Bidirectional | AttentionVariant::Sequential => (0..config.layers)
            .map(|l| {
                let refine = config.refines_tokens(l);
                let cross = match (config.variant, refine) {
                    (AttentionVariant::Bidirectional, true) => 6 * lin(d, d),
                    (AttentionVariant::Bidirectional, false) => 4 * lin(d, d),
                    (_, true) => 2 * attn,
                    (_, false) => attn,
                };
                let tok_ffn = if refine { norm + ffn } else { 0 };
                2 * norm + cross + tok_ffn + norm + ffn + self_block
            })
            .sum(),
        AttentionVariant::Iterative => {
            let sets = config.share.num_sets(config.layers);
            sets * (3 * norm + attn + ffn) + config.layers * config.sa_count * self_block
        }
        AttentionVariant::FullSelfAttention => config.layers * self_block,
    };
    let head = match config.head {
        HeadKind::None => 0,
        _ => norm + lin(d, config.num_classes),
    };
    tokenizer + latents + body + head
}

/// Input size spec: `224/p16` (image side / stride) or a plain sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeSpec {
    Image { size: usize, stride: usize },
    Sequence(usize),
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeSpec::Image { size, stride } => write!(f, "{size}/p{stride}"),
            ShapeSpec::Sequence(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for ShapeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad shape '{s}' (expected e.g. 224/p16 or 2048)"));
        let s = s.trim();
        match s.split_once('/') {
            Some((size, stride)) => {
                let size = size.trim().parse().map_err(|_| bad())?;
                let stride = stride.trim().strip_prefix('p').ok_or_else(bad)?.parse().map_err(|_| bad())?;
                Ok(ShapeSpec::Image { size, stride })
            }
            None => s.parse().map(ShapeSpec::Sequence).map_err(|_| bad()),
        }
    }
}

impl ShapeSpec {
    /// Config and sequence length for this shape. Image shapes keep the
    /// config's patch size and change the input side and stride.
    pub fn apply(&self, config: &ModelConfig) -> Result<(ModelConfig, Option<usize>)> {
        match (*self, config.tokenizer) {
            (ShapeSpec::Image { size, stride }, TokenizerConfig::Patch(spec)) => {
                let mut c = config.clone();
                let spec = crate::tokenizers::PatchSpec {
                    height: size,
                    width: size,
                    stride,
                    patch: spec.patch.max(stride),
                    ..spec
                };
                spec.validate()?;
                c.tokenizer = TokenizerConfig::Patch(spec);
                Ok((c, None))
            }
            (ShapeSpec::Sequence(n), _) => Ok((config.clone(), Some(n))),
            (ShapeSpec::Image { .. }, _) => Err(Error::Config("image shapes need a patch tokenizer".into())),
        }
    }
}

/// Image shapes of the sequence-length scaling study, baseline first.
pub const SCALING_SHAPES: [&str; 9] = [
    "224/p16", "384/p16", "224/p8", "512/p16", "384/p8", "224/p4", "512/p8", "384/p4", "512/p4",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub shape: String,
    pub seq_len: usize,
    pub flops: u64,
    pub activations: u64,
    pub flop_ratio: f64,
    pub activation_ratio: f64,
}

/// FLOP and activation ratios of each shape relative to `baseline`.
pub fn scaling_table(
    config: &ModelConfig,
    shapes: &[ShapeSpec],
    baseline: ShapeSpec,
    convention: FlopConvention,
) -> Result<Vec<ScalingRow>> {
    let report = |s: &ShapeSpec| -> Result<CostReport> {
        let (c, n) = s.apply(config)?;
        flop_count(&c, n, convention)
    };
    let base = report(&baseline)?;
    shapes
        .iter()
        .map(|s| {
            let r = report(s)?;
            Ok(ScalingRow {
                shape: s.to_string(),
                seq_len: r.seq_len,
                flops: r.flops,
                activations: r.activations,
                flop_ratio: r.flops as f64 / base.flops as f64,
                activation_ratio: r.activations as f64 / base.activations as f64,
            })
        })
        .collect()
}

/// Named configurations with their counting convention.
pub fn preset(name: &str) -> Result<(ModelConfig, FlopConvention)> {
    use AttentionVariant::*;
    let all = FlopConvention::AllMatmuls;
    Ok(match name {
        "bixt_ti16" => (ModelConfig::bixt_ti16(), all),
        "bixt_ti16_d13" => (ModelConfig::ti16_variant(Bidirectional, 13), all),
        "sequential_ti16_d11" => (ModelConfig::ti16_variant(Sequential, 11), all),
        "sequential_ti16_d12" => (ModelConfig::ti16_variant(Sequential, 12), all),
        "iterative_sa6_d8_all" => (ModelConfig::iterative_ti16(6, 8, ShareScheme::All), all),
        "iterative_sa4_d12_all" => (ModelConfig::iterative_ti16(4, 12, ShareScheme::All), all),
        "iterative_sa5_d8_all" => (ModelConfig::iterative_ti16(5, 8, ShareScheme::All), all),
        "iterative_sa5_d8_all_but_first" => (ModelConfig::iterative_ti16(5, 8, ShareScheme::AllButFirst), all),
        "bixt_lra_listops" => (ModelConfig::bixt_lra_listops(), FlopConvention::SkipSelfAttentionProducts),
        "transformer_lra_listops" => (
            ModelConfig::transformer_lra_listops(),
            FlopConvention::SkipSelfAttentionProducts,
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (known: {})",
                PRESETS.join(", ")
            )))
        }
    })
}

pub const PRESETS: [&str; 10] = [
    "bixt_ti16",
    "bixt_ti16_d13",
    "sequential_ti16_d11",
    "sequential_ti16_d12",
    "iterative_sa6_d8_all",
    "iterative_sa4_d12_all",
    "iterative_sa5_d8_all",
    "iterative_sa5_d8_all_but_first",
    "bixt_lra_listops",
    "transformer_lra_listops",
];
