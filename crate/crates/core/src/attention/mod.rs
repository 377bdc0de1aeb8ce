//! Attention mechanisms over `[B, L, D]` streams.
//!
//! * [`scaled_dot_attention`] and [`multi_head_self_attention`]: standard
//!   softmax attention.
//! * [`bidirectional_cross_attention`]: latents and tokens refine each other
//!   from one shared similarity matrix, softmaxed along rows for the latents
//!   and along columns for the tokens.
//! * [`sequential_cross_attention`]: two independent one-way cross-attentions,
//!   latents first, then tokens against the updated latents.
//! * [`iterative`]: Perceiver-style blocks where latents repeatedly query the
//!   unrefined input.
//!
//! Scores are scaled by `1/sqrt(head_dim)`. Masks apply to tokens only.

pub mod iterative;

use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError, Var};

pub use iterative::{CrossAttentionBlock, IterativeStack, SelfAttentionBlock, ShareScheme};

/// Per-sample padding indicator over the token axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl AttentionMask {
    /// `valid` is row-major `[batch, len]`.
    pub fn new(batch: usize, len: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * len {
            return Err(TensorError::Invalid {
                op: "mask",
                msg: format!("{} flags for batch {batch} x len {len}", valid.len()),
            });
        }
        if let Some(b) = (0..batch).find(|b| !valid[b * len..(b + 1) * len].iter().any(|&v| v)) {
            return Err(TensorError::Invalid {
                op: "mask",
                msg: format!("sample {b} has no valid token"),
            });
        }
        Ok(Self { batch, len, valid })
    }

    /// Mask marking the first `lengths[b]` positions of each sample valid.
    pub fn from_lengths(lengths: &[usize], len: usize) -> Result<Self> {
        let valid = lengths
            .iter()
            .flat_map(|&l| (0..len).map(move |i| i < l))
            .collect();
        Self::new(lengths.len(), len, valid)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, b: usize, i: usize) -> bool {
        self.valid[b * self.len + i]
    }

    fn check<T: Element>(&self, tokens: &Var<'_, T>) -> Result<()> {
        let s = tokens.shape();
        if s.len() != 3 || s[0] != self.batch || s[1] != self.len {
            return Err(TensorError::Shape {
                op: "mask",
                lhs: s,
                rhs: vec![self.batch, self.len],
            });
        }
        Ok(())
    }
}

/// `[B, L, D] -> [B, H, L, D/H]`.
pub fn split_heads<'t, T: Element>(x: &Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(TensorError::Invalid {
            op: "split_heads",
            msg: format!("shape {s:?} cannot be split into {heads} heads"),
        });
    }
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])
}

/// `[B, H, L, d] -> [B, L, H*d]`.
pub fn merge_heads<'t, T: Element>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])
}

fn inv_sqrt<T: Element>(d: usize) -> T {
    T::one() / T::from_usize(d).unwrap().sqrt()
}

/// `softmax(q kᵀ / sqrt(d)) v` over the last two axes.
///
/// With a mask, `valid` tiles the key axis per leading batch entry and masked
/// keys get zero weight.
pub fn scaled_dot_attention<'t, T: Element>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    mask: Option<&AttentionMask>,
) -> Result<Var<'t, T>> {
    let d = *q.shape().last().unwrap_or(&1);
    let scores = q.matmul_t(k, false, true)?.scale(inv_sqrt(d));
    let attn = match mask {
        Some(m) => scores.masked_softmax_last(m.valid())?,
        None => {
            let axis = scores.shape().len() - 1;
            scores.softmax(axis)?
        }
    };
    attn.matmul(v)
}

/// Query/key/value/output projections of one-way attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn new<T: Element>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            query: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            key: Linear::new(store, init, &format!("{name}.k"), dim, dim, true),
            value: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true),
        }
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params() + self.out.num_params()
    }

    pub fn projection_params(&self) -> usize {
        self.query.num_params() + self.key.num_params() + self.value.num_params()
    }
}

/// Result of one-way attention: refinement plus pre-softmax scores `[B, H, T, S]`.
pub struct OneWayOutput<'t, T: Element> {
    pub delta: Var<'t, T>,
    pub scores: Var<'t, T>,
}

/// Target queries source: `target [B, T, D]`, `source [B, S, D]`.
pub fn cross_attention<'t, T: Element>(
    p: &Bound<'t, T>,
    params: &AttentionParams,
    target: &Var<'t, T>,
    source: &Var<'t, T>,
    heads: usize,
    source_mask: Option<&AttentionMask>,
) -> Result<OneWayOutput<'t, T>> {
    if let Some(m) = source_mask {
        m.check(source)?;
    }
    let q = split_heads(&params.query.forward(p, target)?, heads)?;
    let k = split_heads(&params.key.forward(p, source)?, heads)?;
    let v = split_heads(&params.value.forward(p, source)?, heads)?;
    let d = *q.shape().last().unwrap();
    let scores = q.matmul_t(&k, false, true)?.scale(inv_sqrt(d));
    let attn = match source_mask {
        Some(m) => scores.masked_softmax_last(m.valid())?,
        None => scores.softmax(3)?,
    };
    let merged = merge_heads(&attn.matmul(&v)?)?;
    Ok(OneWayOutput {
        delta: params.out.forward(p, &merged)?,
        scores,
    })
}

/// Multi-head self-attention over `x [B, N, D]`.
pub fn multi_head_self_attention<'t, T: Element>(
    p: &Bound<'t, T>,
    params: &AttentionParams,
    x: &Var<'t, T>,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<Var<'t, T>> {
    Ok(cross_attention(p, params, x, x, heads, mask)?.delta)
}

/// Reference/value projections of bi-directional cross-attention.
///
/// The final layer of a classifier only refines latents; it then has no
/// latent value projection and no token output projection.
#[derive(Debug, Clone, Copy)]
pub struct BiDirParams {
    pub ref_lat: Linear,
    pub ref_tok: Linear,
    pub val_tok: Linear,
    pub out_lat: Linear,
    pub val_lat: Option<Linear>,
    pub out_tok: Option<Linear>,
}

impl BiDirParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        refine_tokens: bool,
    ) -> Self {
        let lin = |store: &mut ParamStore<T>, init: &mut Init, n: &str| {
            Linear::new(store, init, &format!("{name}.{n}"), dim, dim, true)
        };
        let ref_lat = lin(store, init, "ref_lat");
        let val_lat = refine_tokens.then(|| lin(store, init, "val_lat"));
        let ref_tok = lin(store, init, "ref_tok");
        let val_tok = lin(store, init, "val_tok");
        let out_lat = lin(store, init, "out_lat");
        let out_tok = refine_tokens.then(|| lin(store, init, "out_tok"));
        Self {
            ref_lat,
            ref_tok,
            val_tok,
            out_lat,
            val_lat,
            out_tok,
        }
    }

    pub fn refines_tokens(&self) -> bool {
        self.val_lat.is_some() && self.out_tok.is_some()
    }

    /// Reference and value projections (excludes output projections).
    pub fn projection_params(&self) -> usize {
        self.ref_lat.num_params()
            + self.ref_tok.num_params()
            + self.val_tok.num_params()
            + self.val_lat.map_or(0, |l| l.num_params())
    }

    pub fn num_params(&self) -> usize {
        self.projection_params() + self.out_lat.num_params() + self.out_tok.map_or(0, |l| l.num_params())
    }
}

/// Pre-softmax latent×token similarities `[B, H, M, N]`, shared by both directions.
pub struct SimilarityMatrix<'t, T: Element> {
    scores: Var<'t, T>,
}

impl<'t, T: Element> SimilarityMatrix<'t, T> {
    /// Buffer in latent→token orientation.
    pub fn lat_tok(&self) -> &Var<'t, T> {
        &self.scores
    }

    /// Token→latent orientation `[B, H, N, M]`: the transpose of the same buffer.
    pub fn tok_lat(&self) -> Tensor<T> {
        self.scores.value().transpose_last()
    }
}

pub struct BiDirOutput<'t, T: Element> {
    pub delta_lat: Var<'t, T>,
    /// Absent when the layer only refines latents.
    pub delta_tok: Option<Var<'t, T>>,
    pub sim: SimilarityMatrix<'t, T>,
    /// Row-softmax (latent side) attention `[B, H, M, N]`.
    pub latent_attention: Var<'t, T>,
    /// Column-softmax (token side) attention, stored in `[B, H, M, N]` layout.
    pub token_attention: Option<Var<'t, T>>,
}

/// Bi-directional cross-attention between `latents [B, M, D]` and `tokens [B, N, D]`.
pub fn bidirectional_cross_attention<'t, T: Element>(
    p: &Bound<'t, T>,
    params: &BiDirParams,
    latents: &Var<'t, T>,
    tokens: &Var<'t, T>,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<BiDirOutput<'t, T>> {
    if let Some(m) = mask {
        m.check(tokens)?;
    }
    let r_lat = split_heads(&params.ref_lat.forward(p, latents)?, heads)?;
    let r_tok = split_heads(&params.ref_tok.forward(p, tokens)?, heads)?;
    let v_tok = split_heads(&params.val_tok.forward(p, tokens)?, heads)?;
    let d = *r_lat.shape().last().unwrap();

    // The only latent×token product of the layer.
    let scores = r_lat.matmul_t(&r_tok, false, true)?.scale(inv_sqrt(d));

    let latent_attention = match mask {
        Some(m) => scores.masked_softmax_last(m.valid())?,
        None => scores.softmax(3)?,
    };
    let delta_lat = params
        .out_lat
        .forward(p, &merge_heads(&latent_attention.matmul(&v_tok)?)?)?;

    let (delta_tok, token_attention) = match (params.val_lat, params.out_tok) {
        (Some(val_lat), Some(out_tok)) => {
            let v_lat = split_heads(&val_lat.forward(p, latents)?, heads)?;
            let token_attention = scores.softmax(2)?;
            let agg = token_attention.matmul_t(&v_lat, true, false)?;
            let delta = out_tok.forward(p, &merge_heads(&agg)?)?;
            (Some(delta), Some(token_attention))
        }
        _ => (None, None),
    };

    Ok(BiDirOutput {
        delta_lat,
        delta_tok,
        sim: SimilarityMatrix { scores },
        latent_attention,
        token_attention,
    })
}

/// Two query/key/value sets: latents query tokens, then tokens query latents.
#[derive(Debug, Clone, Copy)]
pub struct SequentialParams {
    pub lat_query: AttentionParams,
    /// Absent when the layer only refines latents.
    pub tok_query: Option<AttentionParams>,
}

impl SequentialParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        refine_tokens: bool,
    ) -> Self {
        Self {
            lat_query: AttentionParams::new(store, init, &format!("{name}.lat_query"), dim),
            tok_query: refine_tokens.then(|| AttentionParams::new(store, init, &format!("{name}.tok_query"), dim)),
        }
    }

    pub fn projection_params(&self) -> usize {
        self.lat_query.projection_params() + self.tok_query.map_or(0, |a| a.projection_params())
    }

    pub fn num_params(&self) -> usize {
        self.lat_query.num_params() + self.tok_query.map_or(0, |a| a.num_params())
    }
}

pub struct SequentialOutput<'t, T: Element> {
    pub delta_lat: Var<'t, T>,
    pub delta_tok: Option<Var<'t, T>>,
    /// Latent→token scores `[B, H, M, N]`.
    pub lat_tok_scores: Var<'t, T>,
    /// Token→latent scores `[B, H, N, M]`.
    pub tok_lat_scores: Option<Var<'t, T>>,
}

/// Sequential two-way cross-attention. Tokens attend to `latents + delta_lat`.
pub fn sequential_cross_attention<'t, T: Element>(
    p: &Bound<'t, T>,
    params: &SequentialParams,
    latents: &Var<'t, T>,
    tokens: &Var<'t, T>,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<SequentialOutput<'t, T>> {
    let first = cross_attention(p, &params.lat_query, latents, tokens, heads, mask)?;
    let (delta_tok, tok_lat_scores) = match &params.tok_query {
        Some(tok_query) => {
            let updated = latents.add(&first.delta)?;
            let second = cross_attention(p, tok_query, tokens, &updated, heads, None)?;
            (Some(second.delta), Some(second.scores))
        }
        None => (None, None),
    };
    Ok(SequentialOutput {
        delta_lat: first.delta,
        delta_tok,
        lat_tok_scores: first.scores,
        tok_lat_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::substream;
    use crate::tensor::Tape;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn constant_keys_average_values() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t64(&[2, 2], &[0.3, -1.0, 2.0, 0.5]));
        let k = tape.constant(t64(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let v = tape.constant(t64(&[3, 2], &[1.0, 0.0, 2.0, 3.0, 6.0, 3.0]));
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap().value();
        for row in out.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_source_returns_value() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t64(&[2, 2], &[5.0, -3.0, 0.1, 0.2]));
        let k = tape.constant(t64(&[1, 2], &[0.4, 0.9]));
        let v = tape.constant(t64(&[1, 2], &[7.0, -1.0]));
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap().value();
        assert_eq!(out.data(), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn mask_shape_is_validated() {
        assert!(AttentionMask::from_lengths(&[0, 2], 3).is_err());
        let m = AttentionMask::from_lengths(&[1, 3], 3).unwrap();
        assert!(m.is_valid(0, 0) && !m.is_valid(0, 1) && m.is_valid(1, 2));
    }

    #[test]
    fn split_rejects_indivisible_dim() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 6]));
        assert!(split_heads(&x, 4).is_err());
        let s = split_heads(&x, 3).unwrap();
        assert_eq!(s.shape(), vec![1, 3, 2, 2]);
        assert_eq!(merge_heads(&s).unwrap().shape(), vec![1, 2, 6]);
    }

    #[test]
    fn final_bidir_layer_has_no_token_branch() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(substream(0, "init"));
        let full = BiDirParams::new(&mut store, &mut init, "a", 4, true);
        let last = BiDirParams::new(&mut store, &mut init, "b", 4, false);
        assert!(full.refines_tokens() && !last.refines_tokens());
        assert_eq!(full.projection_params(), 4 * 20);
        assert_eq!(last.projection_params(), 3 * 20);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let lat = tape.constant(Tensor::ones([1, 2, 4]));
        let tok = tape.constant(Tensor::ones([1, 3, 4]));
        let out = bidirectional_cross_attention(&p, &last, &lat, &tok, 2, None).unwrap();
        assert!(out.delta_tok.is_none());
        assert_eq!(out.delta_lat.shape(), vec![1, 2, 4]);
    }
}
