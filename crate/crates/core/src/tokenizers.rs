//! Input adapters turning images, id sequences and point clouds into `[B, N, D]` tokens.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMask;
use crate::nn::{Bound, Init, Linear, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Element, Tensor, Var};
use crate::{Error, Result};

/// Sin/cos pairs per coordinate axis.
pub const NUM_FREQUENCIES: usize = 16;
/// Encoding width contributed by one axis.
pub const DIMS_PER_AXIS: usize = 2 * NUM_FREQUENCIES;
/// Longest period of the frequency ladder.
pub const BASE_PERIOD: f64 = 10_000.0;
/// Id reserved for padding positions.
pub const PAD_ID: usize = 0;

/// Patch size and stride over a channel-last image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.channels == 0 {
            return Err(Error::Config("patch stride and channels must be positive".into()));
        }
        if self.stride > self.patch {
            return Err(Error::Config(format!(
                "stride {} exceeds patch size {}",
                self.stride, self.patch
            )));
        }
        if self.patch > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "patch size {} exceeds image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Token grid `(rows, cols)`: `ceil(H/S) x ceil(W/S)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height.div_ceil(self.stride), self.width.div_ceil(self.stride))
    }

    pub fn num_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Flattened patch length `P * P * C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Zero padding before the first row and column.
    pub fn padding(&self) -> (usize, usize) {
        let (rows, cols) = self.grid();
        let total = |n: usize, extent: usize| ((n - 1) * self.stride + self.patch).saturating_sub(extent);
        (total(rows, self.height) / 2, total(cols, self.width) / 2)
    }

    /// Gathers patches of `images [B, H, W, C]` into `[B, N, P*P*C]` (row-major `(py, px, c)`).
    pub fn extract<T: Element>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        let s = images.shape();
        if s.len() != 4 || s[1] != self.height || s[2] != self.width || s[3] != self.channels {
            return Err(Error::Data(format!(
                "expected images [B, {}, {}, {}], got {:?}",
                self.height, self.width, self.channels, s
            )));
        }
        let batch = s[0];
        let (rows, cols) = self.grid();
        let (pad_y, pad_x) = self.padding();
        let (p, c) = (self.patch, self.channels);
        let pd = self.patch_dim();
        let src = images.data();
        let mut out = vec![T::zero(); batch * rows * cols * pd];
        for b in 0..batch {
            for r in 0..rows {
                for q in 0..cols {
                    let base = ((b * rows + r) * cols + q) * pd;
                    for py in 0..p {
                        let Some(y) = (r * self.stride + py).checked_sub(pad_y).filter(|&y| y < self.height) else {
                            continue;
                        };
                        for px in 0..p {
                            let Some(x) = (q * self.stride + px).checked_sub(pad_x).filter(|&x| x < self.width)
                            else {
                                continue;
                            };
                            let from = ((b * self.height + y) * self.width + x) * c;
                            let to = base + (py * p + px) * c;
                            out[to..to + c].copy_from_slice(&src[from..from + c]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![batch, rows * cols, pd], out)?)
    }

    /// `(row, col)` grid coordinates of every token, row-major.
    pub fn positions(&self) -> Vec<f64> {
        let (rows, cols) = self.grid();
        (0..rows)
            .flat_map(|r| (0..cols).flat_map(move |c| [r as f64, c as f64]))
            .collect()
    }
}

/// Raw sinusoidal features `[N, 32 * axes]` for row-major `coords [N, axes]`.
///
/// Per axis the layout is 16 sines followed by the 16 matching cosines,
/// with angular frequencies `BASE_PERIOD^(-k/16)`.
pub fn posenc_features(coords: &[f64], axes: usize) -> Result<Tensor<f64>> {
    if axes == 0 || coords.len() % axes != 0 {
        return Err(Error::Data(format!("{} coordinates do not split into {axes} axes", coords.len())));
    }
    if let Some(x) = coords.iter().find(|x| !x.is_finite()) {
        return Err(Error::Data(format!("non-finite coordinate {x}")));
    }
    let n = coords.len() / axes;
    let freqs: Vec<f64> = (0..NUM_FREQUENCIES)
        .map(|k| BASE_PERIOD.powf(-(k as f64) / NUM_FREQUENCIES as f64))
        .collect();
    let mut out = Vec::with_capacity(n * axes * DIMS_PER_AXIS);
    for point in coords.chunks(axes) {
        for &x in point {
            out.extend(freqs.iter().map(|w| (w * x).sin()));
            out.extend(freqs.iter().map(|w| (w * x).cos()));
        }
    }
    Ok(Tensor::new(vec![n, axes * DIMS_PER_AXIS], out)?)
}

/// Projected positional encoding `[N, D]` (or `[B, N, D]` for batched coordinates).
///
/// `coords` has shape `[.., N, axes]`; `proj` maps `32 * axes` to `D`.
pub fn sinusoidal_posenc<'t, T: Element>(
    p: &Bound<'t, T>,
    proj: &Linear,
    coords: &[f64],
    shape: &[usize],
) -> Result<Var<'t, T>> {
    let axes = *shape.last().ok_or_else(|| Error::Data("empty coordinate shape".into()))?;
    if proj.in_dim != axes * DIMS_PER_AXIS {
        return Err(Error::Data(format!(
            "encoder expects {} axes, got {axes}",
            proj.in_dim / DIMS_PER_AXIS
        )));
    }
    let feats = posenc_features(coords, axes)?;
    let mut feat_shape = shape.to_vec();
    *feat_shape.last_mut().unwrap() = axes * DIMS_PER_AXIS;
    let feats = feats.reshape(feat_shape)?.cast::<T>();
    let tape = p[proj.weight].tape();
    Ok(proj.forward(p, &tape.constant(feats))?)
}

/// Linear patch projection plus 2-D positional encoding.
pub fn patch_embed<'t, T: Element>(
    p: &Bound<'t, T>,
    spec: &PatchSpec,
    proj: &Linear,
    pos: &Linear,
    images: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let patches = spec.extract(images)?;
    let tape = p[proj.weight].tape();
    let content = proj.forward(p, &tape.constant(patches))?;
    let enc = sinusoidal_posenc(p, pos, &spec.positions(), &[spec.num_tokens(), 2])?;
    Ok(content.add(&enc)?)
}

/// Tokens for `points [B, N, 3 | 6]`: the projected encoding of the raw coordinates.
pub fn point_tokenizer<'t, T: Element>(p: &Bound<'t, T>, pos: &Linear, points: &Tensor<T>) -> Result<Var<'t, T>> {
    let s = points.shape();
    if s.len() != 3 || !matches!(s[2], 3 | 6) {
        return Err(Error::Data(format!("points must be [B, N, 3|6], got {s:?}")));
    }
    sinusoidal_posenc(p, pos, &points.to_f64_vec(), s)
}

/// Embedding lookup plus 1-D positional encoding, padded to `pad_len`.
///
/// Padding positions use [`PAD_ID`] and are marked invalid in the mask.
pub fn id_tokenizer<'t, T: Element>(
    p: &Bound<'t, T>,
    embed: ParamId,
    pos: &Linear,
    ids: &[Vec<usize>],
    pad_len: usize,
) -> Result<(Var<'t, T>, AttentionMask)> {
    let table = p[embed];
    let vocab = table.shape()[0];
    let mut flat = Vec::with_capacity(ids.len() * pad_len);
    for (i, seq) in ids.iter().enumerate() {
        if seq.len() > pad_len {
            return Err(Error::Data(format!(
                "sequence {i} has {} ids, longer than {pad_len}",
                seq.len()
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&id| id >= vocab) {
            return Err(Error::Data(format!("id {bad} in sequence {i} is outside vocabulary of {vocab}")));
        }
        flat.extend_from_slice(seq);
        flat.extend(std::iter::repeat(PAD_ID).take(pad_len - seq.len()));
    }
    let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
    let mask = AttentionMask::from_lengths(&lengths, pad_len)?;
    let dim = table.shape()[1];
    let content = table.gather_rows(&flat)?.reshape(&[ids.len(), pad_len, dim])?;
    let coords: Vec<f64> = (0..pad_len).map(|i| i as f64).collect();
    let enc = sinusoidal_posenc(p, pos, &coords, &[pad_len, 1])?;
    Ok((content.add(&enc)?, mask))
}

/// Tokenizer choice of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerConfig {
    Patch(PatchSpec),
    Ids { vocab: usize, max_len: usize },
    Points { channels: usize },
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            TokenizerConfig::Patch(spec) => spec.validate(),
            TokenizerConfig::Ids { vocab, max_len } => {
                if *vocab == 0 || *max_len == 0 {
                    Err(Error::Config("vocab and max_len must be positive".into()))
                } else {
                    Ok(())
                }
            }
            TokenizerConfig::Points { channels } if matches!(channels, 3 | 6) => Ok(()),
            TokenizerConfig::Points { channels } => {
                Err(Error::Config(format!("point channels must be 3 or 6, got {channels}")))
            }
        }
    }

    /// Coordinate axes fed to the positional encoder.
    pub fn axes(&self) -> usize {
        match self {
            TokenizerConfig::Patch(_) => 2,
            TokenizerConfig::Ids { .. } => 1,
            TokenizerConfig::Points { channels } => *channels,
        }
    }
}

/// Batched model input.
#[derive(Debug, Clone)]
pub enum TokenInput<T: Element> {
    /// `[B, H, W, C]`, channel-last.
    Images(Tensor<T>),
    /// One id sequence per sample; padded to the longest in the batch.
    Ids(Vec<Vec<usize>>),
    /// `[B, N, 3 | 6]`.
    Points(Tensor<T>),
}

impl<T: Element> TokenInput<T> {
    pub fn batch(&self) -> usize {
        match self {
            TokenInput::Images(t) | TokenInput::Points(t) => t.shape().first().copied().unwrap_or(0),
            TokenInput::Ids(ids) => ids.len(),
        }
    }
}

pub struct Tokens<'t, T: Element> {
    pub values: Var<'t, T>,
    pub mask: Option<AttentionMask>,
    /// Token grid for image inputs.
    pub grid: Option<(usize, usize)>,
}

/// Tokenizer parameters.
#[derive(Debug, Clone, Copy)]
pub enum Tokenizer {
    Patch { spec: PatchSpec, proj: Linear, pos: Linear },
    Ids { max_len: usize, embed: ParamId, pos: Linear },
    Points { pos: Linear },
}

impl Tokenizer {
    pub fn new<T: Element>(store: &mut ParamStore<T>, init: &mut Init, config: &TokenizerConfig, dim: usize) -> Self {
        let pos_in = config.axes() * DIMS_PER_AXIS;
        match *config {
            TokenizerConfig::Patch(spec) => Tokenizer::Patch {
                spec,
                proj: Linear::new(store, init, "tokenizer.patch", spec.patch_dim(), dim, true),
                pos: Linear::new(store, init, "tokenizer.pos", pos_in, dim, true),
            },
            TokenizerConfig::Ids { vocab, max_len } => Tokenizer::Ids {
                max_len,
                embed: store.add("tokenizer.embed", init.trunc_normal(&[vocab, dim], INIT_STD), false),
                pos: Linear::new(store, init, "tokenizer.pos", pos_in, dim, true),
            },
            TokenizerConfig::Points { .. } => Tokenizer::Points {
                pos: Linear::new(store, init, "tokenizer.pos", pos_in, dim, true),
            },
        }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, input: &TokenInput<T>) -> Result<Tokens<'t, T>> {
        match (self, input) {
            (Tokenizer::Patch { spec, proj, pos }, TokenInput::Images(images)) => Ok(Tokens {
                values: patch_embed(p, spec, proj, pos, images)?,
                mask: None,
                grid: Some(spec.grid()),
            }),
            (Tokenizer::Ids { max_len, embed, pos }, TokenInput::Ids(ids)) => {
                let longest = ids.iter().map(Vec::len).max().unwrap_or(0);
                if longest > *max_len {
                    return Err(Error::Data(format!("sequence of {longest} ids exceeds max_len {max_len}")));
                }
                let (values, mask) = id_tokenizer(p, *embed, pos, ids, longest)?;
                let mask = mask.valid().iter().any(|v| !v).then_some(mask);
                Ok(Tokens {
                    values,
                    mask,
                    grid: None,
                })
            }
            (Tokenizer::Points { pos }, TokenInput::Points(points)) => Ok(Tokens {
                values: point_tokenizer(p, pos, points)?,
                mask: None,
                grid: None,
            }),
            _ => Err(Error::Data("input kind does not match the model's tokenizer".into())),
        }
    }
}
