use serde::Serialize;

use crate::model::LayerAttention;
use crate::tensor::Element;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadSymmetry {
    pub layer: usize,
    pub head: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryReport {
    pub heads: Vec<HeadSymmetry>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Both directions came from one shared buffer, so `r = 1` by construction.
    pub trivial: bool,
}

/// Pearson correlation; exactly 1 for bitwise-identical inputs.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a == b {
        return 1.0;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Per-layer, per-head correlation between the latent→token similarities and
/// the transposed token→latent similarities, pooled over the batch.
///
/// Layers that did not refine tokens are skipped.
pub fn symmetry_score<T: Element>(attention: &[LayerAttention<T>]) -> Result<SymmetryReport> {
    let mut heads = Vec::new();
    let mut trivial = true;
    for layer in attention {
        let Some(tok_lat) = &layer.tok_lat else { continue };
        trivial &= layer.shared;
        let s = layer.lat_tok.shape();
        let (b, h, m, n) = (s[0], s[1], s[2], s[3]);
        if tok_lat.shape() != [b, h, n, m] {
            return Err(Error::Data(format!(
                "layer {}: similarity shapes {:?} and {:?} are not transposes",
                layer.layer,
                s,
                tok_lat.shape()
            )));
        }
        let (x, y) = (layer.lat_tok.data(), tok_lat.data());
        for head in 0..h {
            let mut a = Vec::with_capacity(b * m * n);
            let mut t = Vec::with_capacity(b * m * n);
            for bi in 0..b {
                let base = (bi * h + head) * m * n;
                for i in 0..m {
                    for j in 0..n {
                        a.push(x[base + i * n + j].to_f64().unwrap_or(f64::NAN));
                        t.push(y[base + j * m + i].to_f64().unwrap_or(f64::NAN));
                    }
                }
            }
            heads.push(HeadSymmetry {
                layer: layer.layer,
                head,
                r: pearson(&a, &t),
            });
        }
    }
    if heads.is_empty() {
        return Err(Error::Data("no token→latent similarities were recorded".into()));
    }
    let rs = heads.iter().map(|h| h.r);
    Ok(SymmetryReport {
        mean: rs.clone().sum::<f64>() / heads.len() as f64,
        min: rs.clone().fold(f64::INFINITY, f64::min),
        max: rs.fold(f64::NEG_INFINITY, f64::max),
        heads,
        trivial,
    })
}
