//! CSV and 8-bit PGM dumps of latent-side attention maps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::LayerAttention;
use crate::tensor::Element;
use crate::{Error, Result};

/// How grid renderings are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgmMode {
    /// One image per (layer, head), averaged over latents.
    #[default]
    PerHead,
    /// One image per (layer, head, latent).
    PerLatent,
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExportSummary {
    pub csv_files: Vec<PathBuf>,
    pub pgm_files: Vec<PathBuf>,
}

/// Writes `rows` as comma-separated lines, LF-terminated, no header.
pub fn write_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Data(format!("{}:{}: bad value '{v}'", path.display(), i + 1)))
                })
                .collect()
        })
        .collect()
}

/// Binary greyscale image scaled so the largest value maps to 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Data(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.max(0.0) * scale).round().min(255.0) as u8));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Data(format!("{}: not a binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, pixels))
}

/// Writes one CSV per (layer, head) with the `M x N` latent-side attention of
/// batch entry `sample`, plus grid renderings when `grid` is given.
pub fn export_attention<T: Element>(
    attention: &[LayerAttention<T>],
    sample: usize,
    grid: Option<(usize, usize)>,
    mode: PgmMode,
    dir: &Path,
) -> Result<ExportSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = ExportSummary::default();
    for layer in attention {
        let s = layer.latent_attention.shape();
        let (b, h, m, n) = (s[0], s[1], s[2], s[3]);
        if sample >= b {
            return Err(Error::Data(format!("sample {sample} outside batch of {b}")));
        }
        if let Some((gh, gw)) = grid {
            if gh * gw != n {
                return Err(Error::Data(format!("{gh}x{gw} grid does not hold {n} tokens")));
            }
        }
        let data = layer.latent_attention.to_f64_vec();
        for head in 0..h {
            let base = (sample * h + head) * m * n;
            let rows: Vec<Vec<f64>> = (0..m).map(|i| data[base + i * n..base + (i + 1) * n].to_vec()).collect();
            let stem = format!("layer{:02}_head{:02}", layer.layer, head);
            let csv = dir.join(format!("{stem}.csv"));
            write_csv(&csv, &rows)?;
            summary.csv_files.push(csv);

            let Some((gh, gw)) = grid else { continue };
            match mode {
                PgmMode::PerHead => {
                    let mean: Vec<f64> = (0..n)
                        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64)
                        .collect();
                    let path = dir.join(format!("{stem}.pgm"));
                    write_pgm(&path, gw, gh, &mean)?;
                    summary.pgm_files.push(path);
                }
                PgmMode::PerLatent => {
                    for (i, row) in rows.iter().enumerate() {
                        let path = dir.join(format!("{stem}_latent{i:03}.pgm"));
                        write_pgm(&path, gw, gh, row)?;
                        summary.pgm_files.push(path);
                    }
                }
                PgmMode::None => {}
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec![0.25, 0.75], vec![1.0 / 3.0, 2.0 / 3.0]];
        let csv = dir.path().join("a.csv");
        write_csv(&csv, &rows).unwrap();
        assert_eq!(read_csv(&csv).unwrap(), rows);
        assert!(!fs::read_to_string(&csv).unwrap().contains('\r'));

        let pgm = dir.path().join("a.pgm");
        write_pgm(&pgm, 2, 1, &[0.5, 1.0]).unwrap();
        assert_eq!(read_pgm(&pgm).unwrap(), (2, 1, vec![128, 255]));
    }
}
