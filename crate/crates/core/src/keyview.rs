//! Key-view selection by similarity-softmax entropy.
//!
//! Each view is embedded, rows are unit-normalized, cosine similarities are
//! turned into a softmax distribution per row and the view whose row has the
//! highest entropy wins.

use std::collections::HashMap;
use std::path::Path;

use crate::colorspace::Plane;
use crate::error::{Error, Result};

pub const DESCRIPTOR_GRID: usize = 8;
pub const DESCRIPTOR_LUMA_BINS: usize = 32;
pub const DESCRIPTOR_ORIENT_BINS: usize = 16;
pub const DESCRIPTOR_LEN: usize = DESCRIPTOR_GRID * DESCRIPTOR_GRID + DESCRIPTOR_LUMA_BINS + DESCRIPTOR_ORIENT_BINS;

/// Entropies within this relative distance of the maximum count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Row-major `rows x cols` feature matrix, one row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("feature matrix must be non-empty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "FeatureMatrix::new",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature value".into(),
                location: format!("row {}, column {}", i / cols, i % cols),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::invalid(format!("feature row {i} has dimension {}, expected {d}", r.len())));
        }
        Self::new(n, d, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Square similarity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Similarity {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Maps a view to a fixed-length feature vector.
pub trait EmbeddingProvider: Sync {
    fn name(&self) -> &str;
    fn embed(&self, view_id: &str, luminance: &Plane) -> Result<Vec<f64>>;
}

/// Handcrafted descriptor: pooled luminance grid, luminance histogram and a
/// gradient-orientation histogram.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinDescriptor;

impl EmbeddingProvider for BuiltinDescriptor {
    fn name(&self) -> &str {
        "builtin"
    }

    fn embed(&self, _view_id: &str, luminance: &Plane) -> Result<Vec<f64>> {
        builtin_descriptor(luminance)
    }
}

/// Precomputed features keyed by view id.
///
/// Text format, one view per line: `<view-id> <v1> <v2> ...`. Blank lines
/// and lines starting with `#` are ignored.
#[derive(Debug, Clone)]
pub struct FileEmbeddings {
    features: HashMap<String, Vec<f64>>,
}

impl FileEmbeddings {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut features = HashMap::new();
        let mut dim = None;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: ln + 1,
                message,
            };
            let mut parts = line.split_whitespace();
            let id = parts.next().expect("non-empty line").to_string();
            let values = parts
                .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("bad value {t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(parse_err(format!("view {id} has no feature values")));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(format!("view {id} has a non-finite feature value")));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(parse_err(format!("view {id} has {} values, earlier views have {d}", values.len())))
                }
                _ => {}
            }
            if features.insert(id.clone(), values).is_some() {
                return Err(parse_err(format!("duplicate view id {id}")));
            }
        }
        Ok(Self { features })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn name(&self) -> &str {
        "file"
    }

    fn embed(&self, view_id: &str, _luminance: &Plane) -> Result<Vec<f64>> {
        self.features
            .get(view_id)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no precomputed features for view {view_id}")))
    }
}

/// 112-dimensional descriptor of an L' plane (at least 16x16).
pub fn builtin_descriptor(img: &Plane) -> Result<Vec<f64>> {
    let (w, h) = (img.width, img.height);
    if w < 16 || h < 16 {
        return Err(Error::invalid(format!("descriptor needs an image of at least 16x16, got {w}x{h}")));
    }
    let mut out = Vec::with_capacity(DESCRIPTOR_LEN);
    for gy in 0..DESCRIPTOR_GRID {
        let (y0, y1) = (gy * h / DESCRIPTOR_GRID, (gy + 1) * h / DESCRIPTOR_GRID);
        for gx in 0..DESCRIPTOR_GRID {
            let (x0, x1) = (gx * w / DESCRIPTOR_GRID, (gx + 1) * w / DESCRIPTOR_GRID);
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += img.get(x, y);
                }
            }
            out.push(s / ((x1 - x0) * (y1 - y0)) as f64);
        }
    }
    let n = (w * h) as f64;
    let mut hist = [0.0; DESCRIPTOR_LUMA_BINS];
    for &v in &img.data {
        let bin = ((v.clamp(0.0, 1.0) * DESCRIPTOR_LUMA_BINS as f64) as usize).min(DESCRIPTOR_LUMA_BINS - 1);
        hist[bin] += 1.0 / n;
    }
    out.extend_from_slice(&hist);
    let mut orient = [0.0; DESCRIPTOR_ORIENT_BINS];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (img.get_clamped(x + 1, y) - img.get_clamped(x - 1, y));
            let gy = 0.5 * (img.get_clamped(x, y + 1) - img.get_clamped(x, y - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let u = (gy.atan2(gx) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
            let bin = ((u * DESCRIPTOR_ORIENT_BINS as f64) as usize).min(DESCRIPTOR_ORIENT_BINS - 1);
            orient[bin] += mag / n;
        }
    }
    out.extend_from_slice(&orient);
    Ok(out)
}

pub fn normalize_rows(f: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut data = f.data.clone();
    for (i, row) in data.chunks_mut(f.cols).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!("feature row {i} is all zero and cannot be normalized")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(FeatureMatrix { data, ..*f })
}

/// Pairwise dot products of the (unit) rows.
pub fn similarity(fhat: &FeatureMatrix) -> Similarity {
    let n = fhat.rows;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = fhat.row(i).iter().zip(fhat.row(j)).map(|(a, b)| a * b).sum();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Similarity { n, data }
}

/// Softmax entropy (natural log) of every row of `s`. With `include_self`
/// false the diagonal term is left out of each row's distribution.
pub fn entropies_with(s: &Similarity, include_self: bool) -> Vec<f64> {
    (0..s.n)
        .map(|i| {
            let row: Vec<f64> = s
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| include_self || j != i)
                .map(|(_, &v)| v)
                .collect();
            if row.is_empty() {
                return 0.0;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            -e.iter()
                .map(|v| {
                    let p = v / z;
                    if p > 0.0 {
                        p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .collect()
}

pub fn entropies(s: &Similarity) -> Vec<f64> {
    entropies_with(s, true)
}

/// Index of the maximum; values within a relative 1e-12 of it are ties and
/// resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v >= m - TIE_TOLERANCE * m.abs().max(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyViewSelection {
    pub index: usize,
    pub entropies: Vec<f64>,
}

pub fn select_from_features(f: &FeatureMatrix, include_self: bool) -> Result<KeyViewSelection> {
    let h = entropies_with(&similarity(&normalize_rows(f)?), include_self);
    let index = argmax_lowest(&h).expect("at least one view");
    Ok(KeyViewSelection { index, entropies: h })
}

/// Embeds every `(view id, L' plane)` and picks the key view.
pub fn select_key_view(
    views: &[(String, Plane)],
    provider: &dyn EmbeddingProvider,
    include_self: bool,
) -> Result<KeyViewSelection> {
    if views.is_empty() {
        return Err(Error::invalid("key-view selection needs at least one view"));
    }
    let rows = views
        .iter()
        .map(|(id, img)| provider.embed(id, img))
        .collect::<Result<Vec<_>>>()?;
    let d = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::invalid(format!(
            "provider {} returned {} values for view {}, expected {d}",
            provider.name(),
            rows[i].len(),
            views[i].0
        )));
    }
    select_from_features(&FeatureMatrix::from_rows(&rows)?, include_self)
}

#[cfg(test)]
mod tests;
