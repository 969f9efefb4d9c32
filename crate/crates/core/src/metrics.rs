//! Consistency and vividness metrics.

use std::fmt::Write as _;
use std::path::Path;

use crate::colorspace::{NormalizedLabImage, Plane, RgbImage};
use crate::error::{Error, Result};
use crate::rasterizer::rasterize;
use crate::scene::{Camera, Scene};

/// Matched pixel locations between two images. Coordinates are pixel-index
/// based (pixel `i` is centered at `i`), sampled bilinearly.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub id_a: String,
    pub id_b: String,
    /// `(x1, y1, x2, y2)` per match.
    pub pairs: Vec<[f64; 4]>,
}

fn in_bounds(x: f64, y: f64, w: usize, h: usize) -> bool {
    x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

impl CorrespondenceSet {
    pub fn validate(&self, dims_a: (usize, usize), dims_b: (usize, usize)) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::invalid(format!("no correspondences between {} and {}", self.id_a, self.id_b)));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if !in_bounds(p[0], p[1], dims_a.0, dims_a.1) || !in_bounds(p[2], p[3], dims_b.0, dims_b.1) {
                return Err(Error::invalid(format!("correspondence {i} ({p:?}) lies outside the images")));
            }
        }
        Ok(())
    }

    /// Same matches seen from the other image.
    pub fn reversed(&self) -> Self {
        Self {
            id_a: self.id_b.clone(),
            id_b: self.id_a.clone(),
            pairs: self.pairs.iter().map(|p| [p[2], p[3], p[0], p[1]]).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# color3d-correspondences v1\npair {} {}\n", self.id_a, self.id_b);
        for p in &self.pairs {
            let _ = writeln!(s, "{} {} {} {}", p[0], p[1], p[2], p[3]);
        }
        s
    }

    pub fn parse(text: &str, origin: &Path, dims_a: (usize, usize), dims_b: (usize, usize)) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hl, header) = lines.next().ok_or_else(|| err(1, "empty correspondence file".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 3 || head[0] != "pair" {
            return Err(err(hl + 1, "expected header `pair <idA> <idB>`".into()));
        }
        let mut pairs = Vec::new();
        for (ln, line) in lines {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(ln + 1, format!("bad number: {e}")))?;
            if vals.len() != 4 {
                return Err(err(ln + 1, format!("expected 4 values, found {}", vals.len())));
            }
            if !in_bounds(vals[0], vals[1], dims_a.0, dims_a.1) || !in_bounds(vals[2], vals[3], dims_b.0, dims_b.1) {
                return Err(err(ln + 1, "correspondence lies outside the image bounds".into()));
            }
            pairs.push([vals[0], vals[1], vals[2], vals[3]]);
        }
        if pairs.is_empty() {
            return Err(err(hl + 1, "correspondence file has no matches".into()));
        }
        Ok(Self {
            id_a: head[1].to_string(),
            id_b: head[2].to_string(),
            pairs,
        })
    }
}

pub fn save_correspondences(path: &Path, set: &CorrespondenceSet) -> Result<()> {
    std::fs::write(path, set.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_correspondences(path: &Path, dims_a: (usize, usize), dims_b: (usize, usize)) -> Result<CorrespondenceSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CorrespondenceSet::parse(&text, path, dims_a, dims_b)
}

/// Mean Euclidean (a', b') distance between the images at matched points.
pub fn matching_error(img_a: &NormalizedLabImage, img_b: &NormalizedLabImage, corr: &CorrespondenceSet) -> Result<f64> {
    let dims = |img: &NormalizedLabImage| (img.width, img.height);
    corr.validate(dims(img_a), dims(img_b))?;
    let (aa, ab) = (img_a.plane(1), img_a.plane(2));
    let (ba, bb) = (img_b.plane(1), img_b.plane(2));
    let total: f64 = corr
        .pairs
        .iter()
        .map(|p| {
            let da = aa.sample_bilinear(p[0], p[1]) - ba.sample_bilinear(p[2], p[3]);
            let db = ab.sample_bilinear(p[0], p[1]) - bb.sample_bilinear(p[2], p[3]);
            da.hypot(db)
        })
        .sum();
    Ok(total / corr.pairs.len() as f64)
}

/// Options of the synthetic matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthMatchOptions {
    /// Primitives below this opacity are not used as surface points.
    pub min_opacity: f64,
    /// Accepted |point depth - rendered depth|, relative to point depth.
    pub depth_tolerance: f64,
    /// Minimum rendered coverage at the projected pixel.
    pub min_coverage: f64,
}

impl Default for SynthMatchOptions {
    fn default() -> Self {
        Self {
            min_opacity: 0.5,
            depth_tolerance: 0.05,
            min_coverage: 0.95,
        }
    }
}

/// Rendered coverage and depth of one view, reused across pairs.
#[derive(Debug, Clone)]
pub struct Visibility {
    camera: Camera,
    time: Option<f64>,
    depth: Plane,
    alpha: Plane,
}

impl Visibility {
    pub fn render(scene: &Scene, cam: &Camera, t: Option<f64>) -> Result<Self> {
        let out = rasterize(scene, cam, t)?;
        Ok(Self {
            camera: cam.clone(),
            time: t,
            depth: out.depth,
            alpha: out.alpha,
        })
    }

    fn locate(&self, p: [f64; 3], opts: &SynthMatchOptions) -> Option<[f64; 2]> {
        let cam = &self.camera;
        let (uv, z) = cam.project(p)?;
        let (x, y) = (uv[0] - 0.5, uv[1] - 0.5);
        if !in_bounds(x, y, cam.width, cam.height) {
            return None;
        }
        // every pixel the bilinear sample touches must show this surface
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(cam.width - 1), (y0 + 1).min(cam.height - 1));
        let ok = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].iter().all(|&(px, py)| {
            self.alpha.get(px, py) >= opts.min_coverage && (self.depth.get(px, py) - z).abs() <= opts.depth_tolerance * z
        });
        ok.then_some([x, y])
    }
}

/// Correspondences between two pre-rendered views of `scene`.
pub fn correspondences_between(
    scene: &Scene,
    va: &Visibility,
    vb: &Visibility,
    ids: (&str, &str),
    opts: &SynthMatchOptions,
) -> Result<CorrespondenceSet> {
    let mut pairs = Vec::new();
    for i in 0..scene.len() {
        if scene.primitive(i).opacity() < opts.min_opacity {
            continue;
        }
        let pa = scene.primitive_at(i, va.time)?.mu;
        let pb = scene.primitive_at(i, vb.time)?.mu;
        if let (Some(a), Some(b)) = (va.locate(pa, opts), vb.locate(pb, opts)) {
            pairs.push([a[0], a[1], b[0], b[1]]);
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!("no mutually visible points between {} and {}", ids.0, ids.1)));
    }
    Ok(CorrespondenceSet {
        id_a: ids.0.to_string(),
        id_b: ids.1.to_string(),
        pairs,
    })
}

/// Correspondences from a known scene: centers of opaque primitives that are
/// visible (not occluded) in both views.
pub fn synth_correspondences(
    scene: &Scene,
    cam_a: &Camera,
    cam_b: &Camera,
    ids: (&str, &str),
    t: (Option<f64>, Option<f64>),
    opts: &SynthMatchOptions,
) -> Result<CorrespondenceSet> {
    let va = Visibility::render(scene, cam_a, t.0)?;
    let vb = Visibility::render(scene, cam_b, t.1)?;
    correspondences_between(scene, &va, &vb, ids, opts)
}

/// Hasler-Suesstrunk colorfulness on the 0-255 scale.
pub fn colorfulness(img: &RgbImage) -> f64 {
    let n = img.r.len();
    if n == 0 {
        return 0.0;
    }
    let mut rg = Vec::with_capacity(n);
    let mut yb = Vec::with_capacity(n);
    for i in 0..n {
        let (r, g, b) = (img.r[i] * 255.0, img.g[i] * 255.0, img.b[i] * 255.0);
        rg.push(r - g);
        yb.push(0.5 * (r + g) - b);
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        (m, var)
    };
    let (m_rg, v_rg) = stats(&rg);
    let (m_yb, v_yb) = stats(&yb);
    (v_rg + v_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
}

/// Peak signal-to-noise ratio for unit-range planes, in dB.
pub fn psnr(a: &Plane, b: &Plane) -> Result<f64> {
    a.check_same(b, "psnr")?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
