//! Training-pair augmentation for the colorizer.
//!
//! Every transform moves the L' and (a', b') planes together, so each output
//! pixel keeps the luminance/chroma pairing of the input pixel(s) it came
//! from.

use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{rgb_to_normalized_lab, NormalizedLabImage, Plane, RgbImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratedKind {
    Outpaint,
    Video,
    NovelView,
}

impl GeneratedKind {
    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "outpaint" => Some(Self::Outpaint),
            "video" => Some(Self::Video),
            "novelview" => Some(Self::NovelView),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    RotateFlip { quarter_turns: u8, hflip: bool, vflip: bool },
    GridShuffle { grid: usize },
    Elastic { alpha: f64, sigma: f64 },
    Crop { x: usize, y: usize, size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Original,
    Generated(GeneratedKind),
    /// Traditional transforms applied (in order) on top of a base sample.
    Traditional { base: Box<Provenance>, transforms: Vec<Transform> },
}

impl Provenance {
    fn with(self, t: Transform) -> Self {
        match self {
            Provenance::Traditional { base, mut transforms } => {
                transforms.push(t);
                Provenance::Traditional { base, transforms }
            }
            other => Provenance::Traditional {
                base: Box::new(other),
                transforms: vec![t],
            },
        }
    }
}

/// A pixel-aligned (input L', target a'/b') training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSample {
    pub l: Plane,
    pub a: Plane,
    pub b: Plane,
    pub provenance: Provenance,
}

impl AugmentSample {
    pub fn new(l: Plane, a: Plane, b: Plane, provenance: Provenance) -> Result<Self> {
        l.check_same(&a, "AugmentSample")?;
        l.check_same(&b, "AugmentSample")?;
        Ok(Self { l, a, b, provenance })
    }

    pub fn from_image(img: &NormalizedLabImage, provenance: Provenance) -> Self {
        Self {
            l: img.plane(0),
            a: img.plane(1),
            b: img.plane(2),
            provenance,
        }
    }

    pub fn width(&self) -> usize {
        self.l.width
    }

    pub fn height(&self) -> usize {
        self.l.height
    }

    fn map_planes(&self, f: impl Fn(&Plane) -> Plane, t: Transform) -> Self {
        Self {
            l: f(&self.l),
            a: f(&self.a),
            b: f(&self.b),
            provenance: self.provenance.clone().with(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Grid sizes to draw from for grid shuffle.
    pub grid_sizes: Vec<usize>,
    /// Elastic displacement magnitude, pixels.
    pub elastic_alpha: f64,
    /// Elastic smoothing, pixels.
    pub elastic_sigma: f64,
    pub seed: u64,
    pub rotate_flip: bool,
    pub grid_shuffle: bool,
    pub elastic: bool,
    /// Apply several transforms to one draw (otherwise at most one).
    pub stack: bool,
    /// Per-transform application probability.
    pub probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            grid_sizes: vec![2, 3, 4],
            elastic_alpha: 34.0,
            elastic_sigma: 4.0,
            seed: 0,
            rotate_flip: true,
            grid_shuffle: true,
            elastic: true,
            stack: true,
            probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_sizes.is_empty() || self.grid_sizes.iter().any(|&g| g < 2) {
            return Err(Error::invalid("grid sizes must be non-empty and all at least 2"));
        }
        if !(self.elastic_alpha >= 0.0) || !(self.elastic_sigma > 0.0) {
            return Err(Error::invalid("elastic alpha must be >= 0 and sigma > 0"));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid("augmentation probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn rotate_plane_cw(p: &Plane) -> Plane {
    let (w, h) = (p.width, p.height);
    // output is h wide, w tall; out(x, y) = in(y, h - 1 - x)
    Plane::from_fn(h, w, |x, y| p.get(y, h - 1 - x))
}

/// `quarter_turns` clockwise rotations followed by optional flips. Lossless.
pub fn rotate_flip(s: &AugmentSample, quarter_turns: u8, hflip: bool, vflip: bool) -> AugmentSample {
    let f = |p: &Plane| {
        let mut out = p.clone();
        for _ in 0..quarter_turns % 4 {
            out = rotate_plane_cw(&out);
        }
        if hflip {
            out = Plane::from_fn(out.width, out.height, |x, y| out.get(out.width - 1 - x, y));
        }
        if vflip {
            out = Plane::from_fn(out.width, out.height, |x, y| out.get(x, out.height - 1 - y));
        }
        out
    };
    s.map_planes(
        f,
        Transform::RotateFlip {
            quarter_turns: quarter_turns % 4,
            hflip,
            vflip,
        },
    )
}

/// Cell boundaries along one axis: `g` cells, the last absorbing the remainder.
fn cell_edges(len: usize, g: usize) -> Vec<usize> {
    let base = len / g;
    (0..=g).map(|i| if i == g { len } else { i * base }).collect()
}

/// Destination cell for each source cell (both in row-major `g x g` order)
/// drawn from `seed`. Cells only trade places with cells of the same size,
/// which matters when the dimensions are not multiples of `g`.
pub fn grid_permutation(width: usize, height: usize, g: usize, seed: u64) -> Vec<usize> {
    let xs = cell_edges(width, g);
    let ys = cell_edges(height, g);
    let size = |c: usize| (xs[c % g + 1] - xs[c % g], ys[c / g + 1] - ys[c / g]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..g * g).collect();
    let mut classes: Vec<(usize, usize)> = (0..g * g).map(size).collect();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let members: Vec<usize> = (0..g * g).filter(|&c| size(c) == class).collect();
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for (src, dst) in members.into_iter().zip(shuffled) {
            perm[src] = dst;
        }
    }
    perm
}

/// Moves source cell `c` to cell `perm[c]`; `perm` must map cells onto
/// cells of equal size.
pub fn grid_shuffle_with(s: &AugmentSample, g: usize, perm: &[usize]) -> Result<AugmentSample> {
    let (w, h) = (s.width(), s.height());
    if g < 1 || g > w || g > h {
        return Err(Error::invalid(format!("grid size {g} does not fit a {w}x{h} image")));
    }
    if perm.len() != g * g {
        return Err(Error::invalid(format!("grid permutation has {} entries, expected {}", perm.len(), g * g)));
    }
    let mut seen = vec![false; g * g];
    for &d in perm {
        if d >= g * g || std::mem::replace(&mut seen[d], true) {
            return Err(Error::invalid("grid permutation is not a permutation"));
        }
    }
    let xs = cell_edges(w, g);
    let ys = cell_edges(h, g);
    let cell = |c: usize| (xs[c % g], ys[c / g], xs[c % g + 1] - xs[c % g], ys[c / g + 1] - ys[c / g]);
    for (src, &dst) in perm.iter().enumerate() {
        let (_, _, sw, sh) = cell(src);
        let (_, _, dw, dh) = cell(dst);
        if (sw, sh) != (dw, dh) {
            return Err(Error::invalid(format!("grid permutation moves cell {src} onto a cell of different size")));
        }
    }
    let f = |p: &Plane| {
        let mut out = p.clone();
        for (src, &dst) in perm.iter().enumerate() {
            let (sx, sy, cw, ch) = cell(src);
            let (dx, dy, _, _) = cell(dst);
            for y in 0..ch {
                for x in 0..cw {
                    out.set(dx + x, dy + y, p.get(sx + x, sy + y));
                }
            }
        }
        out
    };
    Ok(s.map_planes(f, Transform::GridShuffle { grid: g }))
}

pub fn grid_shuffle(s: &AugmentSample, g: usize, seed: u64) -> Result<AugmentSample> {
    if g < 1 || g > s.width() || g > s.height() {
        return Err(Error::invalid(format!("grid size {g} does not fit a {}x{} image", s.width(), s.height())));
    }
    let perm = grid_permutation(s.width(), s.height(), g, seed);
    grid_shuffle_with(s, g, &perm)
}

/// Separable Gaussian blur with replicated borders.
fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let pass_x = Plane::from_fn(p.width, p.height, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * p.get_clamped(x as isize + i as isize - r, y as isize))
            .sum()
    });
    Plane::from_fn(p.width, p.height, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * pass_x.get_clamped(x as isize, y as isize + i as isize - r))
            .sum()
    })
}

/// Smooth random warp shared by all planes.
pub fn elastic_transform(s: &AugmentSample, alpha: f64, sigma: f64, seed: u64) -> Result<AugmentSample> {
    if !(alpha >= 0.0) || !(sigma > 0.0) {
        return Err(Error::invalid(format!("elastic transform needs alpha >= 0 and sigma > 0 (got {alpha}, {sigma})")));
    }
    let (w, h) = (s.width(), s.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_x = Plane::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0));
    let noise_y = Plane::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0));
    let dx = gaussian_blur(&noise_x, sigma);
    let dy = gaussian_blur(&noise_y, sigma);
    let f = |p: &Plane| {
        Plane::from_fn(w, h, |x, y| {
            p.sample_bilinear(x as f64 + alpha * dx.get(x, y), y as f64 + alpha * dy.get(x, y))
        })
    };
    Ok(s.map_planes(f, Transform::Elastic { alpha, sigma }))
}

fn crop(s: &AugmentSample, x: usize, y: usize, size: usize) -> AugmentSample {
    let f = |p: &Plane| Plane::from_fn(size, size, |i, j| p.get(x + i, y + j));
    s.map_planes(f, Transform::Crop { x, y, size })
}

/// One manifest entry: `<tag> <relative path>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub kind: GeneratedKind,
    pub path: PathBuf,
}

pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((tag, rest)) = line.split_once(char::is_whitespace) else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: ln + 1,
                message: "expected `<tag> <path>`".into(),
            });
        };
        let Some(kind) = GeneratedKind::parse(tag) else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: ln + 1,
                message: format!("unknown provenance tag {tag:?} (expected outpaint, video or novelview)"),
            });
        };
        out.push(ManifestEntry {
            kind,
            path: base.join(rest.trim()),
        });
    }
    Ok(out)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    RgbImage::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

/// The original key-view sample followed by every readable image listed in
/// the manifest. Unreadable images are skipped with a warning.
pub fn ingest_generated(manifest: Option<&Path>, original: AugmentSample) -> Result<Vec<AugmentSample>> {
    let mut pool = vec![original];
    let Some(manifest) = manifest else {
        return Ok(pool);
    };
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    for entry in parse_manifest(&text, base, manifest)? {
        match load_rgb(&entry.path).and_then(|rgb| rgb_to_normalized_lab(&rgb)) {
            Ok(lab) => pool.push(AugmentSample::from_image(&lab, Provenance::Generated(entry.kind))),
            Err(e) => warn!("skipping generated sample {}: {e}", entry.path.display()),
        }
    }
    Ok(pool)
}

/// Uniform draw from `pool`, random traditional transforms, then a random
/// square crop of side `crop` (skipped with a warning when it does not fit).
pub fn sample_training_item(
    pool: &[AugmentSample],
    cfg: &AugmentConfig,
    crop_size: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentSample> {
    if pool.is_empty() {
        return Err(Error::invalid("augmentation pool is empty"));
    }
    cfg.validate()?;
    let mut s = pool[rng.gen_range(0..pool.len())].clone();

    let enabled: Vec<u8> = [(cfg.rotate_flip, 0u8), (cfg.grid_shuffle, 1), (cfg.elastic, 2)]
        .into_iter()
        .filter_map(|(on, id)| on.then_some(id))
        .collect();
    let chosen: Vec<u8> = if cfg.stack {
        enabled.iter().copied().filter(|_| rng.gen_bool(cfg.probability)).collect()
    } else if !enabled.is_empty() && rng.gen_bool(cfg.probability) {
        vec![enabled[rng.gen_range(0..enabled.len())]]
    } else {
        Vec::new()
    };
    for t in chosen {
        s = match t {
            0 => rotate_flip(&s, rng.gen_range(0..4), rng.gen_bool(0.5), rng.gen_bool(0.5)),
            1 => {
                let g = *cfg.grid_sizes.choose(rng).expect("validated non-empty");
                if g <= s.width() && g <= s.height() {
                    grid_shuffle(&s, g, rng.gen())?
                } else {
                    s
                }
            }
            _ => elastic_transform(&s, cfg.elastic_alpha, cfg.elastic_sigma, rng.gen())?,
        };
    }

    if let Some(size) = crop_size {
        if size > s.width() || size > s.height() {
            warn!(
                "crop {size} exceeds the {}x{} sample; using it uncropped",
                s.width(),
                s.height()
            );
        } else if size < s.width() || size < s.height() {
            let x = rng.gen_range(0..=s.width() - size);
            let y = rng.gen_range(0..=s.height() - size);
            s = crop(&s, x, y, size);
        }
    }
    Ok(s)
}
