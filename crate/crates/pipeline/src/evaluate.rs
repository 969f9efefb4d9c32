//! Consistency and vividness evaluation of rendered (or otherwise colorized)
//! held-out views, plus the per-image colorization baseline.

use std::fmt::Write as _;
use std::path::Path;

use color3d_core::augment::{AugmentSample, Provenance};
use color3d_core::colorizer::{train, ColorizerNet};
use color3d_core::colorspace::{normalized_lab_to_rgb, NormalizedLabImage, Plane, NEUTRAL_CHROMA};
use color3d_core::metrics::{colorfulness, load_correspondences, matching_error, psnr};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, PipelineConfig};
use crate::error::{Error, Result};
use crate::io::{self, CameraEntry, Dataset, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Same timestamp (or static scene), different cameras.
    CrossView,
    /// Different timestamps.
    CrossTime,
}

impl PairKind {
    fn as_str(self) -> &'static str {
        match self {
            PairKind::CrossView => "cross_view",
            PairKind::CrossTime => "cross_time",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairMetric {
    pub id_a: String,
    pub id_b: String,
    pub kind: PairKind,
    pub matches: usize,
    pub me: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMetric {
    pub id: String,
    pub colorfulness: f64,
    /// PSNR of the L' plane against the monochrome input, in dB.
    pub psnr_l: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairMetric>,
    pub views: Vec<ViewMetric>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn mean_me(&self) -> Option<f64> {
        mean(self.pairs.iter().map(|p| p.me))
    }

    pub fn mean_me_of(&self, kind: PairKind) -> Option<f64> {
        mean(self.pairs.iter().filter(|p| p.kind == kind).map(|p| p.me))
    }

    pub fn mean_colorfulness(&self) -> Option<f64> {
        mean(self.views.iter().map(|v| v.colorfulness))
    }

    pub fn mean_psnr_l(&self) -> Option<f64> {
        mean(self.views.iter().map(|v| v.psnr_l))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# color3d-metrics v1\nmetric,kind,id_a,id_b,matches,value\n");
        for p in &self.pairs {
            let _ = writeln!(s, "me,{},{},{},{},{}", p.kind.as_str(), p.id_a, p.id_b, p.matches, p.me);
        }
        for v in &self.views {
            let _ = writeln!(s, "colorfulness,view,{},,,{}", v.id, v.colorfulness);
            let _ = writeln!(s, "psnr_l,view,{},,,{}", v.id, v.psnr_l);
        }
        s
    }

    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("# color3d-summary v1\n");
        let _ = writeln!(s, "held-out views       {}", self.views.len());
        let _ = writeln!(s, "matched pairs        {}", self.pairs.len());
        let _ = writeln!(s, "mean ME              {}", f(self.mean_me()));
        let _ = writeln!(s, "mean ME cross-view   {}", f(self.mean_me_of(PairKind::CrossView)));
        let _ = writeln!(s, "mean ME cross-time   {}", f(self.mean_me_of(PairKind::CrossTime)));
        let _ = writeln!(s, "mean colorfulness    {}", f(self.mean_colorfulness()));
        let _ = writeln!(s, "mean L' PSNR (dB)    {}", f(self.mean_psnr_l()));
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_file(&dir.join("metrics.csv"), self.to_csv())?;
        io::write_file(&dir.join("summary.txt"), self.summary())
    }
}

/// Scores colorized images of held-out views. `images` follows the order of
/// the held-out entries; pairs use the dataset's correspondence files.
pub fn evaluate_images(ds: &Dataset, images: &[(&CameraEntry, NormalizedLabImage)]) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Missing("no held-out views to evaluate".into()));
    }
    let mut views = Vec::new();
    for (e, img) in images {
        let mono = ds.mono(&e.id)?;
        views.push(ViewMetric {
            id: e.id.clone(),
            colorfulness: colorfulness(&normalized_lab_to_rgb(img)),
            psnr_l: psnr(&img.plane(0), &mono)?,
        });
    }
    let mut pairs = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let ((ea, ia), (eb, ib)) = (&images[i], &images[j]);
            // files are named in camera-file order
            let (path, flip) = match (ds.correspondence_path(&ea.id, &eb.id), ds.correspondence_path(&eb.id, &ea.id)) {
                (p, _) if p.exists() => (p, false),
                (_, q) if q.exists() => (q, true),
                _ => continue,
            };
            let dims = |img: &NormalizedLabImage| (img.width, img.height);
            let set = if flip {
                load_correspondences(&path, dims(ib), dims(ia))?.reversed()
            } else {
                load_correspondences(&path, dims(ia), dims(ib))?
            };
            if (set.id_a.as_str(), set.id_b.as_str()) != (ea.id.as_str(), eb.id.as_str()) {
                return Err(Error::format(&path, format!("header names {} / {}", set.id_a, set.id_b)));
            }
            let kind = match (ea.time, eb.time) {
                (Some(a), Some(b)) if a != b => PairKind::CrossTime,
                _ => PairKind::CrossView,
            };
            pairs.push(PairMetric {
                id_a: ea.id.clone(),
                id_b: eb.id.clone(),
                kind,
                matches: set.pairs.len(),
                me: matching_error(ia, ib, &set)?,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Missing("no correspondence files among the held-out views".into()));
    }
    Ok(EvalReport { pairs, views })
}

/// Rotates the chroma of an image around neutral gray by `angle` radians.
pub fn rotate_hue(img: &NormalizedLabImage, angle: f64) -> (Plane, Plane) {
    let (c, s) = (angle.cos(), angle.sin());
    let n = NEUTRAL_CHROMA;
    let mut a = img.plane(1);
    let mut b = img.plane(2);
    for (x, y) in a.data.iter_mut().zip(b.data.iter_mut()) {
        let (u, v) = (*x - n, *y - n);
        *x = (n + c * u - s * v).clamp(0.0, 1.0);
        *y = (n + s * u + c * v).clamp(0.0, 1.0);
    }
    (a, b)
}

/// Per-image colorization reference: every held-out view gets its own
/// colorizer (own seed), trained on that view alone against a plausible but
/// independently chosen colorization (the ground truth rotated in hue by a
/// random angle), then asked to colorize the view.
pub fn run_baseline(cfg: &PipelineConfig) -> Result<EvalReport> {
    let cfg = cfg.resolved();
    let ds = Dataset::open(&cfg.paths.input)?;
    let held: Vec<&CameraEntry> = ds.with_role(Role::Heldout);
    let out_dir = cfg.paths.output.join("baseline");
    let mut images = Vec::new();
    for e in held {
        let tag = format!("baseline.{}", e.id);
        let truth = io::read_lab(&ds.color_path(&e.id)).map_err(|err| {
            Error::Missing(format!("baseline needs ground-truth color for {}: {err}", e.id))
        })?;
        let mono = ds.mono(&e.id)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &tag));
        let max = cfg.baseline.max_hue_shift_deg.to_radians();
        let angle = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
        let (a, b) = rotate_hue(&truth, angle);
        let pool = vec![AugmentSample::new(mono.clone(), a, b, Provenance::Original)?];
        let mut net_cfg = cfg.colorizer.net.clone();
        net_cfg.seed = derive_seed(cfg.seed, &format!("{tag}.net"));
        let mut train_cfg = cfg.colorizer.train.clone();
        train_cfg.iterations = cfg.baseline.iterations;
        train_cfg.crop = train_cfg.crop.min(mono.width).min(mono.height);
        train_cfg.seed = derive_seed(cfg.seed, &format!("{tag}.train"));
        let mut aug = cfg.augment.clone();
        aug.seed = derive_seed(cfg.seed, &format!("{tag}.augment"));
        let mut net = ColorizerNet::new(net_cfg)?;
        train(&mut net, &pool, &train_cfg, &aug)?;
        let (pa, pb) = net.predict_ab(&mono)?;
        let img = NormalizedLabImage::compose(&mono, &pa, &pb)?;
        io::write_png_lab(&out_dir.join(format!("{}.png", e.id)), &img)?;
        info!("baseline: {} colorized with hue shift {:.1} deg", e.id, angle.to_degrees());
        images.push((e, img));
    }
    let report = evaluate_images(&ds, &images)?;
    report.write(&out_dir)?;
    Ok(report)
}
