//! Synthetic datasets: colored spheres of Gaussians seen from a camera ring,
//! optionally moving linearly over a number of frames.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use color3d_core::colorspace::NormalizedLabImage;
use color3d_core::metrics::{correspondences_between, save_correspondences, SynthMatchOptions, Visibility};
use color3d_core::rasterizer::rasterize;
use color3d_core::scene::sh::dc_for_value;
use color3d_core::scene::{Camera, ChannelAssignment, GaussianPrimitive, Scene};
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, CameraEntry, Dataset, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingSpec {
    pub train_views: usize,
    pub heldout_views: usize,
    pub radius: f64,
    /// Camera height above the look-at point.
    pub height: f64,
    pub look_at: [f64; 3],
    pub fov_deg: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            train_views: 8,
            heldout_views: 4,
            radius: 4.0,
            height: 1.5,
            look_at: [0.0; 3],
            fov_deg: 45.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSpec {
    /// Distance each object travels between the first and last frame.
    pub speed: f64,
    pub frames: usize,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self { speed: 0.3, frames: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub gaussians: usize,
    /// Number of spheres the Gaussians are spread over.
    pub objects: usize,
    pub object_radius: f64,
    /// Normalized Lab color per object (cycled).
    pub palette: Vec<[f64; 3]>,
    /// Amplitude of the L' shading across each sphere.
    pub shading: f64,
    pub ring: RingSpec,
    pub resolution: usize,
    /// Used for dynamic scenes; linear per-object motion.
    pub motion: MotionSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            gaussians: 500,
            objects: 4,
            object_radius: 0.4,
            palette: vec![[0.30, 0.60, 0.38], [0.45, 0.72, 0.64], [0.60, 0.36, 0.66], [0.75, 0.46, 0.32]],
            shading: 0.05,
            ring: RingSpec::default(),
            resolution: 64,
            motion: MotionSpec::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.gaussians == 0 || self.objects == 0 || self.gaussians < self.objects {
            return bad("need at least one Gaussian per object");
        }
        if self.resolution < 32 {
            return bad("resolution must be at least 32");
        }
        if self.palette.is_empty() || self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("palette needs at least one normalized Lab color in [0, 1]");
        }
        if self.ring.train_views == 0 {
            return bad("ring needs at least one training view");
        }
        if !(self.ring.radius > 0.0 && self.ring.fov_deg > 0.0 && self.ring.fov_deg < 180.0 && self.object_radius > 0.0) {
            return bad("radius and field of view must be positive");
        }
        if self.motion.frames == 0 {
            return bad("motion needs at least one frame");
        }
        Ok(())
    }
}

/// Near-uniform points on the unit sphere.
fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            [r * th.cos(), y, r * th.sin()]
        })
        .collect()
}

/// Ground-truth scene (full Lab, degree-0 SH) and its seed points.
/// Dynamic scenes get a degree-1 deformation holding each object's velocity.
pub fn build_scene(spec: &SynthSpec, dynamic: bool) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut prims = Vec::with_capacity(spec.gaussians);
    let mut velocity = Vec::with_capacity(spec.gaussians);
    let rad = spec.object_radius;
    let light = {
        let l = [0.4, -0.8, -0.45];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]) as f64;
        l.map(|v: f64| v / n.sqrt())
    };
    for k in 0..spec.objects {
        let n = spec.gaussians / spec.objects + usize::from(k < spec.gaussians % spec.objects);
        let ang = TAU * k as f64 / spec.objects as f64 + rng.gen_range(-0.2..0.2);
        let ring = if spec.objects == 1 { 0.0 } else { 0.75 };
        let center = [ring * ang.cos(), rng.gen_range(-0.2..0.2), ring * ang.sin()];
        let dir = rng.gen_range(0.0..TAU);
        let v = [spec.motion.speed * dir.cos(), 0.0, spec.motion.speed * dir.sin()];
        let color = spec.palette[k % spec.palette.len()];
        let spacing = (4.0 * PI * rad * rad / n as f64).sqrt();
        for nrm in fibonacci_sphere(n) {
            let shade = nrm[0] * light[0] + nrm[1] * light[1] + nrm[2] * light[2];
            let l = (color[0] + spec.shading * shade).clamp(0.0, 1.0);
            prims.push(GaussianPrimitive {
                mu: std::array::from_fn(|j| center[j] + rad * nrm[j]),
                q: [1.0, 0.0, 0.0, 0.0],
                log_scale: [(0.6 * spacing).ln(); 3],
                opacity_logit: 3.0,
                sh: [vec![dc_for_value(l)], vec![dc_for_value(color[1])], vec![dc_for_value(color[2])]],
            });
            velocity.push(v);
        }
    }
    let mut scene = Scene::new(0, &prims)?;
    scene.assignment = ChannelAssignment::FullLab;
    if dynamic {
        scene.make_dynamic(1);
        let field = scene.deformation.as_mut().expect("just attached");
        for (i, v) in velocity.iter().enumerate() {
            let mut c = field.coeffs(i);
            c.mu[0] = *v;
            field.set_coeffs(i, &c);
        }
    }
    Ok(scene)
}

fn ring_camera(spec: &SynthSpec, angle: f64) -> Result<Camera> {
    let r = &spec.ring;
    let eye = [
        r.look_at[0] + r.radius * angle.sin(),
        r.look_at[1] - r.height,
        r.look_at[2] - r.radius * angle.cos(),
    ];
    let focal = spec.resolution as f64 / (2.0 * (r.fov_deg.to_radians() / 2.0).tan());
    Ok(Camera::look_at(eye, r.look_at, [0.0, -1.0, 0.0], focal, spec.resolution, spec.resolution)?)
}

/// Training cameras evenly around the ring; held-out cameras offset by half
/// a training step. Dynamic datasets repeat every camera at each frame.
pub fn build_cameras(spec: &SynthSpec, dynamic: bool) -> Result<Vec<CameraEntry>> {
    let r = &spec.ring;
    let mut cams = Vec::new();
    for i in 0..r.train_views {
        cams.push(("train", Role::Train, i, ring_camera(spec, TAU * i as f64 / r.train_views as f64)?));
    }
    for j in 0..r.heldout_views {
        let a = TAU * j as f64 / r.heldout_views as f64 + PI / r.train_views as f64;
        cams.push(("held", Role::Heldout, j, ring_camera(spec, a)?));
    }
    let frames: Vec<Option<(usize, f64)>> = if dynamic {
        let f = spec.motion.frames;
        (0..f).map(|k| Some((k, if f == 1 { 0.0 } else { k as f64 / (f - 1) as f64 }))).collect()
    } else {
        vec![None]
    };
    let mut out = Vec::new();
    for (prefix, role, i, cam) in &cams {
        for fr in &frames {
            let id = match fr {
                Some((k, _)) => format!("{prefix}{i:02}_t{k}"),
                None => format!("{prefix}{i:02}"),
            };
            out.push(CameraEntry {
                id,
                role: *role,
                camera: cam.clone(),
                time: fr.map(|(_, t)| t),
            });
        }
    }
    Ok(out)
}

/// Summary of a written dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub views: usize,
    pub correspondence_files: usize,
}

/// Writes cameras, ground-truth color and monochrome rasters (with PNG
/// previews), the ground-truth scene, its seed points and oracle
/// correspondences for every view pair with shared visible surface.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, dynamic: bool) -> Result<SynthSummary> {
    io::create_dir(dir)?;
    let scene = build_scene(spec, dynamic)?;
    let cameras = build_cameras(spec, dynamic)?;
    io::write_file(&Dataset::cameras_path(dir), io::cameras_to_text(&cameras))?;
    let ds = Dataset {
        dir: dir.to_path_buf(),
        cameras: cameras.clone(),
    };
    scene.save(&ds.scene_path())?;
    let points: Vec<[f64; 3]> = (0..scene.len()).map(|i| scene.primitive(i).mu).collect();
    io::write_file(&ds.points_path(), io::points_to_text(&points))?;

    let mut vis = Vec::with_capacity(cameras.len());
    for e in &cameras {
        let out = rasterize(&scene, &e.camera, e.time)?;
        let img: NormalizedLabImage = out.image;
        io::write_lab(&ds.color_path(&e.id), &img)?;
        io::write_png_lab(&ds.color_path(&e.id).with_extension("png"), &img)?;
        io::write_planes(&ds.mono_path(&e.id), &[&img.plane(0)])?;
        io::write_png_luminance(&ds.mono_path(&e.id).with_extension("png"), &img.plane(0))?;
        vis.push(Visibility::render(&scene, &e.camera, e.time)?);
    }
    let opts = SynthMatchOptions::default();
    let mut files = 0;
    io::create_dir(&dir.join("correspondences"))?;
    for i in 0..cameras.len() {
        for j in i + 1..cameras.len() {
            let (a, b) = (&cameras[i].id, &cameras[j].id);
            match correspondences_between(&scene, &vis[i], &vis[j], (a, b), &opts) {
                Ok(set) => {
                    save_correspondences(&ds.correspondence_path(a, b), &set)?;
                    files += 1;
                }
                Err(e) => debug!("no correspondences for {a}/{b}: {e}"),
            }
        }
    }
    info!("synth: wrote {} views and {files} correspondence files to {}", cameras.len(), dir.display());
    Ok(SynthSummary {
        views: cameras.len(),
        correspondence_files: files,
    })
}
