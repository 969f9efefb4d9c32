//! Stage-2 optimization of a Lab Gaussian scene against known luminance and
//! predicted chroma, with the luminance-only warm-up phase.

use std::fmt;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::AdamState;
use crate::colorspace::{normalized_lab_to_rgb, NormalizedLabImage, Plane, RgbImage, NEUTRAL_CHROMA};
use crate::error::{Error, Result};
use crate::losses::{loss_ab_grad, loss_l_grad, LossWeights};
use crate::rasterizer::{rasterize, rasterize_backward, rasterize_with_cache, SceneGrad};
use crate::scene::sh::{dc_for_value, sh_len};
use crate::scene::{Camera, ChannelAssignment, GaussianPrimitive, Scene};

/// Base learning rates per attribute class. The position rate is multiplied
/// by the scene extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate reached at the last iteration (exponential decay).
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    /// Divisor applied to `sh` for coefficients above degree 0.
    pub sh_rest_divisor: f64,
    pub deformation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 5e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            sh_rest_divisor: 20.0,
            deformation: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub iterations: usize,
    pub warmup_fraction: f64,
    pub lr: LearningRates,
    pub loss: LossWeights,
    /// Views per optimization step; 0 uses every view.
    pub views_per_step: usize,
    pub seed: u64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            warmup_fraction: 0.5,
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            views_per_step: 0,
            seed: 0,
        }
    }
}

impl ReconstructConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("reconstruct needs at least one iteration"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::invalid(format!("warm-up fraction must lie in (0, 1), got {}", self.warmup_fraction)));
        }
        let lr = &self.lr;
        let all = [lr.position, lr.position_final, lr.rotation, lr.scale, lr.opacity, lr.sh, lr.sh_rest_divisor, lr.deformation];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("all learning rates must be positive"));
        }
        self.loss.validate()
    }

    /// First iteration of the full-color phase.
    pub fn switch_iteration(&self) -> usize {
        ((self.warmup_fraction * self.iterations as f64).floor() as usize).max(1)
    }
}

/// One supervised view or frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionView {
    pub id: String,
    pub camera: Camera,
    pub time: Option<f64>,
    /// Luminance from the monochrome input.
    pub l: Plane,
    /// Colorizer predictions.
    pub a: Plane,
    pub b: Plane,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupervisionSet {
    pub views: Vec<SupervisionView>,
}

impl SupervisionSet {
    pub fn validate(&self, dynamic: bool) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::invalid("supervision set is empty"));
        }
        for v in &self.views {
            let (w, h) = (v.camera.width, v.camera.height);
            for (name, p) in [("L'", &v.l), ("a'", &v.a), ("b'", &v.b)] {
                if (p.width, p.height) != (w, h) {
                    return Err(Error::invalid(format!(
                        "view {}: {name} plane is {}x{}, camera is {w}x{h}",
                        v.id, p.width, p.height
                    )));
                }
            }
            match (dynamic, v.time) {
                (true, None) => return Err(Error::invalid(format!("view {} has no timestamp", v.id))),
                (false, Some(_)) => return Err(Error::invalid(format!("view {} has a timestamp but the scene is static", v.id))),
                (true, Some(t)) if !(0.0..=1.0).contains(&t) => {
                    return Err(Error::invalid(format!("view {} timestamp {t} outside [0, 1]", v.id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Radius of the camera centers around their mean, padded by 10%.
    pub fn extent(&self) -> f64 {
        let centers: Vec<[f64; 3]> = self.views.iter().map(|v| v.camera.center()).collect();
        let n = centers.len().max(1) as f64;
        let mean: [f64; 3] = std::array::from_fn(|k| centers.iter().map(|c| c[k]).sum::<f64>() / n);
        let r = centers.iter().map(|c| dist(*c, mean)).fold(0.0, f64::max);
        if r > 0.0 {
            1.1 * r
        } else {
            1.0
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Where initial primitives come from.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSeed {
    Points(Vec<[f64; 3]>),
    /// Uniform points in an axis-aligned box.
    Random {
        count: usize,
        min: [f64; 3],
        max: [f64; 3],
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub sh_degree: usize,
    pub initial_opacity: f64,
    /// Isotropic scale = factor x nearest-neighbor distance.
    pub scale_factor: f64,
    /// Scale for a lone point.
    pub fallback_scale: f64,
    /// Polynomial degree of the deformation; `None` for static scenes.
    pub deformation_degree: Option<usize>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            sh_degree: 1,
            initial_opacity: 0.1,
            scale_factor: 0.5,
            fallback_scale: 0.05,
            deformation_degree: None,
        }
    }
}

/// Distance from each point to its nearest other point (infinite for a lone point).
pub fn nearest_neighbor_distances(points: &[[f64; 3]]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist(*p, *q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn init_scene(seed: &InitSeed, cfg: &InitConfig) -> Result<Scene> {
    let points = match seed {
        InitSeed::Points(p) => p.clone(),
        InitSeed::Random { count, min, max, seed } => {
            if (0..3).any(|k| !(min[k] < max[k])) {
                return Err(Error::invalid("random init box has an empty extent"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*count).map(|_| std::array::from_fn(|k| rng.gen_range(min[k]..max[k]))).collect()
        }
    };
    if points.is_empty() {
        return Err(Error::invalid("scene initialization needs at least one point"));
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            what: "seed point".into(),
            location: format!("index {i}"),
        });
    }
    if !(cfg.initial_opacity > 0.0 && cfg.initial_opacity < 1.0) {
        return Err(Error::invalid("initial opacity must lie in (0, 1)"));
    }
    if !(cfg.scale_factor > 0.0 && cfg.fallback_scale > 0.0) {
        return Err(Error::invalid("initial scales must be positive"));
    }
    let k = sh_len(cfg.sh_degree);
    let sh_with_dc = |v: f64| {
        let mut s = vec![0.0; k];
        s[0] = dc_for_value(v);
        s
    };
    let logit = (cfg.initial_opacity / (1.0 - cfg.initial_opacity)).ln();
    let nn = nearest_neighbor_distances(&points);
    let prims: Vec<GaussianPrimitive> = points
        .iter()
        .zip(&nn)
        .map(|(p, d)| {
            // coincident points fall back too
            let s = if d.is_finite() && *d > 0.0 { cfg.scale_factor * d } else { cfg.fallback_scale };
            GaussianPrimitive {
                mu: *p,
                q: [1.0, 0.0, 0.0, 0.0],
                log_scale: [s.ln(); 3],
                opacity_logit: logit,
                sh: [sh_with_dc(0.5), sh_with_dc(NEUTRAL_CHROMA), sh_with_dc(NEUTRAL_CHROMA)],
            }
        })
        .collect();
    let mut scene = Scene::new(cfg.sh_degree, &prims)?;
    if let Some(d) = cfg.deformation_degree {
        if d == 0 {
            return Err(Error::invalid("deformation degree must be at least 1"));
        }
        scene.make_dynamic(d);
    }
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Full,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub loss_l: f64,
    pub loss_ab: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReconstructLog {
    pub records: Vec<StepRecord>,
}

impl ReconstructLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,phase,loss_l,loss_ab,total\n");
        for r in &self.records {
            s += &format!("{},{},{:.9e},{:.9e},{:.9e}\n", r.iteration, r.phase, r.loss_l, r.loss_ab, r.total);
        }
        s
    }

    /// Mean of `total` over records `[from, to)`.
    pub fn mean_total(&self, from: usize, to: usize) -> Option<f64> {
        let r = self.records.get(from..to.min(self.records.len()))?;
        (!r.is_empty()).then(|| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64)
    }
}

const GROUPS: [&str; 10] = [
    "mu", "q", "log_scale", "opacity", "sh0", "sh1", "sh2", "deform_mu", "deform_q", "deform_log_scale",
];

/// Serializable optimizer state, enough to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub iteration: usize,
    pub groups: Vec<GroupSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSnapshot {
    pub name: String,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

fn param_buffers(scene: &mut Scene) -> Vec<&mut [f64]> {
    let g = &mut scene.gaussians;
    let [s0, s1, s2] = &mut g.sh;
    let mut v: Vec<&mut [f64]> = vec![&mut g.mu, &mut g.q, &mut g.log_scale, &mut g.opacity_logit, s0, s1, s2];
    if let Some(d) = &mut scene.deformation {
        v.push(&mut d.mu);
        v.push(&mut d.q);
        v.push(&mut d.log_scale);
    }
    v
}

fn grad_buffers(grad: &SceneGrad) -> Vec<&[f64]> {
    let g = &grad.gaussians;
    let mut v: Vec<&[f64]> = vec![&g.mu, &g.q, &g.log_scale, &g.opacity_logit, &g.sh[0], &g.sh[1], &g.sh[2]];
    if let Some(d) = &grad.deformation {
        v.push(&d.mu);
        v.push(&d.q);
        v.push(&d.log_scale);
    }
    v
}

/// Step-by-step optimizer over one scene.
pub struct Trainer<'a> {
    scene: Scene,
    sup: &'a SupervisionSet,
    cfg: ReconstructConfig,
    extent: f64,
    iteration: usize,
    groups: Vec<AdamState>,
    log: ReconstructLog,
}

impl<'a> Trainer<'a> {
    pub fn new(scene: Scene, sup: &'a SupervisionSet, cfg: &ReconstructConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        if scene.assignment != ChannelAssignment::WarmUp {
            return Err(Error::state("training must start from a warm-up scene"));
        }
        sup.validate(scene.is_dynamic())?;
        let lens: Vec<usize> = param_buffers(&mut scene.clone()).iter().map(|b| b.len()).collect();
        Ok(Self {
            extent: sup.extent(),
            groups: lens.iter().map(|&n| AdamState::new(&[n])).collect(),
            scene,
            sup,
            cfg: cfg.clone(),
            iteration: 0,
            log: ReconstructLog::default(),
        })
    }

    /// Continues from a saved scene and optimizer state.
    pub fn resume(
        scene: Scene,
        sup: &'a SupervisionSet,
        cfg: &ReconstructConfig,
        snapshot: &OptimizerSnapshot,
        log: ReconstructLog,
    ) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        sup.validate(scene.is_dynamic())?;
        let expected_full = snapshot.iteration >= cfg.switch_iteration();
        if expected_full != (scene.assignment == ChannelAssignment::FullLab) {
            return Err(Error::state("scene phase does not match the snapshot iteration"));
        }
        let mut groups = Vec::new();
        for (i, len) in param_buffers(&mut scene.clone()).iter().map(|b| b.len()).enumerate() {
            let g = snapshot
                .groups
                .get(i)
                .filter(|g| g.name == GROUPS[i])
                .ok_or_else(|| Error::invalid(format!("optimizer snapshot lacks group {}", GROUPS[i])))?;
            let mut st = AdamState::new(&[len]);
            st.restore(g.step, vec![g.m.clone()], vec![g.v.clone()])?;
            groups.push(st);
        }
        if snapshot.groups.len() != groups.len() {
            return Err(Error::invalid("optimizer snapshot has extra groups"));
        }
        Ok(Self {
            extent: sup.extent(),
            groups,
            scene,
            sup,
            cfg: cfg.clone(),
            iteration: snapshot.iteration,
            log,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &ReconstructLog {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    pub fn phase(&self) -> Phase {
        match self.scene.assignment {
            ChannelAssignment::WarmUp => Phase::Warmup,
            ChannelAssignment::FullLab => Phase::Full,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            iteration: self.iteration,
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(i, st)| {
                    let (m, v) = st.moments();
                    GroupSnapshot {
                        name: GROUPS[i].into(),
                        step: st.step_count(),
                        m: m[0].clone(),
                        v: v[0].clone(),
                    }
                })
                .collect(),
        }
    }

    pub fn into_parts(self) -> (Scene, ReconstructLog) {
        (self.scene, self.log)
    }

    /// Leaves warm-up. Called by [`Trainer::step`] when due; may be called
    /// early by callers that want to observe the switch.
    pub fn enter_full_color(&mut self) -> Result<()> {
        self.scene.switch_to_full_color()?;
        info!("reconstruct: switching to full Lab at iteration {}", self.iteration);
        Ok(())
    }

    fn views_for(&self, iteration: usize) -> Vec<usize> {
        let n = self.sup.views.len();
        let k = self.cfg.views_per_step;
        if k == 0 || k >= n {
            return (0..n).collect();
        }
        // one shuffled pass over the views per epoch, derived from (seed, epoch)
        let start = iteration * k;
        (start..start + k)
            .map(|pos| {
                let epoch = (pos / n) as u64;
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                order.shuffle(&mut rng);
                order[pos % n]
            })
            .collect()
    }

    fn position_lr(&self) -> f64 {
        let lr = &self.cfg.lr;
        let frac = self.iteration as f64 / self.cfg.iterations.max(1) as f64;
        self.extent * (lr.position.ln() * (1.0 - frac) + lr.position_final.ln() * frac).exp()
    }

    /// Runs one iteration; returns its log record.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::state("training already finished"));
        }
        if self.iteration >= self.cfg.switch_iteration() && self.scene.assignment == ChannelAssignment::WarmUp {
            self.enter_full_color()?;
        }
        let phase = self.phase();
        let views = self.views_for(self.iteration);
        let inv = 1.0 / views.len() as f64;
        let w = self.cfg.loss;
        let mut grad: Option<SceneGrad> = None;
        let (mut loss_l, mut loss_ab) = (0.0, 0.0);
        for &vi in &views {
            let v = &self.sup.views[vi];
            let (out, cache) = rasterize_with_cache(&self.scene, &v.camera, v.time)?;
            let planes = [out.image.plane(0), out.image.plane(1), out.image.plane(2)];
            let upstream: [Plane; 3] = match phase {
                Phase::Warmup => {
                    let mut ups = Vec::with_capacity(3);
                    for p in &planes {
                        let g = loss_l_grad(p, &v.l, &w)?;
                        loss_l += g.value / 3.0 * inv;
                        ups.push(scaled(&g.grads[0], inv / 3.0));
                    }
                    ups.try_into().expect("three planes")
                }
                Phase::Full => {
                    let gl = loss_l_grad(&planes[0], &v.l, &w)?;
                    let gab = loss_ab_grad([&planes[1], &planes[2]], [&v.a, &v.b], &w)?;
                    loss_l += gl.value * inv;
                    loss_ab += gab.value * inv;
                    [scaled(&gl.grads[0], inv), scaled(&gab.grads[0], inv), scaled(&gab.grads[1], inv)]
                }
            };
            let g = rasterize_backward(&self.scene, &v.camera, v.time, &cache, &upstream)?;
            match &mut grad {
                None => grad = Some(g),
                Some(acc) => acc.add_scaled(&g, 1.0),
            }
        }
        let total = loss_l + loss_ab;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: self.iteration,
                loss: total,
            });
        }
        let grad = grad.expect("at least one view");
        let lr = &self.cfg.lr;
        let rates = [
            self.position_lr(),
            lr.rotation,
            lr.scale,
            lr.opacity,
            lr.sh,
            lr.sh,
            lr.sh,
            lr.deformation,
            lr.deformation,
            lr.deformation,
        ];
        let grads = grad_buffers(&grad);
        let k = sh_len(self.scene.sh_degree);
        let mut params = param_buffers(&mut self.scene);
        for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            // chroma sets stay out of the optimizer until the switch
            if phase == Phase::Warmup && (i == 5 || i == 6) {
                continue;
            }
            if (4..7).contains(&i) {
                let (rate, rest) = (rates[i], rates[i] / lr.sh_rest_divisor);
                self.groups[i].update_with(&mut [&mut **p], &[g], |_, j| if j % k == 0 { rate } else { rest })?;
            } else {
                self.groups[i].update(&mut [&mut **p], &[g], rates[i])?;
            }
        }
        let rec = StepRecord {
            iteration: self.iteration,
            phase,
            loss_l,
            loss_ab,
            total,
        };
        if self.iteration % 100 == 0 {
            debug!("reconstruct {:>5} {} total {:.6}", rec.iteration, rec.phase, rec.total);
        }
        self.log.records.push(rec);
        self.iteration += 1;
        Ok(rec)
    }
}

fn scaled(p: &Plane, k: f64) -> Plane {
    Plane {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|v| v * k).collect(),
    }
}

/// Full training run. On divergence the error is returned and `scene` holds
/// the last finite state.
pub fn train_scene(scene: &mut Scene, sup: &SupervisionSet, cfg: &ReconstructConfig) -> Result<ReconstructLog> {
    let mut trainer = Trainer::new(scene.clone(), sup, cfg)?;
    while !trainer.is_done() {
        if let Err(e) = trainer.step() {
            *scene = trainer.scene.clone();
            return Err(e);
        }
    }
    let (s, log) = trainer.into_parts();
    *scene = s;
    Ok(log)
}

/// Renders a trained scene as normalized Lab and as sRGB.
pub fn render_novel(scene: &Scene, cam: &Camera, t: Option<f64>) -> Result<(RgbImage, NormalizedLabImage)> {
    if scene.assignment != ChannelAssignment::FullLab {
        return Err(Error::state("scene is still in warm-up mode and has no chroma"));
    }
    let lab = rasterize(scene, cam, t)?.image;
    Ok((normalized_lab_to_rgb(&lab), lab))
}
