//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the report is printed even when everything passes.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use color3d::config::SceneType;
use color3d::evaluate::{run_baseline, PairKind};
use color3d::io::{self, Dataset, Role};
use color3d::stages;
use color3d::synth::{build_cameras, build_scene, SynthSpec};
use color3d::PipelineConfig;
use color3d_core::augment::{AugmentConfig, AugmentSample, Provenance};
use color3d_core::autodiff::{Graph, Tensor, Var};
use color3d_core::colorizer::{train, ColorizerNet, ColorizerTrainConfig, NetConfig};
use color3d_core::colorspace::{normalize_lab, LabImage, NormalizedLabImage, Plane, RgbImage};
use color3d_core::keyview::{select_key_view, EmbeddingProvider};
use color3d_core::losses::{dssim, edge_loss, l1, loss_ab, loss_l, LossWeights};
use color3d_core::metrics::{colorfulness, load_correspondences, matching_error, CorrespondenceSet};
use color3d_core::rasterizer::{rasterize, rasterize_backward, rasterize_with_cache, SceneGrad};
use color3d_core::reconstruct::{
    init_scene, InitConfig, InitSeed, ReconstructConfig, ReconstructLog, SupervisionSet, SupervisionView, Trainer,
};
use color3d_core::scene::sh::sh_len;
use color3d_core::scene::{Camera, ChannelAssignment, GaussianPrimitive, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> color3d_core::Result<Var>>;

fn project_sum(g: &mut Graph, y: Var, seed: u64) -> color3d_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let wv = g.leaf(w, false);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn eval_graph(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let root = build(&mut g, &vars).unwrap();
    g.value(root).item()
}

/// Norm-wise relative error between tape gradients and central differences.
fn autodiff_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &vars).unwrap();
    g.backward(root).unwrap();
    let h = 1e-5;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let fd = (eval_graph(build, &plus) - eval_graph(build, &minus)) / (2.0 * h);
            num += (fd - analytic.data()[j]).powi(2);
            den += fd * fd;
        }
    }
    (num / den.max(1e-300)).sqrt()
}

fn autodiff_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Build, Vec<Tensor>)> {
    let mut t = |s: &[usize]| rand_tensor(rng, s);
    vec![
        (
            "conv2d",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], 2, 1)?;
                project_sum(g, y, 1)
            }) as Build,
            vec![t(&[2, 2, 7, 6]), t(&[3, 2, 3, 3])],
        ),
        (
            "depthwise_conv2d",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.depthwise_conv2d(v[0], v[1], 1, 1)?;
                project_sum(g, y, 2)
            }),
            vec![t(&[1, 3, 5, 5]), t(&[3, 1, 3, 3])],
        ),
        (
            "pointwise_conv2d",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.pointwise_conv2d(v[0], v[1])?;
                project_sum(g, y, 3)
            }),
            vec![t(&[1, 3, 4, 4]), t(&[2, 3, 1, 1])],
        ),
        (
            "add_channel_bias",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.add_channel_bias(v[0], v[1])?;
                project_sum(g, y, 4)
            }),
            vec![t(&[2, 3, 3, 3]), t(&[3])],
        ),
        (
            "add/mul/scale",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let a = g.add(v[0], v[1])?;
                let m = g.mul(a, v[0])?;
                let y = g.scale(m, -1.7)?;
                project_sum(g, y, 5)
            }),
            vec![t(&[1, 2, 3, 3]), t(&[1, 2, 3, 3])],
        ),
        (
            "relu",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.relu(v[0])?;
                project_sum(g, y, 6)
            }),
            vec![t(&[1, 2, 4, 4])],
        ),
        (
            "leaky_relu",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.leaky_relu(v[0], 0.2)?;
                project_sum(g, y, 7)
            }),
            vec![t(&[1, 2, 4, 4])],
        ),
        (
            "sigmoid",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.sigmoid(v[0])?;
                project_sum(g, y, 8)
            }),
            vec![t(&[1, 2, 4, 4])],
        ),
        (
            "instance_norm",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.instance_norm(v[0], 1e-5)?;
                project_sum(g, y, 9)
            }),
            vec![t(&[2, 2, 4, 4])],
        ),
        (
            "bilinear_resize",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.bilinear_resize(v[0], 7, 5)?;
                project_sum(g, y, 10)
            }),
            vec![t(&[1, 2, 4, 3])],
        ),
        (
            "concat_channels/crop",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let c = g.concat_channels(&[v[0], v[1]])?;
                let y = g.crop(c, 3, 2)?;
                project_sum(g, y, 11)
            }),
            vec![t(&[1, 2, 4, 4]), t(&[1, 1, 4, 4])],
        ),
        (
            "global_avg_pool/mul_channel",
            Box::new(|g: &mut Graph, v: &[Var]| {
                let p = g.global_avg_pool(v[0])?;
                let y = g.mul_channel(v[0], p)?;
                project_sum(g, y, 12)
            }),
            vec![t(&[1, 3, 4, 4])],
        ),
        (
            "l1_loss",
            Box::new(|g: &mut Graph, v: &[Var]| g.l1_loss(v[0], v[1])),
            vec![t(&[1, 2, 3, 3]), t(&[1, 2, 3, 3])],
        ),
    ]
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> Scene {
    let k = sh_len(degree);
    let prims: Vec<_> = (0..n)
        .map(|_| GaussianPrimitive {
            mu: [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.5..0.5)],
            q: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            log_scale: std::array::from_fn(|_| rng.gen_range(-2.2..-1.2)),
            opacity_logit: rng.gen_range(-1.0..2.0),
            sh: std::array::from_fn(|_| {
                let mut s: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.15..0.15)).collect();
                s[0] = rng.gen_range(-0.8..0.8);
                s
            }),
        })
        .collect();
    let mut scene = Scene::new(degree, &prims).unwrap();
    scene.assignment = ChannelAssignment::FullLab;
    scene.background = [0.1, 0.45, 0.6];
    scene
}

fn scene_params(scene: &mut Scene) -> Vec<(&'static str, &mut Vec<f64>)> {
    let g = &mut scene.gaussians;
    let [s0, s1, s2] = &mut g.sh;
    let mut v = vec![
        ("mu", &mut g.mu),
        ("q", &mut g.q),
        ("log_scale", &mut g.log_scale),
        ("opacity", &mut g.opacity_logit),
        ("sh_l", s0),
        ("sh_a", s1),
        ("sh_b", s2),
    ];
    if let Some(d) = &mut scene.deformation {
        v.push(("deform_mu", &mut d.mu));
        v.push(("deform_q", &mut d.q));
        v.push(("deform_scale", &mut d.log_scale));
    }
    v
}

fn grad_params(g: &SceneGrad) -> Vec<Vec<f64>> {
    let mut v = vec![
        g.gaussians.mu.clone(),
        g.gaussians.q.clone(),
        g.gaussians.log_scale.clone(),
        g.gaussians.opacity_logit.clone(),
        g.gaussians.sh[0].clone(),
        g.gaussians.sh[1].clone(),
        g.gaussians.sh[2].clone(),
    ];
    if let Some(d) = &g.deformation {
        v.extend([d.mu.clone(), d.q.clone(), d.log_scale.clone()]);
    }
    v
}

fn weighted_render(scene: &Scene, cam: &Camera, t: Option<f64>, up: &[Plane; 3]) -> f64 {
    let img = rasterize(scene, cam, t).unwrap().image;
    [&img.l, &img.a, &img.b]
        .iter()
        .zip(up)
        .map(|(p, u)| p.iter().zip(&u.data).map(|(x, w)| x * w).sum::<f64>())
        .sum()
}

/// Worst per-attribute relative error of the rasterizer backward pass.
fn rasterizer_error(scene: &Scene, cam: &Camera, t: Option<f64>, seed: u64) -> (f64, &'static str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let up: [Plane; 3] = std::array::from_fn(|_| Plane::from_fn(cam.width, cam.height, |_, _| rng.gen_range(-1.0..1.0)));
    let (_, cache) = rasterize_with_cache(scene, cam, t).unwrap();
    let analytic = grad_params(&rasterize_backward(scene, cam, t, &cache, &up).unwrap());
    let h = 1e-6;
    let mut probe = scene.clone();
    let names: Vec<&'static str> = scene_params(&mut probe).iter().map(|(n, _)| *n).collect();
    let mut worst = (0.0, "");
    for (gi, name) in names.iter().enumerate() {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for j in 0..analytic[gi].len() {
            let mut plus = scene.clone();
            scene_params(&mut plus)[gi].1[j] += h;
            let mut minus = scene.clone();
            scene_params(&mut minus)[gi].1[j] -= h;
            let fd = (weighted_render(&plus, cam, t, &up) - weighted_render(&minus, cam, t, &up)) / (2.0 * h);
            num += (fd - analytic[gi][j]).powi(2);
            den += fd * fd;
        }
        if den > 0.0 {
            let rel = (num / den).sqrt();
            if rel > worst.0 {
                worst = (rel, *name);
            }
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_op = (0.0f64, "");
    for _ in 0..3 {
        for (name, build, inputs) in autodiff_cases(&mut rng) {
            let e = autodiff_error(&build, &inputs);
            if e > worst_op.0 {
                worst_op = (e, name);
            }
        }
    }
    let mut worst_r = (0.0f64, "");
    let cams = [
        Camera::look_at([0.6, -0.4, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 30.0, 16, 16).unwrap(),
        Camera::look_at([-0.5, 0.3, -3.5], [0.0; 3], [0.0, -1.0, 0.0], 28.0, 16, 16).unwrap(),
    ];
    for (i, degree) in [0usize, 1, 3].into_iter().enumerate() {
        let scene = random_scene(&mut rng, 3, degree);
        let r = rasterizer_error(&scene, &cams[i % 2], None, 200 + i as u64);
        if r.0 > worst_r.0 {
            worst_r = r;
        }
    }
    let mut dynamic = random_scene(&mut rng, 3, 1);
    dynamic.make_dynamic(2);
    let d = dynamic.deformation.as_mut().unwrap();
    for v in d.mu.iter_mut().chain(d.q.iter_mut()).chain(d.log_scale.iter_mut()) {
        *v = rng.gen_range(-0.1..0.1);
    }
    let r = rasterizer_error(&dynamic, &cams[0], Some(0.6), 210);
    if r.0 > worst_r.0 {
        worst_r = r;
    }
    let elapsed = start.elapsed();
    check(
        worst_op.0 < 1e-4 && worst_r.0 < 1e-3 && elapsed < Duration::from_secs(120),
        format!(
            "autodiff worst {:.2e} ({}), rasterizer worst {:.2e} ({}), {:.1}s",
            worst_op.0,
            worst_op.1,
            worst_r.0,
            worst_r.1,
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let lab = LabImage {
        width: 3,
        height: 1,
        l: vec![100.0, 0.0, 50.0],
        a: vec![-128.0, 127.0, 0.0],
        b: vec![127.0, -128.0, 0.0],
    };
    let n = normalize_lab(&lab);
    let boundary = n.l[0] == 1.0 && n.l[1] == 0.0 && n.a[0] == 0.0 && n.a[1] == 1.0 && n.b[0] == 1.0 && n.b[1] == 0.0;
    let mid = (n.l[2] - 0.5).abs() < 1e-15 && (n.a[2] - 128.0 / 255.0).abs() < 1e-15;
    notes.push(format!("normalize boundaries {}", if boundary && mid { "exact" } else { "WRONG" }));

    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (wd, ht) = (64, 64);
    let a = Plane::from_fn(wd, ht, |_, _| rng.gen_range(0.0..1.0));
    let b = Plane::from_fn(wd, ht, |_, _| rng.gen_range(0.0..1.0));
    let mut floor_ok = true;
    for (fw, fh) in [(64, 64), (32, 32), (48, 40), (33, 35)] {
        let x = Plane::from_fn(fw, fh, |_, _| rng.gen_range(0.0..1.0));
        let floor = (fw * fh) as f64 * w.edge_eps;
        let same = loss_l(&x, &x, &w).unwrap();
        floor_ok &= same == floor;
        notes.push(format!("loss_l(x,x) {fw}x{fh} = {same} vs H*W*eps = {floor}"));
    }

    let c = Plane::from_fn(wd, ht, |_, _| rng.gen_range(0.0..1.0));
    let ab_same = loss_ab([&b, &c], [&b, &c], &w).unwrap();
    notes.push(format!("loss_ab(x,x) = {ab_same}"));

    // hand combination, with an independent L1
    let l1_ref = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
    let l1_lib = l1(&[&a], &[&b]).unwrap().value;
    let hand = 0.8 * l1_ref + 0.2 * dssim(&[&a], &[&b]).unwrap() + w.edge_weight * edge_loss(&a, &b, w.edge_eps).unwrap();
    let full = loss_l(&a, &b, &w).unwrap();
    let diff = (full - hand).abs();
    notes.push(format!("beta=0.2 combination diff {diff:.1e}"));
    check(
        boundary && mid && floor_ok && ab_same == 0.0 && diff < 1e-9 && (l1_lib - l1_ref).abs() < 1e-12,
        notes.join("; "),
    )
}

// ---------------------------------------------------------------- 3

struct Rows(HashMap<String, Vec<f64>>);

impl EmbeddingProvider for Rows {
    fn name(&self) -> &str {
        "matrix"
    }
    fn embed(&self, view_id: &str, _: &Plane) -> color3d_core::Result<Vec<f64>> {
        Ok(self.0[view_id].clone())
    }
}

/// Straightforward softmax entropy per row and lowest-index argmax.
fn brute_force_key(rows: &[Vec<f64>]) -> usize {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let h: Vec<f64> = unit
        .iter()
        .map(|ri| {
            let e: Vec<f64> = unit.iter().map(|rj| ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>().exp()).collect();
            let z: f64 = e.iter().sum();
            -e.iter().map(|v| v / z).map(|p| p * p.ln()).sum::<f64>()
        })
        .collect();
    let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    h.iter().position(|&v| v >= m - 1e-12 * m.abs().max(1.0)).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut mismatches = Vec::new();
    let mut ties = 0;
    for case in 0..100 {
        let n = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=256);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        match case % 4 {
            // every view identical
            1 => {
                let r = rows[0].clone();
                rows.iter_mut().for_each(|x| x.clone_from(&r));
                ties += 1;
            }
            // duplicated views
            2 if n > 3 => {
                for i in (1..n).step_by(2) {
                    rows[i] = rows[i - 1].clone();
                }
                ties += 1;
            }
            _ => {}
        }
        let ids: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let provider = Rows(ids.iter().cloned().zip(rows.iter().cloned()).collect());
        let views: Vec<(String, Plane)> = ids.iter().map(|id| (id.clone(), Plane::zeros(1, 1))).collect();
        let got = select_key_view(&views, &provider, true).unwrap().index;
        let want = brute_force_key(&rows);
        if got != want {
            mismatches.push(format!("case {case}: {got} vs {want}"));
        }
    }
    let elapsed = start.elapsed();
    check(
        mismatches.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "100 matrices ({ties} with ties), {} mismatches{}, {:.2}s",
            mismatches.len(),
            mismatches.first().map(|m| format!(" [{m}]")).unwrap_or_default(),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 4

fn supervise(scene: &Scene, cams: &[(String, Camera, Option<f64>)]) -> SupervisionSet {
    SupervisionSet {
        views: cams
            .iter()
            .map(|(id, cam, t)| {
                let img = rasterize(scene, cam, *t).unwrap().image;
                SupervisionView {
                    id: id.clone(),
                    camera: cam.clone(),
                    time: *t,
                    l: img.plane(0),
                    a: img.plane(1),
                    b: img.plane(2),
                }
            })
            .collect(),
    }
}

fn synth_views(spec: &SynthSpec, dynamic: bool, role: Role) -> Vec<(String, Camera, Option<f64>)> {
    build_cameras(spec, dynamic)
        .unwrap()
        .into_iter()
        .filter(|e| e.role == role)
        .map(|e| (e.id, e.camera, e.time))
        .collect()
}

fn means(scene: &Scene) -> Vec<[f64; 3]> {
    (0..scene.len()).map(|i| scene.primitive(i).mu).collect()
}

/// Runs warm-up, checking chroma SH after every step and the L' render across
/// the switch. Returns the number of views compared.
fn warmup_case(sup: &SupervisionSet, init: Scene, cfg: &ReconstructConfig) -> Result<usize, String> {
    let chroma = init.gaussians.sh[1..].to_vec();
    let mut trainer = Trainer::new(init, sup, cfg).map_err(|e| e.to_string())?;
    while trainer.iteration() < cfg.switch_iteration() {
        trainer.step().map_err(|e| e.to_string())?;
        if trainer.scene().gaussians.sh[1..] != chroma[..] {
            return Err(format!("chroma SH changed at iteration {}", trainer.iteration()));
        }
    }
    let before: Vec<Plane> = sup
        .views
        .iter()
        .map(|v| rasterize(trainer.scene(), &v.camera, v.time).unwrap().image.plane(0))
        .collect();
    trainer.enter_full_color().map_err(|e| e.to_string())?;
    for (v, b) in sup.views.iter().zip(&before) {
        let after = rasterize(trainer.scene(), &v.camera, v.time).unwrap().image.plane(0);
        if after.data != b.data {
            return Err(format!("L' render of {} changed across the switch", v.id));
        }
    }
    // training continues in full colour
    trainer.step().map_err(|e| e.to_string())?;
    Ok(sup.views.len())
}

fn criterion_4() -> Outcome {
    let cfg = ReconstructConfig {
        iterations: 24,
        seed: 4,
        ..ReconstructConfig::default()
    };
    let mut notes = Vec::new();
    let spec = SynthSpec {
        resolution: 32,
        ..SynthSpec::default()
    };

    // static synthetic scene
    let gt = build_scene(&spec, false).unwrap();
    let sup = supervise(&gt, &synth_views(&spec, false, Role::Train));
    let init = init_scene(&InitSeed::Points(means(&gt)), &InitConfig::default()).unwrap();
    notes.push(warmup_case(&sup, init, &cfg).map(|n| format!("static {n} views"))?);

    // random initialization, degree 2 SH, subset of views per step
    let init = init_scene(
        &InitSeed::Random {
            count: 300,
            min: [-1.0; 3],
            max: [1.0; 3],
            seed: 9,
        },
        &InitConfig {
            sh_degree: 2,
            ..InitConfig::default()
        },
    )
    .unwrap();
    let sub = ReconstructConfig {
        views_per_step: 3,
        ..cfg.clone()
    };
    notes.push(warmup_case(&sup, init, &sub).map(|n| format!("random init {n} views"))?);

    // dynamic synthetic scene
    let spec = SynthSpec {
        resolution: 32,
        motion: color3d::synth::MotionSpec { frames: 3, ..Default::default() },
        ..SynthSpec::default()
    };
    let gt = build_scene(&spec, true).unwrap();
    let sup = supervise(&gt, &synth_views(&spec, true, Role::Train));
    let init = init_scene(
        &InitSeed::Points(means(&gt)),
        &InitConfig {
            deformation_degree: Some(2),
            ..InitConfig::default()
        },
    )
    .unwrap();
    notes.push(warmup_case(&sup, init, &cfg).map(|n| format!("dynamic {n} views"))?);
    Ok(format!("bit-identical L' and frozen chroma SH: {}", notes.join(", ")))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        resolution: 96,
        ..SynthSpec::default()
    };
    let gt = build_scene(&spec, false).unwrap();
    let (_, cam, _) = synth_views(&spec, false, Role::Train).remove(0);
    let img = rasterize(&gt, &cam, None).unwrap().image;
    let sample = AugmentSample::new(img.plane(0), img.plane(1), img.plane(2), Provenance::Original).unwrap();
    let cfg = ColorizerTrainConfig {
        iterations: 1500,
        crop: 96,
        seed: 5,
        ..ColorizerTrainConfig::default()
    };
    let aug = AugmentConfig {
        rotate_flip: false,
        grid_shuffle: false,
        elastic: false,
        ..AugmentConfig::default()
    };
    let mut net = ColorizerNet::new(NetConfig {
        seed: 5,
        ..NetConfig::default()
    })
    .unwrap();
    let checksum = net.encoder_checksum();
    let log = train(&mut net, &[sample], &cfg, &aug).unwrap();
    let smoothed = log.smoothed(cfg.smoothing_window).unwrap();
    let unchanged = net.encoder_checksum() == checksum;
    let elapsed = start.elapsed();
    check(
        smoothed < 0.02 && unchanged && elapsed < Duration::from_secs(600),
        format!(
            "smoothed L1 {smoothed:.4} after {} steps, encoder checksum {}, {:.0}s",
            cfg.iterations,
            if unchanged { "unchanged" } else { "CHANGED" },
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- 6, 7

fn pipeline_config(root: &Path, scene_type: SceneType) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.scene_type = scene_type;
    cfg.paths.input = root.join("data");
    cfg.paths.output = root.join("out");
    // the ground-truth colour of the key view stands in for the user's colorization
    cfg.paths.key_view_color = Some(root.join("data/color/{id}.c3dp").to_string_lossy().into_owned());
    cfg
}

fn criterion_6(static_me: &mut Option<f64>) -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = pipeline_config(tmp.path(), SceneType::Static);
    stages::cmd_synth(&cfg).map_err(|e| e.to_string())?;
    let run = stages::cmd_run_all(&cfg).map_err(|e| e.to_string())?;
    let ours = run.report.ok_or("no evaluation report")?;
    let baseline = run_baseline(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let me = ours.mean_me().ok_or("no held-out pairs")?;
    let base = baseline.mean_me().ok_or("no baseline pairs")?;
    *static_me = Some(me);
    check(
        me <= 0.08 && me <= 0.5 * base && elapsed < Duration::from_secs(1800),
        format!(
            "ME {me:.4} vs per-view baseline {base:.4} (ratio {:.2}), {} pairs, L' PSNR {:.1} dB, {:.0}s",
            me / base,
            ours.pairs.len(),
            ours.mean_psnr_l().unwrap_or(f64::NAN),
            secs(elapsed)
        ),
    )
}

fn losses_match(a: &ReconstructLog, b: &ReconstructLog) -> f64 {
    a.records
        .iter()
        .zip(&b.records)
        .flat_map(|(x, y)| [x.loss_l - y.loss_l, x.loss_ab - y.loss_ab, x.total - y.total])
        .fold(if a.records.len() == b.records.len() { 0.0 } else { f64::INFINITY }, |m, d| m.max(d.abs()))
}

fn zero_motion_gap() -> Result<f64, String> {
    let spec = SynthSpec::default();
    let gt = build_scene(&spec, false).unwrap();
    let views = synth_views(&spec, false, Role::Train);
    let sup = supervise(&gt, &views);
    // same images, tagged t = 0
    let mut sup_t = sup.clone();
    sup_t.views.iter_mut().for_each(|v| v.time = Some(0.0));
    let cfg = ReconstructConfig {
        iterations: 200,
        seed: 7,
        ..ReconstructConfig::default()
    };
    let run = |sup: &SupervisionSet, degree: Option<usize>| -> Result<ReconstructLog, String> {
        let init = InitConfig {
            deformation_degree: degree,
            ..InitConfig::default()
        };
        let mut scene = init_scene(&InitSeed::Points(means(&gt)), &init).map_err(|e| e.to_string())?;
        color3d_core::reconstruct::train_scene(&mut scene, sup, &cfg).map_err(|e| e.to_string())
    };
    Ok(losses_match(&run(&sup, None)?, &run(&sup_t, Some(2))?))
}

fn criterion_7(static_me: Option<f64>) -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = pipeline_config(tmp.path(), SceneType::Dynamic);
    cfg.reconstruct.views_per_step = 8;
    stages::cmd_synth(&cfg).map_err(|e| e.to_string())?;
    let report = stages::cmd_run_all(&cfg).map_err(|e| e.to_string())?.report.ok_or("no evaluation report")?;
    let psnr = report.mean_psnr_l().ok_or("no views")?;
    let cross_time = report.mean_me_of(PairKind::CrossTime).ok_or("no cross-time pairs")?;
    let gap = zero_motion_gap()?;
    let (limit, against) = match static_me {
        Some(me) => (1.25 * me, format!("{me:.4}")),
        None => (f64::NAN, "unavailable".into()),
    };
    check(
        psnr > 30.0 && cross_time <= limit && gap <= 1e-6,
        format!(
            "held-out L' PSNR {psnr:.1} dB, cross-time ME {cross_time:.4} vs 1.25 x static {against}, zero-motion loss gap {gap:.1e}, {:.0}s",
            secs(start.elapsed())
        ),
    )
}

// ---------------------------------------------------------------- 8

fn closed_form_colorfulness(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb.map(|v| v * 255.0);
    let rg = r - g;
    let yb = 0.5 * (r + g) - b;
    0.3 * (rg * rg + yb * yb).sqrt()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut notes = Vec::new();
    let gray_ok = (0..20).all(|_| {
        let v = rng.gen_range(0.0..1.0);
        colorfulness(&RgbImage::filled(17, 9, [v, v, v])) == 0.0
    });
    notes.push(format!("gray {}", if gray_ok { "0 exactly" } else { "NONZERO" }));
    let worst_uniform = (0..50)
        .map(|_| {
            let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            (colorfulness(&RgbImage::filled(8, 8, c)) - closed_form_colorfulness(c)).abs()
        })
        .fold(0.0, f64::max);
    notes.push(format!("uniform colours max err {worst_uniform:.1e}"));

    let (w, h) = (24, 16);
    let img = NormalizedLabImage {
        width: w,
        height: h,
        l: (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect(),
        a: (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect(),
        b: (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let identity = CorrespondenceSet {
        id_a: "x".into(),
        id_b: "x".into(),
        pairs: (0..w * h).map(|i| [(i % w) as f64, (i / w) as f64, (i % w) as f64, (i / w) as f64]).collect(),
    };
    let me_id = matching_error(&img, &img, &identity).map_err(|e| e.to_string())?;
    notes.push(format!("identity ME {me_id}"));

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    color3d::synth::write_dataset(&data, &SynthSpec::default(), false).map_err(|e| e.to_string())?;
    let ds = Dataset::open(&data).map_err(|e| e.to_string())?;
    let color: HashMap<&str, NormalizedLabImage> =
        ds.cameras.iter().map(|e| (e.id.as_str(), io::read_lab(&ds.color_path(&e.id)).unwrap())).collect();
    let mut values = Vec::new();
    for (i, a) in ds.cameras.iter().enumerate() {
        for b in &ds.cameras[i + 1..] {
            let path = ds.correspondence_path(&a.id, &b.id);
            if !path.exists() {
                continue;
            }
            let (ia, ib) = (&color[a.id.as_str()], &color[b.id.as_str()]);
            let set = load_correspondences(&path, (ia.width, ia.height), (ib.width, ib.height)).map_err(|e| e.to_string())?;
            values.push(matching_error(ia, ib, &set).map_err(|e| e.to_string())?);
        }
    }
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let worst = values.iter().cloned().fold(0.0, f64::max);
    notes.push(format!("ground-truth ME over {} pairs mean {mean:.4} (max {worst:.4})", values.len()));
    check(
        gray_ok && worst_uniform < 1e-6 && me_id == 0.0 && !values.is_empty() && mean < 0.005,
        notes.join("; "),
    )
}

// ---------------------------------------------------------------- 9

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = pipeline_config(tmp.path(), SceneType::Static);
    cfg.seed = 9;
    cfg.colorizer.train.iterations = 150;
    cfg.reconstruct.iterations = 150;
    stages::cmd_synth(&cfg).map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for run in ["run1", "run2"] {
        cfg.paths.output = tmp.path().join(run);
        stages::cmd_run_all(&cfg).map_err(|e| e.to_string())?;
        trees.push(tree(&cfg.paths.output));
    }
    let bytes: usize = trees[0].iter().map(|(_, b)| b.len()).sum();
    let differing: Vec<String> = trees[0]
        .iter()
        .zip(&trees[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.display().to_string())
        .collect();
    check(
        trees[0].len() == trees[1].len() && differing.is_empty(),
        format!(
            "{} files, {bytes} bytes; {} differ{}",
            trees[0].len(),
            differing.len(),
            differing.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
        ),
    )
}

// ----------------------------------------------------------------

/// `ACCEPTANCE_CRITERIA=1,5` limits the run; skipped criteria count as passed.
fn selected(n: usize) -> bool {
    std::env::var("ACCEPTANCE_CRITERIA").map_or(true, |v| v.split(',').any(|c| c.trim() == n.to_string()))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    if !selected(n) {
        println!("criterion {n} [SKIP] {name}");
        return true;
    }
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} [{tag}] {name}: {detail}");
    outcome.is_ok()
}

fn main() {
    // `cargo test -- --list` and filters from other targets
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut static_me = None;
    let results = [
        run(1, "gradient integrity", criterion_1),
        run(2, "equation fidelity", criterion_2),
        run(3, "key-view oracle equivalence", criterion_3),
        run(4, "warm-up invariant", criterion_4),
        run(5, "colorizer overfit", criterion_5),
        run(6, "static consistency vs per-view baseline", || criterion_6(&mut static_me)),
        run(7, "dynamic unification", || criterion_7(static_me)),
        run(8, "metric correctness", criterion_8),
        run(9, "determinism", criterion_9),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
