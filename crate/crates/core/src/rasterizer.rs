//! Differentiable tile-based splatting of Lab Gaussian scenes.
//!
//! Forward: deform (dynamic scenes), project with the EWA local-affine
//! approximation, sort globally front-to-back, and alpha-composite per pixel
//! in 16x16 tiles. Backward: analytic gradients for every primitive attribute
//! and deformation coefficient. Per-tile partial gradients are reduced in
//! fixed tile order, so results do not depend on scheduling.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::autodiff::sigmoid;
use crate::colorspace::{NormalizedLabImage, Plane};
use crate::error::{Error, Result};
use crate::scene::camera::{dot, normalize, sub};
use crate::scene::sh::{sh_basis, sh_basis_grad};
use crate::scene::{rotation_from_quat, Camera, ChannelAssignment, DeformationField, GaussianPrimitive, Gaussians, Scene};

/// Added to the screen-space covariance diagonal (pixels^2).
pub const BLUR_FLOOR: f64 = 0.3;
pub const TILE_SIZE: usize = 16;
/// Squared Mahalanobis radius beyond which a splat is truncated (3 sigma).
const CUTOFF_SQ: f64 = 9.0;

/// Screen-space footprint of one primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatProjection {
    pub mean2d: [f64; 2],
    /// `(xx, xy, yy)` entries of the symmetric 2x2 covariance, pixels^2.
    pub cov2d: [f64; 3],
    pub depth: f64,
    /// Evaluated channel value of each rendered plane.
    pub values: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// Planes are (L', a', b') in full Lab mode and (L', L', L') in warm-up.
    pub image: NormalizedLabImage,
    /// Accumulated opacity per pixel.
    pub alpha: Plane,
    /// Opacity-weighted mean depth (0 where nothing was hit).
    pub depth: Plane,
}

/// Primitive attributes after deformation, with the rotation left
/// unnormalized so the gradient can flow through normalization.
#[derive(Debug, Clone)]
struct Effective {
    mu: [f64; 3],
    q_raw: [f64; 4],
    log_scale: [f64; 3],
}

#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    mean: [f64; 2],
    /// Inverse covariance `(A, B, C)`: `d^T Q d = A dx^2 + 2B dx dy + C dy^2`.
    conic: [f64; 3],
    alpha: f64,
    color: [f64; 3],
    depth: f64,
    bbox: [usize; 4],
}

/// State kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct RenderCache {
    fingerprint: u64,
    camera: Camera,
    time: Option<f64>,
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

/// Gradients w.r.t. every trainable scene attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub gaussians: Gaussians,
    pub deformation: Option<DeformationField>,
}

impl SceneGrad {
    fn zeros_like(scene: &Scene) -> Self {
        Self {
            gaussians: Gaussians::zeros(scene.len(), scene.sh_degree),
            deformation: scene.deformation.as_ref().map(|d| DeformationField::zeros(scene.len(), d.degree)),
        }
    }

    /// Adds `other` scaled by `k`.
    pub fn add_scaled(&mut self, other: &SceneGrad, k: f64) {
        fn axpy(a: &mut [f64], b: &[f64], k: f64) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
        }
        let (a, b) = (&mut self.gaussians, &other.gaussians);
        axpy(&mut a.mu, &b.mu, k);
        axpy(&mut a.q, &b.q, k);
        axpy(&mut a.log_scale, &b.log_scale, k);
        axpy(&mut a.opacity_logit, &b.opacity_logit, k);
        for s in 0..3 {
            axpy(&mut a.sh[s], &b.sh[s], k);
        }
        if let (Some(a), Some(b)) = (&mut self.deformation, &other.deformation) {
            axpy(&mut a.mu, &b.mu, k);
            axpy(&mut a.q, &b.q, k);
            axpy(&mut a.log_scale, &b.log_scale, k);
        }
    }
}

fn effective(scene: &Scene, i: usize, t: Option<f64>) -> Effective {
    let g = &scene.gaussians;
    let mut e = Effective {
        mu: std::array::from_fn(|j| g.mu[3 * i + j]),
        q_raw: std::array::from_fn(|j| g.q[4 * i + j]),
        log_scale: std::array::from_fn(|j| g.log_scale[3 * i + j]),
    };
    if let (Some(field), Some(t)) = (&scene.deformation, t) {
        let (dmu, dq, ds) = field.coeffs(i).offsets(t);
        for j in 0..3 {
            e.mu[j] += dmu[j];
            e.log_scale[j] += ds[j];
        }
        for j in 0..4 {
            e.q_raw[j] += dq[j];
        }
    }
    e
}

fn quat_norm(q: [f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn world_rotation(cam: &Camera) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| cam.rotation[r][c])
}

/// Intermediate geometry of one projected primitive.
struct Geometry {
    p_cam: [f64; 3],
    q_unit: [f64; 4],
    q_len: f64,
    rot: Matrix3<f64>,
    scale: [f64; 3],
    m: Matrix3<f64>,
    sigma: Matrix3<f64>,
    j: Matrix2x3<f64>,
    t: Matrix2x3<f64>,
    cov: Matrix2<f64>,
    conic: Matrix2<f64>,
    mean: [f64; 2],
    dir: [f64; 3],
    dir_len: f64,
}

fn geometry(e: &Effective, cam: &Camera) -> Option<Geometry> {
    let p_cam = cam.world_to_camera(e.mu);
    let z = p_cam[2];
    if z <= cam.near || z >= cam.far {
        return None;
    }
    let q_len = quat_norm(e.q_raw);
    if q_len == 0.0 {
        return None;
    }
    let q_unit = e.q_raw.map(|v| v / q_len);
    let rot = rotation_from_quat(q_unit);
    let scale = e.log_scale.map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&Vector3::from(scale));
    let sigma = m * m.transpose();
    let (x, y) = (p_cam[0], p_cam[1]);
    let j = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let t = j * world_rotation(cam);
    let cov = t * sigma * t.transpose() + Matrix2::identity() * BLUR_FLOOR;
    let conic = cov.try_inverse()?;
    let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    let view = sub(e.mu, cam.center());
    let dir_len = dot(view, view).sqrt();
    let dir = normalize(view).unwrap_or([0.0, 0.0, 1.0]);
    Some(Geometry {
        p_cam,
        q_unit,
        q_len,
        rot,
        scale,
        m,
        sigma,
        j,
        t,
        cov,
        conic,
        mean,
        dir,
        dir_len,
    })
}

/// Raw (pre-clamp) values of the three rendered planes.
fn plane_values_raw(scene: &Scene, i: usize, dir: [f64; 3]) -> [f64; 3] {
    let k = scene.gaussians.sh_len();
    let basis = sh_basis(scene.sh_degree, dir);
    let sources = scene.plane_sources();
    std::array::from_fn(|p| {
        let coeffs = &scene.gaussians.sh[sources[p]][k * i..k * (i + 1)];
        0.5 + coeffs.iter().zip(basis.iter()).map(|(c, b)| c * b).sum::<f64>()
    })
}

fn pixel_bbox(mean: [f64; 2], cov: &Matrix2<f64>, w: usize, h: usize) -> Option<[usize; 4]> {
    let rx = 3.0 * cov[(0, 0)].sqrt();
    let ry = 3.0 * cov[(1, 1)].sqrt();
    // pixel i covers center i + 0.5
    let x0 = (mean[0] - rx - 0.5).ceil().max(0.0);
    let x1 = (mean[0] + rx - 0.5).floor().min(w as f64 - 1.0);
    let y0 = (mean[1] - ry - 0.5).ceil().max(0.0);
    let y1 = (mean[1] + ry - 0.5).floor().min(h as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

/// Projects a single (already deformed) primitive. `None` when culled.
pub fn project(g: &GaussianPrimitive, cam: &Camera, assignment: ChannelAssignment) -> Option<SplatProjection> {
    let e = Effective {
        mu: g.mu,
        q_raw: g.q,
        log_scale: g.log_scale,
    };
    let geo = geometry(&e, cam)?;
    pixel_bbox(geo.mean, &geo.cov, cam.width, cam.height)?;
    let sources = match assignment {
        ChannelAssignment::WarmUp => [0, 0, 0],
        ChannelAssignment::FullLab => [0, 1, 2],
    };
    let basis = sh_basis(crate::scene::sh::degree_for_len(g.sh[0].len())?, geo.dir);
    let values = sources.map(|s| {
        (0.5 + g.sh[s].iter().zip(basis.iter()).map(|(c, b)| c * b).sum::<f64>()).clamp(0.0, 1.0)
    });
    Some(SplatProjection {
        mean2d: geo.mean,
        cov2d: [geo.cov[(0, 0)], geo.cov[(0, 1)], geo.cov[(1, 1)]],
        depth: geo.p_cam[2],
        values,
    })
}

fn fingerprint(scene: &Scene) -> u64 {
    let mut h = DefaultHasher::new();
    scene.sh_degree.hash(&mut h);
    (scene.assignment as u8).hash(&mut h);
    let g = &scene.gaussians;
    let mut feed = |buf: &[f64]| {
        buf.len().hash(&mut h);
        for v in buf {
            v.to_bits().hash(&mut h);
        }
    };
    feed(&scene.background);
    feed(&g.mu);
    feed(&g.q);
    feed(&g.log_scale);
    feed(&g.opacity_logit);
    for s in &g.sh {
        feed(s);
    }
    if let Some(d) = &scene.deformation {
        feed(&d.mu);
        feed(&d.q);
        feed(&d.log_scale);
    }
    h.finish()
}

fn check_time(scene: &Scene, t: Option<f64>) -> Result<()> {
    match t {
        Some(_) if !scene.is_dynamic() => Err(Error::invalid("a time was given for a static scene")),
        Some(t) if !(0.0..=1.0).contains(&t) => Err(Error::invalid(format!("render time {t} outside [0, 1]"))),
        _ => Ok(()),
    }
}

pub fn rasterize(scene: &Scene, cam: &Camera, t: Option<f64>) -> Result<RenderOutput> {
    rasterize_with_cache(scene, cam, t).map(|(out, _)| out)
}

/// Forward pass that also returns the state needed by [`rasterize_backward`].
pub fn rasterize_with_cache(scene: &Scene, cam: &Camera, t: Option<f64>) -> Result<(RenderOutput, RenderCache)> {
    check_time(scene, t)?;
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);

    let mut splats: Vec<Splat> = (0..scene.len())
        .into_par_iter()
        .filter_map(|i| {
            let e = effective(scene, i, t);
            let geo = geometry(&e, cam)?;
            let bbox = pixel_bbox(geo.mean, &geo.cov, w, h)?;
            let raw = plane_values_raw(scene, i, geo.dir);
            Some(Splat {
                index: i,
                mean: geo.mean,
                conic: [geo.conic[(0, 0)], geo.conic[(0, 1)], geo.conic[(1, 1)]],
                alpha: sigmoid(scene.gaussians.opacity_logit[i]),
                color: raw.map(|v| v.clamp(0.0, 1.0)),
                depth: geo.p_cam[2],
                bbox,
            })
        })
        .collect();
    // stable sort: equal depths keep primitive order
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let bg = scene.plane_background();
    let tile_results: Vec<Vec<[f64; 5]>> = (0..tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &tiles[tile];
            let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
            for py in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for px in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                    let mut trans = 1.0;
                    let mut c = [0.0; 3];
                    let mut depth = 0.0;
                    for &k in list {
                        let s = &splats[k as usize];
                        let (dx, dy) = (fx - s.mean[0], fy - s.mean[1]);
                        let maha = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                        if maha > CUTOFF_SQ {
                            continue;
                        }
                        let a = s.alpha * (-0.5 * maha).exp();
                        let wgt = a * trans;
                        for ch in 0..3 {
                            c[ch] += wgt * s.color[ch];
                        }
                        depth += wgt * s.depth;
                        trans *= 1.0 - a;
                    }
                    let acc = 1.0 - trans;
                    let d = if acc > 1e-12 { depth / acc } else { 0.0 };
                    out.push([c[0] + trans * bg[0], c[1] + trans * bg[1], c[2] + trans * bg[2], acc, d]);
                }
            }
            out
        })
        .collect();

    let mut image = NormalizedLabImage::filled(w, h, [0.0; 3]);
    let mut alpha = Plane::zeros(w, h);
    let mut depth = Plane::zeros(w, h);
    for (tile, res) in tile_results.into_iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let mut it = res.into_iter();
        for py in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
            for px in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                let v = it.next().expect("tile result size");
                let i = py * w + px;
                image.l[i] = v[0];
                image.a[i] = v[1];
                image.b[i] = v[2];
                alpha.data[i] = v[3];
                depth.data[i] = v[4];
            }
        }
    }

    let cache = RenderCache {
        fingerprint: fingerprint(scene),
        camera: cam.clone(),
        time: t,
        splats,
        tiles,
        tiles_x,
    };
    Ok((RenderOutput { image, alpha, depth }, cache))
}

/// Per-splat screen-space gradient: mean (2), conic (A, B, C), color (3), opacity.
type ScreenGrad = [f64; 9];

/// Gradients of `sum(upstream * image)` w.r.t. all scene parameters.
pub fn rasterize_backward(
    scene: &Scene,
    cam: &Camera,
    t: Option<f64>,
    cache: &RenderCache,
    upstream: &[Plane; 3],
) -> Result<SceneGrad> {
    check_time(scene, t)?;
    if cache.fingerprint != fingerprint(scene) || cache.camera != *cam || cache.time != t {
        return Err(Error::state("render cache does not match the scene, camera or time of this backward pass"));
    }
    let (w, h) = (cam.width, cam.height);
    for u in upstream {
        if u.width != w || u.height != h {
            return Err(Error::ShapeMismatch {
                op: "rasterize_backward",
                lhs: vec![h, w],
                rhs: u.dims(),
            });
        }
    }
    let bg = scene.plane_background();
    let splats = &cache.splats;
    let tiles_x = cache.tiles_x;

    let partials: Vec<Vec<ScreenGrad>> = (0..cache.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &cache.tiles[tile];
            let mut grads = vec![[0.0; 9]; list.len()];
            // (slot in list, alpha', gaussian falloff, transmittance before, dx, dy)
            let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            for py in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for px in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let pi = py * w + px;
                    let up = [upstream[0].data[pi], upstream[1].data[pi], upstream[2].data[pi]];
                    if up == [0.0; 3] {
                        continue;
                    }
                    let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                    hits.clear();
                    let mut trans = 1.0;
                    for (slot, &k) in list.iter().enumerate() {
                        let s = &splats[k as usize];
                        let (dx, dy) = (fx - s.mean[0], fy - s.mean[1]);
                        let maha = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                        if maha > CUTOFF_SQ {
                            continue;
                        }
                        let g = (-0.5 * maha).exp();
                        let a = s.alpha * g;
                        hits.push((slot, a, g, trans, dx, dy));
                        trans *= 1.0 - a;
                    }
                    // color seen behind the current splat
                    let mut behind = bg;
                    for &(slot, a, g, tb, dx, dy) in hits.iter().rev() {
                        let s = &splats[list[slot] as usize];
                        let gr = &mut grads[slot];
                        let mut d_a = 0.0;
                        for ch in 0..3 {
                            gr[5 + ch] += up[ch] * a * tb;
                            d_a += up[ch] * tb * (s.color[ch] - behind[ch]);
                            behind[ch] = s.color[ch] * a + (1.0 - a) * behind[ch];
                        }
                        gr[8] += d_a * g;
                        let d_maha = d_a * s.alpha * g * -0.5;
                        let (qa, qb, qc) = (s.conic[0], s.conic[1], s.conic[2]);
                        // maha depends on the mean through d = pixel - mean
                        gr[0] += d_maha * -2.0 * (qa * dx + qb * dy);
                        gr[1] += d_maha * -2.0 * (qb * dx + qc * dy);
                        gr[2] += d_maha * dx * dx;
                        gr[3] += d_maha * 2.0 * dx * dy;
                        gr[4] += d_maha * dy * dy;
                    }
                }
            }
            grads
        })
        .collect();

    let mut screen = vec![[0.0; 9]; splats.len()];
    for (tile, grads) in partials.iter().enumerate() {
        for (slot, &k) in cache.tiles[tile].iter().enumerate() {
            let dst = &mut screen[k as usize];
            for (d, s) in dst.iter_mut().zip(&grads[slot]) {
                *d += s;
            }
        }
    }

    let per_splat: Vec<(usize, PrimitiveGrad)> = splats
        .par_iter()
        .zip(screen.par_iter())
        .filter_map(|(s, sg)| {
            if sg.iter().all(|&v| v == 0.0) {
                return None;
            }
            Some((s.index, primitive_backward(scene, cam, t, s.index, sg)))
        })
        .collect();

    let mut out = SceneGrad::zeros_like(scene);
    let k = scene.gaussians.sh_len();
    for (i, pg) in per_splat {
        let g = &mut out.gaussians;
        for j in 0..3 {
            g.mu[3 * i + j] += pg.mu[j];
            g.log_scale[3 * i + j] += pg.log_scale[j];
        }
        for j in 0..4 {
            g.q[4 * i + j] += pg.q_raw[j];
        }
        g.opacity_logit[i] += pg.opacity_logit;
        for set in 0..3 {
            for c in 0..k {
                g.sh[set][k * i + c] += pg.sh[set][c];
            }
        }
        if let (Some(field), Some(t)) = (&mut out.deformation, t) {
            let p = field.degree;
            let mut tp = 1.0;
            for power in 0..p {
                tp *= t;
                let base = i * p + power;
                for j in 0..3 {
                    field.mu[base * 3 + j] += tp * pg.mu[j];
                    field.log_scale[base * 3 + j] += tp * pg.log_scale[j];
                }
                for j in 0..4 {
                    field.q[base * 4 + j] += tp * pg.q_raw[j];
                }
            }
        }
    }
    Ok(out)
}

struct PrimitiveGrad {
    mu: [f64; 3],
    q_raw: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    sh: [[f64; 16]; 3],
}

/// Chain rule from screen-space gradients back to the (effective) 3D
/// attributes of primitive `i`.
fn primitive_backward(scene: &Scene, cam: &Camera, t: Option<f64>, i: usize, sg: &ScreenGrad) -> PrimitiveGrad {
    let e = effective(scene, i, t);
    let geo = geometry(&e, cam).expect("splat was projected in the forward pass");
    let mut out = PrimitiveGrad {
        mu: [0.0; 3],
        q_raw: [0.0; 4],
        log_scale: [0.0; 3],
        opacity_logit: 0.0,
        sh: [[0.0; 16]; 3],
    };

    // opacity
    let alpha = sigmoid(scene.gaussians.opacity_logit[i]);
    out.opacity_logit = sg[8] * alpha * (1.0 - alpha);

    // conic -> covariance: dCov = -Q G Q with G the symmetric-matrix gradient
    let g_conic = Matrix2::new(sg[2], 0.5 * sg[3], 0.5 * sg[3], sg[4]);
    let g_cov = -(geo.conic * g_conic * geo.conic);
    // cov = T Sigma T^T + floor, T = J W
    let g_sigma = geo.t.transpose() * g_cov * geo.t;
    let g_t = 2.0 * g_cov * geo.t * geo.sigma;
    let g_j = g_t * world_rotation(cam).transpose();

    // Sigma = M M^T, M = R diag(s)
    let g_m = 2.0 * g_sigma * geo.m;
    let mut g_rot = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            g_rot[(r, c)] = g_m[(r, c)] * geo.scale[c];
        }
    }
    for c in 0..3 {
        let ds: f64 = (0..3).map(|r| g_m[(r, c)] * geo.rot[(r, c)]).sum();
        out.log_scale[c] = ds * geo.scale[c];
    }
    let g_qu = quat_grad(geo.q_unit, &g_rot);
    let proj = dot4(geo.q_unit, g_qu);
    for j in 0..4 {
        out.q_raw[j] = (g_qu[j] - geo.q_unit[j] * proj) / geo.q_len;
    }

    // camera-space position through J and the projected mean
    let [x, y, z] = geo.p_cam;
    let (fx, fy) = (cam.fx, cam.fy);
    let (z2, z3) = (z * z, z * z * z);
    let _ = &geo.j;
    let mut gp = [0.0; 3];
    gp[0] += g_j[(0, 2)] * (-fx / z2);
    gp[1] += g_j[(1, 2)] * (-fy / z2);
    gp[2] += g_j[(0, 0)] * (-fx / z2)
        + g_j[(0, 2)] * (2.0 * fx * x / z3)
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(1, 2)] * (2.0 * fy * y / z3);
    gp[0] += sg[0] * fx / z;
    gp[1] += sg[1] * fy / z;
    gp[2] += -sg[0] * fx * x / z2 - sg[1] * fy * y / z2;
    let wr = &cam.rotation;
    for j in 0..3 {
        out.mu[j] = wr[0][j] * gp[0] + wr[1][j] * gp[1] + wr[2][j] * gp[2];
    }

    // view-dependent color
    let k = scene.gaussians.sh_len();
    let basis = sh_basis(scene.sh_degree, geo.dir);
    let basis_grad = sh_basis_grad(scene.sh_degree, geo.dir);
    let raw = plane_values_raw(scene, i, geo.dir);
    let sources = scene.plane_sources();
    let mut g_dir = [0.0; 3];
    for p in 0..3 {
        let d_color = sg[5 + p];
        if d_color == 0.0 || raw[p] <= 0.0 || raw[p] >= 1.0 {
            continue;
        }
        let set = sources[p];
        let coeffs = &scene.gaussians.sh[set][k * i..k * (i + 1)];
        for c in 0..k {
            out.sh[set][c] += d_color * basis[c];
            for a in 0..3 {
                g_dir[a] += d_color * coeffs[c] * basis_grad[c][a];
            }
        }
    }
    if geo.dir_len > 0.0 {
        let along = dot(geo.dir, g_dir);
        for a in 0..3 {
            out.mu[a] += (g_dir[a] - geo.dir[a] * along) / geo.dir_len;
        }
    }
    out
}

fn dot4(a: [f64; 4], b: [f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Gradient of `sum(G .* R(q))` w.r.t. a unit quaternion `(w, x, y, z)`.
fn quat_grad(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let r = |i: usize, j: usize| g[(i, j)];
    [
        2.0 * (-z * r(0, 1) + y * r(0, 2) + z * r(1, 0) - x * r(1, 2) - y * r(2, 0) + x * r(2, 1)),
        2.0 * (y * r(0, 1) + z * r(0, 2) + y * r(1, 0) - 2.0 * x * r(1, 1) - w * r(1, 2) + z * r(2, 0) + w * r(2, 1)
            - 2.0 * x * r(2, 2)),
        2.0 * (-2.0 * y * r(0, 0) + x * r(0, 1) + w * r(0, 2) + x * r(1, 0) + z * r(1, 2) - w * r(2, 0) + z * r(2, 1)
            - 2.0 * y * r(2, 2)),
        2.0 * (-2.0 * z * r(0, 0) - w * r(0, 1) + x * r(0, 2) + w * r(1, 0) - 2.0 * z * r(1, 1) + y * r(1, 2)
            + x * r(2, 0)
            + y * r(2, 1)),
    ]
}
