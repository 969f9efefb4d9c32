//! Photometric objectives on normalized planes, each with its analytic
//! gradient w.r.t. the prediction.

use serde::{Deserialize, Serialize};

use crate::colorspace::{laplacian, laplacian_adjoint, Plane};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// D-SSIM share; L1 gets `1 - beta`.
    pub beta: f64,
    /// Charbonnier epsilon of the edge term.
    pub edge_eps: f64,
    /// Multiplier on the (summed) edge term.
    pub edge_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.2,
            edge_eps: 1e-3,
            edge_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.edge_eps > 0.0) {
            return Err(Error::invalid(format!("edge_eps must be positive, got {}", self.edge_eps)));
        }
        if !(self.edge_weight >= 0.0) {
            return Err(Error::invalid(format!("edge_weight must be non-negative, got {}", self.edge_weight)));
        }
        Ok(())
    }
}

/// Loss value together with one gradient plane per prediction plane.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<Plane>,
}

fn check_sets(pred: &[&Plane], target: &[&Plane], op: &'static str) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    for (p, t) in pred.iter().zip(target) {
        p.check_same(t, op)?;
        p.check_same(pred[0], op)?;
    }
    Ok(())
}

/// Mean absolute error over every element of every plane.
pub fn l1(pred: &[&Plane], target: &[&Plane]) -> Result<LossGrad> {
    check_sets(pred, target, "l1")?;
    let n = (pred.len() * pred[0].data.len()) as f64;
    let mut value = 0.0;
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let data = p
                .data
                .iter()
                .zip(&t.data)
                .map(|(x, y)| {
                    value += (x - y).abs();
                    // subgradient 0 at equality
                    if x > y {
                        1.0 / n
                    } else if x < y {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect();
            Plane {
                width: p.width,
                height: p.height,
                data,
            }
        })
        .collect();
    Ok(LossGrad { value: value / n, grads })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "same"-size filtering with zero padding. The kernel is
/// symmetric, so this is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let yy = y as isize + j as isize - r;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            let src_row = &tmp[yy as usize * w..(yy as usize + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += kv * src_row[x];
            }
        }
    }
    out
}

/// Mean SSIM of one plane pair and, optionally, its gradient w.r.t. `x`
/// (scaled so that it is the gradient of the per-plane mean).
fn ssim_plane(x: &Plane, y: &Plane, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (x.width, x.height);
    let n = (w * h) as f64;
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect();
    let mx = blur(&x.data, w, h, &k);
    let my = blur(&y.data, w, h, &k);
    let exx = blur(&xx, w, h, &k);
    let eyy = blur(&yy, w, h, &k);
    let exy = blur(&xy, w, h, &k);

    let mut total = 0.0;
    let (mut g_mx, mut g_exx, mut g_exy) = if want_grad {
        (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..w * h {
        let (ux, uy) = (mx[i], my[i]);
        let vx = exx[i] - ux * ux;
        let vy = eyy[i] - uy * uy;
        let cxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + C1;
        let a2 = 2.0 * cxy + C2;
        let b1 = ux * ux + uy * uy + C1;
        let b2 = vx + vy + C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let d = b1 * b2;
            g_mx[i] = (2.0 * uy * (a2 - a1) / d - 2.0 * ux * s * (1.0 / b1 - 1.0 / b2)) / n;
            g_exx[i] = -s / b2 / n;
            g_exy[i] = 2.0 * a1 / d / n;
        }
    }
    if !want_grad {
        return (total / n, None);
    }
    let bm = blur(&g_mx, w, h, &k);
    let bxx = blur(&g_exx, w, h, &k);
    let bxy = blur(&g_exy, w, h, &k);
    let grad = (0..w * h).map(|i| bm[i] + 2.0 * x.data[i] * bxx[i] + y.data[i] * bxy[i]).collect();
    (total / n, Some(grad))
}

/// `(1 - mean SSIM) / 2`, averaged over all planes.
pub fn dssim(pred: &[&Plane], target: &[&Plane]) -> Result<f64> {
    check_sets(pred, target, "dssim")?;
    let mean: f64 = pred.iter().zip(target).map(|(p, t)| ssim_plane(p, t, false).0).sum::<f64>() / pred.len() as f64;
    Ok((1.0 - mean) / 2.0)
}

pub fn dssim_grad(pred: &[&Plane], target: &[&Plane]) -> Result<LossGrad> {
    check_sets(pred, target, "dssim")?;
    let m = pred.len() as f64;
    let mut mean = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let (s, g) = ssim_plane(p, t, true);
        mean += s / m;
        let data = g.expect("gradient requested").into_iter().map(|v| -0.5 * v / m).collect();
        grads.push(Plane {
            width: p.width,
            height: p.height,
            data,
        });
    }
    Ok(LossGrad {
        value: (1.0 - mean) / 2.0,
        grads,
    })
}

/// Charbonnier penalty on the Laplacian difference, summed over pixels.
pub fn edge_loss(render: &Plane, target: &Plane, eps: f64) -> Result<f64> {
    edge_loss_grad(render, target, eps).map(|g| g.value)
}

pub fn edge_loss_grad(render: &Plane, target: &Plane, eps: f64) -> Result<LossGrad> {
    render.check_same(target, "edge_loss")?;
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("edge epsilon must be positive, got {eps}")));
    }
    let lr = laplacian(render)?;
    let lt = laplacian(target)?;
    // compensated sum; the floor H*W*eps comes out exact
    let (mut value, mut comp) = (0.0f64, 0.0f64);
    let dd: Vec<f64> = lr
        .data
        .iter()
        .zip(&lt.data)
        .map(|(a, b)| {
            let d = a - b;
            let r = (d * d + eps * eps).sqrt();
            let t = value + r;
            comp += if value.abs() >= r { (value - t) + r } else { (r - t) + value };
            value = t;
            d / r
        })
        .collect();
    value += comp;
    let grad = laplacian_adjoint(&Plane {
        width: render.width,
        height: render.height,
        data: dd,
    })?;
    Ok(LossGrad { value, grads: vec![grad] })
}

fn combine(parts: &[(f64, &LossGrad)]) -> LossGrad {
    let mut grads: Vec<Plane> = parts[0].1.grads.iter().map(|p| Plane::zeros(p.width, p.height)).collect();
    let mut value = 0.0;
    for (k, part) in parts {
        if *k == 0.0 {
            continue;
        }
        value += k * part.value;
        for (g, pg) in grads.iter_mut().zip(&part.grads) {
            g.data.iter_mut().zip(&pg.data).for_each(|(a, b)| *a += k * b);
        }
    }
    LossGrad { value, grads }
}

/// Luminance objective: `(1-beta) L1 + beta D-SSIM + edge`.
pub fn loss_l(render: &Plane, target: &Plane, w: &LossWeights) -> Result<f64> {
    loss_l_grad(render, target, w).map(|g| g.value)
}

pub fn loss_l_grad(render: &Plane, target: &Plane, w: &LossWeights) -> Result<LossGrad> {
    w.validate()?;
    let l1 = l1(&[render], &[target])?;
    let ds = dssim_grad(&[render], &[target])?;
    let edge = edge_loss_grad(render, target, w.edge_eps)?;
    Ok(combine(&[(1.0 - w.beta, &l1), (w.beta, &ds), (w.edge_weight, &edge)]))
}

/// Chrominance objective over (a', b'): `(1-beta) L1 + beta D-SSIM`.
pub fn loss_ab(render: [&Plane; 2], target: [&Plane; 2], w: &LossWeights) -> Result<f64> {
    loss_ab_grad(render, target, w).map(|g| g.value)
}

pub fn loss_ab_grad(render: [&Plane; 2], target: [&Plane; 2], w: &LossWeights) -> Result<LossGrad> {
    w.validate()?;
    let l1 = l1(&render, &target)?;
    let ds = dssim_grad(&render, &target)?;
    Ok(combine(&[(1.0 - w.beta, &l1), (w.beta, &ds)]))
}

#[cfg(test)]
mod tests;
