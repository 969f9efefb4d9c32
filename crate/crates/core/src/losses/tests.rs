use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Plane {
    Plane::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0))
}

/// Direct SSIM: explicit 2D window per pixel, zero outside the image.
fn ssim_reference(x: &Plane, y: &Plane) -> f64 {
    let (w, h) = (x.width as isize, x.height as isize);
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let mut sum = 0.0;
    for py in 0..h {
        for px in 0..w {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -5..=5isize {
                for dx in -5..=5isize {
                    let (qx, qy) = (px + dx, py + dy);
                    if qx < 0 || qy < 0 || qx >= w || qy >= h {
                        continue;
                    }
                    let k = win[(dy + 5) as usize][(dx + 5) as usize] / total;
                    let a = x.get(qx as usize, qy as usize);
                    let b = y.get(qx as usize, qy as usize);
                    mx += k * a;
                    my += k * b;
                    sxx += k * a * a;
                    syy += k * b * b;
                    sxy += k * a * b;
                }
            }
            let (c1, c2) = (1e-4, 9e-4);
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    sum / (w * h) as f64
}

fn lap_reference(p: &Plane, x: usize, y: usize) -> f64 {
    let g = |dx: isize, dy: isize| p.get_clamped(x as isize + dx, y as isize + dy);
    g(1, 0) + g(-1, 0) + g(0, 1) + g(0, -1) - 4.0 * g(0, 0)
}

#[test]
fn dssim_identical_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_plane(&mut rng, 20, 17);
    assert!(dssim(&[&a], &[&a]).unwrap().abs() < 1e-15);
}

#[test]
fn dssim_negative_is_positive() {
    let a = Plane::from_fn(24, 24, |x, y| if (x / 3 + y / 3) % 2 == 0 { 0.95 } else { 0.05 });
    let neg = Plane::from_fn(24, 24, |x, y| 1.0 - a.get(x, y));
    let d = dssim(&[&a], &[&neg]).unwrap();
    assert!(d > 0.0 && d <= 1.0, "{d}");
}

#[test]
fn dssim_matches_independent_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (w, h) in [(23, 19), (8, 8), (40, 12)] {
        let a = random_plane(&mut rng, w, h);
        let b = random_plane(&mut rng, w, h);
        let expected = (1.0 - ssim_reference(&a, &b)) / 2.0;
        assert!((dssim(&[&a], &[&b]).unwrap() - expected).abs() < 1e-6);
        // symmetry
        assert!((dssim(&[&a], &[&b]).unwrap() - dssim(&[&b], &[&a]).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn dssim_rejects_shape_mismatch() {
    let a = Plane::zeros(8, 8);
    let b = Plane::zeros(8, 9);
    assert!(dssim(&[&a], &[&b]).is_err());
}

#[test]
fn edge_loss_floors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_plane(&mut rng, 13, 11);
    let eps = 1e-3;
    assert!((edge_loss(&a, &a, eps).unwrap() - 13.0 * 11.0 * eps).abs() < 1e-12);
    let c1 = Plane::filled(13, 11, 0.2);
    let c2 = Plane::filled(13, 11, 0.7);
    assert!((edge_loss(&c1, &c2, eps).unwrap() - 13.0 * 11.0 * eps).abs() < 1e-12);
}

#[test]
fn edge_loss_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_plane(&mut rng, 15, 9);
    let b = random_plane(&mut rng, 15, 9);
    let eps = 0.05;
    let mut expected = 0.0;
    for y in 0..9 {
        for x in 0..15 {
            let d = lap_reference(&a, x, y) - lap_reference(&b, x, y);
            expected += (d * d + eps * eps).sqrt();
        }
    }
    assert!((edge_loss(&a, &b, eps).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn loss_l_floors_and_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_plane(&mut rng, 16, 16);
    let b = random_plane(&mut rng, 16, 16);
    let w = LossWeights::default();
    assert!((loss_l(&a, &a, &w).unwrap() - 256.0 * w.edge_eps).abs() < 1e-12);

    let l1v = l1(&[&a], &[&b]).unwrap().value;
    let ds = dssim(&[&a], &[&b]).unwrap();
    let edge = edge_loss(&a, &b, w.edge_eps).unwrap();
    assert!((loss_l(&a, &b, &w).unwrap() - (0.8 * l1v + 0.2 * ds + edge)).abs() < 1e-12);
    let w0 = LossWeights { beta: 0.0, ..w };
    assert!((loss_l(&a, &b, &w0).unwrap() - (l1v + edge)).abs() < 1e-12);
}

#[test]
fn loss_ab_floors_and_offset() {
    let a = Plane::filled(12, 12, 0.4);
    let b = Plane::filled(12, 12, 0.6);
    let w = LossWeights::default();
    assert_eq!(loss_ab([&a, &b], [&a, &b], &w).unwrap(), 0.0);
    let a2 = Plane::filled(12, 12, 0.5);
    let b2 = Plane::filled(12, 12, 0.7);
    let expected = 0.8 * 0.1 + 0.2 * dssim(&[&a2, &b2], &[&a, &b]).unwrap();
    assert!((loss_ab([&a2, &b2], [&a, &b], &w).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn weights_validation() {
    let a = Plane::zeros(8, 8);
    let bad = LossWeights {
        beta: 1.5,
        ..LossWeights::default()
    };
    assert!(loss_l(&a, &a, &bad).is_err());
    let bad = LossWeights {
        edge_eps: 0.0,
        ..LossWeights::default()
    };
    assert!(loss_l(&a, &a, &bad).is_err());
}

fn fd_check(f: &dyn Fn(&[Plane]) -> f64, analytic: &[Plane], at: &[Plane], tol: f64) {
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for p in 0..at.len() {
        for i in 0..at[p].data.len() {
            let mut plus = at.to_vec();
            plus[p].data[i] += h;
            let mut minus = at.to_vec();
            minus[p].data[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            num += (fd - analytic[p].data[i]).powi(2);
            den += fd * fd;
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel < tol, "relative gradient error {rel}");
}

#[test]
fn loss_l_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_plane(&mut rng, 14, 12);
    let b = random_plane(&mut rng, 14, 12);
    let w = LossWeights {
        edge_eps: 0.01,
        ..LossWeights::default()
    };
    let g = loss_l_grad(&a, &b, &w).unwrap();
    fd_check(&|p: &[Plane]| loss_l(&p[0], &b, &w).unwrap(), &g.grads, &[a], 1e-4);
}

#[test]
fn loss_ab_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pa = random_plane(&mut rng, 13, 15);
    let pb = random_plane(&mut rng, 13, 15);
    let ta = random_plane(&mut rng, 13, 15);
    let tb = random_plane(&mut rng, 13, 15);
    let w = LossWeights::default();
    let g = loss_ab_grad([&pa, &pb], [&ta, &tb], &w).unwrap();
    fd_check(
        &|p: &[Plane]| loss_ab([&p[0], &p[1]], [&ta, &tb], &w).unwrap(),
        &g.grads,
        &[pa, pb],
        1e-4,
    );
}

#[test]
fn dssim_gradient_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_plane(&mut rng, 18, 11);
    let b = Plane::from_fn(18, 11, |x, y| 0.5 * a.get(x, y) + 0.25 + 0.01 * (x as f64));
    let g = dssim_grad(&[&a], &[&b]).unwrap();
    fd_check(&|p: &[Plane]| dssim(&[&p[0]], &[&b]).unwrap(), &g.grads, &[a], 1e-5);
}
