use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(w: usize, h: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: f64 = rng.gen_range(0.1..0.5);
    Plane::from_fn(w, h, |x, y| (0.5 + 0.4 * ((x as f64) * f).sin() * ((y as f64) * 0.3).cos()).clamp(0.0, 1.0))
}

/// Brute-force selection written from the definition, sharing nothing with
/// the module beyond the input rows.
fn brute_force(rows: &[Vec<f64>]) -> usize {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let n = unit.len();
    let mut hs = Vec::new();
    for i in 0..n {
        let s: Vec<f64> = (0..n).map(|j| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum()).collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let h: f64 = s.iter().map(|v| {
            let p = v.exp() / z;
            -p * p.ln()
        }).sum();
        hs.push(h);
    }
    let best = hs.iter().cloned().fold(f64::MIN, f64::max);
    (0..n).find(|&i| hs[i] >= best - 1e-12 * best.abs().max(1.0)).unwrap()
}

#[test]
fn descriptor_shape_and_determinism() {
    let img = textured(40, 32, 1);
    let a = builtin_descriptor(&img).unwrap();
    assert_eq!(a.len(), 112);
    assert_eq!(a, builtin_descriptor(&img.clone()).unwrap());
    let constant = Plane::filled(16, 16, 0.3);
    let c = builtin_descriptor(&constant).unwrap();
    assert!(c.iter().all(|v| v.is_finite()) && c.iter().any(|&v| v != 0.0));
    assert!(builtin_descriptor(&Plane::filled(15, 40, 0.1)).is_err());
}

#[test]
fn descriptor_grid_is_orientation_sensitive() {
    let img = Plane::from_fn(32, 32, |x, _| x as f64 / 31.0);
    let rot = Plane::from_fn(32, 32, |x, y| img.get(y, 31 - x));
    let a = builtin_descriptor(&img).unwrap();
    let b = builtin_descriptor(&rot).unwrap();
    assert_ne!(&a[..64], &b[..64]);
}

#[test]
fn normalize_rows_cases() {
    let f = FeatureMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
    assert_eq!(normalize_rows(&f).unwrap().row(0), &[0.6, 0.8]);
    let unit = FeatureMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(normalize_rows(&unit).unwrap(), unit);
    let zero = FeatureMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let err = normalize_rows(&zero).unwrap_err().to_string();
    assert!(err.contains("row 1"), "{err}");
}

#[test]
fn similarity_cases() {
    let same = FeatureMatrix::new(3, 2, vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
    let s = similarity(&same);
    assert!(s.data.iter().all(|v| (v - 1.0).abs() < 1e-12));
    let ortho = FeatureMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(similarity(&ortho).data, vec![1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn entropy_cases() {
    let ones = Similarity { n: 5, data: vec![1.0; 25] };
    for h in entropies(&ones) {
        assert!((h - 5f64.ln()).abs() < 1e-12);
    }
    assert_eq!(entropies(&Similarity { n: 1, data: vec![1.0] }), vec![0.0]);
    let ex = entropies_with(&Similarity { n: 3, data: vec![1.0, 0.2, 0.2, 0.2, 1.0, 0.2, 0.2, 0.2, 1.0] }, false);
    assert!(ex.iter().all(|h| (h - 2f64.ln()).abs() < 1e-12));
}

#[test]
fn selection_edge_cases() {
    let img = textured(32, 32, 3);
    let views: Vec<(String, Plane)> = (0..4).map(|i| (format!("v{i}"), img.clone())).collect();
    assert_eq!(select_key_view(&views, &BuiltinDescriptor, true).unwrap().index, 0);
    assert_eq!(select_key_view(&views[..1], &BuiltinDescriptor, true).unwrap().index, 0);
    assert!(select_key_view(&[], &BuiltinDescriptor, true).is_err());
}

#[test]
fn matches_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let n = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=256);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        if trial % 5 == 0 && n > 2 {
            // force exact duplicates to exercise the tie-break
            rows[n - 1] = rows[0].clone();
        }
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        assert_eq!(select_from_features(&f, true).unwrap().index, brute_force(&rows), "trial {trial}");
    }
}

#[test]
fn file_provider() {
    let text = "# features\nv0 1 0 0\nv1 0 1 0\n\nv2 0.5 0.5 0\n";
    let fe = FileEmbeddings::parse(text, Path::new("f.txt")).unwrap();
    let img = Plane::zeros(4, 4);
    let views: Vec<(String, Plane)> = ["v0", "v1", "v2"].iter().map(|s| (s.to_string(), img.clone())).collect();
    let sel = select_key_view(&views, &fe, true).unwrap();
    assert_eq!(sel.index, 2);
    assert!(FileEmbeddings::parse("v0 1 2\nv1 1\n", Path::new("f.txt")).unwrap_err().to_string().contains("line 2"));
    assert!(fe.embed("missing", &img).is_err());
}

proptest! {
    #[test]
    fn entropy_bounds_and_row_sums(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 6), 1..12)) {
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let fhat = normalize_rows(&f).unwrap();
        for i in 0..fhat.rows() {
            let n: f64 = fhat.row(i).iter().map(|v| v * v).sum();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
        let s = similarity(&fhat);
        for i in 0..s.n {
            prop_assert!((s.get(i, i) - 1.0).abs() < 1e-9);
        }
        let ln_n = (rows.len() as f64).ln();
        for h in entropies(&s) {
            prop_assert!(h >= -1e-12 && h <= ln_n + 1e-9);
        }
    }

    #[test]
    fn selection_invariant_to_row_rescaling(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 2..10),
        scale in 0.1f64..100.0,
        which in 0usize..10,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let base = select_from_features(&FeatureMatrix::from_rows(&rows).unwrap(), true).unwrap();
        let mut scaled = rows.clone();
        let k = which % rows.len();
        scaled[k].iter_mut().for_each(|v| *v *= scale);
        let again = select_from_features(&FeatureMatrix::from_rows(&scaled).unwrap(), true).unwrap();
        prop_assert_eq!(base.index, again.index);
    }

    #[test]
    fn selection_follows_permutation(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..9),
        seed in 0u64..1000,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let a = select_from_features(&FeatureMatrix::from_rows(&rows).unwrap(), true).unwrap();
        let b = select_from_features(&FeatureMatrix::from_rows(&permuted).unwrap(), true).unwrap();
        // selected rows must hold the same features (duplicates may tie)
        let ha = a.entropies[a.index];
        let hb = b.entropies[b.index];
        prop_assert!((ha - hb).abs() < 1e-9);
        prop_assert!((a.entropies[perm[b.index]] - ha).abs() < 1e-9);
    }
}
