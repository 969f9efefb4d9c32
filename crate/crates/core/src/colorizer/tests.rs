use super::*;
use crate::augment::Provenance;

fn small() -> NetConfig {
    NetConfig {
        encoder_widths: vec![8, 8, 16, 16],
        decoder_widths: vec![16, 8, 8, 8],
        adapter_reduction: 4,
        seed: 3,
    }
}

fn sample(w: usize, h: usize) -> AugmentSample {
    let l = Plane::from_fn(w, h, |x, y| 0.5 + 0.4 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos());
    let a = Plane::from_fn(w, h, |x, y| 0.3 + 0.4 * l.get(x, y));
    let b = Plane::from_fn(w, h, |x, y| 0.8 - 0.5 * l.get(x, y));
    AugmentSample::new(l, a, b, Provenance::Original).unwrap()
}

fn input(p: &Plane) -> Tensor {
    Tensor::new(vec![1, 1, p.height, p.width], p.data.clone()).unwrap()
}

#[test]
fn output_shape_and_bounds() {
    let net = ColorizerNet::new(small()).unwrap();
    for (w, h) in [(32, 32), (45, 37), (64, 48)] {
        let s = sample(w, h);
        let (a, b) = net.predict_ab(&s.l).unwrap();
        assert_eq!((a.width, a.height, b.width, b.height), (w, h, w, h));
        assert!(a.data.iter().chain(&b.data).all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
    let c = Plane::filled(32, 32, 0.5);
    let (a, _) = net.predict_ab(&c).unwrap();
    assert!(a.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    assert!(net.predict_ab(&Plane::filled(31, 40, 0.5)).is_err());
}

#[test]
fn default_architecture_builds() {
    let net = ColorizerNet::new(NetConfig::default()).unwrap();
    let s = sample(32, 32);
    let (a, _) = net.predict_ab(&s.l).unwrap();
    assert_eq!(a.data.len(), 32 * 32);
}

#[test]
fn zero_restore_adapters_are_identity() {
    let net = ColorizerNet::new(small()).unwrap();
    let s = sample(48, 32);
    let with = net.forward(&input(&s.l)).unwrap();
    let without = net.forward_without_adapters(&input(&s.l)).unwrap();
    assert_eq!(with.graph.value(with.output), without.graph.value(without.output));
}

#[test]
fn loss_values() {
    let p = Plane::filled(8, 8, 0.5);
    let q = Plane::filled(8, 8, 0.75);
    assert_eq!(colorizer_loss([&p, &p], [&p, &p]).unwrap().value, 0.0);
    assert!((colorizer_loss([&q, &q], [&p, &p]).unwrap().value - 0.25).abs() < 1e-15);
    assert!(colorizer_loss([&p, &p], [&p, &Plane::zeros(8, 9)]).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let pa = Plane::from_fn(6, 5, |x, y| 0.1 * x as f64 + 0.07 * y as f64);
    let pb = Plane::from_fn(6, 5, |x, y| 0.9 - 0.05 * (x * y) as f64);
    let t = Plane::filled(6, 5, 0.33);
    let g = colorizer_loss([&pa, &pb], [&t, &t]).unwrap();
    let h = 1e-7;
    for i in 0..30 {
        let mut p = pa.clone();
        p.data[i] += h;
        let mut m = pa.clone();
        m.data[i] -= h;
        let fd = (colorizer_loss([&p, &pb], [&t, &t]).unwrap().value - colorizer_loss([&m, &pb], [&t, &t]).unwrap().value) / (2.0 * h);
        assert!((fd - g.grads[0].data[i]).abs() < 1e-6);
    }
}

#[test]
fn gradients_reach_adapters_and_decoder() {
    let net = ColorizerNet::new(small()).unwrap();
    let (_, grads) = loss_and_grads(&net, &sample(32, 32)).unwrap();
    let names: Vec<&str> = net.param_info().iter().filter(|p| !p.frozen).map(|p| p.name.as_str()).collect();
    let nonzero = |prefix: &str| {
        names
            .iter()
            .zip(&grads)
            .any(|(n, g)| n.starts_with(prefix) && g.data().iter().any(|&v| v != 0.0))
    };
    assert!(nonzero("adapter"));
    assert!(nonzero("dec"));
}

#[test]
fn training_is_deterministic_and_keeps_encoder() {
    let pool = vec![sample(40, 40)];
    let cfg = ColorizerTrainConfig {
        iterations: 6,
        crop: 32,
        lr_start: 1e-3,
        lr_end: 1e-5,
        seed: 5,
        ..ColorizerTrainConfig::default()
    };
    let aug = AugmentConfig::default();
    let mut a = ColorizerNet::new(small()).unwrap();
    let checksum = a.encoder_checksum();
    let log_a = train(&mut a, &pool, &cfg, &aug).unwrap();
    let mut b = ColorizerNet::new(small()).unwrap();
    let log_b = train(&mut b, &pool, &cfg, &aug).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(a, b);
    assert_eq!(a.encoder_checksum(), checksum);
    assert_eq!(log_a.records.len(), 6);
    assert_ne!(a.param("adapter0.up.w").unwrap().data(), ColorizerNet::new(small()).unwrap().param("adapter0.up.w").unwrap().data());
    assert!(log_a.to_csv().lines().count() == 7);
}

#[test]
fn short_training_reduces_loss() {
    let s = sample(32, 32);
    let pool = vec![s.clone()];
    let cfg = ColorizerTrainConfig {
        iterations: 60,
        crop: 32,
        lr_start: 3e-3,
        lr_end: 1e-4,
        seed: 1,
        ..ColorizerTrainConfig::default()
    };
    let aug = AugmentConfig {
        rotate_flip: false,
        grid_shuffle: false,
        elastic: false,
        ..AugmentConfig::default()
    };
    let mut net = ColorizerNet::new(small()).unwrap();
    let log = train(&mut net, &pool, &cfg, &aug).unwrap();
    let first = log.records[0].loss;
    let last = log.smoothed(10).unwrap();
    assert!(last < 0.5 * first, "first {first} last {last}");
    let (a, b) = net.predict_ab(&s.l).unwrap();
    assert_eq!(net.predict_ab(&s.l).unwrap(), (a.clone(), b.clone()));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut net = ColorizerNet::new(small()).unwrap();
    net.param_mut("head.b").unwrap().data_mut()[0] = 0.125;
    let bytes = net.to_bytes();
    assert_eq!(ColorizerNet::from_bytes(&bytes).unwrap(), net);
    assert_eq!(net.to_bytes(), bytes);
    let mut bad = bytes.clone();
    let last = bad.len() - 3;
    bad[last] ^= 0x40;
    assert!(ColorizerNet::from_bytes(&bad).unwrap_err().to_string().contains("checksum"));
    assert!(ColorizerNet::from_bytes(&bytes[..10]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    net.save(&path).unwrap();
    assert_eq!(ColorizerNet::load(&path).unwrap(), net);
}

#[test]
fn encoder_import() {
    let mut a = ColorizerNet::new(small()).unwrap();
    let b = ColorizerNet::new(NetConfig { seed: 99, ..small() }).unwrap();
    assert_ne!(a.encoder_checksum(), b.encoder_checksum());
    a.import_encoder(&b).unwrap();
    assert_eq!(a.encoder_checksum(), b.encoder_checksum());
    let other = ColorizerNet::new(NetConfig::default()).unwrap();
    assert!(a.import_encoder(&other).is_err());
}
