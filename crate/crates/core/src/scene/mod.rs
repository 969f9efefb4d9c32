//! Lab Gaussian scene representation.
//!
//! Each primitive carries three spherical-harmonic coefficient sets. While the
//! scene is in [`ChannelAssignment::WarmUp`] every rendered plane shows
//! luminance (from set 0); after [`Scene::switch_to_full_color`] sets 1 and 2
//! carry the normalized a' and b' chroma channels.
//!
//! Parameters are stored structure-of-arrays so optimizer groups map onto
//! contiguous buffers; [`GaussianPrimitive`] is the per-primitive view.

pub mod camera;
mod io;
pub mod sh;

pub use camera::Camera;
pub use io::{SceneFile, SCENE_FORMAT, SCENE_FORMAT_VERSION};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::colorspace::NEUTRAL_CHROMA;
use crate::error::{Error, Result};
use sh::{dc_for_value, sh_len};

/// One Gaussian with its attributes in optimizer parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    /// `(w, x, y, z)`, unit length.
    pub q: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: [Vec<f64>; 3],
}

impl GaussianPrimitive {
    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAssignment {
    /// All three rendered planes show L' (from SH set 0).
    WarmUp,
    /// SH sets 0, 1, 2 render L', a', b'.
    FullLab,
}

/// Structure-of-arrays storage for `n` primitives with `k = (d+1)^2` SH
/// coefficients per set. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussians {
    pub mu: Vec<f64>,
    pub q: Vec<f64>,
    pub log_scale: Vec<f64>,
    pub opacity_logit: Vec<f64>,
    pub sh: [Vec<f64>; 3],
    sh_len: usize,
}

impl Gaussians {
    pub fn zeros(n: usize, sh_degree: usize) -> Self {
        let k = sh_len(sh_degree);
        Self {
            mu: vec![0.0; 3 * n],
            q: vec![0.0; 4 * n],
            log_scale: vec![0.0; 3 * n],
            opacity_logit: vec![0.0; n],
            sh: [vec![0.0; k * n], vec![0.0; k * n], vec![0.0; k * n]],
            sh_len: k,
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logit.is_empty()
    }

    pub fn sh_len(&self) -> usize {
        self.sh_len
    }

    pub fn get(&self, i: usize) -> GaussianPrimitive {
        let k = self.sh_len;
        GaussianPrimitive {
            mu: std::array::from_fn(|j| self.mu[3 * i + j]),
            q: std::array::from_fn(|j| self.q[4 * i + j]),
            log_scale: std::array::from_fn(|j| self.log_scale[3 * i + j]),
            opacity_logit: self.opacity_logit[i],
            sh: std::array::from_fn(|s| self.sh[s][k * i..k * (i + 1)].to_vec()),
        }
    }

    pub fn set(&mut self, i: usize, g: &GaussianPrimitive) {
        let k = self.sh_len;
        self.mu[3 * i..3 * i + 3].copy_from_slice(&g.mu);
        self.q[4 * i..4 * i + 4].copy_from_slice(&g.q);
        self.log_scale[3 * i..3 * i + 3].copy_from_slice(&g.log_scale);
        self.opacity_logit[i] = g.opacity_logit;
        for s in 0..3 {
            self.sh[s][k * i..k * (i + 1)].copy_from_slice(&g.sh[s]);
        }
    }

    /// Renormalizes every quaternion to unit length.
    pub fn renormalize_rotations(&mut self) {
        for q in self.q.chunks_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let k = self.sh_len;
        if self.mu.len() != 3 * n
            || self.q.len() != 4 * n
            || self.log_scale.len() != 3 * n
            || self.sh.iter().any(|s| s.len() != k * n)
        {
            return Err(Error::invalid("gaussian attribute buffers have inconsistent lengths"));
        }
        Ok(())
    }
}

/// Per-primitive polynomial offsets over normalized time:
/// `delta(t) = sum_{p=1..=degree} c_p t^p` for position, rotation (added to
/// the raw quaternion) and log-scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub degree: usize,
    pub mu: Vec<f64>,
    pub q: Vec<f64>,
    pub log_scale: Vec<f64>,
}

/// Offsets of one primitive, `[power - 1][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDeformation {
    pub mu: Vec<[f64; 3]>,
    pub q: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
}

impl DeformationField {
    pub fn zeros(n: usize, degree: usize) -> Self {
        Self {
            degree,
            mu: vec![0.0; n * degree * 3],
            q: vec![0.0; n * degree * 4],
            log_scale: vec![0.0; n * degree * 3],
        }
    }

    pub fn len(&self) -> usize {
        if self.degree == 0 {
            0
        } else {
            self.mu.len() / (3 * self.degree)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coeffs(&self, i: usize) -> GaussianDeformation {
        let p = self.degree;
        GaussianDeformation {
            mu: (0..p).map(|k| std::array::from_fn(|j| self.mu[(i * p + k) * 3 + j])).collect(),
            q: (0..p).map(|k| std::array::from_fn(|j| self.q[(i * p + k) * 4 + j])).collect(),
            log_scale: (0..p).map(|k| std::array::from_fn(|j| self.log_scale[(i * p + k) * 3 + j])).collect(),
        }
    }

    pub fn set_coeffs(&mut self, i: usize, c: &GaussianDeformation) {
        let p = self.degree;
        for k in 0..p {
            self.mu[(i * p + k) * 3..(i * p + k) * 3 + 3].copy_from_slice(&c.mu[k]);
            self.q[(i * p + k) * 4..(i * p + k) * 4 + 4].copy_from_slice(&c.q[k]);
            self.log_scale[(i * p + k) * 3..(i * p + k) * 3 + 3].copy_from_slice(&c.log_scale[k]);
        }
    }
}

impl GaussianDeformation {
    /// Offsets `(d_mu, d_q, d_log_scale)` at time `t`.
    pub fn offsets(&self, t: f64) -> ([f64; 3], [f64; 4], [f64; 3]) {
        let mut dmu = [0.0; 3];
        let mut dq = [0.0; 4];
        let mut ds = [0.0; 3];
        let mut tp = 1.0;
        for k in 0..self.mu.len() {
            tp *= t;
            for j in 0..3 {
                dmu[j] += self.mu[k][j] * tp;
                ds[j] += self.log_scale[k][j] * tp;
            }
            for j in 0..4 {
                dq[j] += self.q[k][j] * tp;
            }
        }
        (dmu, dq, ds)
    }
}

/// Applies the time-dependent offsets to one primitive. Opacity and SH are
/// not deformed.
pub fn deform(g: &GaussianPrimitive, coeffs: &GaussianDeformation, t: f64) -> Result<GaussianPrimitive> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("deformation time {t} outside [0, 1]")));
    }
    let (dmu, dq, ds) = coeffs.offsets(t);
    let mut out = g.clone();
    for j in 0..3 {
        out.mu[j] += dmu[j];
        out.log_scale[j] += ds[j];
    }
    if dq.iter().any(|&v| v != 0.0) {
        let raw: [f64; 4] = std::array::from_fn(|j| g.q[j] + dq[j]);
        out.q = normalize_quat(raw);
    }
    Ok(out)
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        q.map(|v| v / n)
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_from_quat(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R diag(s)^2 R^T` for rotation `q` and per-axis scale `s`.
pub fn covariance_from(q: [f64; 4], s: [f64; 3]) -> Matrix3<f64> {
    let r = rotation_from_quat(q);
    let m = r * Matrix3::from_diagonal(&nalgebra::Vector3::from(s));
    m * m.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sh_degree: usize,
    /// Normalized Lab background `(L', a', b')`.
    pub background: [f64; 3],
    pub assignment: ChannelAssignment,
    pub gaussians: Gaussians,
    pub deformation: Option<DeformationField>,
}

/// Black with neutral chroma.
pub const DEFAULT_BACKGROUND: [f64; 3] = [0.0, NEUTRAL_CHROMA, NEUTRAL_CHROMA];

impl Scene {
    pub fn new(sh_degree: usize, primitives: &[GaussianPrimitive]) -> Result<Self> {
        if sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::invalid(format!("SH degree {sh_degree} above {}", sh::MAX_SH_DEGREE)));
        }
        let mut gaussians = Gaussians::zeros(primitives.len(), sh_degree);
        for (i, g) in primitives.iter().enumerate() {
            if g.sh.iter().any(|s| s.len() != sh_len(sh_degree)) {
                return Err(Error::invalid(format!(
                    "primitive {i} has SH sets of lengths {:?}, expected {}",
                    g.sh.iter().map(Vec::len).collect::<Vec<_>>(),
                    sh_len(sh_degree)
                )));
            }
            gaussians.set(i, g);
        }
        Ok(Self {
            sh_degree,
            background: DEFAULT_BACKGROUND,
            assignment: ChannelAssignment::WarmUp,
            gaussians,
            deformation: None,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn is_dynamic(&self) -> bool {
        self.deformation.is_some()
    }

    /// Attaches a zero deformation field of polynomial `degree`.
    pub fn make_dynamic(&mut self, degree: usize) {
        self.deformation = Some(DeformationField::zeros(self.len(), degree));
    }

    pub fn primitive(&self, i: usize) -> GaussianPrimitive {
        self.gaussians.get(i)
    }

    /// Primitive `i` as seen at time `t` (identity for static scenes).
    pub fn primitive_at(&self, i: usize, t: Option<f64>) -> Result<GaussianPrimitive> {
        let g = self.gaussians.get(i);
        match (&self.deformation, t) {
            (Some(field), Some(t)) => deform(&g, &field.coeffs(i), t),
            (None, Some(_)) => Err(Error::invalid("time given for a static scene")),
            (_, None) => Ok(g),
        }
    }

    /// SH set index feeding each rendered plane.
    pub fn plane_sources(&self) -> [usize; 3] {
        match self.assignment {
            ChannelAssignment::WarmUp => [0, 0, 0],
            ChannelAssignment::FullLab => [0, 1, 2],
        }
    }

    /// Background value of each rendered plane.
    pub fn plane_background(&self) -> [f64; 3] {
        match self.assignment {
            ChannelAssignment::WarmUp => [self.background[0]; 3],
            ChannelAssignment::FullLab => self.background,
        }
    }

    /// Leaves the warm-up phase: set 0 keeps luminance, sets 1 and 2 are
    /// reset to neutral chroma (degree-0 term only).
    pub fn switch_to_full_color(&mut self) -> Result<()> {
        if self.assignment != ChannelAssignment::WarmUp {
            return Err(Error::state("switch_to_full_color called on a scene already in full Lab mode"));
        }
        let k = self.gaussians.sh_len();
        let dc = dc_for_value(NEUTRAL_CHROMA);
        for set in 1..3 {
            for (i, c) in self.gaussians.sh[set].iter_mut().enumerate() {
                *c = if i % k == 0 { dc } else { 0.0 };
            }
        }
        self.assignment = ChannelAssignment::FullLab;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gaussians.check()?;
        if self.gaussians.sh_len() != sh_len(self.sh_degree) {
            return Err(Error::invalid("SH buffer length does not match sh_degree"));
        }
        if let Some(d) = &self.deformation {
            let n = self.len() * d.degree;
            if d.mu.len() != 3 * n || d.q.len() != 4 * n || d.log_scale.len() != 3 * n {
                return Err(Error::invalid("deformation buffers do not match primitive count"));
            }
        }
        let all = [
            &self.gaussians.mu,
            &self.gaussians.q,
            &self.gaussians.log_scale,
            &self.gaussians.opacity_logit,
        ];
        for (name, buf) in ["mu", "q", "log_scale", "opacity_logit"].iter().zip(all) {
            if let Some(i) = buf.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("scene {name}"),
                    location: format!("index {i}"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prim(mu: [f64; 3], sh_l: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            mu,
            q: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            opacity_logit: 0.0,
            sh: [vec![sh_l, 0.0, 0.0, 0.0], vec![0.0; 4], vec![0.0; 4]],
        }
    }

    #[test]
    fn covariance_examples() {
        let id = covariance_from([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        assert!((id - Matrix3::identity()).norm() < 1e-15);
        let d = covariance_from([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]);
        assert!((d - Matrix3::from_diagonal(&nalgebra::Vector3::new(4.0, 1.0, 1.0))).norm() < 1e-15);
    }

    #[test]
    fn covariance_random_symmetric_with_determinant_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let q = normalize_quat(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
            let s: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..2.0));
            let c = covariance_from(q, s);
            assert!((c - c.transpose()).abs().max() < 1e-12);
            let expected = (s[0] * s[1] * s[2]).powi(2);
            assert!((c.determinant() - expected).abs() < 1e-9);
            let eig = c.symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn deform_identity_and_linear() {
        let g = GaussianPrimitive {
            q: normalize_quat([0.9, 0.1, -0.3, 0.2]),
            ..prim([1.0, 2.0, 3.0], 0.3)
        };
        let zero = DeformationField::zeros(1, 2).coeffs(0);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(deform(&g, &zero, t).unwrap(), g);
        }
        let mut c = zero.clone();
        c.mu[0] = [0.5, -1.0, 2.0];
        let moved = deform(&g, &c, 1.0).unwrap();
        assert_eq!(moved.mu, [1.5, 1.0, 5.0]);
        assert_eq!(moved.sh, g.sh);
        assert_eq!(moved.opacity_logit, g.opacity_logit);
        // any coefficients vanish at t = 0
        c.q[1] = [0.3, 0.0, 0.2, 0.0];
        assert_eq!(deform(&g, &c, 0.0).unwrap(), g);
        assert!(deform(&g, &c, 1.5).is_err());
    }

    #[test]
    fn deformed_rotation_is_unit() {
        let g = prim([0.0; 3], 0.0);
        let mut c = DeformationField::zeros(1, 2).coeffs(0);
        c.q[0] = [0.1, 0.4, -0.2, 0.3];
        let d = deform(&g, &c, 0.7).unwrap();
        let n: f64 = d.q.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warm_up_switch() {
        let mut scene = Scene::new(1, &[prim([0.0; 3], 0.4), prim([1.0, 0.0, 0.0], -0.2)]).unwrap();
        assert_eq!(scene.plane_sources(), [0, 0, 0]);
        let sh0 = scene.gaussians.sh[0].clone();
        scene.gaussians.sh[1][1] = 0.7;
        scene.switch_to_full_color().unwrap();
        assert_eq!(scene.gaussians.sh[0], sh0);
        for set in 1..3 {
            for i in 0..2 {
                let coeffs = &scene.gaussians.sh[set][4 * i..4 * i + 4];
                assert!((sh::eval_sh(coeffs, [0.0, 0.6, 0.8]) - NEUTRAL_CHROMA).abs() < 1e-15);
                assert_eq!(&coeffs[1..], &[0.0; 3]);
            }
        }
        assert_eq!(scene.plane_sources(), [0, 1, 2]);
        assert!(scene.switch_to_full_color().is_err());
    }

    #[test]
    fn primitive_at_rejects_time_on_static_scene() {
        let scene = Scene::new(1, &[prim([0.0; 3], 0.0)]).unwrap();
        assert!(scene.primitive_at(0, Some(0.5)).is_err());
        assert!(scene.primitive_at(0, None).is_ok());
    }

    #[test]
    fn renormalize_keeps_unit_quaternions() {
        let mut g = Gaussians::zeros(3, 0);
        g.q = vec![2.0, 0.0, 0.0, 0.0, 0.3, 0.3, 0.3, 0.3, 0.0, 0.0, 0.0, 0.0];
        g.renormalize_rotations();
        for q in g.q.chunks(4) {
            let n: f64 = q.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
