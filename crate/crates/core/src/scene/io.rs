//! JSON scene documents.
//!
//! ```text
//! {
//!   "format": "color3d-scene", "version": 1,
//!   "sh_degree": 1, "background": [L', a', b'], "assignment": "warm_up" | "full_lab",
//!   "deformation_degree": null | P,
//!   "primitives": [
//!     { "mu": [3], "q": [w,x,y,z], "log_scale": [3], "opacity_logit": x,
//!       "sh": [[k], [k], [k]],
//!       "deform": null | { "mu": [[3]; P], "q": [[4]; P], "log_scale": [[3]; P] } }
//!   ]
//! }
//! ```
//!
//! Every real is rounded to 9 significant digits before writing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelAssignment, DeformationField, GaussianDeformation, GaussianPrimitive, Scene};
use crate::error::{Error, Result};

pub const SCENE_FORMAT: &str = "color3d-scene";
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub format: String,
    pub version: u32,
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub assignment: ChannelAssignment,
    pub deformation_degree: Option<usize>,
    pub primitives: Vec<PrimitiveRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimitiveRecord {
    pub mu: [f64; 3],
    pub q: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: [Vec<f64>; 3],
    pub deform: Option<DeformRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformRecord {
    pub mu: Vec<[f64; 3]>,
    pub q: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
}

/// Rounds to 9 significant decimal digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn r<const N: usize>(a: [f64; N]) -> [f64; N] {
    a.map(round_sig9)
}

impl Scene {
    pub fn to_file(&self) -> SceneFile {
        let primitives = (0..self.len())
            .map(|i| {
                let g = self.primitive(i);
                let deform = self.deformation.as_ref().map(|d| {
                    let c = d.coeffs(i);
                    DeformRecord {
                        mu: c.mu.into_iter().map(r).collect(),
                        q: c.q.into_iter().map(r).collect(),
                        log_scale: c.log_scale.into_iter().map(r).collect(),
                    }
                });
                PrimitiveRecord {
                    mu: r(g.mu),
                    q: r(g.q),
                    log_scale: r(g.log_scale),
                    opacity_logit: round_sig9(g.opacity_logit),
                    sh: g.sh.map(|s| s.into_iter().map(round_sig9).collect()),
                    deform,
                }
            })
            .collect();
        SceneFile {
            format: SCENE_FORMAT.to_string(),
            version: SCENE_FORMAT_VERSION,
            sh_degree: self.sh_degree,
            background: r(self.background),
            assignment: self.assignment,
            deformation_degree: self.deformation.as_ref().map(|d| d.degree),
            primitives,
        }
    }

    pub fn from_file(file: SceneFile) -> Result<Self> {
        if file.format != SCENE_FORMAT || file.version != SCENE_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported scene document {} v{} (expected {SCENE_FORMAT} v{SCENE_FORMAT_VERSION})",
                file.format, file.version
            )));
        }
        let prims: Vec<GaussianPrimitive> = file
            .primitives
            .iter()
            .map(|p| GaussianPrimitive {
                mu: p.mu,
                q: p.q,
                log_scale: p.log_scale,
                opacity_logit: p.opacity_logit,
                sh: p.sh.clone(),
            })
            .collect();
        let mut scene = Scene::new(file.sh_degree, &prims)?;
        scene.background = file.background;
        scene.assignment = file.assignment;
        if let Some(degree) = file.deformation_degree {
            let mut field = DeformationField::zeros(prims.len(), degree);
            for (i, p) in file.primitives.iter().enumerate() {
                let d = p
                    .deform
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("primitive {i} lacks deformation coefficients")))?;
                if d.mu.len() != degree || d.q.len() != degree || d.log_scale.len() != degree {
                    return Err(Error::invalid(format!("primitive {i} deformation degree mismatch")));
                }
                field.set_coeffs(
                    i,
                    &GaussianDeformation {
                        mu: d.mu.clone(),
                        q: d.q.clone(),
                        log_scale: d.log_scale.clone(),
                    },
                );
            }
            scene.deformation = Some(field);
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| Error::invalid(format!("scene document: {e}")))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounding() {
        assert_eq!(round_sig9(1.234_567_891_23), 1.234_567_89);
        assert_eq!(round_sig9(-0.000_123_456_789_12), -0.000_123_456_789);
        assert_eq!(round_sig9(round_sig9(std::f64::consts::PI)), round_sig9(std::f64::consts::PI));
    }

    #[test]
    fn round_trip_is_stable() {
        let g = GaussianPrimitive {
            mu: [0.1234567891, -2.0, 3.5],
            q: [0.9, 0.1, 0.2, 0.3],
            log_scale: [-1.0, -2.0, -3.0],
            opacity_logit: 0.25,
            sh: [vec![0.1, 0.2, 0.3, 0.4], vec![0.0; 4], vec![-0.5; 4]],
        };
        let mut scene = Scene::new(1, &[g.clone(), g]).unwrap();
        scene.make_dynamic(2);
        scene.deformation.as_mut().unwrap().mu[4] = 0.987654321987;
        let json = scene.to_json();
        let back = Scene::from_json(&json).unwrap();
        assert_eq!(back.to_json(), json);
        assert_eq!(back.len(), 2);
        assert!(back.is_dynamic());
        assert_eq!(back.gaussians.mu[0], 0.123456789);
    }

    #[test]
    fn rejects_wrong_version() {
        let scene = Scene::new(0, &[]).unwrap();
        let json = scene.to_json().replace("\"version\": 1", "\"version\": 7");
        assert!(Scene::from_json(&json).is_err());
    }
}
