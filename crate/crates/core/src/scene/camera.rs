use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera in OpenCV convention (x right, y down, z forward).
///
/// `rotation`/`translation` map world points into camera space:
/// `p_cam = rotation * p_world + translation`. Pixel `(i, j)` has its center
/// at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` giving the screen's
    /// upward direction. The principal point sits at the image center.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = normalize(sub(target, eye)).ok_or_else(|| Error::invalid("look_at: eye equals target"))?;
        let up_perp = sub(up, scale(forward, dot(up, forward)));
        let down = normalize(scale(up_perp, -1.0)).ok_or_else(|| Error::invalid("look_at: up parallel to view direction"))?;
        let right = cross(down, forward);
        let rotation = [right, down, forward];
        let translation = [
            -dot(right, eye),
            -dot(down, eye),
            -dot(forward, eye),
        ];
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
            near: 0.01,
            far: 100.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!("camera focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(format!("camera clip range invalid: near {} far {}", self.near, self.far)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be non-zero"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (d - expected).abs() > 1e-6 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        std::array::from_fn(|j| -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]))
    }

    /// Projects a world point to continuous pixel coordinates and depth.
    pub fn project(&self, p: [f64; 3]) -> Option<([f64; 2], f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= self.near {
            return None;
        }
        Some(([self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy], c[2]))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| scale(a, 1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let cam = Camera::look_at([3.0, -1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 50.0, 64, 48).unwrap();
        let (px, depth) = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert!((px[0] - 32.0).abs() < 1e-12 && (px[1] - 24.0).abs() < 1e-12);
        assert!((depth - 14f64.sqrt()).abs() < 1e-12);
        let c = cam.center();
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] + 1.0).abs() < 1e-12 && (c[2] - 2.0).abs() < 1e-12);
        // world up lands above the principal point (smaller y)
        let (above, _) = cam.project([0.0, 0.0, 0.5]).unwrap();
        assert!(above[1] < 24.0);
    }

    #[test]
    fn points_behind_are_not_projected() {
        let cam = Camera::look_at([0.0, 0.0, -5.0], [0.0; 3], [0.0, -1.0, 0.0], 40.0, 32, 32).unwrap();
        assert!(cam.project([0.0, 0.0, -6.0]).is_none());
    }

    #[test]
    fn validation() {
        let mut cam = Camera::look_at([0.0, 0.0, -5.0], [0.0; 3], [0.0, -1.0, 0.0], 40.0, 32, 32).unwrap();
        cam.near = 200.0;
        assert!(cam.validate().is_err());
        cam.near = 0.1;
        cam.rotation[0][0] = 2.0;
        assert!(cam.validate().is_err());
    }
}
