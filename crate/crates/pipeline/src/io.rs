//! On-disk formats: planar float rasters, PNG previews, camera and point files.
//!
//! Planar raster (`.c3dp`): magic `C3DP`, then little-endian u32 version,
//! width, height, channel count, followed by `channels * height * width`
//! little-endian f32 values, channel-major, rows top to bottom.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use color3d_core::augment::load_rgb;
use color3d_core::colorspace::{normalized_lab_to_rgb, rgb_to_normalized_lab, NormalizedLabImage, Plane};
use color3d_core::scene::Camera;

use crate::error::{Error, Result};

pub const PLANES_MAGIC: &[u8; 4] = b"C3DP";
pub const PLANES_VERSION: u32 = 1;
pub const CAMERAS_HEADER: &str = "# color3d-cameras v1";
pub const POINTS_HEADER: &str = "# color3d-points v1";

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn encode_planes(planes: &[&Plane]) -> Result<Vec<u8>> {
    let first = planes.first().ok_or_else(|| Error::Config("no planes to write".into()))?;
    if planes.iter().any(|p| !p.same_dims(first)) {
        return Err(Error::Config("planes of one raster must share dimensions".into()));
    }
    let mut out = Vec::with_capacity(20 + 4 * planes.len() * first.data.len());
    out.extend_from_slice(PLANES_MAGIC);
    for v in [PLANES_VERSION, first.width as u32, first.height as u32, planes.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in planes {
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_planes(bytes: &[u8], origin: &Path) -> Result<Vec<Plane>> {
    let bad = |m: &str| Error::format(origin, m);
    if bytes.len() < 20 || &bytes[..4] != PLANES_MAGIC {
        return Err(bad("not a planar raster (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != PLANES_VERSION as usize {
        return Err(bad(&format!("unsupported raster version {}", word(0))));
    }
    let (w, h, c) = (word(1), word(2), word(3));
    if w == 0 || h == 0 || c == 0 {
        return Err(bad("raster has a zero dimension"));
    }
    let n = w * h;
    if bytes.len() != 20 + 4 * n * c {
        return Err(bad(&format!("expected {} payload bytes for {w}x{h}x{c}, found {}", 4 * n * c, bytes.len() - 20)));
    }
    let vals: Vec<f64> = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(bad("raster contains non-finite values"));
    }
    vals.chunks_exact(n)
        .map(|d| Plane::new(w, h, d.to_vec()).map_err(Error::from))
        .collect()
}

pub fn write_planes(path: &Path, planes: &[&Plane]) -> Result<()> {
    write_file(path, encode_planes(planes)?)
}

pub fn read_planes(path: &Path) -> Result<Vec<Plane>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_planes(&bytes, path)
}

/// Reads a raster that must have exactly `channels` planes.
pub fn read_planes_n(path: &Path, channels: usize) -> Result<Vec<Plane>> {
    let p = read_planes(path)?;
    if p.len() != channels {
        return Err(Error::format(path, format!("expected {channels} channel(s), found {}", p.len())));
    }
    Ok(p)
}

pub fn write_lab(path: &Path, img: &NormalizedLabImage) -> Result<()> {
    write_planes(path, &[&img.plane(0), &img.plane(1), &img.plane(2)])
}

pub fn read_lab(path: &Path) -> Result<NormalizedLabImage> {
    let p = read_planes_n(path, 3)?;
    Ok(NormalizedLabImage::compose(&p[0], &p[1], &p[2])?)
}

fn save_png(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    image::save_buffer(path, &rgb, width as u32, height as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// sRGB preview of a normalized Lab image.
pub fn write_png_lab(path: &Path, img: &NormalizedLabImage) -> Result<()> {
    save_png(path, img.width, img.height, normalized_lab_to_rgb(img).to_rgb8())
}

/// Grayscale preview of an L' plane (as an achromatic Lab image).
pub fn write_png_luminance(path: &Path, l: &Plane) -> Result<()> {
    let n = color3d_core::colorspace::NEUTRAL_CHROMA;
    let img = NormalizedLabImage::compose(l, &Plane::filled(l.width, l.height, n), &Plane::filled(l.width, l.height, n))?;
    write_png_lab(path, &img)
}

/// Color image in either container: PNG (sRGB) or a 3-channel planar Lab raster.
pub fn read_color_image(path: &Path) -> Result<NormalizedLabImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("c3dp") => read_lab(path),
        _ => Ok(rgb_to_normalized_lab(&load_rgb(path)?)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Heldout,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Heldout => "heldout",
        }
    }
}

/// One line of the camera file.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraEntry {
    pub id: String,
    pub role: Role,
    pub camera: Camera,
    pub time: Option<f64>,
}

/// Camera file: one view per line,
/// `id role width height fx fy cx cy near far r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz [time]`.
pub fn cameras_to_text(entries: &[CameraEntry]) -> String {
    let mut s = format!("{CAMERAS_HEADER}\n# id role width height fx fy cx cy near far r00..r22 tx ty tz [time]\n");
    for e in entries {
        let c = &e.camera;
        let _ = write!(s, "{} {} {} {} {} {} {} {} {} {}", e.id, e.role.as_str(), c.width, c.height, c.fx, c.fy, c.cx, c.cy, c.near, c.far);
        for row in &c.rotation {
            for v in row {
                let _ = write!(s, " {v}");
            }
        }
        for v in &c.translation {
            let _ = write!(s, " {v}");
        }
        if let Some(t) = e.time {
            let _ = write!(s, " {t}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_cameras(text: &str, origin: &Path) -> Result<Vec<CameraEntry>> {
    let err = |line: usize, m: String| Error::format(origin, format!("line {line}: {m}"));
    let mut out: Vec<CameraEntry> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 22 && tok.len() != 23 {
            return Err(err(ln + 1, format!("expected 22 or 23 fields, found {}", tok.len())));
        }
        let role = match tok[1] {
            "train" => Role::Train,
            "heldout" => Role::Heldout,
            other => return Err(err(ln + 1, format!("unknown role `{other}`"))),
        };
        let int = |i: usize| tok[i].parse::<usize>().map_err(|e| err(ln + 1, format!("field {}: {e}", i + 1)));
        let num = |i: usize| tok[i].parse::<f64>().map_err(|e| err(ln + 1, format!("field {}: {e}", i + 1)));
        let mut rotation = [[0.0; 3]; 3];
        for (k, r) in rotation.iter_mut().flatten().enumerate() {
            *r = num(10 + k)?;
        }
        let camera = Camera {
            width: int(2)?,
            height: int(3)?,
            fx: num(4)?,
            fy: num(5)?,
            cx: num(6)?,
            cy: num(7)?,
            near: num(8)?,
            far: num(9)?,
            rotation,
            translation: [num(19)?, num(20)?, num(21)?],
        };
        camera.validate().map_err(|e| err(ln + 1, e.to_string()))?;
        let time = if tok.len() == 23 { Some(num(22)?) } else { None };
        if out.iter().any(|e| e.id == tok[0]) {
            return Err(err(ln + 1, format!("duplicate view id `{}`", tok[0])));
        }
        out.push(CameraEntry {
            id: tok[0].to_string(),
            role,
            camera,
            time,
        });
    }
    if out.is_empty() {
        return Err(Error::format(origin, "camera file lists no views"));
    }
    let timed = out.iter().filter(|e| e.time.is_some()).count();
    if timed != 0 && timed != out.len() {
        return Err(Error::format(origin, "either every view or no view must carry a timestamp"));
    }
    Ok(out)
}

pub fn points_to_text(points: &[[f64; 3]]) -> String {
    let mut s = format!("{POINTS_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn parse_points(text: &str, origin: &Path) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(origin, format!("line {}: {e}", ln + 1)))?;
        if v.len() != 3 {
            return Err(Error::format(origin, format!("line {}: expected x y z", ln + 1)));
        }
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}

/// A dataset directory as written by `synth` (or prepared by hand).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub cameras: Vec<CameraEntry>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("cameras.txt");
        let cameras = parse_cameras(&read_text(&path)?, &path)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            cameras,
        })
    }

    pub fn cameras_path(dir: &Path) -> PathBuf {
        dir.join("cameras.txt")
    }

    pub fn mono_path(&self, id: &str) -> PathBuf {
        self.dir.join("mono").join(format!("{id}.c3dp"))
    }

    pub fn color_path(&self, id: &str) -> PathBuf {
        self.dir.join("color").join(format!("{id}.c3dp"))
    }

    pub fn points_path(&self) -> PathBuf {
        self.dir.join("points.txt")
    }

    pub fn scene_path(&self) -> PathBuf {
        self.dir.join("scene.json")
    }

    pub fn correspondence_path(&self, a: &str, b: &str) -> PathBuf {
        self.dir.join("correspondences").join(format!("{a}__{b}.txt"))
    }

    pub fn entry(&self, id: &str) -> Option<&CameraEntry> {
        self.cameras.iter().find(|e| e.id == id)
    }

    pub fn with_role(&self, role: Role) -> Vec<&CameraEntry> {
        self.cameras.iter().filter(|e| e.role == role).collect()
    }

    pub fn is_dynamic(&self) -> bool {
        self.cameras.iter().any(|e| e.time.is_some())
    }

    /// Monochrome L' input of a view; a PNG is accepted when no raster exists.
    pub fn mono(&self, id: &str) -> Result<Plane> {
        let raster = self.mono_path(id);
        let plane = if raster.exists() {
            read_planes_n(&raster, 1)?.remove(0)
        } else {
            let png = raster.with_extension("png");
            if !png.exists() {
                return Err(Error::Missing(format!("no monochrome input for view {id} ({} or .png)", raster.display())));
            }
            read_color_image(&png)?.plane(0)
        };
        if let Some(e) = self.entry(id) {
            if (plane.width, plane.height) != (e.camera.width, e.camera.height) {
                return Err(Error::format(
                    &raster,
                    format!("image is {}x{}, camera expects {}x{}", plane.width, plane.height, e.camera.width, e.camera.height),
                ));
            }
        }
        Ok(plane)
    }
}
