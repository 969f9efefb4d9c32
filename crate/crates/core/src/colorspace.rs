//! sRGB <-> CIE Lab (D65) conversion, the [0,1] Lab normalization used by the
//! renderer, and the discrete Laplacian used by the edge loss.
//!
//! Images are stored planar: one `Vec<f64>` per channel, row-major.

use std::sync::LazyLock;

use crate::error::{Error, Result};

/// A single row-major raster channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                op: "plane",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with clamped (replicate) borders.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Bilinear sample at continuous pixel coordinates where pixel `(i, j)`
    /// sits at `(i, j)`; out-of-range coordinates clamp to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn same_dims(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.height, self.width]
    }

    pub(crate) fn check_same(&self, other: &Plane, op: &'static str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.dims(),
                rhs: other.dims(),
            })
        }
    }
}

/// sRGB-encoded color image with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
}

/// CIE Lab image: L in [0,100], a and b in [-128,127].
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Lab image with every channel mapped into [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLabImage {
    pub width: usize,
    pub height: usize,
    pub l: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

macro_rules! planar_image_common {
    ($ty:ident, $c0:ident, $c1:ident, $c2:ident) => {
        impl $ty {
            pub fn len(&self) -> usize {
                self.width * self.height
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            pub fn filled(width: usize, height: usize, v: [f64; 3]) -> Self {
                let n = width * height;
                Self {
                    width,
                    height,
                    $c0: vec![v[0]; n],
                    $c1: vec![v[1]; n],
                    $c2: vec![v[2]; n],
                }
            }

            pub fn from_planes(p0: Plane, p1: Plane, p2: Plane) -> Result<Self> {
                p0.check_same(&p1, stringify!($ty))?;
                p0.check_same(&p2, stringify!($ty))?;
                Ok(Self {
                    width: p0.width,
                    height: p0.height,
                    $c0: p0.data,
                    $c1: p1.data,
                    $c2: p2.data,
                })
            }

            pub fn plane(&self, channel: usize) -> Plane {
                let data = match channel {
                    0 => self.$c0.clone(),
                    1 => self.$c1.clone(),
                    2 => self.$c2.clone(),
                    _ => panic!("channel index {channel} out of range"),
                };
                Plane {
                    width: self.width,
                    height: self.height,
                    data,
                }
            }

            pub fn pixel(&self, i: usize) -> [f64; 3] {
                [self.$c0[i], self.$c1[i], self.$c2[i]]
            }

            #[allow(dead_code)]
            fn check_finite(&self, what: &str) -> Result<()> {
                for (c, plane) in [&self.$c0, &self.$c1, &self.$c2].into_iter().enumerate() {
                    if let Some(i) = plane.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            what: what.to_string(),
                            location: format!(
                                "x={}, y={}, channel {}",
                                i % self.width,
                                i / self.width,
                                c
                            ),
                        });
                    }
                }
                Ok(())
            }
        }
    };
}

planar_image_common!(RgbImage, r, g, b);
planar_image_common!(LabImage, l, a, b);
planar_image_common!(NormalizedLabImage, l, a, b);

impl RgbImage {
    /// Builds an image from interleaved 8-bit RGB bytes.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "expected {} RGB bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let mut img = Self::filled(width, height, [0.0; 3]);
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            img.r[i] = px[0] as f64 / 255.0;
            img.g[i] = px[1] as f64 / 255.0;
            img.b[i] = px[2] as f64 / 255.0;
        }
        Ok(img)
    }

    /// Interleaved 8-bit RGB, rounded to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        (0..self.len())
            .flat_map(|i| [q(self.r[i]), q(self.g[i]), q(self.b[i])])
            .collect()
    }
}

impl NormalizedLabImage {
    /// Pairs a luminance plane with two chroma planes.
    pub fn compose(l: &Plane, a: &Plane, b: &Plane) -> Result<Self> {
        Self::from_planes(l.clone(), a.clone(), b.clone())
    }
}

// sRGB primaries, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

// White point as the image of RGB (1,1,1) so that neutral input maps to a=b=0.
static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    [
        RGB_TO_XYZ[0].iter().sum(),
        RGB_TO_XYZ[1].iter().sum(),
        RGB_TO_XYZ[2].iter().sum(),
    ]
});

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| {
    let m = nalgebra::Matrix3::from_fn(|r, c| RGB_TO_XYZ[r][c]);
    let inv = m.try_inverse().expect("sRGB matrix is invertible");
    std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]))
});

const DELTA: f64 = 6.0 / 29.0;

#[inline]
fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Converts one sRGB triple to unclamped Lab.
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let white = *WHITE;
    let xyz: [f64; 3] =
        std::array::from_fn(|r| (0..3).map(|c| RGB_TO_XYZ[r][c] * lin[c]).sum::<f64>() / white[r]);
    let fx = lab_f(xyz[0]);
    let fy = lab_f(xyz[1]);
    let fz = lab_f(xyz[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts one Lab triple to sRGB, clamped to [0,1].
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let white = *WHITE;
    let xyz = [
        lab_f_inv(fx) * white[0],
        lab_f_inv(fy) * white[1],
        lab_f_inv(fz) * white[2],
    ];
    let m = &*XYZ_TO_RGB;
    std::array::from_fn(|r| {
        let lin: f64 = (0..3).map(|c| m[r][c] * xyz[c]).sum();
        linear_to_srgb(lin.max(0.0)).clamp(0.0, 1.0)
    })
}

pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    img.check_finite("rgb image")?;
    let mut out = LabImage::filled(img.width, img.height, [0.0; 3]);
    for i in 0..img.len() {
        let [l, a, b] = rgb_pixel_to_lab(img.pixel(i).map(|v| v.clamp(0.0, 1.0)));
        out.l[i] = l.clamp(0.0, 100.0);
        out.a[i] = a.clamp(-128.0, 127.0);
        out.b[i] = b.clamp(-128.0, 127.0);
    }
    Ok(out)
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    let mut out = RgbImage::filled(img.width, img.height, [0.0; 3]);
    for i in 0..img.len() {
        let [r, g, b] = lab_pixel_to_rgb(img.pixel(i));
        out.r[i] = r;
        out.g[i] = g;
        out.b[i] = b;
    }
    out
}

#[inline]
pub fn normalize_l(l: f64) -> f64 {
    l / 100.0
}

#[inline]
pub fn normalize_ab(v: f64) -> f64 {
    (v + 128.0) / 255.0
}

#[inline]
pub fn denormalize_l(l: f64) -> f64 {
    l * 100.0
}

#[inline]
pub fn denormalize_ab(v: f64) -> f64 {
    v * 255.0 - 128.0
}

/// Normalized value of zero chroma, `128/255`.
pub const NEUTRAL_CHROMA: f64 = 128.0 / 255.0;

pub fn normalize_lab(img: &LabImage) -> NormalizedLabImage {
    NormalizedLabImage {
        width: img.width,
        height: img.height,
        l: img.l.iter().copied().map(normalize_l).collect(),
        a: img.a.iter().copied().map(normalize_ab).collect(),
        b: img.b.iter().copied().map(normalize_ab).collect(),
    }
}

pub fn denormalize_lab(img: &NormalizedLabImage) -> LabImage {
    LabImage {
        width: img.width,
        height: img.height,
        l: img.l.iter().copied().map(denormalize_l).collect(),
        a: img.a.iter().copied().map(denormalize_ab).collect(),
        b: img.b.iter().copied().map(denormalize_ab).collect(),
    }
}

/// sRGB image straight to normalized Lab.
pub fn rgb_to_normalized_lab(img: &RgbImage) -> Result<NormalizedLabImage> {
    Ok(normalize_lab(&rgb_to_lab(img)?))
}

/// Normalized Lab straight to sRGB.
pub fn normalized_lab_to_rgb(img: &NormalizedLabImage) -> RgbImage {
    lab_to_rgb(&denormalize_lab(img))
}

/// 4-neighbour discrete Laplacian with replicate-padded borders.
pub fn laplacian(channel: &Plane) -> Result<Plane> {
    check_laplacian_dims(channel)?;
    let (w, h) = (channel.width as isize, channel.height as isize);
    let mut out = Plane::zeros(channel.width, channel.height);
    for y in 0..h {
        for x in 0..w {
            let c = channel.get_clamped(x, y);
            let v = channel.get_clamped(x - 1, y)
                + channel.get_clamped(x + 1, y)
                + channel.get_clamped(x, y - 1)
                + channel.get_clamped(x, y + 1)
                - 4.0 * c;
            out.data[(y * w + x) as usize] = v;
        }
    }
    Ok(out)
}

/// Adjoint of [`laplacian`]: `<laplacian(x), g> == <x, laplacian_adjoint(g)>`.
pub fn laplacian_adjoint(grad: &Plane) -> Result<Plane> {
    check_laplacian_dims(grad)?;
    let (w, h) = (grad.width as isize, grad.height as isize);
    let mut out = Plane::zeros(grad.width, grad.height);
    let idx = |x: isize, y: isize| (y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize;
    for y in 0..h {
        for x in 0..w {
            let g = grad.data[(y * w + x) as usize];
            if g == 0.0 {
                continue;
            }
            out.data[idx(x - 1, y)] += g;
            out.data[idx(x + 1, y)] += g;
            out.data[idx(x, y - 1)] += g;
            out.data[idx(x, y + 1)] += g;
            out.data[idx(x, y)] -= 4.0 * g;
        }
    }
    Ok(out)
}

fn check_laplacian_dims(p: &Plane) -> Result<()> {
    if p.width < 3 || p.height < 3 {
        return Err(Error::invalid(format!(
            "laplacian needs at least a 3x3 plane, got {}x{}",
            p.width, p.height
        )));
    }
    Ok(())
}
