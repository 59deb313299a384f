//! Seeded image augmentation: resize, flips, rotation/affine, perspective,
//! color jitter, normalization, random erasing and Gaussian blur.
//!
//! Every random draw for sample `i` comes from a ChaCha stream keyed by
//! `(seed, i)`, so results do not depend on processing order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Normalization, CHANNELS};

/// Geometric parameter limits accepted by [`rotate_affine`].
pub const MAX_TRANSLATE_FRAC: f64 = 0.10;
pub const SCALE_LIMITS: [f64; 2] = [0.90, 1.10];

/// Maximum jitter deltas: factors are drawn from `1 ± delta` (hue: `± delta` turns).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// (width, height)
    pub target_size: (usize, usize),
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Gate on the rotation/translation/scale stage.
    pub p_affine: f64,
    pub max_rotation_deg: f64,
    pub max_translate_frac: f64,
    pub scale_range: [f64; 2],
    pub p_perspective: f64,
    pub perspective_distortion: f64,
    pub jitter: JitterConfig,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub p_erase: f64,
    pub erase_area_frac: [f64; 2],
    pub p_blur: f64,
    pub blur_sigma_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_size: (224, 224),
            p_hflip: 0.5,
            p_vflip: 0.3,
            p_affine: 1.0,
            max_rotation_deg: 15.0,
            max_translate_frac: 0.10,
            scale_range: [0.90, 1.10],
            p_perspective: 0.5,
            perspective_distortion: 0.2,
            jitter: JitterConfig::default(),
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
            p_erase: 0.2,
            erase_area_frac: [0.02, 0.1],
            p_blur: 0.3,
            blur_sigma_range: [0.1, 2.0],
        }
    }
}

impl AugmentConfig {
    /// Every gate closed and no jitter: the pipeline reduces to resize + normalize.
    pub fn deterministic(target_size: (usize, usize)) -> Self {
        Self {
            target_size,
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_affine: 0.0,
            p_perspective: 0.0,
            jitter: JitterConfig {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
            },
            p_erase: 0.0,
            p_blur: 0.0,
            ..Self::default()
        }
    }

    pub fn normalization(&self) -> Result<Normalization> {
        Normalization::new(self.norm_mean, self.norm_std)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_affine", self.p_affine),
            ("p_perspective", self.p_perspective),
            ("p_erase", self.p_erase),
            ("p_blur", self.p_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return bad("target_size must be non-zero".into());
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return bad(format!("max_rotation_deg {} outside [0, 180]", self.max_rotation_deg));
        }
        if !(0.0..=MAX_TRANSLATE_FRAC).contains(&self.max_translate_frac) {
            return bad(format!(
                "max_translate_frac {} outside [0, 0.1]",
                self.max_translate_frac
            ));
        }
        let [lo, hi] = self.scale_range;
        if !(lo <= hi && lo >= SCALE_LIMITS[0] && hi <= SCALE_LIMITS[1]) {
            return bad(format!(
                "scale_range {:?} must be ordered within [0.9, 1.1]",
                self.scale_range
            ));
        }
        if !(0.0..0.5).contains(&self.perspective_distortion) {
            return bad(format!(
                "perspective_distortion {} outside [0, 0.5)",
                self.perspective_distortion
            ));
        }
        let j = self.jitter;
        for (name, d, max) in [
            ("brightness", j.brightness, 1.0),
            ("contrast", j.contrast, 1.0),
            ("saturation", j.saturation, 1.0),
            ("hue", j.hue, 0.5),
        ] {
            if !(0.0..=max).contains(&d) {
                return bad(format!("jitter {name} {d} outside [0, {max}]"));
            }
        }
        self.normalization().map_err(|e| Error::Config(e.to_string()))?;
        let [a, b] = self.erase_area_frac;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return bad(format!(
                "erase_area_frac {:?} must satisfy 0 < lo <= hi <= 1",
                self.erase_area_frac
            ));
        }
        let [s0, s1] = self.blur_sigma_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!(
                "blur_sigma_range {:?} must satisfy 0 < lo <= hi",
                self.blur_sigma_range
            ));
        }
        Ok(())
    }
}

fn require_raw(img: &ImageBuffer) -> Result<()> {
    if img.is_normalized() {
        Err(Error::Normalized)
    } else {
        Ok(())
    }
}

/// Value used for geometric out-of-bounds samples: raw black.
fn fill_value(img: &ImageBuffer, c: usize) -> f64 {
    img.normalization().map_or(0.0, |n| n.apply(c, 0.0))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    require_raw(img)?;
    if width == 0 || height == 0 {
        return Err(Error::invalid("resize target must be non-zero"));
    }
    if width == img.width() && height == img.height() {
        return Ok(img.clone());
    }
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(img.width(), width);
    let ys = axis(img.height(), height);
    let mut data = Vec::with_capacity(width * height * CHANNELS);
    for c in 0..CHANNELS {
        let plane = img.channel(c);
        let sw = img.width();
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * sw + x0] * (1.0 - fx) + plane[y0 * sw + x1] * fx;
                let bot = plane[y1 * sw + x0] * (1.0 - fx) + plane[y1 * sw + x1] * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(ImageBuffer::from_parts(width, height, data, None))
}

pub fn hflip(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                out.set(c, x, y, img.get(c, w - 1 - x, y));
            }
        }
    }
    out
}

pub fn vflip(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                out.set(c, x, y, img.get(c, x, h - 1 - y));
            }
        }
    }
    out
}

/// Bilinear sample at a fractional position; taps outside the image read `fill`.
fn sample_bilinear(img: &ImageBuffer, c: usize, x: f64, y: f64, fill: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let tap = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            fill
        } else {
            img.get(c, xi as usize, yi as usize)
        }
    };
    let (xi, yi) = (x0 as isize, y0 as isize);
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let wgt = wx * wy;
            if wgt != 0.0 {
                acc += wgt * tap(xi + dx, yi + dy);
            }
        }
    }
    acc
}

/// Resamples through `src_of(x, y) -> (sx, sy)`, the inverse of the output warp.
fn warp(img: &ImageBuffer, src_of: impl Fn(f64, f64) -> (f64, f64)) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| src_of(x as f64, y as f64))
        .collect();
    for c in 0..CHANNELS {
        let fill = fill_value(img, c);
        let raw = !img.is_normalized();
        for (i, &(sx, sy)) in coords.iter().enumerate() {
            let mut v = sample_bilinear(img, c, sx, sy, fill);
            if raw {
                v = v.clamp(0.0, 1.0);
            }
            out.set(c, i % w, i / w, v);
        }
    }
    out
}

/// Rotation by `angle_deg` about the image center, then scaling by `scale`
/// and translation by `translate` (fractions of width, height). Output pixels
/// are inverse-mapped and bilinearly sampled; uncovered area is black.
///
/// Translation and scale are limited to ±10% and [0.9, 1.1]. Any finite angle
/// is accepted; the training sampler keeps it within its configured range.
pub fn rotate_affine(img: &ImageBuffer, angle_deg: f64, translate: (f64, f64), scale: f64) -> Result<ImageBuffer> {
    if !angle_deg.is_finite() {
        return Err(Error::invalid("rotation angle must be finite"));
    }
    let tol = 1e-12;
    if !(translate.0.abs() <= MAX_TRANSLATE_FRAC + tol && translate.1.abs() <= MAX_TRANSLATE_FRAC + tol) {
        return Err(Error::invalid(format!(
            "translation {translate:?} exceeds ±{MAX_TRANSLATE_FRAC}"
        )));
    }
    if !(scale >= SCALE_LIMITS[0] - tol && scale <= SCALE_LIMITS[1] + tol) {
        return Err(Error::invalid(format!("scale {scale} outside [0.9, 1.1]")));
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let (tx, ty) = (translate.0 * w, translate.1 * h);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    Ok(warp(img, |x, y| {
        let (dx, dy) = ((x - cx - tx) / scale, (y - cy - ty) / scale);
        // inverse rotation
        (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
    }))
}

/// 3×3 projective transform, row-major with `h[8] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography([f64; 9]);

impl Homography {
    /// The transform taking each `from[i]` to `to[i]`.
    pub fn from_points(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Result<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let [x, y] = from[i];
            let [u, v] = to[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        // Gaussian elimination with partial pivoting on the augmented system.
        for col in 0..8 {
            let pivot = (col..8)
                .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
                .unwrap();
            if a[pivot][col].abs() < 1e-12 {
                return Err(Error::DegenerateCorners("singular homography system".into()));
            }
            a.swap(col, pivot);
            for r in 0..8 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    if f != 0.0 {
                        let pivot_row = a[col];
                        for (v, p) in a[r].iter_mut().zip(pivot_row).skip(col) {
                            *v -= f * p;
                        }
                    }
                }
            }
        }
        let mut h = [0.0; 9];
        for i in 0..8 {
            h[i] = a[i][8] / a[i][i];
        }
        h[8] = 1.0;
        Ok(Self(h))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let d = h[6] * x + h[7] * y + h[8];
        ((h[0] * x + h[1] * y + h[2]) / d, (h[3] * x + h[4] * y + h[5]) / d)
    }
}

fn image_corners(w: usize, h: usize) -> [[f64; 2]; 4] {
    let (xr, yb) = ((w - 1) as f64, (h - 1) as f64);
    [[0.0, 0.0], [xr, 0.0], [xr, yb], [0.0, yb]]
}

/// Perspective warp moving the image corners (top-left, top-right,
/// bottom-right, bottom-left) by `displacements` pixels.
pub fn perspective(img: &ImageBuffer, displacements: &[[f64; 2]; 4]) -> Result<ImageBuffer> {
    if displacements.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite corner displacement"));
    }
    let src = image_corners(img.width(), img.height());
    let mut dst = src;
    for (d, disp) in dst.iter_mut().zip(displacements) {
        d[0] += disp[0];
        d[1] += disp[1];
    }
    let scale = (img.width().max(img.height()) as f64).max(1.0);
    for skip in 0..4 {
        let pts: Vec<[f64; 2]> = (0..4).filter(|&i| i != skip).map(|i| dst[i]).collect();
        let cross =
            (pts[1][0] - pts[0][0]) * (pts[2][1] - pts[0][1]) - (pts[1][1] - pts[0][1]) * (pts[2][0] - pts[0][0]);
        if cross.abs() <= 1e-9 * scale * scale {
            return Err(Error::DegenerateCorners(format!(
                "corners {:?} are collinear",
                (0..4).filter(|&i| i != skip).collect::<Vec<_>>()
            )));
        }
    }
    let inverse = Homography::from_points(&dst, &src)?;
    Ok(warp(img, |x, y| inverse.apply(x, y)))
}

/// Corner displacements with Euclidean length at most `distortion * min(w, h)`.
pub fn sample_perspective<R: Rng + ?Sized>(rng: &mut R, distortion: f64, width: usize, height: usize) -> [[f64; 2]; 4] {
    let limit = distortion * width.min(height) as f64;
    let mut out = [[0.0; 2]; 4];
    for d in &mut out {
        let r = limit * rng.random::<f64>().sqrt();
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        *d = [r * theta.cos(), r * theta.sin()];
        debug_assert!(d[0].hypot(d[1]) <= limit + 1e-9);
    }
    out
}

/// Multiplicative color factors; identity is `{1, 1, 1, 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in turns.
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    if s == 0.0 {
        return (v, v, v);
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, then hue, each clamped to `[0, 1]`.
///
/// - brightness: `v * b`
/// - contrast: blend with the image's mean luma, `c * v + (1 - c) * mean`
/// - saturation: blend with the pixel's luma, `s * v + (1 - s) * luma`
/// - hue: rotate the HSV hue by `h` turns
pub fn color_jitter(img: &ImageBuffer, f: &JitterFactors) -> Result<ImageBuffer> {
    require_raw(img)?;
    let n = img.width() * img.height();
    let mut out = img.clone();
    let data = out.data_mut();
    let (r, rest) = data.split_at_mut(n);
    let (g, b) = rest.split_at_mut(n);

    if f.brightness != 1.0 {
        for v in r.iter_mut().chain(g.iter_mut()).chain(b.iter_mut()) {
            *v = (*v * f.brightness).clamp(0.0, 1.0);
        }
    }
    if f.contrast != 1.0 && n > 0 {
        let mean = (0..n).map(|i| luma(r[i], g[i], b[i])).sum::<f64>() / n as f64;
        for v in r.iter_mut().chain(g.iter_mut()).chain(b.iter_mut()) {
            *v = (f.contrast * *v + (1.0 - f.contrast) * mean).clamp(0.0, 1.0);
        }
    }
    if f.saturation != 1.0 {
        for i in 0..n {
            let l = luma(r[i], g[i], b[i]);
            for v in [&mut r[i], &mut g[i], &mut b[i]] {
                *v = (f.saturation * *v + (1.0 - f.saturation) * l).clamp(0.0, 1.0);
            }
        }
    }
    if f.hue != 0.0 {
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(r[i], g[i], b[i]);
            let (nr, ng, nb) = hsv_to_rgb(h + f.hue, s, v);
            r[i] = nr.clamp(0.0, 1.0);
            g[i] = ng.clamp(0.0, 1.0);
            b[i] = nb.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Per-channel `(v - mean) / std`; fails on an already-normalized image.
pub fn normalize(img: &ImageBuffer, norm: &Normalization) -> Result<ImageBuffer> {
    if img.is_normalized() {
        return Err(Error::AlreadyNormalized);
    }
    let n = img.width() * img.height();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| norm.apply(i / n, v))
        .collect();
    Ok(ImageBuffer::from_parts(img.width(), img.height(), data, Some(*norm)))
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

const ERASE_ATTEMPTS: usize = 10;
const ERASE_LOG_ASPECT: [f64; 2] = [-1.203_972_804_325_936, 1.193_922_468_472_435]; // ln 0.3, ln 3.3

/// A rectangle whose area fraction lies in `area_frac` (up to integer
/// rounding of its sides) with a log-uniform aspect ratio in [0.3, 3.3].
pub fn sample_erase_rect<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, area_frac: [f64; 2]) -> Rect {
    let area = (width * height) as f64;
    for _ in 0..ERASE_ATTEMPTS {
        let target = area * uniform(rng, area_frac[0], area_frac[1]);
        let aspect = uniform(rng, ERASE_LOG_ASPECT[0], ERASE_LOG_ASPECT[1]).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return Rect {
                x,
                y,
                width: w,
                height: h,
            };
        }
    }
    // Square fallback.
    let side = ((area * area_frac[0]).sqrt().round() as usize).clamp(1, width.min(height));
    let x = rng.random_range(0..=width - side);
    let y = rng.random_range(0..=height - side);
    Rect {
        x,
        y,
        width: side,
        height: side,
    }
}

/// Overwrites `rect` with uniform raw-intensity noise, expressed in the
/// image's normalized units when it has been normalized.
pub fn erase_rect<R: Rng + ?Sized>(img: &ImageBuffer, rect: Rect, rng: &mut R) -> Result<ImageBuffer> {
    if rect.x + rect.width > img.width() || rect.y + rect.height > img.height() {
        return Err(Error::invalid(format!("erase rectangle {rect:?} outside image")));
    }
    let mut out = img.clone();
    let norm = img.normalization().copied();
    for c in 0..CHANNELS {
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                let noise: f64 = rng.random();
                let v = norm.map_or(noise, |n| n.apply(c, noise));
                out.set(c, x, y, v);
            }
        }
    }
    Ok(out)
}

pub fn random_erase<R: Rng + ?Sized>(
    img: &ImageBuffer,
    rng: &mut R,
    area_frac: [f64; 2],
) -> Result<(ImageBuffer, Rect)> {
    let rect = sample_erase_rect(rng, img.width(), img.height(), area_frac);
    Ok((erase_rect(img, rect, rng)?, rect))
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    let kernel = gaussian_kernel(sigma)?;
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    let mut tmp = vec![0.0; w * h];
    for c in 0..CHANNELS {
        let plane = img.channel(c);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wk) in kernel.iter().enumerate() {
                    acc += wk * row[reflect_index(x as isize + k as isize - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wk) in kernel.iter().enumerate() {
                    acc += wk * tmp[reflect_index(y as isize + k as isize - r, h) * w + x];
                }
                out.set(c, x, y, acc);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub translate: (f64, f64),
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EraseParams {
    pub rect: Rect,
    pub noise_seed: u64,
}

/// Every random choice the pipeline makes for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub affine: Option<AffineParams>,
    pub perspective: Option<[[f64; 2]; 4]>,
    pub jitter: JitterFactors,
    pub erase: Option<EraseParams>,
    pub blur_sigma: Option<f64>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn gate<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// The RNG for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws the parameters for sample `index`. Each gate consumes one uniform
/// draw whether or not it opens.
pub fn sample_params(cfg: &AugmentConfig, seed: u64, index: u64) -> AugmentParams {
    let mut rng = sample_rng(seed, index);
    let (w, h) = cfg.target_size;
    let hflip = gate(&mut rng, cfg.p_hflip);
    let vflip = gate(&mut rng, cfg.p_vflip);
    let affine = gate(&mut rng, cfg.p_affine).then(|| {
        let t = cfg.max_translate_frac;
        let p = AffineParams {
            angle_deg: uniform(&mut rng, -cfg.max_rotation_deg, cfg.max_rotation_deg),
            translate: (uniform(&mut rng, -t, t), uniform(&mut rng, -t, t)),
            scale: uniform(&mut rng, cfg.scale_range[0], cfg.scale_range[1]),
        };
        assert!(p.angle_deg.abs() <= cfg.max_rotation_deg);
        assert!(p.translate.0.abs() <= t && p.translate.1.abs() <= t);
        assert!(p.scale >= cfg.scale_range[0] && p.scale <= cfg.scale_range[1]);
        p
    });
    let perspective =
        gate(&mut rng, cfg.p_perspective).then(|| sample_perspective(&mut rng, cfg.perspective_distortion, w, h));
    let j = cfg.jitter;
    let jitter = JitterFactors {
        brightness: 1.0 + uniform(&mut rng, -j.brightness, j.brightness),
        contrast: 1.0 + uniform(&mut rng, -j.contrast, j.contrast),
        saturation: 1.0 + uniform(&mut rng, -j.saturation, j.saturation),
        hue: uniform(&mut rng, -j.hue, j.hue),
    };
    let erase = gate(&mut rng, cfg.p_erase).then(|| EraseParams {
        rect: sample_erase_rect(&mut rng, w, h, cfg.erase_area_frac),
        noise_seed: rng.random(),
    });
    let blur_sigma =
        gate(&mut rng, cfg.p_blur).then(|| uniform(&mut rng, cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]));
    AugmentParams {
        hflip,
        vflip,
        affine,
        perspective,
        jitter,
        erase,
        blur_sigma,
    }
}

/// Applies drawn parameters in the fixed stage order: resize, hflip, vflip,
/// affine, perspective, color jitter, normalize, erase, blur.
pub fn apply_params(img: &ImageBuffer, cfg: &AugmentConfig, params: &AugmentParams) -> Result<ImageBuffer> {
    let (w, h) = cfg.target_size;
    let mut out = resize_bilinear(img, w, h)?;
    if params.hflip {
        out = hflip(&out);
    }
    if params.vflip {
        out = vflip(&out);
    }
    if let Some(a) = params.affine {
        out = rotate_affine(&out, a.angle_deg, a.translate, a.scale)?;
    }
    if let Some(d) = &params.perspective {
        out = perspective(&out, d)?;
    }
    if params.jitter != JitterFactors::IDENTITY {
        out = color_jitter(&out, &params.jitter)?;
    }
    out = normalize(&out, &cfg.normalization()?)?;
    if let Some(e) = params.erase {
        out = erase_rect(&out, e.rect, &mut ChaCha8Rng::seed_from_u64(e.noise_seed))?;
    }
    if let Some(sigma) = params.blur_sigma {
        out = gaussian_blur(&out, sigma)?;
    }
    Ok(out)
}

pub fn apply_pipeline(img: &ImageBuffer, cfg: &AugmentConfig, seed: u64, index: u64) -> Result<ImageBuffer> {
    apply_params(img, cfg, &sample_params(cfg, seed, index))
}

/// Deterministic evaluation transform: resize and normalize only.
pub fn eval_transform(img: &ImageBuffer, cfg: &AugmentConfig) -> Result<ImageBuffer> {
    let (w, h) = cfg.target_size;
    normalize(&resize_bilinear(img, w, h)?, &cfg.normalization()?)
}
