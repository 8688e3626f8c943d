//! Compositing, supervision targets, synthetic portrait-like data, and image
//! file I/O.
//!
//! The synthetic generator draws a soft-edged star-convex silhouette with
//! thin anti-aliased filaments, builds smooth foreground/background plates,
//! and composites them exactly, so every sample carries consistent (I, alpha,
//! F, B) supervision. Per-sample RNG streams derive from seed and index, so
//! generation order never changes the data.

use crate::tensor::{avg_pool, mirror_index, Shape4, Tensor4};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write as IoWrite};
use std::path::Path;

/// One matting example. `fg`/`bg` are retained when known so the
/// compositional loss can use them.
#[derive(Debug, Clone, PartialEq)]
pub struct MattingSample {
    /// Composite image, [1,3,H,W] in [0,1].
    pub image: Tensor4,
    /// Ground-truth matte, [1,1,H,W] in [0,1].
    pub alpha: Tensor4,
    pub fg: Option<Tensor4>,
    pub bg: Option<Tensor4>,
}

/// Per-channel tolerance for the stored compositing identity: 8-bit
/// quantization of the composite can move a value at most half a level.
pub const COMPOSITE_TOLERANCE: f64 = 1.0 / 255.0;

impl MattingSample {
    /// Shape, range, and (when F/B are present) compositing consistency.
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::ShapeMismatch {
                context: "sample image".into(),
                expected: "1x3xHxW".into(),
                found: s.to_string(),
            });
        }
        let a = self.alpha.shape();
        if a != Shape4::new(1, 1, s.h, s.w) {
            return Err(Error::ShapeMismatch {
                context: "sample alpha".into(),
                expected: format!("1x1x{}x{}", s.h, s.w),
                found: a.to_string(),
            });
        }
        for (t, label) in [(&self.image, "image"), (&self.alpha, "alpha")] {
            if t.min() < 0.0 || t.max() > 1.0 {
                return Err(Error::Dataset(format!("{label} values outside [0,1]")));
            }
        }
        if self.fg.is_some() != self.bg.is_some() {
            return Err(Error::Dataset(
                "foreground and background must be provided together".into(),
            ));
        }
        if let (Some(fg), Some(bg)) = (&self.fg, &self.bg) {
            let recomposed = composite(fg, bg, &self.alpha)?;
            let mut worst = 0.0f64;
            for (i, r) in self.image.data().iter().zip(recomposed.data().iter()) {
                worst = worst.max((i - r).abs());
            }
            if worst > COMPOSITE_TOLERANCE + 1e-9 {
                return Err(Error::Dataset(format!(
                    "image deviates from alpha*F + (1-alpha)*B by {worst:.6} (> 1/255)"
                )));
            }
        }
        Ok(())
    }
}

/// Background plate style for the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    Flat,
    Gradient,
    Noise,
}

impl std::str::FromStr for BackgroundStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(BackgroundStyle::Flat),
            "gradient" => Ok(BackgroundStyle::Gradient),
            "noise" => Ok(BackgroundStyle::Noise),
            other => Err(Error::InvalidArgument(format!(
                "unknown background style {other:?}, expected flat, gradient, or noise"
            ))),
        }
    }
}

/// Generator knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    /// Square image side; must be divisible by 32.
    pub size: usize,
    /// Inclusive range for the number of hair-like filaments per sample.
    pub strand_range: (usize, usize),
    /// Number of radial harmonics shaping the silhouette.
    pub blob_harmonics: usize,
    pub background: BackgroundStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 16,
            size: 64,
            strand_range: (1, 4),
            blob_harmonics: 2,
            background: BackgroundStyle::Gradient,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::NotDivisible {
                context: "synthetic image size".into(),
                dim: self.size,
                by: 32,
            });
        }
        if self.strand_range.0 > self.strand_range.1 {
            return Err(Error::InvalidArgument(format!(
                "strand range {}..={} is empty",
                self.strand_range.0, self.strand_range.1
            )));
        }
        if self.blob_harmonics == 0 {
            return Err(Error::InvalidArgument("blob_harmonics must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// compositing and supervision targets
// ---------------------------------------------------------------------------

/// Linear blend I = alpha*F + (1-alpha)*B, alpha broadcast over channels.
pub fn composite(fg: &Tensor4, bg: &Tensor4, alpha: &Tensor4) -> Result<Tensor4> {
    let fs = fg.shape();
    if bg.shape() != fs {
        return Err(Error::ShapeMismatch {
            context: "composite background".into(),
            expected: fs.to_string(),
            found: bg.shape().to_string(),
        });
    }
    let expect_a = Shape4::new(fs.n, 1, fs.h, fs.w);
    if alpha.shape() != expect_a {
        return Err(Error::ShapeMismatch {
            context: "composite alpha".into(),
            expected: expect_a.to_string(),
            found: alpha.shape().to_string(),
        });
    }
    for (t, label) in [(fg, "foreground"), (bg, "background"), (alpha, "alpha")] {
        if t.min() < 0.0 || t.max() > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "composite {label} has values outside [0,1]"
            )));
        }
    }
    let mut out = Tensor4::zeros(fs);
    for n in 0..fs.n {
        for c in 0..fs.c {
            for y in 0..fs.h {
                for x in 0..fs.w {
                    let a = alpha.at(n, 0, y, x);
                    out.set(
                        n,
                        c,
                        y,
                        x,
                        a * fg.at(n, c, y, x) + (1.0 - a) * bg.at(n, c, y, x),
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Normalized 5-tap Gaussian, sigma 1.
fn gaussian5() -> [f64; 5] {
    let mut k = [0.0; 5];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-0.5 * d * d).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn blur_axis(x: &Tensor4, kernel: &[f64; 5], horizontal: bool) -> Tensor4 {
    let s = x.shape();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = 0.0;
                    for (t, &kv) in kernel.iter().enumerate() {
                        let off = t as isize - 2;
                        let v = if horizontal {
                            x.at(n, c, y, mirror_index(xx as isize + off, s.w))
                        } else {
                            x.at(n, c, mirror_index(y as isize + off, s.h), xx)
                        };
                        acc += kv * v;
                    }
                    out.set(n, c, y, xx, acc);
                }
            }
        }
    }
    out
}

/// 5x5 Gaussian blur (sigma 1), mirrored boundary, separable passes.
pub(crate) fn gaussian_blur5(x: &Tensor4) -> Tensor4 {
    let k = gaussian5();
    blur_axis(&blur_axis(x, &k, true), &k, false)
}

/// Supervision target for the coarse semantic map: 16x downsample by average
/// pooling, then a small Gaussian blur. Preserves the matte's mean.
pub fn semantic_target(alpha: &Tensor4) -> Result<Tensor4> {
    let pooled = avg_pool(alpha, 16)?;
    Ok(gaussian_blur5(&pooled))
}

// ---------------------------------------------------------------------------
// transition mask
// ---------------------------------------------------------------------------

fn binary_filter(mask: &[bool], h: usize, w: usize, r: usize, take_max: bool) -> Vec<bool> {
    // separable pass order: rows then columns (valid for a square window)
    let pass = |src: &[bool], rows: bool| -> Vec<bool> {
        let mut dst = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = !take_max;
                let (pos, limit) = if rows { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(limit - 1);
                for p in lo..=hi {
                    let v = if rows { src[y * w + p] } else { src[p * w + x] };
                    if take_max {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
                dst[y * w + x] = acc;
            }
        }
        dst
    };
    pass(&pass(mask, true), false)
}

/// Square-window dilation with the window clipped at the image border.
pub fn dilate(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    binary_filter(mask, h, w, r, true)
}

/// Square-window erosion with the window clipped at the image border.
pub fn erode(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    binary_filter(mask, h, w, r, false)
}

/// Binary supervision band for the detail loss: the morphological boundary
/// zone of the thresholded matte (dilation minus erosion, square window of
/// radius `band_radius`) plus every strictly fractional pixel.
pub fn transition_mask(alpha: &Tensor4, band_radius: usize) -> Result<Tensor4> {
    if band_radius == 0 {
        return Err(Error::InvalidArgument("band radius must be >= 1".into()));
    }
    let s = alpha.shape();
    if s.c != 1 {
        return Err(Error::ShapeMismatch {
            context: "transition_mask".into(),
            expected: format!("{}x1x{}x{}", s.n, s.h, s.w),
            found: s.to_string(),
        });
    }
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        let mut hard = vec![false; s.h * s.w];
        for y in 0..s.h {
            for x in 0..s.w {
                hard[y * s.w + x] = alpha.at(n, 0, y, x) > 0.5;
            }
        }
        let grown = dilate(&hard, s.h, s.w, band_radius);
        let shrunk = erode(&hard, s.h, s.w, band_radius);
        for y in 0..s.h {
            for x in 0..s.w {
                let a = alpha.at(n, 0, y, x);
                let band = grown[y * s.w + x] && !shrunk[y * s.w + x];
                let fractional = a > 0.0 && a < 1.0;
                out.set(n, 0, y, x, if band || fractional { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64 + 1)))
}

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    amps: Vec<f64>,
    phases: Vec<f64>,
}

impl Blob {
    fn radius_at(&self, angle: f64) -> f64 {
        let mut scale = 1.0;
        for (k, (&a, &p)) in self.amps.iter().zip(self.phases.iter()).enumerate() {
            scale += a * ((k + 1) as f64 * angle + p).cos();
        }
        self.r0 * scale.max(0.2)
    }
}

/// Signed distance to the blob boundary (negative inside), mapped through a
/// linear ramp of the given width into alpha.
fn blob_alpha(blob: &Blob, x: f64, y: f64, edge: f64) -> f64 {
    let dx = x - blob.cx;
    let dy = y - blob.cy;
    let dist = (dx * dx + dy * dy).sqrt();
    let boundary = blob.radius_at(dy.atan2(dx));
    let signed = dist - boundary;
    (0.5 - signed / edge).clamp(0.0, 1.0)
}

fn stamp_strand(alpha: &mut Tensor4, rng: &mut ChaCha8Rng, blob: &Blob, size: usize) {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let start_r = blob.radius_at(theta) - 1.0;
    let p0 = (
        blob.cx + start_r * theta.cos(),
        blob.cy + start_r * theta.sin(),
    );
    let len = rng.random_range(0.10..0.30) * size as f64;
    let spread = rng.random_range(-0.6..0.6);
    let out_dir = theta + spread;
    let p2 = (p0.0 + len * out_dir.cos(), p0.1 + len * out_dir.sin());
    let mid = ((p0.0 + p2.0) / 2.0, (p0.1 + p2.1) / 2.0);
    let bend = rng.random_range(-0.35..0.35) * len;
    let normal = out_dir + std::f64::consts::FRAC_PI_2;
    let p1 = (mid.0 + bend * normal.cos(), mid.1 + bend * normal.sin());

    let root_width = rng.random_range(0.6..1.4);
    let strength = rng.random_range(0.7..1.0);
    let approx_len = ((p1.0 - p0.0).hypot(p1.1 - p0.1)) + ((p2.0 - p1.0).hypot(p2.1 - p1.1));
    let steps = ((2.0 * approx_len).ceil() as usize).clamp(8, 200);

    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let u = 1.0 - t;
        let cx = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
        let cy = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
        let radius = root_width * (1.0 - 0.7 * t);
        let reach = radius.ceil() as isize + 1;
        let ix = cx.round() as isize;
        let iy = cy.round() as isize;
        for py in (iy - reach).max(0)..=(iy + reach).min(size as isize - 1) {
            for px in (ix - reach).max(0)..=(ix + reach).min(size as isize - 1) {
                let d = (px as f64 + 0.5 - cx).hypot(py as f64 + 0.5 - cy);
                let coverage = (radius - d + 0.5).clamp(0.0, 1.0) * strength;
                if coverage > 0.0 {
                    let (px, py) = (px as usize, py as usize);
                    let old = alpha.at(0, 0, py, px);
                    alpha.set(0, 0, py, px, old.max(coverage));
                }
            }
        }
    }
}

/// Color range for one plate. Foreground and background draw from disjoint
/// luminance bands (polarity randomized per sample) so the subject stands
/// apart from the backdrop the way a lit person does in a studio shot.
#[derive(Clone, Copy)]
struct Palette {
    lo: f64,
    hi: f64,
}

fn random_color(rng: &mut ChaCha8Rng, pal: Palette) -> [f64; 3] {
    [
        rng.random_range(pal.lo..pal.hi),
        rng.random_range(pal.lo..pal.hi),
        rng.random_range(pal.lo..pal.hi),
    ]
}

/// Smooth two-color plate: colors mixed along a random sinusoidal field.
fn smooth_plate(rng: &mut ChaCha8Rng, size: usize, pal: Palette) -> Tensor4 {
    let c1 = random_color(rng, pal);
    let c2 = random_color(rng, pal);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = rng.random_range(0.5..1.5) * std::f64::consts::TAU / size as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut out = Tensor4::zeros(Shape4::new(1, 3, size, size));
    for y in 0..size {
        for x in 0..size {
            let u = 0.5 + 0.5 * ((x as f64 * dx + y as f64 * dy) * freq + phase).sin();
            for c in 0..3 {
                out.set(0, c, y, x, c1[c] * (1.0 - u) + c2[c] * u);
            }
        }
    }
    out
}

/// Foreground plate: a smooth color field overlaid with fine speckle, so the
/// subject is locally distinguishable from the smooth backgrounds the way a
/// textured person stands out against a studio backdrop.
fn textured_plate(rng: &mut ChaCha8Rng, size: usize, pal: Palette) -> Tensor4 {
    let mut out = smooth_plate(rng, size, pal);
    let shape = out.shape();
    let grain: Vec<f64> = (0..shape.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let grain = box3(&Tensor4::from_vec(shape, grain).expect("grain shape"));
    for (v, g) in out.data_mut().iter_mut().zip(grain.data()) {
        *v = (*v + 0.3 * g).clamp(pal.lo, pal.hi);
    }
    out
}

fn box3(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let py = y as isize + dy;
                            let px = xx as isize + dx;
                            if py >= 0 && py < s.h as isize && px >= 0 && px < s.w as isize {
                                acc += x.at(n, c, py as usize, px as usize);
                                cnt += 1.0;
                            }
                        }
                    }
                    out.set(n, c, y, xx, acc / cnt);
                }
            }
        }
    }
    out
}

fn background_plate(
    rng: &mut ChaCha8Rng,
    size: usize,
    style: BackgroundStyle,
    pal: Palette,
) -> Tensor4 {
    match style {
        BackgroundStyle::Flat => {
            let c = random_color(rng, pal);
            let mut out = Tensor4::zeros(Shape4::new(1, 3, size, size));
            for (ch, &v) in c.iter().enumerate() {
                for y in 0..size {
                    for x in 0..size {
                        out.set(0, ch, y, x, v);
                    }
                }
            }
            out
        }
        BackgroundStyle::Gradient => smooth_plate(rng, size, pal),
        BackgroundStyle::Noise => {
            let shape = Shape4::new(1, 3, size, size);
            let data = (0..shape.numel())
                .map(|_| rng.random_range(pal.lo..pal.hi))
                .collect();
            let raw = Tensor4::from_vec(shape, data).expect("noise shape");
            box3(&box3(&raw))
        }
    }
}

fn generate_sample(cfg: &SynthConfig, index: usize) -> MattingSample {
    let mut rng = sample_rng(cfg.seed, index);
    let size = cfg.size;
    let sf = size as f64;

    let blob = {
        let k = cfg.blob_harmonics;
        let mut amps = Vec::with_capacity(k);
        let mut phases = Vec::with_capacity(k);
        for h in 1..=k {
            amps.push(rng.random_range(-0.35..0.35) / h as f64);
            phases.push(rng.random_range(0.0..std::f64::consts::TAU));
        }
        Blob {
            cx: sf * rng.random_range(0.40..0.60),
            cy: sf * rng.random_range(0.40..0.60),
            r0: sf * rng.random_range(0.32..0.44),
            amps,
            phases,
        }
    };

    let edge = rng.random_range(2.0..4.0);
    let mut alpha = Tensor4::zeros(Shape4::new(1, 1, size, size));
    for y in 0..size {
        for x in 0..size {
            let a = blob_alpha(&blob, x as f64 + 0.5, y as f64 + 0.5, edge);
            alpha.set(0, 0, y, x, a);
        }
    }

    let strands = rng.random_range(cfg.strand_range.0..=cfg.strand_range.1);
    for _ in 0..strands {
        stamp_strand(&mut alpha, &mut rng, &blob, size);
    }

    // The subject plate is consistently the bright one: without a pretrained
    // backbone the luminance cue is what makes a 200-iteration training run
    // converge, the way a lit person separates from a dim studio backdrop.
    let fg = textured_plate(&mut rng, size, Palette { lo: 0.65, hi: 1.0 });
    let bg = background_plate(&mut rng, size, cfg.background, Palette { lo: 0.0, hi: 0.3 });
    let image = composite(&fg, &bg, &alpha).expect("generated plates are in range");
    MattingSample {
        image,
        alpha,
        fg: Some(fg),
        bg: Some(bg),
    }
}

/// Generate `cfg.count` samples. Deterministic in `cfg`; each sample draws
/// from its own seed+index stream.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<MattingSample>> {
    cfg.validate()?;
    Ok((0..cfg.count).map(|i| generate_sample(cfg, i)).collect())
}

// ---------------------------------------------------------------------------
// image file I/O
// ---------------------------------------------------------------------------

fn quantize_byte(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Snap every value to the 8-bit grid it will occupy on disk.
pub fn quantize_unit(t: &Tensor4) -> Tensor4 {
    t.map(|v| quantize_byte(v) as f64 / 255.0)
}

pub(crate) fn image_format(path: &Path) -> Result<image::ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(image::ImageFormat::Png),
        "ppm" | "pgm" | "pnm" => Ok(image::ImageFormat::Pnm),
        other => Err(Error::Image(format!(
            "unsupported image extension {other:?} for {}; use png, ppm, or pgm",
            path.display()
        ))),
    }
}

/// Read an 8-bit grayscale or RGB image into [0,1]; c is 1 or 3.
pub fn read_image(path: &Path) -> Result<Tensor4> {
    image_format(path)?;
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("cannot read {}: {e}", path.display())))?;
    let (shape, bytes): (Shape4, Vec<u8>) = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (Shape4::new(1, 1, h, w), g.into_raw())
        }
        image::DynamicImage::ImageRgb8(c) => {
            let (w, h) = (c.width() as usize, c.height() as usize);
            (Shape4::new(1, 3, h, w), c.into_raw())
        }
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported pixel layout {:?}, expected 8-bit grayscale or RGB",
                path.display(),
                other.color()
            )))
        }
    };
    // files are interleaved per pixel; tensors are planar per channel
    let mut out = Tensor4::zeros(shape);
    let (c, h, w) = (shape.c, shape.h, shape.w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = bytes[(y * w + x) * c + ch] as f64 / 255.0;
                out.set(0, ch, y, x, v);
            }
        }
    }
    Ok(out)
}

/// Write a [1,1,H,W] or [1,3,H,W] tensor in [0,1] as an 8-bit image; the
/// extension picks the container (png, ppm, pgm).
pub fn write_image(path: &Path, t: &Tensor4) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || (s.c != 1 && s.c != 3) {
        return Err(Error::ShapeMismatch {
            context: "write_image".into(),
            expected: "1x1xHxW or 1x3xHxW".into(),
            found: s.to_string(),
        });
    }
    if t.min() < 0.0 || t.max() > 1.0 {
        return Err(Error::Image(format!(
            "values outside [0,1] cannot be quantized for {}",
            path.display()
        )));
    }
    let format = image_format(path)?;
    let mut bytes = Vec::with_capacity(s.c * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for ch in 0..s.c {
                bytes.push(quantize_byte(t.at(0, ch, y, x)));
            }
        }
    }
    let color = if s.c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(path, &bytes, s.w as u32, s.h as u32, color, format)
        .map_err(|e| Error::Image(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// dataset directory layout
// ---------------------------------------------------------------------------

/// Write samples as `<root>/{image,alpha,fg,bg}/<id>.png` plus `index.txt`.
///
/// Alpha and the plates are quantized first and the stored image is
/// re-composited from those quantized values, so the compositing identity
/// survives the trip through 8-bit files.
pub fn save_dataset(root: &Path, samples: &[MattingSample]) -> Result<()> {
    std::fs::create_dir_all(root.join("image"))?;
    std::fs::create_dir_all(root.join("alpha"))?;
    let any_plates = samples.iter().any(|s| s.fg.is_some());
    if any_plates {
        std::fs::create_dir_all(root.join("fg"))?;
        std::fs::create_dir_all(root.join("bg"))?;
    }
    let mut index = std::io::BufWriter::new(std::fs::File::create(root.join("index.txt"))?);
    for (i, sample) in samples.iter().enumerate() {
        sample.validate()?;
        let id = format!("{i:05}");
        writeln!(index, "{id}")?;
        let alpha_q = quantize_unit(&sample.alpha);
        write_image(&root.join("alpha").join(format!("{id}.png")), &alpha_q)?;
        match (&sample.fg, &sample.bg) {
            (Some(fg), Some(bg)) => {
                let fg_q = quantize_unit(fg);
                let bg_q = quantize_unit(bg);
                write_image(&root.join("fg").join(format!("{id}.png")), &fg_q)?;
                write_image(&root.join("bg").join(format!("{id}.png")), &bg_q)?;
                let recomposed = composite(&fg_q, &bg_q, &alpha_q)?;
                write_image(&root.join("image").join(format!("{id}.png")), &recomposed)?;
            }
            _ => {
                write_image(&root.join("image").join(format!("{id}.png")), &sample.image)?;
            }
        }
    }
    index.flush()?;
    Ok(())
}

/// Sample ids listed in a dataset's `index.txt`, in file order.
pub fn read_index(root: &Path) -> Result<Vec<String>> {
    let index_path = root.join("index.txt");
    let file = std::fs::File::open(&index_path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", index_path.display())))?;
    let mut ids = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let id = line?;
        let id = id.trim();
        if !id.is_empty() {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

/// Read a dataset directory written by [`save_dataset`] (or hand-assembled in
/// the same layout), keeping each sample's id. fg/bg are optional per sample.
pub fn load_dataset_with_ids(root: &Path) -> Result<Vec<(String, MattingSample)>> {
    let mut samples = Vec::new();
    for id in read_index(root)? {
        let image_path = root.join("image").join(format!("{id}.png"));
        let alpha_path = root.join("alpha").join(format!("{id}.png"));
        if !image_path.is_file() || !alpha_path.is_file() {
            return Err(Error::Dataset(format!(
                "sample {id} listed in index.txt is missing image or alpha"
            )));
        }
        let image = read_image(&image_path)?;
        let alpha = read_image(&alpha_path)?;
        let fg_path = root.join("fg").join(format!("{id}.png"));
        let bg_path = root.join("bg").join(format!("{id}.png"));
        let (fg, bg) = if fg_path.is_file() && bg_path.is_file() {
            (Some(read_image(&fg_path)?), Some(read_image(&bg_path)?))
        } else {
            (None, None)
        };
        let sample = MattingSample {
            image,
            alpha,
            fg,
            bg,
        };
        sample
            .validate()
            .map_err(|e| Error::Dataset(format!("sample {id} fails validation: {e}")))?;
        samples.push((id, sample));
    }
    Ok(samples)
}

/// [`load_dataset_with_ids`] without the ids.
pub fn load_dataset(root: &Path) -> Result<Vec<MattingSample>> {
    Ok(load_dataset_with_ids(root)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_alpha(size: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape4::new(1, 1, size, size);
        let data = (0..shape.numel())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn composite_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = Shape4::new(1, 3, 4, 4);
        let fg = Tensor4::from_vec(shape, (0..48).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap();
        let bg = Tensor4::from_vec(shape, (0..48).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap();
        let ones = Tensor4::filled(Shape4::new(1, 1, 4, 4), 1.0);
        let zeros = Tensor4::zeros(Shape4::new(1, 1, 4, 4));
        assert_eq!(composite(&fg, &bg, &ones).unwrap(), fg);
        assert_eq!(composite(&fg, &bg, &zeros).unwrap(), bg);

        let half = Tensor4::filled(Shape4::new(1, 1, 4, 4), 0.5);
        let white = Tensor4::filled(shape, 1.0);
        let black = Tensor4::zeros(shape);
        let mid = composite(&white, &black, &half).unwrap();
        assert!(mid.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn composite_rejects_out_of_range() {
        let shape = Shape4::new(1, 3, 2, 2);
        let fg = Tensor4::filled(shape, 1.2);
        let bg = Tensor4::zeros(shape);
        let a = Tensor4::filled(Shape4::new(1, 1, 2, 2), 0.5);
        assert!(composite(&fg, &bg, &a).is_err());
    }

    proptest! {
        #[test]
        fn composite_monotone_in_alpha(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape4::new(1, 3, 3, 3);
            // F >= B elementwise
            let bg = Tensor4::from_vec(shape, (0..27).map(|_| rng.random_range(0.0..0.5)).collect()).unwrap();
            let fg = bg.map(|v| v + 0.4);
            let a1 = random_alpha(3, seed + 1000).map(|v| v * 0.5);
            let a2 = a1.map(|v| v + 0.3);
            let i1 = composite(&fg, &bg, &a1).unwrap();
            let i2 = composite(&fg, &bg, &a2).unwrap();
            for (p, q) in i1.data().iter().zip(i2.data().iter()) {
                prop_assert!(p <= q);
            }
        }
    }

    #[test]
    fn semantic_target_preserves_constants_and_zero() {
        for c in [0.0, 0.37, 1.0] {
            let a = Tensor4::filled(Shape4::new(1, 1, 64, 64), c);
            let g = semantic_target(&a).unwrap();
            assert_eq!(g.shape(), Shape4::new(1, 1, 4, 4));
            for v in g.data() {
                assert!((v - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semantic_target_preserves_mean() {
        for seed in 0..5 {
            let a = random_alpha(64, seed);
            let g = semantic_target(&a).unwrap();
            // direct-summation oracle on both sides
            let mean_in: f64 = a.data().iter().sum::<f64>() / a.numel() as f64;
            let mean_out: f64 = g.data().iter().sum::<f64>() / g.numel() as f64;
            assert!(
                (mean_in - mean_out).abs() < 1e-6,
                "seed {seed}: {mean_in} vs {mean_out}"
            );
            assert!(g.min() >= 0.0 && g.max() <= 1.0);
        }
    }

    #[test]
    fn semantic_target_commutes_with_flips() {
        let a = random_alpha(64, 9);
        let direct = semantic_target(&a.flip_w()).unwrap();
        let flipped = semantic_target(&a).unwrap().flip_w();
        for (x, y) in direct.data().iter().zip(flipped.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let direct_h = semantic_target(&a.flip_h()).unwrap();
        let flipped_h = semantic_target(&a).unwrap().flip_h();
        for (x, y) in direct_h.data().iter().zip(flipped_h.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_target_rejects_indivisible() {
        let a = Tensor4::zeros(Shape4::new(1, 1, 40, 64));
        assert!(semantic_target(&a).is_err());
    }

    #[test]
    fn gaussian_blur_matches_dense_2d_oracle() {
        // direct 5x5 convolution with the same mirrored boundary
        let x = random_alpha(16, 21);
        let fast = gaussian_blur5(&x);
        let k = gaussian5();
        let s = x.shape();
        for y in 0..s.h {
            for xx in 0..s.w {
                let mut acc = 0.0;
                for ky in 0..5 {
                    for kx in 0..5 {
                        let sy = mirror_index(y as isize + ky as isize - 2, s.h);
                        let sx = mirror_index(xx as isize + kx as isize - 2, s.w);
                        acc += k[ky] * k[kx] * x.at(0, 0, sy, sx);
                    }
                }
                assert!(
                    (acc - fast.at(0, 0, y, xx)).abs() < 1e-12,
                    "mismatch at ({y},{xx})"
                );
            }
        }
    }

    #[test]
    fn transition_mask_constant_mattes_are_empty() {
        for c in [0.0, 1.0] {
            let a = Tensor4::filled(Shape4::new(1, 1, 16, 16), c);
            let m = transition_mask(&a, 3).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn transition_mask_square_ring() {
        // hard 4x4 square centered in 8x8, radius 1: the band is the square's
        // inner boundary ring plus the one-pixel ring around it
        let mut a = Tensor4::zeros(Shape4::new(1, 1, 8, 8));
        for y in 2..6 {
            for x in 2..6 {
                a.set(0, 0, y, x, 1.0);
            }
        }
        let m = transition_mask(&a, 1).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let in_dilated = (1..=6).contains(&y) && (1..=6).contains(&x);
                let in_eroded = (3..=4).contains(&y) && (3..=4).contains(&x);
                let expect = if in_dilated && !in_eroded { 1.0 } else { 0.0 };
                assert_eq!(m.at(0, 0, y, x), expect, "at ({y},{x})");
            }
        }
        assert_eq!(m.sum(), 32.0);
    }

    #[test]
    fn transition_mask_hard_matte_complement_invariance() {
        let mut a = Tensor4::zeros(Shape4::new(1, 1, 12, 12));
        for y in 3..8 {
            for x in 2..9 {
                a.set(0, 0, y, x, 1.0);
            }
        }
        let inverted = a.map(|v| 1.0 - v);
        let m1 = transition_mask(&a, 2).unwrap();
        let m2 = transition_mask(&inverted, 2).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn transition_mask_includes_fractional_pixels() {
        let mut a = Tensor4::zeros(Shape4::new(1, 1, 16, 16));
        a.set(0, 0, 12, 13, 0.4); // isolated soft pixel, far from any 0.5 edge
        let m = transition_mask(&a, 1).unwrap();
        assert_eq!(m.at(0, 0, 12, 13), 1.0);
    }

    /// Window-scan morphology, independent of the separable implementation.
    fn morph_oracle(mask: &[bool], h: usize, w: usize, r: usize, max: bool) -> Vec<bool> {
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = !max;
                for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                        if max {
                            acc |= mask[yy * w + xx];
                        } else {
                            acc &= mask[yy * w + xx];
                        }
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn morphology_matches_oracle_and_nests(seed in 0u64..200, r in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (10, 13);
            let mask: Vec<bool> = (0..h * w).map(|_| rng.random_range(0.0..1.0) > 0.5).collect();
            let d = dilate(&mask, h, w, r);
            let e = erode(&mask, h, w, r);
            prop_assert_eq!(&d, &morph_oracle(&mask, h, w, r, true));
            prop_assert_eq!(&e, &morph_oracle(&mask, h, w, r, false));
            for i in 0..h * w {
                prop_assert!(!e[i] || mask[i]); // erode(B) subset of B
                prop_assert!(!mask[i] || d[i]); // B subset of dilate(B)
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_consistent() {
        let cfg = SynthConfig {
            count: 3,
            ..SynthConfig::default()
        };
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        for sample in &a {
            sample.validate().unwrap();
            // built by the exact blend, so the identity holds to float precision
            let re = composite(
                sample.fg.as_ref().unwrap(),
                sample.bg.as_ref().unwrap(),
                &sample.alpha,
            )
            .unwrap();
            for (x, y) in sample.image.data().iter().zip(re.data().iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let other = synth_dataset(&SynthConfig {
            seed: 1,
            count: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synth_transition_fraction_in_budget() {
        for style in [
            BackgroundStyle::Flat,
            BackgroundStyle::Gradient,
            BackgroundStyle::Noise,
        ] {
            let cfg = SynthConfig {
                seed: 7,
                count: 8,
                background: style,
                ..SynthConfig::default()
            };
            for (i, sample) in synth_dataset(&cfg).unwrap().iter().enumerate() {
                let n = sample.alpha.numel() as f64;
                let fractional = sample
                    .alpha
                    .data()
                    .iter()
                    .filter(|&&v| v > 0.0 && v < 1.0)
                    .count() as f64;
                let frac = fractional / n;
                assert!(
                    (0.01..=0.5).contains(&frac),
                    "{style:?} sample {i}: transition fraction {frac}"
                );
            }
        }
    }

    #[test]
    fn image_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (name, c) in [("t.png", 3), ("t.ppm", 3), ("g.png", 1), ("g.pgm", 1)] {
            let shape = Shape4::new(1, c, 9, 7);
            let t = Tensor4::from_vec(
                shape,
                (0..shape.numel())
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect(),
            )
            .unwrap();
            let path = dir.path().join(name);
            write_image(&path, &t).unwrap();
            let back = read_image(&path).unwrap();
            assert_eq!(back.shape(), shape, "{name}");
            for (a, b) in t.data().iter().zip(back.data().iter()) {
                assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn rgb_channel_order_survives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let mut t = Tensor4::zeros(Shape4::new(1, 3, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                t.set(0, 0, y, x, 1.0); // R
                t.set(0, 1, y, x, 0.5); // G
                t.set(0, 2, y, x, 0.0); // B
            }
        }
        write_image(&path, &t).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.at(0, 0, 0, 0), 1.0);
        assert!((back.at(0, 1, 0, 0) - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(back.at(0, 2, 0, 0), 0.0);
    }

    #[test]
    fn io_errors_are_structured() {
        let dir = tempfile::tempdir().unwrap();
        let bad_ext = dir.path().join("t.bmp");
        assert!(matches!(
            write_image(&bad_ext, &Tensor4::zeros(Shape4::new(1, 1, 2, 2))),
            Err(Error::Image(_))
        ));
        let corrupt = dir.path().join("c.png");
        std::fs::write(&corrupt, b"not a png").unwrap();
        assert!(matches!(read_image(&corrupt), Err(Error::Image(_))));
        let out_of_range = Tensor4::filled(Shape4::new(1, 1, 2, 2), 1.5);
        assert!(matches!(
            write_image(&dir.path().join("r.png"), &out_of_range),
            Err(Error::Image(_))
        ));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            count: 3,
            size: 32,
            ..SynthConfig::default()
        };
        let samples = synth_dataset(&cfg).unwrap();
        save_dataset(dir.path(), &samples).unwrap();

        let listed = std::fs::read_to_string(dir.path().join("index.txt")).unwrap();
        assert_eq!(listed.lines().count(), 3);

        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, got) in samples.iter().zip(loaded.iter()) {
            got.validate().unwrap(); // includes the 1/255 compositing identity
            for (a, b) in orig.alpha.data().iter().zip(got.alpha.data().iter()) {
                assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
            }
            assert!(got.fg.is_some() && got.bg.is_some());
        }
    }

    #[test]
    fn dataset_plates_are_optional_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            count: 1,
            size: 32,
            ..SynthConfig::default()
        };
        let samples = synth_dataset(&cfg).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        std::fs::remove_dir_all(dir.path().join("fg")).unwrap();
        std::fs::remove_dir_all(dir.path().join("bg")).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded[0].fg.is_none() && loaded[0].bg.is_none());
    }

    #[test]
    fn dataset_missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            count: 2,
            size: 32,
            ..SynthConfig::default()
        };
        save_dataset(dir.path(), &synth_dataset(&cfg).unwrap()).unwrap();
        std::fs::remove_file(dir.path().join("alpha").join("00001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("00001"), "{err}");
    }
}
