//! Image perturbations for bag-of-words reconstruction and classifier
//! augmentation.
//!
//! The pipeline runs in a fixed order: color jitter, random resized crop,
//! reflect-padded random crop, horizontal flip, grayscale. Pixel arithmetic
//! happens in `[0, 1]` floats and is rounded back to 8 bits once at the end.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Image, CHANNELS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizedCropConfig {
    pub size: usize,
    pub scale: (f32, f32),
    pub ratio: (f32, f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadCropConfig {
    pub size: usize,
    pub padding: usize,
    pub mode: PaddingMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub resized_crop: ResizedCropConfig,
    pub pad_crop: PadCropConfig,
    pub hflip_p: f32,
    pub grayscale_p: f32,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.2,
            resized_crop: ResizedCropConfig {
                size: 32,
                scale: (0.8, 1.0),
                ratio: (0.75, 1.33),
            },
            pad_crop: PadCropConfig {
                size: 32,
                padding: 4,
                mode: PaddingMode::Reflect,
            },
            hflip_p: 0.5,
            grayscale_p: 0.3,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    /// A configuration under which [`perturb_image`] returns its input.
    pub fn identity(size: usize) -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            resized_crop: ResizedCropConfig {
                size,
                scale: (1.0, 1.0),
                ratio: (1.0, 1.0),
            },
            pad_crop: PadCropConfig {
                size,
                padding: 0,
                mode: PaddingMode::Reflect,
            },
            hflip_p: 0.0,
            grayscale_p: 0.0,
            seed: 0,
        }
    }

    /// Augmentation for supervised classifier training: the same jitter, pad
    /// crop, flip and grayscale settings without the resized crop.
    pub fn classifier_augmentation() -> Self {
        let base = Self::default();
        Self {
            resized_crop: ResizedCropConfig {
                scale: (1.0, 1.0),
                ratio: (1.0, 1.0),
                ..base.resized_crop
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} jitter must be a non-negative real, got {v}"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad(format!("hue jitter must be in [0, 0.5], got {}", self.hue));
        }
        for (name, p) in [("hflip_p", self.hflip_p), ("grayscale_p", self.grayscale_p)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        let rc = &self.resized_crop;
        if !(rc.scale.0 > 0.0 && rc.scale.0 <= rc.scale.1 && rc.scale.1 <= 1.0) {
            return bad(format!(
                "resized-crop scale range {:?} must be ordered within (0, 1]",
                rc.scale
            ));
        }
        if !(rc.ratio.0 > 0.0 && rc.ratio.0 <= rc.ratio.1) {
            return bad(format!(
                "resized-crop ratio range {:?} must be ordered and positive",
                rc.ratio
            ));
        }
        if rc.size == 0 || self.pad_crop.size == 0 {
            return bad("crop sizes must be positive".into());
        }
        Ok(())
    }
}

/// Float RGB working buffer, HWC, values in `[0, 1]`.
#[derive(Clone)]
struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn from_image(img: &Image) -> Self {
        Self {
            h: img.height(),
            w: img.width(),
            px: img.data().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    fn to_image(&self) -> Image {
        let data = self
            .px
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        Image::new(self.h, self.w, data).expect("canvas shape is consistent")
    }

    #[inline]
    fn at(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.px[(r * self.w + c) * CHANNELS + ch]
    }
}

#[inline]
fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn blend_into(canvas: &mut Canvas, other: impl Fn(usize) -> f32, factor: f32) {
    for (i, v) in canvas.px.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

fn adjust_brightness(c: &mut Canvas, factor: f32) {
    blend_into(c, |_| 0.0, factor);
}

fn adjust_contrast(c: &mut Canvas, factor: f32) {
    let n = (c.h * c.w) as f32;
    let mean = c.px.chunks_exact(CHANNELS).map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / n;
    blend_into(c, |_| mean, factor);
}

fn adjust_saturation(c: &mut Canvas, factor: f32) {
    let gray: Vec<f32> = c.px.chunks_exact(CHANNELS).map(|p| luma(p[0], p[1], p[2])).collect();
    blend_into(c, |i| gray[i / CHANNELS], factor);
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
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

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn adjust_hue(c: &mut Canvas, shift: f32) {
    for p in c.px.chunks_exact_mut(CHANNELS) {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        p[0] = r.clamp(0.0, 1.0);
        p[1] = g.clamp(0.0, 1.0);
        p[2] = b.clamp(0.0, 1.0);
    }
}

fn color_jitter<R: Rng + ?Sized>(c: &mut Canvas, cfg: &PerturbConfig, rng: &mut R) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let draw = |rng: &mut R, m: f32| {
        if m > 0.0 {
            Some(rng.random_range((1.0 - m).max(0.0)..=1.0 + m))
        } else {
            None
        }
    };
    let brightness = draw(rng, cfg.brightness);
    let contrast = draw(rng, cfg.contrast);
    let saturation = draw(rng, cfg.saturation);
    let hue = (cfg.hue > 0.0).then(|| rng.random_range(-cfg.hue..=cfg.hue));
    for op in order {
        match op {
            0 => brightness.map(|f| adjust_brightness(c, f)),
            1 => contrast.map(|f| adjust_contrast(c, f)),
            2 => saturation.map(|f| adjust_saturation(c, f)),
            _ => hue.map(|f| adjust_hue(c, f)),
        };
    }
}

/// Bilinear resize with half-pixel centers; an unscaled axis samples exactly
/// at source pixels.
fn resize_bilinear(src: &Canvas, top: usize, left: usize, ch: usize, cw: usize, out: usize) -> Canvas {
    let sy = ch as f32 / out as f32;
    let sx = cw as f32 / out as f32;
    let mut px = vec![0f32; out * out * CHANNELS];
    for oy in 0..out {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let wx = fx - x0 as f32;
            for k in 0..CHANNELS {
                let a = src.at(top + y0, left + x0, k);
                let b = src.at(top + y0, left + x1, k);
                let c = src.at(top + y1, left + x0, k);
                let d = src.at(top + y1, left + x1, k);
                let v = if wy == 0.0 && wx == 0.0 {
                    a
                } else {
                    let t = a + (b - a) * wx;
                    let u = c + (d - c) * wx;
                    t + (u - t) * wy
                };
                px[(oy * out + ox) * CHANNELS + k] = v;
            }
        }
    }
    Canvas { h: out, w: out, px }
}

fn random_resized_crop<R: Rng + ?Sized>(c: &Canvas, cfg: &ResizedCropConfig, rng: &mut R) -> Canvas {
    let (h, w) = (c.h, c.w);
    let area = (h * w) as f32;
    let log_ratio = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    let mut window = None;
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.scale.0..=cfg.scale.1);
        let aspect = rng.random_range(log_ratio.0..=log_ratio.1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            window = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = window.unwrap_or_else(|| {
        // fall back to a centered crop with the ratio clamped into range
        let in_ratio = w as f32 / h as f32;
        let (cw, ch) = if in_ratio < cfg.ratio.0 {
            (w, ((w as f32 / cfg.ratio.0).round() as usize).min(h))
        } else if in_ratio > cfg.ratio.1 {
            (((h as f32 * cfg.ratio.1).round() as usize).min(w), h)
        } else {
            (w, h)
        };
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    });
    resize_bilinear(c, top, left, ch, cw, cfg.size)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn padded_random_crop<R: Rng + ?Sized>(c: &Canvas, cfg: &PadCropConfig, rng: &mut R) -> Canvas {
    let pad = cfg.padding as isize;
    let ph = c.h + 2 * cfg.padding;
    let pw = c.w + 2 * cfg.padding;
    let size = cfg.size;
    let top = if ph > size { rng.random_range(0..=ph - size) } else { 0 };
    let left = if pw > size { rng.random_range(0..=pw - size) } else { 0 };
    let mut px = vec![0f32; size * size * CHANNELS];
    for oy in 0..size {
        let sy = reflect(top as isize + oy as isize - pad, c.h);
        for ox in 0..size {
            let sx = reflect(left as isize + ox as isize - pad, c.w);
            for k in 0..CHANNELS {
                px[(oy * size + ox) * CHANNELS + k] = c.at(sy, sx, k);
            }
        }
    }
    Canvas { h: size, w: size, px }
}

fn hflip(c: &mut Canvas) {
    for r in 0..c.h {
        for col in 0..c.w / 2 {
            let a = (r * c.w + col) * CHANNELS;
            let b = (r * c.w + c.w - 1 - col) * CHANNELS;
            for k in 0..CHANNELS {
                c.px.swap(a + k, b + k);
            }
        }
    }
}

fn grayscale(c: &mut Canvas) {
    for p in c.px.chunks_exact_mut(CHANNELS) {
        let l = luma(p[0], p[1], p[2]);
        p.fill(l);
    }
}

/// Applies the full perturbation pipeline, driven entirely by `rng`.
pub fn perturb_image<R: Rng + ?Sized>(image: &Image, cfg: &PerturbConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    let mut c = Canvas::from_image(image);
    color_jitter(&mut c, cfg, rng);
    let c = random_resized_crop(&c, &cfg.resized_crop, rng);
    let mut c = padded_random_crop(&c, &cfg.pad_crop, rng);
    if rng.random::<f32>() < cfg.hflip_p {
        hflip(&mut c);
    }
    if rng.random::<f32>() < cfg.grayscale_p {
        grayscale(&mut c);
    }
    Ok(c.to_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let img = random_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            assert_eq!(
                perturb_image(&img, &PerturbConfig::identity(32), &mut rng).unwrap(),
                img
            );
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let img = random_image(2);
        let cfg = PerturbConfig {
            hflip_p: 1.0,
            ..PerturbConfig::identity(32)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = perturb_image(&img, &cfg, &mut rng).unwrap();
        assert_ne!(once, img);
        assert_eq!(once.pixel(3, 0), img.pixel(3, 31));
        assert_eq!(perturb_image(&once, &cfg, &mut rng).unwrap(), img);
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let img = random_image(3);
        let cfg = PerturbConfig {
            grayscale_p: 1.0,
            ..PerturbConfig::identity(32)
        };
        let out = perturb_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for px in out.data().chunks_exact(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edge() {
        assert_eq!(reflect(-1, 32), 1);
        assert_eq!(reflect(-4, 32), 4);
        assert_eq!(reflect(32, 32), 30);
        assert_eq!(reflect(35, 32), 27);
        assert_eq!(reflect(5, 32), 5);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.4, 0.9), (1.0, 0.0, 0.0), (0.5, 0.5, 0.5), (0.1, 0.9, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let img = random_image(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PerturbConfig {
            hflip_p: 1.5,
            ..Default::default()
        };
        assert!(matches!(perturb_image(&img, &cfg, &mut rng), Err(Error::Config(_))));
        let mut cfg = PerturbConfig::default();
        cfg.resized_crop.scale = (1.0, 0.8);
        assert!(cfg.validate().is_err());
        let mut cfg = PerturbConfig::default();
        cfg.resized_crop.ratio = (1.33, 0.75);
        assert!(cfg.validate().is_err());
        assert!(PerturbConfig::default().validate().is_ok());
    }

    #[test]
    fn default_pipeline_changes_pixels() {
        let img = random_image(4);
        let out = perturb_image(&img, &PerturbConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(out, img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn deterministic_and_shape_preserving(img_seed in any::<u64>(), seed in any::<u64>()) {
            let img = random_image(img_seed);
            let cfg = PerturbConfig::default();
            let a = perturb_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = perturb_image(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!((a.height(), a.width(), a.data().len()), (32, 32, 32 * 32 * 3));
            prop_assert_eq!(a, b);
        }
    }
}
