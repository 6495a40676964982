//! Color-statistics augmentation against a reference dataset.
//!
//! Each channel is blended between its standardized form (using the
//! reference mean and deviation) and its raw value,
//! `p' = alpha * (p - mu_c) / sigma_c + (1 - alpha) * p`, clipped to `[0, 1]`,
//! and the sample is then rotated by a random angle.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imaging::{bilinear_at, BinaryMask, ColorImage, FundusSample};

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Population mean and standard deviation of each RGB channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Pixels per channel.
    pub pixel_count: u64,
    pub image_count: usize,
    pub reference_name: String,
}

impl ChannelStats {
    /// Mean 0, deviation 1: the transform reduces to the identity.
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
            pixel_count: 1,
            image_count: 0,
            reference_name: "identity".into(),
        }
    }

    /// Pool two disjoint sets of statistics.
    pub fn merge(&self, other: &ChannelStats) -> ChannelStats {
        let (na, nb) = (self.pixel_count as f64, other.pixel_count as f64);
        let n = na + nb;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let delta = other.mean[c] - self.mean[c];
            mean[c] = self.mean[c] + delta * nb / n;
            let m2 = self.std[c].powi(2) * na + other.std[c].powi(2) * nb + delta * delta * na * nb / n;
            std[c] = (m2 / n).sqrt();
        }
        ChannelStats {
            mean,
            std,
            pixel_count: self.pixel_count + other.pixel_count,
            image_count: self.image_count + other.image_count,
            reference_name: format!("{}+{}", self.reference_name, other.reference_name),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
    }
}

pub fn reference_stats(images: &[&ColorImage], reference_name: &str) -> Result<ChannelStats> {
    ensure!(!images.is_empty(), "reference statistics need at least one image");
    let pixels: u64 = images.iter().map(|i| (i.height() * i.width()) as u64).sum();
    ensure!(pixels > 0, "reference images are empty");
    let n = pixels as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        let sum: f64 = images.iter().flat_map(|i| i.channel(c)).map(|&v| v as f64).sum();
        mean[c] = sum / n;
        let ss: f64 = images
            .iter()
            .flat_map(|i| i.channel(c))
            .map(|&v| (v as f64 - mean[c]).powi(2))
            .sum();
        std[c] = (ss / n).sqrt();
    }
    Ok(ChannelStats {
        mean,
        std,
        pixel_count: pixels,
        image_count: images.len(),
        reference_name: reference_name.to_string(),
    })
}

/// Unclipped per-pixel blend.
#[inline]
pub fn csa_pixel(p: f64, mean: f64, std: f64, alpha: f64) -> f64 {
    alpha * (p - mean) / std.max(SIGMA_FLOOR) + (1.0 - alpha) * p
}

pub fn csa_transform(image: &ColorImage, stats: &ChannelStats, alpha: f64) -> ColorImage {
    let mut out = image.clone();
    for c in 0..3 {
        for v in out.channel_mut(c) {
            *v = csa_pixel(*v as f64, stats.mean[c], stats.std[c], alpha).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub alpha_range: [f64; 2],
    /// Degrees.
    pub rotation_degrees: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            alpha_range: [0.7, 1.0],
            rotation_degrees: [-15.0, 15.0],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.alpha_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!(
                "alpha_range must satisfy 0 <= lo <= hi <= 1, got [{a0}, {a1}]"
            )));
        }
        let [r0, r1] = self.rotation_degrees;
        if !(r0 <= r1) || !r0.is_finite() || !r1.is_finite() {
            return Err(Error::Config(format!(
                "rotation_degrees [{r0}, {r1}] is not an interval"
            )));
        }
        Ok(())
    }
}

/// Independent seed for item `index` of a run seeded with `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Rotation about the frame center; pixels mapped from outside the frame are 0.
pub fn rotate_image(image: &ColorImage, degrees: f64) -> ColorImage {
    let (h, w) = (image.height(), image.width());
    let mut out = ColorImage::new(h, w);
    for_each_source(h, w, degrees, |y, x, sy, sx| {
        for c in 0..3 {
            if let Some(v) = bilinear_at(image.channel(c), h, w, sy, sx) {
                out.set(c, y, x, v);
            }
        }
    });
    out
}

pub fn rotate_mask(mask: &BinaryMask, degrees: f64) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = BinaryMask::zeros(h, w);
    for_each_source(h, w, degrees, |y, x, sy, sx| {
        let (ry, rx) = (sy.round(), sx.round());
        if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
            out.set(y, x, mask.get(ry as usize, rx as usize));
        }
    });
    out
}

fn for_each_source(h: usize, w: usize, degrees: f64, mut f: impl FnMut(usize, usize, f64, f64)) {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // Inverse rotation: where does this output pixel come from.
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            f(y, x, sy, sx);
        }
    }
}

/// Draw `alpha` and an angle from `cfg`, blend, then rotate image and masks together.
pub fn augment_sample(sample: &FundusSample, stats: &ChannelStats, cfg: &AugmentConfig) -> Result<FundusSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alpha = uniform(&mut rng, cfg.alpha_range);
    let angle = uniform(&mut rng, cfg.rotation_degrees);
    let blended = csa_transform(&sample.image, stats, alpha);
    let (image, vessel_mask, fov_mask) = if angle == 0.0 {
        (blended, sample.vessel_mask.clone(), sample.fov_mask.clone())
    } else {
        (
            rotate_image(&blended, angle),
            rotate_mask(&sample.vessel_mask, angle),
            rotate_mask(&sample.fov_mask, angle),
        )
    };
    Ok(FundusSample {
        id: format!("{}-csa{}", sample.id, cfg.seed),
        image,
        vessel_mask,
        fov_mask,
        source_dataset: sample.source_dataset.clone(),
        synthetic: true,
    })
}
