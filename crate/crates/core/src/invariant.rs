//! High-frequency, variance-normalized single-channel input for the
//! domain-invariant encoder.
//!
//! `L = box_mean(I)`, `H = I - L`, `G = alpha * sum(H^2) / (M*N*(var(H) + eps))`
//! and the enhanced field is `G * H`, optionally min-max rescaled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{green_channel, FundusSample, GrayField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantConfig {
    pub window_size: usize,
    pub alpha_enh: f64,
    pub epsilon: f64,
    pub normalize_output: bool,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        InvariantConfig {
            window_size: 15,
            alpha_enh: 1.0,
            epsilon: 1e-8,
            normalize_output: true,
        }
    }
}

impl InvariantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!(
                "window_size must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        if !(self.epsilon > 0.0) || !(self.alpha_enh > 0.0) {
            return Err(Error::Config("epsilon and alpha_enh must be positive".into()));
        }
        Ok(())
    }
}

/// Index into `0..len` with mirror reflection that does not repeat the edge
/// (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Sliding sum of width `2r + 1` along one line, with reflected borders.
fn box_sum_line(src: &[f64], r: usize, out: &mut [f64]) {
    let len = src.len();
    let r = r as isize;
    let mut acc: f64 = (-r..=r).map(|k| src[reflect(k, len)]).sum();
    for (i, o) in out.iter_mut().enumerate() {
        *o = acc;
        let i = i as isize;
        acc += src[reflect(i + r + 1, len)] - src[reflect(i - r, len)];
    }
}

/// Box mean over a `window x window` neighborhood with reflect padding.
pub fn box_mean(field: &GrayField, window: usize) -> GrayField {
    let (h, w) = (field.height(), field.width());
    let r = window / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        box_sum_line(&field.pixels()[y * w..(y + 1) * w], r, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = GrayField::zeros(h, w);
    let (mut col, mut sum) = (vec![0.0; h], vec![0.0; h]);
    let norm = 1.0 / (window * window) as f64;
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        box_sum_line(&col, r, &mut sum);
        for y in 0..h {
            out.pixels_mut()[y * w + x] = sum[y] * norm;
        }
    }
    out
}

pub fn local_average(field: &GrayField, cfg: &InvariantConfig) -> Result<GrayField> {
    cfg.validate()?;
    Ok(box_mean(field, cfg.window_size))
}

pub fn high_frequency(field: &GrayField, cfg: &InvariantConfig) -> Result<GrayField> {
    let low = local_average(field, cfg)?;
    let pixels = field.pixels().iter().zip(low.pixels()).map(|(i, l)| i - l).collect();
    GrayField::from_vec(field.height(), field.width(), pixels)
}

pub fn enhancement_factor(h: &GrayField, cfg: &InvariantConfig) -> f64 {
    let n = h.pixels().len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = h.pixels().iter().sum::<f64>() / n;
    let var = h.pixels().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let energy: f64 = h.pixels().iter().map(|v| v * v).sum();
    cfg.alpha_enh * energy / (n * (var + cfg.epsilon))
}

/// Min-max rescale to `[0, 1]`; a constant field becomes all zeros.
pub fn normalize_min_max(field: &GrayField) -> GrayField {
    let (lo, hi) = field.min_max();
    if !(hi > lo) {
        return GrayField::zeros(field.height(), field.width());
    }
    let scale = 1.0 / (hi - lo);
    field.map(|v| (v - lo) * scale)
}

pub fn enhance_field(field: &GrayField, cfg: &InvariantConfig) -> Result<GrayField> {
    let h = high_frequency(field, cfg)?;
    let g = enhancement_factor(&h, cfg);
    let enhanced = h.map(|v| g * v);
    Ok(if cfg.normalize_output {
        normalize_min_max(&enhanced)
    } else {
        enhanced
    })
}

/// Green channel -> high-frequency -> scaled -> (optionally) normalized.
pub fn make_invariant_input(sample: &FundusSample, cfg: &InvariantConfig) -> Result<GrayField> {
    enhance_field(&green_channel(sample), cfg)
}
