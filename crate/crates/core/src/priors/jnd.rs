//! Block-DCT distortion detection probability.
//!
//! For every 8x8 block the reference and distorted images are transformed
//! with an orthonormal DCT-II. Each coefficient gets a visibility threshold
//!
//! ```text
//! T_uv = base_uv * lum(mean luma of reference block) * mask_uv(AC energy of reference block)
//! ```
//!
//! where `lum` is U-shaped around mid-gray and `mask_uv` (AC coefficients
//! only) grows with the block's AC energy. A coefficient change is detected
//! with probability `1 - exp(-(|dC|/T)^beta)`; a block is detected unless
//! every coefficient goes unnoticed. The block probability is written to all
//! 64 of its pixels.

use std::f64::consts::PI;
use std::sync::OnceLock;

use super::image::{GrayImage, PriorMap};
use crate::error::{Error, Result};

/// JPEG (ITU-T T.81 Annex K) luminance quantization table, row-major in (v, u).
pub const JPEG_LUMA_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

#[derive(Clone, Debug, PartialEq)]
pub struct JndModelParams {
    /// Psychometric slope.
    pub beta: f64,
    /// Base threshold per DCT coefficient in orthonormal-DCT units. The JPEG
    /// table puts the DC threshold at 16, i.e. a block-mean shift of 2 gray levels.
    pub base_thresholds: [f64; 64],
    /// Mean luma with the lowest thresholds.
    pub lum_center: f64,
    /// Threshold gain at black (quadratic rise below `lum_center`).
    pub lum_dark_gain: f64,
    /// Threshold gain at white (quadratic rise above `lum_center`).
    pub lum_bright_gain: f64,
    /// RMS AC amplitude where masking starts.
    pub masking_ref: f64,
    pub masking_exponent: f64,
}

impl Default for JndModelParams {
    fn default() -> Self {
        Self {
            beta: 4.0,
            base_thresholds: JPEG_LUMA_TABLE,
            lum_center: 128.0,
            lum_dark_gain: 2.0,
            lum_bright_gain: 1.0,
            masking_ref: 4.0,
            masking_exponent: 0.7,
        }
    }
}

impl JndModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "JND beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.base_thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Config("JND base thresholds must be > 0".into()));
        }
        if !(self.lum_center > 0.0 && self.lum_center < 255.0) || !(self.masking_ref > 0.0) {
            return Err(Error::Config(
                "JND luminance/masking parameters out of range".into(),
            ));
        }
        Ok(())
    }

    pub fn luminance_factor(&self, mean: f64) -> f64 {
        if mean < self.lum_center {
            let t = (self.lum_center - mean) / self.lum_center;
            1.0 + self.lum_dark_gain * t * t
        } else {
            let t = (mean - self.lum_center) / (255.0 - self.lum_center);
            1.0 + self.lum_bright_gain * t * t
        }
    }

    pub fn masking_factor(&self, ac_rms: f64) -> f64 {
        (ac_rms / self.masking_ref)
            .max(1.0)
            .powf(self.masking_exponent)
    }
}

fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let scale = if u == 0 {
                (1.0f64 / 8.0).sqrt()
            } else {
                (2.0f64 / 8.0).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = scale * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

/// Orthonormal 2-D DCT-II of an 8x8 block (row-major, output indexed `[v][u]`).
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Reads the 8x8 block at block coordinates `(by, bx)`, replicating edge
/// pixels where the block hangs over the image.
fn read_block(img: &GrayImage, by: usize, bx: usize) -> [f64; 64] {
    let mut out = [0.0; 64];
    for y in 0..8 {
        let r = (by * 8 + y).min(img.height() - 1);
        for x in 0..8 {
            let c = (bx * 8 + x).min(img.width() - 1);
            out[y * 8 + x] = img.at(r, c) as f64;
        }
    }
    out
}

/// Detection probability of one block given its reference and distorted samples.
pub fn block_probability(
    reference: &[f64; 64],
    distorted: &[f64; 64],
    params: &JndModelParams,
) -> f64 {
    let cr = dct8x8(reference);
    let cd = dct8x8(distorted);
    let mean = reference.iter().sum::<f64>() / 64.0;
    let ac_rms = (cr[1..].iter().map(|c| c * c).sum::<f64>() / 63.0).sqrt();
    let lum = params.luminance_factor(mean);
    let mask = params.masking_factor(ac_rms);
    let miss: f64 = (0..64)
        .map(|i| {
            let t = params.base_thresholds[i] * lum * if i == 0 { 1.0 } else { mask };
            let p = 1.0 - (-((cd[i] - cr[i]).abs() / t).powf(params.beta)).exp();
            1.0 - p
        })
        .product();
    (1.0 - miss).clamp(0.0, 1.0)
}

pub fn compute_jnd_probability(
    reference: &GrayImage,
    distorted: &GrayImage,
    params: &JndModelParams,
) -> Result<PriorMap> {
    params.validate()?;
    let (w, h) = (reference.width(), reference.height());
    if (distorted.width(), distorted.height()) != (w, h) {
        return Err(Error::Invalid(format!(
            "JND inputs differ in size: {w}x{h} vs {}x{}",
            distorted.width(),
            distorted.height()
        )));
    }
    let (bw, bh) = (w.div_ceil(8), h.div_ceil(8));
    let mut values = vec![0.0f32; w * h];
    for by in 0..bh {
        for bx in 0..bw {
            let p = block_probability(
                &read_block(reference, by, bx),
                &read_block(distorted, by, bx),
                params,
            ) as f32;
            for r in by * 8..((by + 1) * 8).min(h) {
                for c in bx * 8..((bx + 1) * 8).min(w) {
                    values[r * w + c] = p;
                }
            }
        }
    }
    PriorMap::new(w, h, values)
}
