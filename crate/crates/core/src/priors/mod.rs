//! Human-visual-system prior maps: saliency, JND detection probability and
//! the plain squared-difference map they are compared against.

mod image;
pub mod jnd;
pub mod saliency;

pub use self::image::{
    load_color, load_prior, save_color, save_gray8, save_prior, ColorImage, GrayImage, PriorMap,
};
pub use jnd::{compute_jnd_probability, JndModelParams};
pub use saliency::{compute_saliency_mbd, DEFAULT_MBD_PASSES};

use crate::error::{Error, Result};

/// Per-pixel `(ref - dst)^2` scaled so the largest value is 1.
pub fn compute_sid_map(reference: &GrayImage, distorted: &GrayImage) -> Result<PriorMap> {
    if (reference.width(), reference.height()) != (distorted.width(), distorted.height()) {
        return Err(Error::Invalid(format!(
            "SID inputs differ in size: {}x{} vs {}x{}",
            reference.width(),
            reference.height(),
            distorted.width(),
            distorted.height()
        )));
    }
    let sq: Vec<f64> = reference
        .pixels()
        .iter()
        .zip(distorted.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .collect();
    Ok(PriorMap::normalized_by_max(
        reference.width(),
        reference.height(),
        &sq,
    ))
}

/// Both priors for one image pair: saliency from the reference, JND from the pair.
#[derive(Clone, Debug)]
pub struct PriorPair {
    pub saliency: PriorMap,
    pub jnd: PriorMap,
}

pub fn compute_priors(
    reference: &ColorImage,
    distorted: &ColorImage,
    jnd_params: &JndModelParams,
) -> Result<PriorPair> {
    let rl = reference.luma();
    let dl = distorted.luma();
    Ok(PriorPair {
        saliency: compute_saliency_mbd(&rl, DEFAULT_MBD_PASSES)?,
        jnd: compute_jnd_probability(&rl, &dl, jnd_params)?,
    })
}

/// Separable Gaussian blur with clamped borders; kernel radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (img.width(), img.height());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; w * h];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * img.at(r, clamp(c as isize + k as isize - radius, w)) as f64)
                .sum();
        }
    }
    GrayImage::from_fn(w, h, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &kv)| kv * tmp[clamp(r as isize + k as isize - radius, h) * w + c])
            .sum::<f64>() as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sid_identical_is_zero() {
        let a = GrayImage::from_fn(6, 5, |r, c| (r * c) as f32);
        let m = compute_sid_map(&a, &a).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sid_single_pixel_peak() {
        let a = GrayImage::from_fn(6, 5, |_, _| 100.0);
        let b = GrayImage::from_fn(6, 5, |r, c| if (r, c) == (2, 3) { 130.0 } else { 100.0 });
        let m = compute_sid_map(&a, &b).unwrap();
        assert_eq!(m.values().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(m.at(2, 3), 1.0);
    }

    #[test]
    fn sid_uniform_offset_is_constant_one() {
        let a = GrayImage::from_fn(7, 4, |r, c| (r * 10 + c) as f32);
        let b = GrayImage::from_fn(7, 4, |r, c| (r * 10 + c) as f32 + 12.0);
        let m = compute_sid_map(&a, &b).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sid_is_symmetric_and_checks_dims() {
        let a = GrayImage::from_fn(7, 4, |r, c| ((r * 31 + c * 7) % 200) as f32);
        let b = GrayImage::from_fn(7, 4, |r, c| ((r * 13 + c * 3) % 100) as f32);
        assert_eq!(
            compute_sid_map(&a, &b).unwrap(),
            compute_sid_map(&b, &a).unwrap()
        );
        let c = GrayImage::from_fn(4, 7, |_, _| 0.0);
        assert!(compute_sid_map(&a, &c).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let a = GrayImage::from_fn(9, 9, |_, _| 42.0);
        let b = gaussian_blur(&a, 2.0);
        assert!(b.pixels().iter().all(|&v| (v - 42.0).abs() < 1e-4));
    }
}
