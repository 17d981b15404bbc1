//! Minimum-barrier-distance saliency via raster-scan relaxation.
//!
//! The barrier cost of a path is `max - min` of the intensities along it.
//! Every border pixel is a seed at distance 0; interior pixels converge
//! towards the smallest barrier cost of any path reaching the border. Each
//! pass only ever lowers distances, so more passes give a tighter (smaller)
//! upper bound of the exact transform.

use super::image::{GrayImage, PriorMap};
use crate::error::{Error, Result};

pub const DEFAULT_MBD_PASSES: usize = 4;

/// Raw (unnormalized) barrier distances after `passes` sweeps.
pub fn mbd_distances(img: &GrayImage, passes: usize) -> Result<Vec<f64>> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::Invalid(format!(
            "saliency needs at least 3x3 pixels, got {w}x{h}"
        )));
    }
    if passes < 2 || !passes.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "MBD pass count must be an even number >= 2, got {passes}"
        )));
    }
    let px: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    let mut dist = vec![f64::INFINITY; w * h];
    let mut hi = px.clone();
    let mut lo = px.clone();
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                dist[r * w + c] = 0.0;
            }
        }
    }

    let relax = |p: usize, q: usize, dist: &mut [f64], hi: &mut [f64], lo: &mut [f64]| {
        let u = hi[q].max(px[p]);
        let l = lo[q].min(px[p]);
        if u - l < dist[p] {
            dist[p] = u - l;
            hi[p] = u;
            lo[p] = l;
        }
    };

    for pass in 0..passes {
        if pass % 2 == 0 {
            for r in 0..h {
                for c in 0..w {
                    let p = r * w + c;
                    if r > 0 {
                        relax(p, p - w, &mut dist, &mut hi, &mut lo);
                    }
                    if c > 0 {
                        relax(p, p - 1, &mut dist, &mut hi, &mut lo);
                    }
                }
            }
        } else {
            for r in (0..h).rev() {
                for c in (0..w).rev() {
                    let p = r * w + c;
                    if r + 1 < h {
                        relax(p, p + w, &mut dist, &mut hi, &mut lo);
                    }
                    if c + 1 < w {
                        relax(p, p + 1, &mut dist, &mut hi, &mut lo);
                    }
                }
            }
        }
    }
    Ok(dist)
}

/// Saliency map: barrier distance to the image border scaled by its maximum.
pub fn compute_saliency_mbd(img: &GrayImage, passes: usize) -> Result<PriorMap> {
    let d = mbd_distances(img, passes)?;
    Ok(PriorMap::normalized_by_max(img.width(), img.height(), &d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_all_zero() {
        let img = GrayImage::from_fn(10, 8, |_, _| 77.0);
        let m = compute_saliency_mbd(&img, 4).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn border_ring_is_zero() {
        let img = GrayImage::from_fn(12, 9, |r, c| ((r * 31 + c * 17) % 256) as f32);
        let m = compute_saliency_mbd(&img, 4).unwrap();
        for r in 0..9 {
            for c in 0..12 {
                if r == 0 || c == 0 || r == 8 || c == 11 {
                    assert_eq!(m.at(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_tiny_images_and_bad_pass_counts() {
        let img = GrayImage::from_fn(2, 5, |_, _| 0.0);
        assert!(compute_saliency_mbd(&img, 4).is_err());
        let img = GrayImage::from_fn(5, 5, |_, _| 0.0);
        assert!(compute_saliency_mbd(&img, 3).is_err());
        assert!(compute_saliency_mbd(&img, 0).is_err());
    }

    #[test]
    fn more_passes_never_increase_distance() {
        let img = GrayImage::from_fn(20, 17, |r, c| (((r * 7) ^ (c * 13)) % 200) as f32);
        let mut prev = mbd_distances(&img, 2).unwrap();
        for passes in [4, 6, 8] {
            let d = mbd_distances(&img, passes).unwrap();
            assert!(d.iter().zip(&prev).all(|(a, b)| a <= b));
            prev = d;
        }
    }
}
