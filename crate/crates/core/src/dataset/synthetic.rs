//! Synthetic blur-ladder datasets for smoke tests and overfit experiments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::manifest::{write_manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::priors::{gaussian_blur, save_color, ColorImage, GrayImage};
use crate::rng;

#[derive(Clone, Debug)]
pub struct LadderSpec {
    pub references: usize,
    /// Blur sigma per level for reference 0.
    pub sigmas: Vec<f64>,
    /// Added to every sigma per reference index so no two images share a sigma.
    pub sigma_offset: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for LadderSpec {
    fn default() -> Self {
        Self {
            references: 4,
            sigmas: vec![0.6, 1.4, 2.6],
            sigma_offset: 0.15,
            size: 64,
            seed: 2024,
        }
    }
}

impl LadderSpec {
    pub fn sigma(&self, reference: usize, level: usize) -> f64 {
        self.sigmas[level] + self.sigma_offset * reference as f64
    }

    /// Raw MOS, strictly decreasing in sigma.
    pub fn raw_score(&self, reference: usize, level: usize) -> f64 {
        100.0 - 25.0 * self.sigma(reference, level)
    }
}

/// Radial frequencies (radians per pixel) of the gratings, one per octave-ish
/// band, so every patch carries content that blur visibly attenuates.
const BANDS: [f32; 4] = [0.25, 0.5, 1.0, 1.8];

/// Randomly oriented gratings across [`BANDS`] plus a bright blob, per channel.
pub fn reference_image(size: usize, seed: u64) -> ColorImage {
    let mut rng = rng::stream(seed, &[0x1_3A6E]);
    let planes: Vec<GrayImage> = (0..3)
        .map(|_| {
            let waves: Vec<(f32, f32, f32, f32)> = BANDS
                .iter()
                .map(|&f| {
                    let f = f * rng.random_range(0.85..1.15);
                    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
                    (
                        f * theta.cos(),
                        f * theta.sin(),
                        rng.random_range(0.0..std::f32::consts::TAU),
                        rng.random_range(14.0..24.0),
                    )
                })
                .collect();
            let (br, bc) = (
                rng.random_range(0.25..0.75) * size as f32,
                rng.random_range(0.25..0.75) * size as f32,
            );
            let base: f32 = rng.random_range(100.0..150.0);
            let radius = size as f32 * 0.2;
            GrayImage::from_fn(size, size, |r, c| {
                let (y, x) = (r as f32, c as f32);
                let tex: f32 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin())
                    .sum();
                let d2 = (y - br).powi(2) + (x - bc).powi(2);
                base + tex + 40.0 * (-d2 / (2.0 * radius * radius)).exp()
            })
        })
        .collect();
    let rgb = (0..size * size)
        .flat_map(|i| {
            [
                planes[0].pixels()[i],
                planes[1].pixels()[i],
                planes[2].pixels()[i],
            ]
        })
        .collect();
    ColorImage::new(size, size, rgb).expect("planes are clamped")
}

/// Writes references, blurred versions and `manifest.csv` into `dir`.
pub fn write_blur_ladder(dir: &Path, spec: &LadderSpec) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for r in 0..spec.references {
        let reference = reference_image(spec.size, rng::derive_seed(spec.seed, &[r as u64]));
        let ref_name = format!("ref{r}.png");
        save_color(&reference, &dir.join(&ref_name))?;
        for l in 0..spec.sigmas.len() {
            let sigma = spec.sigma(r, l);
            let blurred = reference.map_planes(|p| gaussian_blur(p, sigma));
            let name = format!("ref{r}_blur{l}.png");
            save_color(&blurred, &dir.join(&name))?;
            entries.push(ManifestEntry {
                image_id: format!("ref{r}_blur{l}"),
                reference_path: ref_name.clone().into(),
                distorted_path: name.into(),
                saliency_path: None,
                jnd_path: None,
                raw_score: spec.raw_score(r, l),
                distortion_type: "blur".into(),
            });
        }
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
