//! Aligned patch quadruples (reference, distorted, saliency, JND).

use rand::Rng;

use crate::error::{Error, Result};
use crate::priors::{ColorImage, PriorMap};
use crate::rng;
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 32;

/// Maps `[0, 255]` samples to `[-0.5, 0.5]` as a planar `3 x H x W` tensor.
pub fn rescale_image(img: &ColorImage) -> Tensor {
    let (w, h) = (img.width(), img.height());
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (w * h), i % (w * h));
        img.rgb()[p * 3 + c] / 255.0 - 0.5
    })
}

pub fn prior_tensor(map: &PriorMap) -> Tensor {
    Tensor::new(&[1, map.height(), map.width()], map.values().to_vec())
        .expect("prior map dims are consistent")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchQuad {
    pub ref_patch: Tensor,
    pub dst_patch: Tensor,
    pub sal_patch: Tensor,
    pub jnd_patch: Tensor,
    /// Top-left corner as `(row, col)`.
    pub origin: (usize, usize),
}

impl PatchQuad {
    pub fn size(&self) -> usize {
        self.ref_patch.shape()[1]
    }
}

/// Full-image planes that quads are cut from.
#[derive(Clone, Debug)]
pub struct QuadSource {
    reference: Tensor,
    distorted: Tensor,
    saliency: Tensor,
    jnd: Tensor,
    height: usize,
    width: usize,
}

impl QuadSource {
    pub fn new(
        reference: &ColorImage,
        distorted: &ColorImage,
        saliency: &PriorMap,
        jnd: &PriorMap,
    ) -> Result<Self> {
        let dims = (reference.width(), reference.height());
        for (what, d) in [
            ("distorted image", (distorted.width(), distorted.height())),
            ("saliency map", (saliency.width(), saliency.height())),
            ("JND map", (jnd.width(), jnd.height())),
        ] {
            if d != dims {
                return Err(Error::Invalid(format!(
                    "{what} is {}x{}, reference is {}x{}",
                    d.0, d.1, dims.0, dims.1
                )));
            }
        }
        Ok(Self {
            reference: rescale_image(reference),
            distorted: rescale_image(distorted),
            saliency: prior_tensor(saliency),
            jnd: prior_tensor(jnd),
            height: dims.1,
            width: dims.0,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn check_fits(&self, patch: usize) -> Result<()> {
        if patch == 0 || self.height < patch || self.width < patch {
            return Err(Error::Invalid(format!(
                "{}x{} image is smaller than one {patch}x{patch} patch",
                self.width, self.height
            )));
        }
        Ok(())
    }

    fn crop(&self, t: &Tensor, (r0, c0): (usize, usize), patch: usize) -> Tensor {
        let ch = t.shape()[0];
        let mut out = Vec::with_capacity(ch * patch * patch);
        for c in 0..ch {
            for r in r0..r0 + patch {
                let start = (c * self.height + r) * self.width + c0;
                out.extend_from_slice(&t.data()[start..start + patch]);
            }
        }
        Tensor::new(&[ch, patch, patch], out).expect("crop dims")
    }

    /// Cuts all four patches at `origin`.
    pub fn cut(&self, origin: (usize, usize), patch: usize) -> Result<PatchQuad> {
        self.check_fits(patch)?;
        if origin.0 + patch > self.height || origin.1 + patch > self.width {
            return Err(Error::Invalid(format!(
                "patch origin {origin:?} out of bounds"
            )));
        }
        Ok(PatchQuad {
            ref_patch: self.crop(&self.reference, origin, patch),
            dst_patch: self.crop(&self.distorted, origin, patch),
            sal_patch: self.crop(&self.saliency, origin, patch),
            jnd_patch: self.crop(&self.jnd, origin, patch),
            origin,
        })
    }

    /// `n` quads at origins drawn uniformly from all in-bounds positions.
    pub fn sample(&self, n: usize, patch: usize, seed: u64) -> Result<Vec<PatchQuad>> {
        self.check_fits(patch)?;
        let mut rng = rng::stream(seed, &[]);
        (0..n)
            .map(|_| {
                let r = rng.random_range(0..=self.height - patch);
                let c = rng.random_range(0..=self.width - patch);
                self.cut((r, c), patch)
            })
            .collect()
    }

    /// Row-major grid of non-overlapping quads; remainder pixels are dropped.
    pub fn tile(&self, patch: usize) -> Result<Vec<PatchQuad>> {
        self.check_fits(patch)?;
        let (rows, cols) = (self.height / patch, self.width / patch);
        (0..rows * cols)
            .map(|i| self.cut(((i / cols) * patch, (i % cols) * patch), patch))
            .collect()
    }
}

pub fn sample_training_quads(
    reference: &ColorImage,
    distorted: &ColorImage,
    saliency: &PriorMap,
    jnd: &PriorMap,
    n: usize,
    seed: u64,
) -> Result<Vec<PatchQuad>> {
    QuadSource::new(reference, distorted, saliency, jnd)?.sample(n, PATCH_SIZE, seed)
}

pub fn tile_validation_quads(
    reference: &ColorImage,
    distorted: &ColorImage,
    saliency: &PriorMap,
    jnd: &PriorMap,
) -> Result<Vec<PatchQuad>> {
    QuadSource::new(reference, distorted, saliency, jnd)?.tile(PATCH_SIZE)
}
