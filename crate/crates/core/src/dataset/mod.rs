//! Manifests, score normalization, reference-level splits and patch sampling.

mod manifest;
mod patches;
mod split;
pub mod synthetic;

pub use manifest::{
    normalize_scores, parse_manifest, read_manifest, write_manifest, ManifestEntry, Polarity,
    SCORE_MAX,
};
pub use patches::{
    prior_tensor, rescale_image, sample_training_quads, tile_validation_quads, PatchQuad,
    QuadSource, PATCH_SIZE,
};
pub use split::{parse_counts, ratio_counts, split_by_reference, Split, SplitPlan};

use crate::error::Result;
use crate::exec::Exec;
use crate::priors::{self, load_color, load_prior, ColorImage, JndModelParams, PriorMap};

/// One distorted image with everything needed to train on or score it.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub image_id: String,
    pub reference_id: String,
    pub distortion_type: String,
    /// Normalized ground truth in `[0, 9]`.
    pub score: f64,
    pub saliency: PriorMap,
    pub source: QuadSource,
}

impl ImageRecord {
    pub fn from_images(
        image_id: impl Into<String>,
        reference_id: impl Into<String>,
        distortion_type: impl Into<String>,
        score: f64,
        reference: &ColorImage,
        distorted: &ColorImage,
        saliency: Option<PriorMap>,
        jnd: Option<PriorMap>,
        jnd_params: &JndModelParams,
    ) -> Result<Self> {
        let saliency = match saliency {
            Some(s) => s,
            None => priors::compute_saliency_mbd(&reference.luma(), priors::DEFAULT_MBD_PASSES)?,
        };
        let jnd = match jnd {
            Some(j) => j,
            None => {
                priors::compute_jnd_probability(&reference.luma(), &distorted.luma(), jnd_params)?
            }
        };
        let source = QuadSource::new(reference, distorted, &saliency, &jnd)?;
        Ok(Self {
            image_id: image_id.into(),
            reference_id: reference_id.into(),
            distortion_type: distortion_type.into(),
            score,
            saliency,
            source,
        })
    }

    /// Loads images and any listed prior maps; missing priors are computed.
    pub fn load(entry: &ManifestEntry, score: f64, jnd_params: &JndModelParams) -> Result<Self> {
        let reference = load_color(&entry.reference_path)?;
        let distorted = load_color(&entry.distorted_path)?;
        let sal = entry.saliency_path.as_deref().map(load_prior).transpose()?;
        let jnd = entry.jnd_path.as_deref().map(load_prior).transpose()?;
        Self::from_images(
            &entry.image_id,
            entry.reference_id(),
            &entry.distortion_type,
            score,
            &reference,
            &distorted,
            sal,
            jnd,
            jnd_params,
        )
    }
}

/// Loads every manifest row with normalized scores.
pub fn load_records(
    entries: &[ManifestEntry],
    polarity: Polarity,
    jnd_params: &JndModelParams,
    exec: Exec,
) -> Result<Vec<ImageRecord>> {
    let raw: Vec<f64> = entries.iter().map(|e| e.raw_score).collect();
    let scores = normalize_scores(&raw, polarity)?;
    exec.try_map(entries, |i, e| ImageRecord::load(e, scores[i], jnd_params))
}

/// Records whose reference is assigned to `split`.
pub fn select<'a>(
    records: &'a [ImageRecord],
    plan: &SplitPlan,
    split: Split,
) -> Vec<&'a ImageRecord> {
    records
        .iter()
        .filter(|r| plan.get(&r.reference_id) == Some(split))
        .collect()
}
