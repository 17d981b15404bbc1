//! CSV manifests and subjective-score normalization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub reference_path: PathBuf,
    pub distorted_path: PathBuf,
    #[serde(default)]
    pub saliency_path: Option<PathBuf>,
    #[serde(default)]
    pub jnd_path: Option<PathBuf>,
    pub raw_score: f64,
    #[serde(default)]
    pub distortion_type: String,
}

impl ManifestEntry {
    /// Reference images are identified by their path as written in the manifest.
    pub fn reference_id(&self) -> String {
        self.reference_path.to_string_lossy().into_owned()
    }

    fn validate(&self) -> Result<()> {
        if self.image_id.is_empty()
            || self.reference_path.as_os_str().is_empty()
            || self.distorted_path.as_os_str().is_empty()
        {
            return Err(Error::Invalid(format!(
                "manifest row `{}` has an empty id or path",
                self.image_id
            )));
        }
        if !self.raw_score.is_finite() {
            return Err(Error::Invalid(format!(
                "manifest row `{}` has non-finite score",
                self.image_id
            )));
        }
        Ok(())
    }

    fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.reference_path);
        fix(&mut self.distorted_path);
        if let Some(p) = self.saliency_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.jnd_path.as_mut() {
            fix(p);
        }
        self
    }
}

/// Parses manifest rows without touching the filesystem.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let e: ManifestEntry = row?;
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_manifest(&text)?
        .into_iter()
        .map(|e| e.resolve(base))
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    /// Higher raw score means better quality.
    Mos,
    /// Lower raw score means better quality.
    Dmos,
}

impl std::str::FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mos" => Ok(Polarity::Mos),
            "dmos" => Ok(Polarity::Dmos),
            _ => Err(Error::Config(format!("unknown score polarity `{s}`"))),
        }
    }
}

pub const SCORE_MAX: f64 = 9.0;

/// Linear min-max map onto `[0, 9]` with higher meaning better.
pub fn normalize_scores(raw: &[f64], polarity: Polarity) -> Result<Vec<f64>> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Invalid(
            "score normalization needs at least two distinct finite raw scores".into(),
        ));
    }
    Ok(raw
        .iter()
        .map(|&r| {
            let t = (r - lo) / (hi - lo);
            let t = match polarity {
                Polarity::Mos => t,
                Polarity::Dmos => 1.0 - t,
            };
            (SCORE_MAX * t).clamp(0.0, SCORE_MAX)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Vec<f64> {
        (0..=100).map(f64::from).collect()
    }

    #[test]
    fn mos_endpoints_and_midpoint() {
        let s = normalize_scores(&ramp(), Polarity::Mos).unwrap();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[100], 9.0);
        assert!((s[50] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn dmos_is_flipped() {
        let s = normalize_scores(&ramp(), Polarity::Dmos).unwrap();
        assert_eq!(s[0], 9.0);
        assert_eq!(s[100], 0.0);
    }

    #[test]
    fn degenerate_range_is_an_error() {
        assert!(normalize_scores(&[3.0, 3.0, 3.0], Polarity::Mos).is_err());
        assert!(normalize_scores(&[1.0], Polarity::Mos).is_err());
    }

    #[test]
    fn parses_optional_columns() {
        let text = "image_id,reference_path,distorted_path,raw_score,distortion_type\n\
                    a,\"r 1.png\",d1.png,3.5,blur\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m[0].reference_path, PathBuf::from("r 1.png"));
        assert_eq!(m[0].saliency_path, None);

        let text = "image_id,reference_path,distorted_path,saliency_path,jnd_path,raw_score,distortion_type\n\
                    a,r.png,d.png,,j.png,1,noise\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m[0].saliency_path, None);
        assert_eq!(m[0].jnd_path, Some(PathBuf::from("j.png")));
    }

    #[test]
    fn rejects_bad_rows() {
        let text = "image_id,reference_path,distorted_path,raw_score,distortion_type\n\
                    a,,d.png,1,x\n";
        assert!(parse_manifest(text).is_err());
        let text = "image_id,reference_path,distorted_path,raw_score,distortion_type\n\
                    a,r.png,d.png,NaN,x\n";
        assert!(parse_manifest(text).is_err());
    }
}
