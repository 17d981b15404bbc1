//! MAE, saliency-guided and pairwise rank losses with their analytic gradients.

use crate::error::{Error, Result};
use crate::priors::PriorMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Stabilizer in the rank-loss denominator.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 1.0,
            epsilon: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma, self.epsilon]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `w_i / sum(w)`.
pub fn normalize_weights(w: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid(format!(
            "patch weight {bad} is not positive"
        )));
    }
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn square(origin: (usize, usize), side: usize) -> Self {
        Self {
            row: origin.0,
            col: origin.1,
            height: side,
            width: side,
        }
    }
}

/// Share of the map's total saliency inside each rectangle.
pub fn saliency_significance(map: &PriorMap, regions: &[Rect]) -> Result<Vec<f64>> {
    let total = map.total();
    if total <= 0.0 {
        return Err(Error::Invalid(
            "saliency map sums to zero; significance undefined".into(),
        ));
    }
    regions
        .iter()
        .map(|r| {
            if r.row + r.height > map.height() || r.col + r.width > map.width() {
                return Err(Error::Invalid(format!(
                    "region {r:?} exceeds {}x{} map",
                    map.width(),
                    map.height()
                )));
            }
            Ok(map.region_sum(r.row, r.col, r.height, r.width) / total)
        })
        .collect()
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!(
            "{what}: lengths {a} and {b} differ"
        )));
    }
    if a == 0 {
        return Err(Error::Invalid(format!("{what}: empty input")));
    }
    Ok(())
}

/// `mean |w_hat_i - v_i|`.
pub fn saliency_loss(w: &[f64], v: &[f64]) -> Result<f64> {
    check_len("saliency_loss", w.len(), v.len())?;
    let wh = normalize_weights(w)?;
    Ok(wh.iter().zip(v).map(|(a, b)| (a - b).abs()).sum::<f64>() / w.len() as f64)
}

/// `d saliency_loss / d w_i` (unnormalized weights).
pub fn saliency_loss_grad(w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_len("saliency_loss", w.len(), v.len())?;
    let wh = normalize_weights(w)?;
    let total: f64 = w.iter().sum();
    let n = w.len() as f64;
    let sg: Vec<f64> = wh.iter().zip(v).map(|(a, b)| sign(a - b)).collect();
    let mix: f64 = sg.iter().zip(&wh).map(|(s, a)| s * a).sum();
    Ok(sg.iter().map(|s| (s - mix) / (total * n)).collect())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `max(0, -(s_x - s_y)(f_x - f_y) / (|s_x - s_y| + eps))`.
pub fn pairwise_rank_loss(s_x: f64, s_y: f64, f_x: f64, f_y: f64, eps: f64) -> f64 {
    let (ds, df) = (s_x - s_y, f_x - f_y);
    if ds * df >= 0.0 {
        return 0.0;
    }
    -ds * df / (ds.abs() + eps)
}

/// `(d/d f_x, d/d f_y)` of [`pairwise_rank_loss`]; zero on the flat side of the hinge.
pub fn pairwise_rank_grad(s_x: f64, s_y: f64, f_x: f64, f_y: f64, eps: f64) -> (f64, f64) {
    let (ds, df) = (s_x - s_y, f_x - f_y);
    if ds * df >= 0.0 {
        return (0.0, 0.0);
    }
    let g = -ds / (ds.abs() + eps);
    (g, -g)
}

/// Every unordered pair `(i, j)`, `i < j`.
pub fn rank_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

pub fn batch_rank_loss(scores: &[f64], preds: &[f64], eps: f64) -> Result<f64> {
    check_len("batch_rank_loss", scores.len(), preds.len())?;
    if scores.len() < 2 {
        return Err(Error::Invalid("rank loss needs at least two images".into()));
    }
    Ok(rank_pairs(scores.len())
        .map(|(i, j)| pairwise_rank_loss(scores[i], scores[j], preds[i], preds[j], eps))
        .sum())
}

pub fn batch_rank_grad(scores: &[f64], preds: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_len("batch_rank_loss", scores.len(), preds.len())?;
    if scores.len() < 2 {
        return Err(Error::Invalid("rank loss needs at least two images".into()));
    }
    let mut g = vec![0.0; preds.len()];
    for (i, j) in rank_pairs(scores.len()) {
        let (gi, gj) = pairwise_rank_grad(scores[i], scores[j], preds[i], preds[j], eps);
        g[i] += gi;
        g[j] += gj;
    }
    Ok(g)
}

pub fn mae_loss(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check_len("mae_loss", preds.len(), truths.len())?;
    Ok(preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

pub fn mae_grad(preds: &[f64], truths: &[f64]) -> Result<Vec<f64>> {
    check_len("mae_loss", preds.len(), truths.len())?;
    let n = preds.len() as f64;
    Ok(preds
        .iter()
        .zip(truths)
        .map(|(p, t)| sign(p - t) / n)
        .collect())
}

pub fn total_loss(mae: f64, rank: f64, sal: f64, w: &LossWeights) -> f64 {
    w.alpha * mae + w.beta * rank + w.gamma * sal
}

/// Network outputs and targets for one image of a batch.
#[derive(Clone, Debug)]
pub struct ImageTerms {
    pub weights: Vec<f64>,
    pub qualities: Vec<f64>,
    /// Saliency significance of each patch.
    pub significance: Vec<f64>,
    pub truth: f64,
}

/// Loss components of one batch and their gradients w.r.t. every `w_i`, `q_i`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub mae: f64,
    pub rank: f64,
    pub sal: f64,
    pub total: f64,
    pub scores: Vec<f64>,
    pub d_weights: Vec<Vec<f64>>,
    pub d_qualities: Vec<Vec<f64>>,
}

/// Pools each image to `S_k`, then combines MAE over the batch, the rank
/// loss over all pairs and the saliency loss averaged over images.
pub fn batch_objective(images: &[ImageTerms], lw: &LossWeights) -> Result<Objective> {
    if images.len() < 2 {
        return Err(Error::Invalid(
            "a training batch needs at least two images".into(),
        ));
    }
    let mut scores = Vec::with_capacity(images.len());
    let mut norm = Vec::with_capacity(images.len());
    for im in images {
        check_len("image terms", im.weights.len(), im.qualities.len())?;
        check_len("image terms", im.weights.len(), im.significance.len())?;
        let wh = normalize_weights(&im.weights)?;
        scores.push(
            wh.iter()
                .zip(&im.qualities)
                .map(|(a, b)| a * b)
                .sum::<f64>(),
        );
        norm.push(wh);
    }
    let truths: Vec<f64> = images.iter().map(|i| i.truth).collect();
    let mae = mae_loss(&scores, &truths)?;
    let rank = batch_rank_loss(&truths, &scores, lw.epsilon)?;
    let k = images.len() as f64;
    let mut sal = 0.0;
    for im in images {
        sal += saliency_loss(&im.weights, &im.significance)? / k;
    }
    let total = total_loss(mae, rank, sal, lw);

    let gm = mae_grad(&scores, &truths)?;
    let gr = batch_rank_grad(&truths, &scores, lw.epsilon)?;
    let mut d_weights = Vec::with_capacity(images.len());
    let mut d_qualities = Vec::with_capacity(images.len());
    for (idx, im) in images.iter().enumerate() {
        let d_s = lw.alpha * gm[idx] + lw.beta * gr[idx];
        let wsum: f64 = im.weights.iter().sum();
        let gs = saliency_loss_grad(&im.weights, &im.significance)?;
        d_qualities.push(norm[idx].iter().map(|a| d_s * a).collect());
        d_weights.push(
            im.qualities
                .iter()
                .zip(&gs)
                .map(|(q, g)| d_s * (q - scores[idx]) / wsum + lw.gamma * g / k)
                .collect(),
        );
    }
    Ok(Objective {
        mae,
        rank,
        sal,
        total,
        scores,
        d_weights,
        d_qualities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[1.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(normalize_weights(&[2.0]).unwrap(), vec![1.0]);
        assert_eq!(normalize_weights(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert!(normalize_weights(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn significance_examples() {
        let u = PriorMap::new(8, 8, vec![0.5; 64]).unwrap();
        let v = saliency_significance(&u, &[Rect::square((2, 2), 2)]).unwrap();
        assert!((v[0] - 1.0 / 16.0).abs() < 1e-12);

        let mut hot = vec![0.0; 16];
        hot[5] = 1.0;
        let m = PriorMap::new(4, 4, hot).unwrap();
        let v =
            saliency_significance(&m, &[Rect::square((0, 0), 2), Rect::square((2, 2), 2)]).unwrap();
        assert_eq!(v, vec![1.0, 0.0]);
        assert!(saliency_significance(&PriorMap::zeros(4, 4), &[Rect::square((0, 0), 2)]).is_err());
        assert!(saliency_significance(&m, &[Rect::square((3, 3), 2)]).is_err());
    }

    #[test]
    fn saliency_loss_examples() {
        assert_eq!(saliency_loss(&[1.0, 1.0], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((saliency_loss(&[1.0, 1e-300], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((saliency_loss(&[1.0, 3.0], &[0.5, 0.5]).unwrap() - 0.25).abs() < 1e-12);
        assert!(saliency_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(pairwise_rank_loss(3.0, 1.0, 0.8, 0.2, 1e-6), 0.0);
        let l = pairwise_rank_loss(3.0, 1.0, 0.2, 0.8, 1e-6);
        assert!((l - 1.2 / (2.0 + 1e-6)).abs() < 1e-15);
        assert!(l < 0.6 && 0.6 - l < 1e-6);
        assert_eq!(pairwise_rank_loss(5.0, 1.0, 0.3, 0.3, 1e-6), 0.0);
        assert_eq!(
            batch_rank_loss(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 1e-6).unwrap(),
            0.0
        );
        assert_eq!(rank_pairs(4).count(), 6);
        assert!(batch_rank_loss(&[1.0], &[1.0], 1e-6).is_err());
    }

    #[test]
    fn mae_and_total_examples() {
        assert_eq!(mae_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mae_loss(&[5.0], &[4.5]).unwrap(), 0.5);
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w), 12.0);
        assert!((total_loss(0.5, 0.1, 0.2, &w) - 1.7).abs() < 1e-12);
    }
}
