//! Correlation statistics, evaluation reports and patch map emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::normalize_weights;
use crate::network::{ForwardOutput, NetworkConfig};
use crate::params::ParameterSet;
use crate::trainer::predict_scores;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!(
            "correlation of {} and {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Invalid(format!(
            "correlation needs n >= 3, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("correlation input is not finite".into()));
    }
    Ok(())
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid(
            "correlation undefined for a constant vector".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson of average ranks).
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_raw(&average_ranks(x), &average_ranks(y))
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_raw(x, y)
}

/// Kendall tau-b.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let (a, b) = ((conc + disc + tx) as f64, (conc + disc + ty) as f64);
    if a == 0.0 || b == 0.0 {
        return Err(Error::Invalid(
            "Kendall tau undefined for an all-tied vector".into(),
        ));
    }
    Ok(((conc - disc) as f64 / (a * b).sqrt()).clamp(-1.0, 1.0))
}

/// `b2 + (b1 - b2) / (1 + exp(-(x - b3) / b4))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Logistic4(pub [f64; 4]);

impl Logistic4 {
    pub fn eval(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.0;
        b2 + (b1 - b2) / (1.0 + (-(x - b3) / b4).exp())
    }

    fn jacobian_row(&self, x: f64) -> [f64; 4] {
        let [b1, b2, b3, b4] = self.0;
        let s = 1.0 / (1.0 + (-(x - b3) / b4).exp());
        let ds = (b1 - b2) * s * (1.0 - s);
        [s, 1.0 - s, -ds / b4, -ds * (x - b3) / (b4 * b4)]
    }

    /// Least-squares fit of `y ~ f(x)` by Levenberg-Marquardt.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check_pair(x, y)?;
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let (lo, hi) = (
            y.iter().copied().fold(f64::INFINITY, f64::min),
            y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        let mut p = Logistic4([hi, lo, mean, if sd > 0.0 { sd } else { 1.0 }]);
        let sse = |p: &Logistic4| {
            x.iter()
                .zip(y)
                .map(|(a, b)| (b - p.eval(*a)).powi(2))
                .sum::<f64>()
        };
        let mut err = sse(&p);
        let mut lambda = 1e-3;
        for _ in 0..200 {
            let mut jtj = [[0.0; 4]; 4];
            let mut jtr = [0.0; 4];
            for (&a, &b) in x.iter().zip(y) {
                let j = p.jacobian_row(a);
                let r = b - p.eval(a);
                for u in 0..4 {
                    jtr[u] += j[u] * r;
                    for v in 0..4 {
                        jtj[u][v] += j[u] * j[v];
                    }
                }
            }
            let mut improved = false;
            while lambda < 1e12 {
                let mut m = jtj;
                for (u, row) in m.iter_mut().enumerate() {
                    row[u] += lambda * (1.0 + jtj[u][u]);
                }
                if let Some(d) = solve4(m, jtr) {
                    let mut q = p;
                    q.0.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    let e = sse(&q);
                    if e.is_finite() && q.0[3] != 0.0 && e < err {
                        let done = err - e < 1e-14 * (1.0 + err);
                        p = q;
                        err = e;
                        lambda = (lambda * 0.3).max(1e-12);
                        improved = !done;
                        break;
                    }
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        Ok(p)
    }
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for c in 0..4 {
        let piv = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..4 {
            let f = a[r][c] / a[c][c];
            let pivot_row = a[c];
            for (x, p) in a[r][c..].iter_mut().zip(&pivot_row[c..]) {
                *x -= f * p;
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Pearson correlation after mapping `pred` through a fitted 4-parameter logistic.
pub fn plcc_logistic(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let f = Logistic4::fit(pred, truth)?;
    let mapped: Vec<f64> = pred.iter().map(|&v| f.eval(v)).collect();
    plcc(&mapped, truth)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlations {
    pub srcc: f64,
    pub plcc: f64,
    pub krcc: f64,
    pub n: usize,
}

impl Correlations {
    pub fn compute(pred: &[f64], truth: &[f64], logistic_fit: bool) -> Result<Self> {
        Ok(Self {
            srcc: srcc(pred, truth)?,
            plcc: if logistic_fit {
                plcc_logistic(pred, truth)?
            } else {
                plcc(pred, truth)?
            },
            krcc: krcc(pred, truth)?,
            n: pred.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: Correlations,
    /// Per distortion type; `None` where the subset is too small or constant.
    pub per_type: BTreeMap<String, Option<Correlations>>,
}

impl EvalReport {
    pub fn from_scores(
        pred: &[f64],
        truth: &[f64],
        types: &[String],
        logistic_fit: bool,
    ) -> Result<Self> {
        let overall = Correlations::compute(pred, truth, logistic_fit)?;
        let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for ((p, t), ty) in pred.iter().zip(truth).zip(types) {
            let g = groups.entry(ty.as_str()).or_default();
            g.0.push(*p);
            g.1.push(*t);
        }
        let per_type = groups
            .into_iter()
            .map(|(k, (p, t))| {
                (
                    k.to_string(),
                    Correlations::compute(&p, &t, logistic_fit).ok(),
                )
            })
            .collect();
        Ok(Self { overall, per_type })
    }

    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>5} {:>8} {:>8} {:>8}",
            "subset", "n", "SRCC", "PLCC", "KRCC"
        );
        let row = |s: &mut String, name: &str, c: &Correlations| {
            let _ = writeln!(
                s,
                "{name:<16} {:>5} {:>8.4} {:>8.4} {:>8.4}",
                c.n, c.srcc, c.plcc, c.krcc
            );
        };
        row(&mut s, "all", &self.overall);
        for (k, c) in &self.per_type {
            match c {
                Some(c) => row(&mut s, k, c),
                None => {
                    let _ = writeln!(s, "{k:<16} {:>5} {:>8} {:>8} {:>8}", "-", "-", "-", "-");
                }
            }
        }
        s
    }

    /// `key: value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let c = &self.overall;
        let _ = writeln!(
            s,
            "n: {}\nsrcc: {}\nplcc: {}\nkrcc: {}",
            c.n, c.srcc, c.plcc, c.krcc
        );
        for (k, c) in &self.per_type {
            if let Some(c) = c {
                let _ = writeln!(
                    s,
                    "{k}.n: {}\n{k}.srcc: {}\n{k}.plcc: {}\n{k}.krcc: {}",
                    c.n, c.srcc, c.plcc, c.krcc
                );
            }
        }
        s
    }
}

/// Predicts every record with exhaustive tiling and correlates with ground truth.
pub fn evaluate(
    cfg: &NetworkConfig,
    params: &ParameterSet,
    records: &[&ImageRecord],
    logistic_fit: bool,
    exec: Exec,
) -> Result<(EvalReport, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    let pred = predict_scores(cfg, params, records, exec)?;
    let truth: Vec<f64> = records.iter().map(|r| r.score).collect();
    let types: Vec<String> = records.iter().map(|r| r.distortion_type.clone()).collect();
    Ok((
        EvalReport::from_scores(&pred, &truth, &types, logistic_fit)?,
        pred,
    ))
}

/// 8-bit patch maps for a tiled forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMaps {
    pub width: usize,
    pub height: usize,
    pub quality: Vec<u8>,
    pub weight: Vec<u8>,
}

fn to_gray(v: &[f64]) -> Vec<u8> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter()
        .map(|&x| {
            if hi > lo {
                (255.0 * (x - lo) / (hi - lo)).round() as u8
            } else {
                128
            }
        })
        .collect()
}

/// Paints each tile with its quality and its normalized weight, both
/// min-max scaled to `0..=255` (uniform 128 when all values are equal).
pub fn emit_patch_maps(
    out: &ForwardOutput,
    image_height: usize,
    image_width: usize,
) -> Result<PatchMaps> {
    let p = out.patch_size;
    let (rows, cols) = (image_height / p, image_width / p);
    let expected: Vec<(usize, usize)> = (0..rows * cols)
        .map(|i| ((i / cols) * p, (i % cols) * p))
        .collect();
    if p == 0 || out.origins != expected {
        return Err(Error::Invalid(
            "patch maps need the exhaustive row-major tiling of the image".into(),
        ));
    }
    let q = to_gray(&out.qualities);
    let w = to_gray(&normalize_weights(&out.weights)?);
    let (h, wd) = (rows * p, cols * p);
    let paint = |tiles: &[u8]| -> Vec<u8> {
        (0..h * wd)
            .map(|i| tiles[(i / wd / p) * cols + (i % wd) / p])
            .collect()
    };
    Ok(PatchMaps {
        width: wd,
        height: h,
        quality: paint(&q),
        weight: paint(&w),
    })
}
