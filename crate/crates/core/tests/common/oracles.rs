//! Definitional reference statistics, written for clarity rather than speed.

/// Rank by counting: `1 + #smaller + (#equal - 1) / 2`.
pub fn rank_by_counting(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let below = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Pearson r from raw moment sums.
pub fn pearson_sums(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some((n * sxy - sx * sy) / (vx * vy).sqrt())
}

/// Pearson r as covariance over the product of standard deviations.
pub fn pearson_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson_sums(&rank_by_counting(x), &rank_by_counting(y))
}

/// Kendall tau-b by enumerating every pair.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty, mut all) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            all += 1.0;
            let a = (x[i] - x[j]).signum() * if x[i] == x[j] { 0.0 } else { 1.0 };
            let b = (y[i] - y[j]).signum() * if y[i] == y[j] { 0.0 } else { 1.0 };
            if a == 0.0 {
                tx += 1.0;
            }
            if b == 0.0 {
                ty += 1.0;
            }
            if a * b > 0.0 {
                c += 1.0;
            } else if a * b < 0.0 {
                d += 1.0;
            }
        }
    }
    let denom = ((all - tx) * (all - ty)).sqrt();
    (denom > 0.0).then(|| (c - d) / denom)
}

/// `sum_{i<j} max(0, -(s_i - s_j)(f_i - f_j)) / (|s_i - s_j| + eps)`, by nested loops.
pub fn rank_loss_brute(s: &[f64], f: &[f64], eps: f64) -> (f64, usize) {
    let mut total = 0.0;
    let mut terms = 0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if i >= j {
                continue;
            }
            terms += 1;
            let ds = s[i] - s[j];
            let df = f[i] - f[j];
            if ds * df < 0.0 {
                total += df.abs() * ds.abs() / (ds.abs() + eps);
            }
        }
    }
    (total, terms)
}
