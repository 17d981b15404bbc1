#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use salcar::priors::GrayImage;

pub const HALF_SIZE: usize = 128;

/// Left half flat mid-gray, right half a fine sinusoidal texture.
pub fn half_flat_half_texture() -> GrayImage {
    GrayImage::from_fn(HALF_SIZE, HALF_SIZE, |r, c| {
        if c < HALF_SIZE / 2 {
            128.0
        } else {
            let (x, y) = (c as f32, r as f32);
            128.0 + 60.0 * (x * 1.9).sin() * (y * 2.2).sin()
        }
    })
}

pub fn add_gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let noise: Vec<f32> = (0..img.pixels().len())
        .map(|_| normal.sample(&mut rng) as f32)
        .collect();
    GrayImage::from_fn(img.width(), img.height(), |r, c| {
        img.at(r, c) + noise[r * img.width() + c]
    })
}

/// Bright disc centred in a dark square, clear of the border.
pub fn centred_disc(size: usize, radius: f32) -> GrayImage {
    let mid = (size as f32 - 1.0) / 2.0;
    GrayImage::from_fn(size, size, |r, c| {
        let d = ((r as f32 - mid).powi(2) + (c as f32 - mid).powi(2)).sqrt();
        if d <= radius {
            200.0
        } else {
            20.0
        }
    })
}

/// Exact minimum barrier distance to the border.
///
/// For each candidate floor `l` (a pixel value), a minimax Dijkstra restricted
/// to pixels `>= l` gives the least achievable path maximum `B_l(p)`; the
/// exact distance is `min_l B_l(p) - l` over floors `l <= I(p)`.
pub fn exact_mbd(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let px: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
    let mut levels = px.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut best = vec![f64::INFINITY; w * h];
    for &floor in &levels {
        let mut cost = vec![f64::INFINITY; w * h];
        let mut heap = BinaryHeap::new();
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
                if border && px[p] >= floor {
                    cost[p] = px[p];
                    heap.push(Reverse((ordered(px[p]), p)));
                }
            }
        }
        while let Some(Reverse((k, p))) = heap.pop() {
            let cp = f64::from_bits(k);
            if cp > cost[p] {
                continue;
            }
            let (r, c) = (p / w, p % w);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(p - w);
            }
            if r + 1 < h {
                nbrs.push(p + w);
            }
            if c > 0 {
                nbrs.push(p - 1);
            }
            if c + 1 < w {
                nbrs.push(p + 1);
            }
            for q in nbrs {
                if px[q] < floor {
                    continue;
                }
                let nc = cp.max(px[q]);
                if nc < cost[q] {
                    cost[q] = nc;
                    heap.push(Reverse((ordered(nc), q)));
                }
            }
        }
        for p in 0..w * h {
            let (r, c) = (p / w, p % w);
            let border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            if border {
                best[p] = 0.0;
            } else if px[p] >= floor && cost[p].is_finite() {
                best[p] = best[p].min(cost[p] - floor);
            }
        }
    }
    best
}

// Non-negative f64 bit patterns order like the values.
fn ordered(x: f64) -> u64 {
    debug_assert!(x >= 0.0);
    x.to_bits()
}
