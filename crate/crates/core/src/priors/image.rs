//! Image containers and PNG/BMP I/O.

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage as Luma8, ImageBuffer, RgbImage as Rgb8};

use crate::error::{Error, Result};

/// Single-channel luma image with samples in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Invalid(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=255.0).contains(*p)) {
            return Err(Error::Invalid(format!("pixel value {p} outside [0,255]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image from `f(row, col)`, clamping into `[0, 255]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let pixels = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c).clamp(0.0, 255.0))
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Interleaved RGB image with samples in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    rgb: Vec<f32>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || rgb.len() != 3 * width * height {
            return Err(Error::Invalid(format!(
                "{width}x{height} RGB image with {} samples",
                rgb.len()
            )));
        }
        if let Some(p) = rgb.iter().find(|p| !(0.0..=255.0).contains(*p)) {
            return Err(Error::Invalid(format!("sample value {p} outside [0,255]")));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn from_gray(g: &GrayImage) -> Self {
        Self {
            width: g.width,
            height: g.height,
            rgb: g.pixels.iter().flat_map(|&p| [p, p, p]).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[f32] {
        &self.rgb
    }

    pub fn sample(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.rgb[(row * self.width + col) * 3 + channel]
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> GrayImage {
        let pixels = self
            .rgb
            .chunks_exact(3)
            .map(|p| {
                if p[0] == p[1] && p[1] == p[2] {
                    p[0]
                } else {
                    (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 255.0)
                }
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Applies `f` to each channel plane independently.
    pub fn map_planes(&self, f: impl Fn(&GrayImage) -> GrayImage) -> ColorImage {
        let planes: Vec<GrayImage> = (0..3)
            .map(|c| GrayImage {
                width: self.width,
                height: self.height,
                pixels: self.rgb.iter().skip(c).step_by(3).copied().collect(),
            })
            .map(|p| f(&p))
            .collect();
        let rgb = (0..self.width * self.height)
            .flat_map(|i| {
                [
                    planes[0].pixels[i],
                    planes[1].pixels[i],
                    planes[2].pixels[i],
                ]
            })
            .collect();
        ColorImage {
            width: self.width,
            height: self.height,
            rgb,
        }
    }
}

/// Single-channel map with values in `[0, 1]` (saliency, JND probability, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl PriorMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Invalid(format!(
                "{width}x{height} map with {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("map value {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    /// Divides by the maximum so the peak becomes 1; an all-zero input stays zero.
    pub(crate) fn normalized_by_max(width: usize, height: usize, raw: &[f64]) -> Self {
        let max = raw.iter().copied().fold(0.0f64, f64::max);
        let values = if max > 0.0 {
            raw.iter()
                .map(|&v| ((v / max) as f32).clamp(0.0, 1.0))
                .collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Sum over the rectangle `[row, row+h) x [col, col+w)`.
    pub fn region_sum(&self, row: usize, col: usize, h: usize, w: usize) -> f64 {
        (row..row + h)
            .map(|r| {
                self.values[r * self.width + col..r * self.width + col + w]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn mean_where(&self, pred: impl Fn(usize, usize) -> bool) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                if pred(r, c) {
                    s += self.at(r, c) as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Quantizes to 8 bits (`round(255 v)`).
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    Ok(image::open(path)?)
}

/// Loads any 8-bit image as RGB.
pub fn load_color(path: &Path) -> Result<ColorImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let rgb = img.into_raw().into_iter().map(f32::from).collect();
    ColorImage::new(w as usize, h as usize, rgb)
}

/// Loads an 8-bit single-channel image as a map in `[0, 1]`.
pub fn load_prior(path: &Path) -> Result<PriorMap> {
    let img = open(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::Invalid(format!(
            "{}: expected 8-bit grayscale, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let values = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    PriorMap::new(w as usize, h as usize, values)
}

pub fn save_prior(map: &PriorMap, path: &Path) -> Result<()> {
    save_gray8(map.width, map.height, map.to_gray8(), path)
}

pub fn save_gray8(width: usize, height: usize, data: Vec<u8>, path: &Path) -> Result<()> {
    let buf: Luma8 = ImageBuffer::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Invalid("gray buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

pub fn save_color(img: &ColorImage, path: &Path) -> Result<()> {
    let data = img
        .rgb
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf: Rgb8 = ImageBuffer::from_raw(img.width as u32, img.height as u32, data)
        .ok_or_else(|| Error::Invalid("rgb buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}
