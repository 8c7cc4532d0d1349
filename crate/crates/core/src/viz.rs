//! Binary PPM panels: grayscale frames with class-coloured overlays.

use crate::phantom::{BLOOD_POOL, MYOCARDIUM};

pub const BLOOD_POOL_COLOR: [u8; 3] = [255, 0, 0];
pub const MYOCARDIUM_COLOR: [u8; 3] = [0, 0, 255];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `P6` encoding with maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Places images side by side with a `gap`-pixel black separator.
    ///
    /// # Panics
    /// If heights differ.
    pub fn hconcat(images: &[RgbImage], gap: usize) -> RgbImage {
        let height = images.first().map_or(0, |i| i.height);
        assert!(images.iter().all(|i| i.height == height), "heights differ");
        let width = images.iter().map(|i| i.width).sum::<usize>() + gap * images.len().saturating_sub(1);
        let mut data = vec![0u8; 3 * width * height];
        let mut x0 = 0;
        for img in images {
            for y in 0..height {
                let dst = 3 * (y * width + x0);
                let src = 3 * y * img.width;
                data[dst..dst + 3 * img.width].copy_from_slice(&img.data[src..src + 3 * img.width]);
            }
            x0 += img.width + gap;
        }
        RgbImage { width, height, data }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Maps `[0, 1]` to gray levels, clamping outside values.
pub fn grayscale(image: &[f64], height: usize, width: usize) -> RgbImage {
    assert_eq!(image.len(), height * width, "image size");
    let data = image.iter().flat_map(|&v| [to_byte(v); 3]).collect();
    RgbImage { width, height, data }
}

/// Scales by the maximum so the brightest pixel is white.
pub fn grayscale_autoscale(image: &[f64], height: usize, width: usize) -> RgbImage {
    let peak = image.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        let scaled: Vec<f64> = image.iter().map(|v| v / peak).collect();
        grayscale(&scaled, height, width)
    } else {
        grayscale(image, height, width)
    }
}

pub fn class_color(class: u8) -> Option<[u8; 3]> {
    match class {
        BLOOD_POOL => Some(BLOOD_POOL_COLOR),
        MYOCARDIUM => Some(MYOCARDIUM_COLOR),
        _ => None,
    }
}

/// Blends class colours over a grayscale frame; `alpha` defaults to 1 everywhere.
pub fn overlay(image: &[f64], labels: &[u8], alpha: Option<&[f64]>, height: usize, width: usize) -> RgbImage {
    assert_eq!(labels.len(), height * width, "label size");
    let mut out = grayscale(image, height, width);
    for (i, &label) in labels.iter().enumerate() {
        let Some(color) = class_color(label) else { continue };
        let a = alpha.map_or(1.0, |a| a[i].clamp(0.0, 1.0));
        for c in 0..3 {
            let base = out.data[3 * i + c] as f64;
            out.data[3 * i + c] = ((1.0 - a) * base + a * color[c] as f64).round() as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header() {
        let img = grayscale(&[0.0, 0.5, 1.0, 0.25, 0.75, 2.0], 2, 3);
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 18);
        assert_eq!(img.pixel(0, 2), [255; 3]);
        assert_eq!(img.pixel(1, 2), [255; 3]);
    }

    #[test]
    fn full_confidence_palette() {
        let img = overlay(&[0.5; 3], &[0, 1, 2], Some(&[1.0; 3]), 1, 3);
        assert_eq!(img.pixel(0, 0), [128; 3]);
        assert_eq!(img.pixel(0, 1), [255, 0, 0]);
        assert_eq!(img.pixel(0, 2), [0, 0, 255]);
    }

    #[test]
    fn partial_alpha_blends() {
        let img = overlay(&[0.0], &[1], Some(&[0.5]), 1, 1);
        assert_eq!(img.pixel(0, 0), [128, 0, 0]);
    }

    #[test]
    fn hconcat_layout() {
        let a = grayscale(&[1.0; 4], 2, 2);
        let b = grayscale(&[0.0; 2], 2, 1);
        let row = RgbImage::hconcat(&[a, b], 1);
        assert_eq!((row.width, row.height), (4, 2));
        assert_eq!(row.pixel(1, 1), [255; 3]);
        assert_eq!(row.pixel(1, 2), [0; 3]);
    }
}
