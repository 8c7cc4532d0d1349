//! WebAssembly bindings for the browser demo in `www/`.
//!
//! All images are 64×64 RGBA buffers that JS copies straight into `ImageData`.

use kseg::kspace::{lines_for, sample_mask, undersample, zero_fill_recon, B0Params, UndersampleConfig};
use kseg::phantom::{generate_phantom, CineScan, PhantomParams};
use kseg::viz::{grayscale, overlay, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const SIZE: usize = 64;
pub const FRAMES: usize = 8;

fn phantom(seed: u32, contraction: f64) -> Result<CineScan, JsError> {
    let params = PhantomParams {
        contraction_fraction: contraction,
        seed: seed as u64,
        ..Default::default()
    };
    Ok(generate_phantom(&params)?)
}

fn check_frame(frame: u32) -> Result<usize, JsError> {
    let f = frame as usize;
    if f >= FRAMES {
        return Err(JsError::new(&format!("frame must be below {FRAMES}")));
    }
    Ok(f)
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.data.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

#[wasm_bindgen]
pub fn frame_count() -> u32 {
    FRAMES as u32
}

/// Phantom frame with the label overlay at `opacity`.
#[wasm_bindgen]
pub fn phantom_frame(seed: u32, frame: u32, contraction: f64, opacity: f64) -> Result<Vec<u8>, JsError> {
    let f = check_frame(frame)?;
    let scan = phantom(seed, contraction)?;
    let alpha = vec![opacity.clamp(0.0, 1.0); SIZE * SIZE];
    Ok(rgba(&overlay(scan.image_frame(f), scan.label_frame(f), Some(&alpha), SIZE, SIZE)))
}

/// Zero-filled reconstruction beside the log-magnitude spectrum of the kept lines.
///
/// Returns a 128×64 RGBA buffer.
#[wasm_bindgen]
pub fn undersampled_view(seed: u32, frame: u32, acceleration: f64, sigma_b0: f64) -> Result<Vec<u8>, JsError> {
    let f = check_frame(frame)?;
    if !(acceleration >= 1.0) || !(sigma_b0 >= 0.0) {
        return Err(JsError::new("acceleration must be >= 1 and B0 spread >= 0"));
    }
    let scan = phantom(seed, 0.3)?;
    let cfg = UndersampleConfig {
        acceleration,
        b0: B0Params {
            sigma_ramp: sigma_b0,
            sigma_offset: 5.0 * sigma_b0,
        },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 ^ 0x5eed);
    let (samples, _) = undersample(&scan, &cfg, &mut rng)?;
    let zf = zero_fill_recon(&samples, FRAMES, SIZE, SIZE)?;
    let mut spectrum = vec![0.0; SIZE * SIZE];
    for s in samples.samples.iter().filter(|s| s.t as usize == f) {
        let m = (s.re * s.re + s.im * s.im).sqrt();
        spectrum[s.ky as usize * SIZE + s.kx as usize] = (1.0 + 1e4 * m).ln() / (1.0 + 1e4f64).ln();
    }
    let left = grayscale(&zf[f * SIZE * SIZE..(f + 1) * SIZE * SIZE], SIZE, SIZE);
    let right = grayscale(&spectrum, SIZE, SIZE);
    Ok(rgba(&RgbImage::hconcat(&[left, right], 0)))
}

/// How often each phase-encode line is kept over `draws` random masks.
#[wasm_bindgen]
pub fn line_histogram(acceleration: f64, sigma_lines: f64, draws: u32, seed: u32) -> Result<Vec<u32>, JsError> {
    let mut counts = vec![0u32; SIZE];
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    for _ in 0..draws {
        for line in sample_mask(SIZE, acceleration, sigma_lines, &mut rng)? {
            counts[line] += 1;
        }
    }
    Ok(counts)
}

/// Lines kept per frame at `acceleration`.
#[wasm_bindgen]
pub fn lines_kept(acceleration: f64) -> u32 {
    lines_for(SIZE, acceleration.max(1.0)) as u32
}
