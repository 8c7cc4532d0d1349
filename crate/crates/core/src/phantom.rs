//! Synthetic short-axis cine phantoms: a contracting blood pool inside a
//! myocardial ring over a smoothly textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::ops::Range;
use thiserror::Error;

pub const BACKGROUND: u8 = 0;
pub const BLOOD_POOL: u8 = 1;
pub const MYOCARDIUM: u8 = 2;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom parameters: {0}")]
    InvalidParams(String),
    #[error("split sizes {sizes:?} do not add up to {count} scans")]
    BadSplit { sizes: [usize; 3], count: usize },
    #[error("cannot generate an empty dataset")]
    EmptyDataset,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissueIntensities {
    pub background: f64,
    pub blood: f64,
    pub myocardium: f64,
}

impl Default for TissueIntensities {
    fn default() -> Self {
        Self {
            background: 0.35,
            blood: 0.85,
            myocardium: 0.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// `(y, x)` centre of the ventricle in pixel units.
    pub center: (f64, f64),
    /// Blood-pool radius at end-diastole.
    pub inner_radius: f64,
    /// Epicardial radius at end-diastole.
    pub outer_radius: f64,
    /// Ratio of the vertical to the horizontal semi-axis; area is kept at `πr²`.
    pub aspect: f64,
    pub contraction_fraction: f64,
    pub intensities: TissueIntensities,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 8,
            center: (32.0, 32.0),
            inner_radius: 10.0,
            outer_radius: 16.0,
            aspect: 1.0,
            contraction_fraction: 0.3,
            intensities: TissueIntensities::default(),
            texture_amplitude: 0.08,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |msg: String| Err(PhantomError::InvalidParams(msg));
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return bad(format!(
                "extents must be positive, got {}x{}x{}",
                self.frames, self.height, self.width
            ));
        }
        let half = self.height.min(self.width) as f64 / 2.0;
        if !(self.inner_radius > 0.0 && self.inner_radius < self.outer_radius && self.outer_radius < half) {
            return bad(format!(
                "need 0 < inner ({}) < outer ({}) < {half}",
                self.inner_radius, self.outer_radius
            ));
        }
        if !(self.contraction_fraction > 0.0 && self.contraction_fraction < 1.0) {
            return bad(format!(
                "contraction fraction {} outside (0, 1)",
                self.contraction_fraction
            ));
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return bad(format!("aspect {} must be positive", self.aspect));
        }
        if !(self.noise_std >= 0.0 && self.texture_amplitude >= 0.0) {
            return bad("noise and texture amplitudes must be non-negative".into());
        }
        if !(self.center.0.is_finite() && self.center.1.is_finite()) {
            return bad("centre must be finite".into());
        }
        Ok(())
    }

    /// Radius scale at frame `t`: `1 − c·sin²(πt/T)`.
    pub fn radius_scale(&self, t: f64) -> f64 {
        let s = (PI * t / self.frames as f64).sin();
        1.0 - self.contraction_fraction * s * s
    }
}

/// A 2D+time image with per-pixel class labels, stored `T×H×W` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CineScan {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
}

impl CineScan {
    pub fn voxels(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn image_frame(&self, t: usize) -> &[f64] {
        &self.image[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn label_frame(&self, t: usize) -> &[u8] {
        &self.labels[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    pub fn class_count(&self, t: usize, class: u8) -> usize {
        self.label_frame(t).iter().filter(|&&l| l == class).count()
    }
}

/// Label of pixel `(y, x)` for the ellipses scaled by `scale`.
fn classify(p: &PhantomParams, scale: f64, y: f64, x: f64) -> u8 {
    let sa = p.aspect.sqrt();
    let dy = (y - p.center.0) / sa;
    let dx = (x - p.center.1) * sa;
    let rho2 = dy * dy + dx * dx;
    let inner = p.inner_radius * scale;
    let outer = p.outer_radius * scale;
    if rho2 <= inner * inner {
        BLOOD_POOL
    } else if rho2 <= outer * outer {
        MYOCARDIUM
    } else {
        BACKGROUND
    }
}

pub fn generate_phantom(params: &PhantomParams) -> Result<CineScan, PhantomError> {
    params.validate()?;
    let (h, w, frames) = (params.height, params.width, params.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // Static low-frequency texture: three plane waves of 1-3 cycles per field of view.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let fy = rng.random_range(1..=3) as f64 * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let fx = rng.random_range(1..=3) as f64;
            (fy, fx, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let texture: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let s: f64 = waves
                .iter()
                .map(|(fy, fx, ph)| (2.0 * PI * (fy * y / h as f64 + fx * x / w as f64) + ph).sin())
                .sum();
            params.texture_amplitude * s / waves.len() as f64
        })
        .collect();

    let noise = Normal::new(0.0, params.noise_std.max(f64::MIN_POSITIVE))
        .expect("standard deviation is positive");
    let mut image = Vec::with_capacity(frames * h * w);
    let mut labels = Vec::with_capacity(frames * h * w);
    let tissue = params.intensities;
    for t in 0..frames {
        let scale = params.radius_scale(t as f64);
        for (i, tex) in texture.iter().enumerate() {
            let label = classify(params, scale, (i / w) as f64, (i % w) as f64);
            let base = match label {
                BLOOD_POOL => tissue.blood,
                MYOCARDIUM => tissue.myocardium,
                _ => tissue.background + tex,
            };
            let n = if params.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            labels.push(label);
            image.push((base + n).clamp(0.0, 1.0));
        }
    }
    Ok(CineScan {
        frames,
        height: h,
        width: w,
        image,
        labels,
    })
}

/// Per-scan parameter jitter used by [`generate_dataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    /// Maximum centre offset in pixels along each axis.
    pub center: f64,
    /// Relative radius jitter, e.g. 0.2 for ±20 %.
    pub radius: f64,
    /// Relative ring-thickness jitter.
    pub thickness: f64,
    pub contraction: f64,
    pub aspect: f64,
    pub intensity: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            center: 5.0,
            radius: 0.2,
            thickness: 0.2,
            contraction: 0.1,
            aspect: 0.15,
            intensity: 0.08,
        }
    }
}

/// SplitMix64 finalizer; derives independent child seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parameters of scan `index` in a dataset seeded with `seed`.
pub fn jittered_params(base: &PhantomParams, jitter: &Jitter, seed: u64, index: u64) -> PhantomParams {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
    let mut sym = |amp: f64| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
    let mut p = base.clone();
    p.center = (base.center.0 + sym(jitter.center), base.center.1 + sym(jitter.center));
    p.inner_radius = base.inner_radius * (1.0 + sym(jitter.radius));
    let thickness = (base.outer_radius - base.inner_radius) * (1.0 + sym(jitter.thickness));
    p.outer_radius = p.inner_radius + thickness;
    p.contraction_fraction = (base.contraction_fraction + sym(jitter.contraction)).clamp(0.05, 0.95);
    p.aspect = base.aspect * (1.0 + sym(jitter.aspect));
    let i = &base.intensities;
    p.intensities = TissueIntensities {
        background: (i.background + sym(jitter.intensity)).clamp(0.0, 1.0),
        blood: (i.blood + sym(jitter.intensity)).clamp(0.0, 1.0),
        myocardium: (i.myocardium + sym(jitter.intensity)).clamp(0.0, 1.0),
    };
    p.seed = mix_seed(seed ^ 0x00C0_FFEE, index);
    p
}

pub fn generate_dataset(
    count: usize,
    base: &PhantomParams,
    jitter: &Jitter,
    seed: u64,
) -> Result<Vec<CineScan>, PhantomError> {
    if count == 0 {
        return Err(PhantomError::EmptyDataset);
    }
    (0..count as u64)
        .map(|i| generate_phantom(&jittered_params(base, jitter, seed, i)))
        .collect()
}

/// Contiguous train/validation/test index ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_indices(count: usize, sizes: [usize; 3]) -> Result<Splits, PhantomError> {
    if sizes.iter().sum::<usize>() != count {
        return Err(PhantomError::BadSplit { sizes, count });
    }
    let a = sizes[0];
    let b = a + sizes[1];
    Ok(Splits {
        train: 0..a,
        val: a..b,
        test: b..count,
    })
}
