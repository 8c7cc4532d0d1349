//! Single-coil Cartesian MR forward model.
//!
//! Spectra are centred (zero frequency at `(H/2, W/2)`) and unitary, so
//! Parseval holds exactly. Phase-encode lines are rows of the spectrum.

use crate::phantom::CineScan;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KSpaceError {
    #[error("acceleration must be a finite value >= 1, got {0}")]
    InvalidAcceleration(f64),
    #[error("line spread must be finite and non-negative, got {0}")]
    InvalidSpread(f64),
    #[error("sample ({ky}, {kx}, t={t}) lies outside a {frames}x{height}x{width} grid")]
    IndexOutOfRange {
        ky: u32,
        kx: u32,
        t: u32,
        frames: usize,
        height: usize,
        width: usize,
    },
    #[error("expected {expected} values for a {height}x{width} frame, got {got}")]
    FrameSize {
        height: usize,
        width: usize,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, KSpaceError>;

fn check_frame(len: usize, h: usize, w: usize) -> Result<()> {
    if len != h * w {
        return Err(KSpaceError::FrameSize {
            height: h,
            width: w,
            expected: h * w,
            got: len,
        });
    }
    Ok(())
}

/// In-place 1D DFT along a strided lane. `sign` is −1 for forward, +1 for inverse.
fn dft_lane(buf: &mut [Complex64], sign: f64, scratch: &mut Vec<Complex64>) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, sign);
        return;
    }
    scratch.clear();
    scratch.extend_from_slice(buf);
    for (k, out) in buf.iter_mut().enumerate() {
        *out = scratch
            .iter()
            .enumerate()
            .map(|(j, v)| v * Complex64::from_polar(1.0, sign * 2.0 * PI * ((j * k) % n) as f64 / n as f64))
            .sum();
    }
}

/// Iterative Cooley-Tukey, unnormalized.
fn radix2(buf: &mut [Complex64], sign: f64) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = Complex64::from_polar(1.0, sign * 2.0 * PI / len as f64);
        for chunk in buf.chunks_exact_mut(len) {
            let (lo, hi) = chunk.split_at_mut(len / 2);
            let mut tw = Complex64::new(1.0, 0.0);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let t = *b * tw;
                *b = *a - t;
                *a += t;
                tw *= step;
            }
        }
        len <<= 1;
    }
}

/// Moves index `i` of a length-`n` axis to `(i + shift) mod n`.
fn roll2(data: &[Complex64], h: usize, w: usize, sy: usize, sx: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for y in 0..h {
        let ny = (y + sy) % h;
        for x in 0..w {
            out[ny * w + (x + sx) % w] = data[y * w + x];
        }
    }
    out
}

fn fft2_raw(data: &mut [Complex64], h: usize, w: usize, sign: f64) {
    let mut scratch = Vec::new();
    for row in data.chunks_exact_mut(w) {
        dft_lane(row, sign, &mut scratch);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        dft_lane(&mut col, sign, &mut scratch);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= norm);
}

/// Unitary centred 2D DFT. Radix-2 for power-of-two sides, direct DFT otherwise.
pub fn fft2_centered(frame: &[Complex64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    check_frame(frame.len(), h, w)?;
    // ifftshift: centre pixel to the origin
    let mut buf = roll2(frame, h, w, h - h / 2, w - w / 2);
    fft2_raw(&mut buf, h, w, -1.0);
    Ok(roll2(&buf, h, w, h / 2, w / 2))
}

pub fn ifft2_centered(spectrum: &[Complex64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    check_frame(spectrum.len(), h, w)?;
    let mut buf = roll2(spectrum, h, w, h - h / 2, w - w / 2);
    fft2_raw(&mut buf, h, w, 1.0);
    Ok(roll2(&buf, h, w, h / 2, w / 2))
}

pub fn real_to_complex(frame: &[f64]) -> Vec<Complex64> {
    frame.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Standard deviations of the random linear B0 phase ramp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct B0Params {
    /// Std of the ramp slopes `a`, `b` in radians per pixel.
    pub sigma_ramp: f64,
    /// Std of the constant phase `c` in radians.
    pub sigma_offset: f64,
}

impl Default for B0Params {
    fn default() -> Self {
        Self {
            sigma_ramp: 0.1,
            sigma_offset: 0.5,
        }
    }
}

impl B0Params {
    pub const NONE: Self = Self {
        sigma_ramp: 0.0,
        sigma_offset: 0.0,
    };

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> B0Phase {
        let mut gauss = |sigma: f64| {
            if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("positive std").sample(rng)
            } else {
                0.0
            }
        };
        let a = gauss(self.sigma_ramp);
        let b = gauss(self.sigma_ramp);
        let c = gauss(self.sigma_offset);
        B0Phase { a, b, c }
    }
}

/// Phase `φ(x, y) = a·x̄ + b·ȳ + c` over centred pixel coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct B0Phase {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn apply_phase(frame: &[f64], h: usize, w: usize, phase: &B0Phase) -> Result<Vec<Complex64>> {
    check_frame(frame.len(), h, w)?;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let yc = y as f64 - (h / 2) as f64;
        for x in 0..w {
            let xc = x as f64 - (w / 2) as f64;
            let phi = phase.a * xc + phase.b * yc + phase.c;
            out.push(Complex64::from_polar(1.0, phi) * frame[y * w + x]);
        }
    }
    Ok(out)
}

/// Draws a fresh phase ramp and applies it; magnitude is preserved pointwise.
pub fn apply_b0<R: Rng + ?Sized>(
    frame: &[f64],
    h: usize,
    w: usize,
    params: &B0Params,
    rng: &mut R,
) -> Result<(Vec<Complex64>, B0Phase)> {
    let phase = params.draw(rng);
    Ok((apply_phase(frame, h, w, &phase)?, phase))
}

/// Number of lines kept at acceleration `r`: `max(1, round(lines / r))`.
pub fn lines_for(lines: usize, acceleration: f64) -> usize {
    ((lines as f64 / acceleration).round() as usize).clamp(1, lines)
}

/// Picks phase-encode rows around the centre line `lines/2`.
///
/// The centre row is always first; further rows are `round(N(lines/2, σ))`
/// clamped to the grid, with duplicates redrawn. Returned sorted.
pub fn sample_mask<R: Rng + ?Sized>(
    lines: usize,
    acceleration: f64,
    sigma_lines: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(acceleration.is_finite() && acceleration >= 1.0) {
        return Err(KSpaceError::InvalidAcceleration(acceleration));
    }
    if !(sigma_lines.is_finite() && sigma_lines >= 0.0) {
        return Err(KSpaceError::InvalidSpread(sigma_lines));
    }
    let target = lines_for(lines, acceleration);
    if target == lines {
        return Ok((0..lines).collect());
    }
    let centre = lines / 2;
    let mut taken = vec![false; lines];
    taken[centre] = true;
    let mut count = 1;
    if sigma_lines > 0.0 {
        let normal = Normal::new(centre as f64, sigma_lines).expect("positive std");
        let max_draws = 10_000 * lines;
        for _ in 0..max_draws {
            if count == target {
                break;
            }
            let idx = normal.sample(rng).round().clamp(0.0, (lines - 1) as f64) as usize;
            if !taken[idx] {
                taken[idx] = true;
                count += 1;
            }
        }
    }
    // Degenerate spreads cannot reach enough rows; complete outward from the centre.
    let mut offset = 1;
    while count < target {
        for idx in [centre.checked_sub(offset), Some(centre + offset)].into_iter().flatten() {
            if idx < lines && !taken[idx] && count < target {
                taken[idx] = true;
                count += 1;
            }
        }
        offset += 1;
    }
    Ok((0..lines).filter(|&i| taken[i]).collect())
}

/// Selected phase-encode rows for each frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UndersamplingMask {
    pub height: usize,
    pub lines: Vec<Vec<usize>>,
}

impl UndersamplingMask {
    pub fn contains(&self, t: usize, ky: usize) -> bool {
        self.lines[t].binary_search(&ky).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KSample {
    pub ky: u32,
    pub kx: u32,
    pub t: u32,
    pub re: f64,
    pub im: f64,
}

/// The sparse set of acquired samples; order carries no meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceSampleSet {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<KSample>,
    /// Values were divided by this factor.
    pub normalization: f64,
}

impl KSpaceSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            samples: Vec::new(),
            normalization: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UndersampleConfig {
    pub acceleration: f64,
    /// Spread of the line distribution; `None` means `H/4`.
    pub sigma_lines: Option<f64>,
    pub b0: B0Params,
    /// Fresh mask per frame (default) or one mask shared by all frames.
    pub per_frame_masks: bool,
}

impl Default for UndersampleConfig {
    fn default() -> Self {
        Self {
            acceleration: 8.0,
            sigma_lines: None,
            b0: B0Params::default(),
            per_frame_masks: true,
        }
    }
}

impl UndersampleConfig {
    pub fn sigma_for(&self, height: usize) -> f64 {
        self.sigma_lines.unwrap_or(height as f64 / 4.0)
    }
}

/// Simulates one undersampled acquisition of a cine scan.
pub fn undersample<R: Rng + ?Sized>(
    scan: &CineScan,
    config: &UndersampleConfig,
    rng: &mut R,
) -> Result<(KSpaceSampleSet, UndersamplingMask)> {
    let (h, w) = (scan.height, scan.width);
    let sigma = config.sigma_for(h);
    let shared = if config.per_frame_masks {
        None
    } else {
        Some(sample_mask(h, config.acceleration, sigma, rng)?)
    };
    let mut samples = Vec::new();
    let mut masks = Vec::with_capacity(scan.frames);
    for t in 0..scan.frames {
        let (frame, _) = apply_b0(scan.image_frame(t), h, w, &config.b0, rng)?;
        let spectrum = fft2_centered(&frame, h, w)?;
        let lines = match &shared {
            Some(m) => m.clone(),
            None => sample_mask(h, config.acceleration, sigma, rng)?,
        };
        for &ky in &lines {
            for kx in 0..w {
                let v = spectrum[ky * w + kx];
                samples.push(KSample {
                    ky: ky as u32,
                    kx: kx as u32,
                    t: t as u32,
                    re: v.re,
                    im: v.im,
                });
            }
        }
        masks.push(lines);
    }
    let peak = samples
        .iter()
        .map(|s| s.re.hypot(s.im))
        .fold(0.0, f64::max);
    let normalization = if peak > 0.0 { peak } else { 1.0 };
    for s in &mut samples {
        s.re /= normalization;
        s.im /= normalization;
    }
    Ok((
        KSpaceSampleSet {
            frames: scan.frames,
            height: h,
            width: w,
            samples,
            normalization,
        },
        UndersamplingMask {
            height: h,
            lines: masks,
        },
    ))
}

/// Scatters the samples into zeroed spectra (rescaled by the stored
/// normalization), inverts each frame and returns magnitudes, `T×H×W`.
pub fn zero_fill_recon(samples: &KSpaceSampleSet, frames: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let mut grid = vec![Complex64::new(0.0, 0.0); frames * h * w];
    for s in &samples.samples {
        let (ky, kx, t) = (s.ky as usize, s.kx as usize, s.t as usize);
        if ky >= h || kx >= w || t >= frames {
            return Err(KSpaceError::IndexOutOfRange {
                ky: s.ky,
                kx: s.kx,
                t: s.t,
                frames,
                height: h,
                width: w,
            });
        }
        grid[(t * h + ky) * w + kx] = Complex64::new(s.re, s.im) * samples.normalization;
    }
    let mut out = Vec::with_capacity(frames * h * w);
    for spectrum in grid.chunks_exact(h * w) {
        out.extend(ifft2_centered(spectrum, h, w)?.iter().map(|v| v.norm()));
    }
    Ok(out)
}

/// Largest `|S(k) − conj(S(−k))|` over the frequencies whose mirror lies on the grid.
pub fn conjugate_symmetry_defect(spectrum: &[Complex64], h: usize, w: usize) -> f64 {
    let (cy, cx) = ((h / 2) as isize, (w / 2) as isize);
    let mut worst: f64 = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (my, mx) = (2 * cy - y, 2 * cx - x);
            if my < 0 || mx < 0 || my >= h as isize || mx >= w as isize {
                continue;
            }
            let a = spectrum[(y * w as isize + x) as usize];
            let b = spectrum[(my * w as isize + mx) as usize];
            worst = worst.max((a - b.conj()).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn constant_image_has_single_dc_peak() {
        let frame = vec![c(1.0); 64];
        let s = fft2_centered(&frame, 8, 8).unwrap();
        for (i, v) in s.iter().enumerate() {
            if i == 4 * 8 + 4 {
                assert!((v.norm() - 8.0).abs() < 1e-12);
            } else {
                assert!(v.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn centred_impulse_has_flat_spectrum() {
        let mut frame = vec![c(0.0); 64];
        frame[4 * 8 + 4] = c(1.0);
        let s = fft2_centered(&frame, 8, 8).unwrap();
        assert!(s.iter().all(|v| (v.norm() - 0.125).abs() < 1e-12));
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let s = vec![c(0.0); 16 * 8];
        assert!(ifft2_centered(&s, 16, 8).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn non_power_of_two_roundtrip() {
        let frame: Vec<_> = (0..6 * 5).map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let back = ifft2_centered(&fft2_centered(&frame, 6, 5).unwrap(), 6, 5).unwrap();
        let err = frame.iter().zip(&back).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn frame_size_is_checked() {
        assert!(matches!(
            fft2_centered(&[c(0.0); 10], 4, 4),
            Err(KSpaceError::FrameSize { .. })
        ));
    }

    #[test]
    fn zero_b0_keeps_real_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = vec![0.25, 0.5, 0.75, 1.0];
        let (out, _) = apply_b0(&frame, 2, 2, &B0Params::NONE, &mut rng).unwrap();
        for (o, f) in out.iter().zip(&frame) {
            assert_eq!(o.re, *f);
            assert_eq!(o.im, 0.0);
        }
    }

    #[test]
    fn global_pi_phase_negates() {
        let frame = vec![0.25, 0.5, 0.75, 1.0];
        let phase = B0Phase { a: 0.0, b: 0.0, c: PI };
        let out = apply_phase(&frame, 2, 2, &phase).unwrap();
        for (o, f) in out.iter().zip(&frame) {
            assert!((o.re + f).abs() < 1e-15 && o.im.abs() < 1e-15);
        }
    }

    #[test]
    fn mask_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample_mask(64, 1.0, 16.0, &mut rng).unwrap(), (0..64).collect::<Vec<_>>());
        for r in [2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0] {
            let m = sample_mask(64, r, 16.0, &mut rng).unwrap();
            assert_eq!(m.len(), lines_for(64, r));
            assert!(m.contains(&32));
            assert!(m.windows(2).all(|p| p[0] < p[1]));
        }
        assert!(sample_mask(64, 0.5, 16.0, &mut rng).is_err());
        assert!(sample_mask(64, f64::NAN, 16.0, &mut rng).is_err());
    }

    #[test]
    fn degenerate_spread_still_fills_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = sample_mask(64, 8.0, 0.0, &mut rng).unwrap();
        assert_eq!(m, (28..36).collect::<Vec<_>>());
    }

    #[test]
    fn sample_count_matches_masks() {
        let scan = generate_phantom(&PhantomParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (set, mask) = undersample(&scan, &UndersampleConfig::default(), &mut rng).unwrap();
        assert_eq!(set.len(), 8 * 8 * 64);
        let expected: usize = mask.lines.iter().map(|l| l.len() * 64).sum();
        assert_eq!(set.len(), expected);
        let peak = set.samples.iter().map(|s| s.re.hypot(s.im)).fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shared_mask_mode_repeats_lines() {
        let scan = generate_phantom(&PhantomParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let config = UndersampleConfig {
            per_frame_masks: false,
            ..Default::default()
        };
        let (_, mask) = undersample(&scan, &config, &mut rng).unwrap();
        assert!(mask.lines.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn zero_fill_edge_cases() {
        let empty = KSpaceSampleSet::empty(2, 4, 4);
        assert!(zero_fill_recon(&empty, 2, 4, 4).unwrap().iter().all(|v| *v == 0.0));

        let mut dc = KSpaceSampleSet::empty(1, 4, 4);
        dc.samples.push(KSample { ky: 2, kx: 2, t: 0, re: 1.0, im: 0.0 });
        let img = zero_fill_recon(&dc, 1, 4, 4).unwrap();
        assert!(img.iter().all(|v| (v - 0.25).abs() < 1e-15));

        dc.samples.push(KSample { ky: 4, kx: 0, t: 0, re: 1.0, im: 0.0 });
        assert!(matches!(
            zero_fill_recon(&dc, 1, 4, 4),
            Err(KSpaceError::IndexOutOfRange { .. })
        ));
    }
}
