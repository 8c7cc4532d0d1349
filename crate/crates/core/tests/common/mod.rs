//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use kseg::tensor::{Tape, Tensor, Var};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a small floor so near-zero gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Scalar objective `Σ w ⊙ f(inputs)` with fixed random weights `w`.
fn objective<F>(build: &F, inputs: &[Tensor], weights: &Tensor, track: bool) -> (Tape, Vec<Var>, Var)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let root = tape.sum(prod);
    (tape, vars, root)
}

/// Max relative error between reverse-mode and central finite-difference
/// gradients over every input element.
pub fn gradient_check<F>(build: F, inputs: Vec<Tensor>, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let weights = random_tensor(&mut rng(seed ^ 0x5eed), &out_shape, -1.0, 1.0);
    let (mut tape, vars, root) = objective(&build, &inputs, &weights, true);
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]))
        .collect();

    let eval = |perturbed: &[Tensor]| {
        let (tape, _, root) = objective(&build, perturbed, &weights, false);
        tape.value(root).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Quadratic-cost centered 2D DFT with unitary scaling, straight from the
/// definition. Index `H/2, W/2` is the zero frequency on both sides.
pub fn brute_force_dft2(input: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    let norm = 1.0 / ((h * w) as f64).sqrt();
    for ky in 0..h {
        for kx in 0..w {
            let fy = ky as f64 - (h / 2) as f64;
            let fx = kx as f64 - (w / 2) as f64;
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let py = y as f64 - (h / 2) as f64;
                    let px = x as f64 - (w / 2) as f64;
                    let angle = -2.0 * std::f64::consts::PI * (fy * py / h as f64 + fx * px / w as f64);
                    acc += input[y * w + x] * Complex64::from_polar(1.0, angle);
                }
            }
            out[ky * w + kx] = acc * norm;
        }
    }
    out
}

/// Pairwise symmetric Hausdorff distance between two point sets.
pub fn brute_force_hausdorff(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&(ay, ax)| {
                to.iter()
                    .map(|&(by, bx)| {
                        let dy = ay as f64 - by as f64;
                        let dx = ax as f64 - bx as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

/// Mask pixels with at least one 4-neighbour outside the mask (image edge counts as outside).
pub fn boundary_points(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize]
    };
    let mut pts = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dy, dx)| !inside(y + dy, x + dx))
            {
                pts.push((y as usize, x as usize));
            }
        }
    }
    pts
}
