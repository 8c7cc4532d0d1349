//! Dice and Hausdorff scoring, and evaluation across acceleration factors.

use crate::kspace::{undersample, UndersampleConfig};
use crate::model::ModelParams;
use crate::phantom::{mix_seed, CineScan};
use crate::train::TrainError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("class {class} is empty in the {which} mask")]
    EmptyMask { class: u8, which: &'static str },
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice_score: label volumes differ in size");
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Pixels of `class` with at least one 4-neighbour outside it; the image
/// border counts as outside.
fn boundary(labels: &[u8], h: usize, w: usize, class: u8) -> Vec<bool> {
    let inside = |y: usize, x: usize| labels[y * w + x] == class;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !inside(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !inside(y - 1, x)
                || !inside(y + 1, x)
                || !inside(y, x - 1)
                || !inside(y, x + 1);
            out[y * w + x] = edge;
        }
    }
    out
}

/// Exact 1D squared distance transform of sampled function `f`
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        // z[0] is -inf, so k never underflows
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
fn squared_distance_map(seeds: &[bool], h: usize, w: usize) -> Vec<f64> {
    const FAR: f64 = 1e30;
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut f = vec![0.0; n];
    let mut col_out = vec![0.0; n];
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut col_out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    for row in grid.chunks_exact_mut(w) {
        f[..w].copy_from_slice(row);
        edt_1d(&f[..w], row, &mut v, &mut z);
    }
    grid
}

/// Symmetric boundary Hausdorff distance of one `H×W` frame, in pixels.
pub fn hausdorff_frame(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8) -> Result<f64, MetricError> {
    let bp = boundary(pred, h, w, class);
    let bg = boundary(gt, h, w, class);
    if !bp.contains(&true) {
        return Err(MetricError::EmptyMask { class, which: "predicted" });
    }
    if !bg.contains(&true) {
        return Err(MetricError::EmptyMask { class, which: "reference" });
    }
    let directed = |from: &[bool], to: &[bool]| {
        let dist = squared_distance_map(to, h, w);
        from.iter()
            .zip(&dist)
            .filter(|(&b, _)| b)
            .map(|(_, d)| *d)
            .fold(0.0, f64::max)
    };
    Ok(directed(&bp, &bg).max(directed(&bg, &bp)).sqrt())
}

/// Frame-averaged Hausdorff distance with the count of frames skipped
/// because one of the masks was empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HausdorffSummary {
    pub mean: Option<f64>,
    pub frames_used: usize,
    pub frames_missing: usize,
}

pub fn hausdorff(pred: &[u8], gt: &[u8], frames: usize, h: usize, w: usize, class: u8) -> HausdorffSummary {
    let n = h * w;
    let mut total = 0.0;
    let mut used = 0;
    for t in 0..frames {
        if let Ok(d) = hausdorff_frame(&pred[t * n..(t + 1) * n], &gt[t * n..(t + 1) * n], h, w, class) {
            total += d;
            used += 1;
        }
    }
    HausdorffSummary {
        mean: (used > 0).then(|| total / used as f64),
        frames_used: used,
        frames_missing: frames - used,
    }
}

/// Scores of one scan for each foreground class `1..C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanMetrics {
    pub dice: Vec<f64>,
    pub hausdorff: Vec<HausdorffSummary>,
}

impl ScanMetrics {
    pub fn compute(pred: &[u8], gt: &[u8], frames: usize, h: usize, w: usize, classes: usize) -> Self {
        let fg = 1..classes as u8;
        Self {
            dice: fg.clone().map(|c| dice_score(pred, gt, c)).collect(),
            hausdorff: fg.map(|c| hausdorff(pred, gt, frames, h, w, c)).collect(),
        }
    }

    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }

    /// Mean over the foreground classes that produced a distance.
    pub fn mean_hausdorff(&self) -> Option<f64> {
        let vals: Vec<f64> = self.hausdorff.iter().filter_map(|h| h.mean).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Mean and sample standard deviation; `None` for an empty list.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccelerationReport {
    pub acceleration: f64,
    pub scans: Vec<ScanMetrics>,
}

impl AccelerationReport {
    pub fn dice(&self, class_slot: Option<usize>) -> Option<(f64, f64)> {
        let v: Vec<f64> = self
            .scans
            .iter()
            .map(|s| class_slot.map_or_else(|| s.mean_dice(), |c| s.dice[c]))
            .collect();
        mean_std(&v)
    }

    pub fn hausdorff(&self, class_slot: Option<usize>) -> Option<(f64, f64)> {
        let v: Vec<f64> = self
            .scans
            .iter()
            .filter_map(|s| class_slot.map_or_else(|| s.mean_hausdorff(), |c| s.hausdorff[c].mean))
            .collect();
        mean_std(&v)
    }

    pub fn missing_frames(&self, class_slot: usize) -> usize {
        self.scans.iter().map(|s| s.hausdorff[class_slot].frames_missing).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub classes: usize,
    pub rows: Vec<AccelerationReport>,
}

fn class_name(classes: usize, slot: usize) -> String {
    match (classes, slot) {
        (3, 0) => "lv".into(),
        (3, 1) => "myo".into(),
        _ => format!("class{}", slot + 1),
    }
}

pub fn format_acceleration(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{}", r as u64)
    } else {
        format!("{r}")
    }
}

fn cell(v: Option<(f64, f64)>) -> String {
    match v {
        Some((m, s)) => format!("{m:.3} ± {s:.3}"),
        None => "n/a".into(),
    }
}

impl MetricReport {
    fn columns(&self) -> Vec<(String, Option<usize>)> {
        let mut cols: Vec<(String, Option<usize>)> =
            (0..self.classes - 1).map(|c| (class_name(self.classes, c), Some(c))).collect();
        cols.push(("mean".into(), None));
        cols
    }

    /// One row per acceleration, `mean ± std` cells with three decimals.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let mut header = vec!["Acc.".to_string()];
        header.extend(cols.iter().map(|(n, _)| format!("Dice {n}")));
        header.extend(cols.iter().map(|(n, _)| format!("HD {n}")));
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![format!("{}x", format_acceleration(row.acceleration))];
            line.extend(cols.iter().map(|(_, c)| cell(row.dice(*c))));
            line.extend(cols.iter().map(|(_, c)| cell(row.hausdorff(*c))));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            writeln!(out, "{}", cells.join(" | ").trim_end()).unwrap();
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                writeln!(out, "{}", rule.join("-+-")).unwrap();
            }
        }
        out
    }

    /// `key=value` lines with full precision, e.g. `acc8.lv.dice.mean=0.91…`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let acc = format!("acc{}", format_acceleration(row.acceleration));
            writeln!(out, "{acc}.scans={}", row.scans.len()).unwrap();
            for (name, slot) in self.columns() {
                for (metric, value) in [("dice", row.dice(slot)), ("hd", row.hausdorff(slot))] {
                    if let Some((m, s)) = value {
                        writeln!(out, "{acc}.{name}.{metric}.mean={m}").unwrap();
                        writeln!(out, "{acc}.{name}.{metric}.std={s}").unwrap();
                    }
                }
                if let Some(c) = slot {
                    writeln!(out, "{acc}.{name}.hd.missing_frames={}", row.missing_frames(c)).unwrap();
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub accelerations: Vec<f64>,
    /// Undersampling settings; `acceleration` is overridden per row.
    pub undersample: UndersampleConfig,
    pub seed: u64,
    pub query_chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            accelerations: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            undersample: UndersampleConfig::default(),
            seed: 0,
            query_chunk: crate::model::DEFAULT_QUERY_CHUNK,
        }
    }
}

/// Random stream used to undersample test scan `index`.
pub fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3));
    rng.set_stream(index as u64);
    rng
}

/// Predicts every scan at every acceleration with fixed evaluation masks.
pub fn evaluate(params: &ModelParams, scans: &[CineScan], config: &EvalConfig) -> Result<MetricReport, TrainError> {
    let classes = params.config().classes;
    let mut rows = Vec::with_capacity(config.accelerations.len());
    for &r in &config.accelerations {
        let us = UndersampleConfig {
            acceleration: r,
            ..config.undersample
        };
        let mut scores = Vec::with_capacity(scans.len());
        for (i, scan) in scans.iter().enumerate() {
            let (samples, _) = undersample(scan, &us, &mut eval_rng(config.seed, i))?;
            let seg = params.predict_segmentation(&samples, scan.frames, scan.height, scan.width, config.query_chunk)?;
            scores.push(ScanMetrics::compute(&seg.labels, &scan.labels, scan.frames, scan.height, scan.width, classes));
        }
        rows.push(AccelerationReport {
            acceleration: r,
            scans: scores,
        });
    }
    Ok(MetricReport { classes, rows })
}
