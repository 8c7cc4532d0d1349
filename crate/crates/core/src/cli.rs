//! The four commands behind the `kseg` binary. Each takes a resolved config
//! and writes into an output directory.

use crate::config::{ConfigError, RunConfig};
use crate::io::{self, Checkpoint, FormatError};
use crate::kspace::{undersample, zero_fill_recon, KSpaceError, UndersampleConfig};
use crate::metrics::{eval_rng, evaluate, format_acceleration, MetricReport};
use crate::model::{ModelError, ModelParams};
use crate::phantom::{generate_dataset, split_indices, CineScan, PhantomError};
use crate::train::{train, Adam, LossRecord, TrainError, TrainState};
use crate::viz::{grayscale, overlay, RgbImage};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TRAIN_FILE: &str = "train.kseg";
pub const VAL_FILE: &str = "val.kseg";
pub const TEST_FILE: &str = "test.kseg";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    KSpace(#[from] KSpaceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint does not match the config: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenDataSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub files: Vec<PathBuf>,
}

/// Writes `train.kseg`, `val.kseg` and `test.kseg`. Scans are drawn from one
/// seed sequence and split by index, so no two scans share a seed.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<GenDataSummary> {
    cfg.validate()?;
    let p = &cfg.phantom;
    let sizes = [p.train_count, p.val_count, p.test_count];
    let total: usize = sizes.iter().sum();
    let scans = generate_dataset(total, &cfg.phantom_params(), &cfg.jitter(), p.seed)?;
    let splits = split_indices(total, sizes)?;
    prepare_dir(out_dir)?;
    write_file(&out_dir.join(RESOLVED_CONFIG_FILE), cfg.resolved_json())?;
    let mut files = Vec::new();
    for (name, range) in [(TRAIN_FILE, splits.train), (VAL_FILE, splits.val), (TEST_FILE, splits.test)] {
        let path = out_dir.join(name);
        io::save_dataset(&path, &scans[range])?;
        files.push(path);
    }
    Ok(GenDataSummary {
        train: sizes[0],
        val: sizes[1],
        test: sizes[2],
        files,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub records: Vec<LossRecord>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn load_nonempty(path: &Path) -> Result<Vec<CineScan>> {
    let scans = io::load_dataset(path)?;
    if scans.is_empty() {
        return Err(CliError::Usage(format!("{}: dataset holds no scans", path.display())));
    }
    Ok(scans)
}

fn check_model(cfg: &RunConfig, params: &ModelParams) -> Result<()> {
    let expected = cfg.model_config();
    if *params.config() != expected {
        return Err(CliError::Mismatch(format!(
            "checkpoint model {:?}, config model {:?}",
            params.config(),
            expected
        )));
    }
    Ok(())
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,dice_loss,bce_loss,total\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.dice, r.bce, r.total);
    }
    out
}

/// Trains for `train.steps` steps, from scratch or from `resume`. Writes the
/// checkpoint (with optimizer state) and a loss CSV with one row per step run.
pub fn cmd_train(
    cfg: &RunConfig,
    data_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = load_nonempty(data_path)?;
    let tc = cfg.train_config();
    let mut state = match resume {
        None => TrainState::new(ModelParams::init(cfg.model_config(), tc.seed)?, tc.adam),
        Some(path) => {
            let ckpt = io::load_checkpoint(path)?;
            check_model(cfg, &ckpt.params)?;
            if ckpt.seed != tc.seed {
                return Err(CliError::Mismatch(format!(
                    "checkpoint seed {}, config seed {}",
                    ckpt.seed, tc.seed
                )));
            }
            let optimizer = ckpt
                .optimizer
                .unwrap_or_else(|| Adam::new(tc.adam, ckpt.params.tensors()));
            TrainState {
                params: ckpt.params,
                optimizer,
                step: ckpt.step,
            }
        }
    };
    prepare_dir(out_dir)?;
    write_file(&out_dir.join(RESOLVED_CONFIG_FILE), cfg.resolved_json())?;
    let start_step = state.step;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let save = |state: &TrainState| -> Result<()> {
        let ckpt = Checkpoint {
            params: state.params.clone(),
            step: state.step,
            seed: tc.seed,
            optimizer: Some(state.optimizer.clone()),
        };
        Ok(io::save_checkpoint(&checkpoint, &ckpt)?)
    };
    let every = cfg.train.checkpoint_every;
    let mut records = Vec::with_capacity(tc.steps);
    let mut remaining = tc.steps;
    while remaining > 0 {
        let chunk = if every == 0 { remaining } else { every.min(remaining) };
        let part = train(&mut state, &dataset, &crate::train::TrainConfig { steps: chunk, ..tc }, &mut on_step)?;
        records.extend(part);
        remaining -= chunk;
        if remaining > 0 {
            save(&state)?;
        }
    }
    save(&state)?;
    let loss_log = out_dir.join(LOSS_FILE);
    write_file(&loss_log, loss_csv(&records))?;
    Ok(TrainSummary {
        start_step,
        end_step: state.step,
        records,
        checkpoint,
        loss_log,
    })
}

/// Evaluates a checkpoint at every `eval.R_list` acceleration; writes a text
/// table and a key-value file.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data_path: &Path, out_dir: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    let ckpt = io::load_checkpoint(checkpoint)?;
    check_model(cfg, &ckpt.params)?;
    let scans = load_nonempty(data_path)?;
    let report = evaluate(&ckpt.params, &scans, &cfg.eval_config())?;
    prepare_dir(out_dir)?;
    write_file(&out_dir.join(RESOLVED_CONFIG_FILE), cfg.resolved_json())?;
    write_file(&out_dir.join(REPORT_TEXT_FILE), report.to_table())?;
    write_file(&out_dir.join(REPORT_KV_FILE), report.to_key_values())?;
    Ok(report)
}

/// One row of panels for a single acceleration.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelRow {
    pub acceleration: f64,
    pub ground_truth: RgbImage,
    pub prediction: RgbImage,
    pub zero_fill: RgbImage,
}

/// Panels for one frame of one scan at each acceleration. Masks match those
/// `cmd_eval` draws for the same scan index.
pub fn render_panels(cfg: &RunConfig, params: &ModelParams, scan: &CineScan, scan_index: usize, frame: usize) -> Result<Vec<PanelRow>> {
    if frame >= scan.frames {
        return Err(CliError::Usage(format!(
            "frame {frame} out of range (scan has {} frames)",
            scan.frames
        )));
    }
    let (h, w) = (scan.height, scan.width);
    let ec = cfg.eval_config();
    let image = scan.image_frame(frame);
    let truth = scan.label_frame(frame);
    let mut rows = Vec::with_capacity(ec.accelerations.len());
    for &r in &ec.accelerations {
        let us = UndersampleConfig {
            acceleration: r,
            ..ec.undersample
        };
        let (samples, _) = undersample(scan, &us, &mut eval_rng(ec.seed, scan_index))?;
        let seg = params.predict_segmentation(&samples, scan.frames, h, w, ec.query_chunk)?;
        let zf = zero_fill_recon(&samples, scan.frames, h, w)?;
        let n = h * w;
        let labels = &seg.labels[frame * n..(frame + 1) * n];
        let c = seg.classes;
        let confidence: Vec<f64> = (0..n)
            .map(|i| seg.probs[(frame * n + i) * c + labels[i] as usize])
            .collect();
        rows.push(PanelRow {
            acceleration: r,
            ground_truth: overlay(image, truth, None, h, w),
            prediction: overlay(image, labels, Some(&confidence), h, w),
            zero_fill: grayscale(&zf[frame * n..(frame + 1) * n], h, w),
        });
    }
    Ok(rows)
}

/// Writes `gt`, `pred`, `zerofill` and combined `row` PPMs per acceleration.
pub fn cmd_visualize(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_path: &Path,
    scan_index: usize,
    frame: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let ckpt = io::load_checkpoint(checkpoint)?;
    check_model(cfg, &ckpt.params)?;
    let scans = load_nonempty(data_path)?;
    let scan = scans.get(scan_index).ok_or_else(|| {
        CliError::Usage(format!(
            "scan index {scan_index} out of range (dataset has {} scans)",
            scans.len()
        ))
    })?;
    let rows = render_panels(cfg, &ckpt.params, scan, scan_index, frame)?;
    prepare_dir(out_dir)?;
    let mut written = Vec::new();
    for row in rows {
        let stem = format!("scan{scan_index}_t{frame}_R{}", format_acceleration(row.acceleration));
        let combined = RgbImage::hconcat(&[row.ground_truth.clone(), row.prediction.clone(), row.zero_fill.clone()], 2);
        for (suffix, img) in [
            ("gt", &row.ground_truth),
            ("pred", &row.prediction),
            ("zerofill", &row.zero_fill),
            ("row", &combined),
        ] {
            let path = out_dir.join(format!("{stem}_{suffix}.ppm"));
            write_file(&path, img.to_ppm())?;
            written.push(path);
        }
    }
    Ok(written)
}
