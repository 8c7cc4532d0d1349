//! Losses, Adam and the on-the-fly undersampling training loop.

use crate::kspace::{undersample, KSpaceError, KSpaceSampleSet, UndersampleConfig};
use crate::model::{ModelError, ModelParams, QuerySet};
use crate::phantom::{mix_seed, CineScan, BACKGROUND};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DICE_EPS: f64 = 1e-6;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    KSpace(#[from] KSpaceError),
    #[error("training needs at least one scan")]
    EmptyDataset,
    #[error("optimizer state does not match parameter {index}: {expected} vs {found} values")]
    StateMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn check_pair(t: &Tape, probs: Var, targets: Var, op: &'static str) -> Result<()> {
    if t.shape(probs) != t.shape(targets) || t.shape(probs).len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape(probs).to_vec(),
            rhs: t.shape(targets).to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `1 − mean_c (2Σpg + ε)/(Σp + Σg + ε)` over `n×C` probabilities.
pub fn soft_dice_loss(t: &mut Tape, probs: Var, targets: Var) -> Result<Var> {
    check_pair(t, probs, targets, "soft_dice_loss")?;
    let n = t.shape(probs)[0];
    let ones = t.constant(Tensor::ones(vec![1, n])?);
    let pg = t.mul(probs, targets)?;
    let inter = t.matmul(ones, pg)?;
    let sp = t.matmul(ones, probs)?;
    let sg = t.matmul(ones, targets)?;
    let num = t.scale(inter, 2.0);
    let num = t.add_scalar(num, DICE_EPS);
    let den = t.add(sp, sg)?;
    let den = t.add_scalar(den, DICE_EPS);
    let ratio = t.div(num, den)?;
    let mean = t.mean(ratio);
    let neg = t.scale(mean, -1.0);
    Ok(t.add_scalar(neg, 1.0))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(t: &mut Tape, probs: Var, targets: Var) -> Result<Var> {
    check_pair(t, probs, targets, "bce_loss")?;
    let p = t.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = t.log(p);
    let neg_p = t.scale(p, -1.0);
    let q = t.add_scalar(neg_p, 1.0);
    let log_q = t.log(q);
    let neg_t = t.scale(targets, -1.0);
    let not_t = t.add_scalar(neg_t, 1.0);
    let a = t.mul(targets, log_p)?;
    let b = t.mul(not_t, log_q)?;
    let sum = t.add(a, b)?;
    let mean = t.mean(sum);
    Ok(t.scale(mean, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TrainError::StateMismatch {
                index: params.len().min(grads.len()),
                expected: self.first.len(),
                found: params.len().max(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(TrainError::StateMismatch {
                    index: i,
                    expected: self.first[i].len(),
                    found: if g.len() != p.len() { g.len() } else { p.len() },
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub undersample: UndersampleConfig,
    pub steps: usize,
    pub adam: AdamConfig,
    pub queries_per_step: usize,
    /// Share of each step's queries drawn from foreground voxels.
    pub foreground_fraction: f64,
    pub dice_weight: f64,
    pub bce_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            undersample: UndersampleConfig::default(),
            steps: 1000,
            adam: AdamConfig::default(),
            queries_per_step: 1024,
            foreground_fraction: 0.5,
            dice_weight: 1.0,
            bce_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries_per_step == 0 {
            return Err(TrainError::Config("queries_per_step must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(TrainError::Config("foreground_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub dice: f64,
    pub bce: f64,
    pub total: f64,
}

/// Query coordinates with their one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub queries: QuerySet,
    /// `P×C` one-hot rows.
    pub targets: Tensor,
}

impl QueryBatch {
    pub fn from_voxels(scan: &CineScan, voxels: &[usize], classes: usize) -> Result<Self> {
        let (t_n, h, w) = (scan.frames, scan.height, scan.width);
        let mut coords = Vec::with_capacity(voxels.len());
        let mut targets = vec![0.0; voxels.len() * classes];
        for (i, &v) in voxels.iter().enumerate() {
            let (t, y, x) = (v / (h * w), (v / w) % h, v % w);
            coords.push(QuerySet::voxel(t, y, x, t_n, h, w));
            let label = scan.labels[v] as usize;
            if label < classes {
                targets[i * classes + label] = 1.0;
            }
        }
        Ok(Self {
            queries: QuerySet::new(coords)?,
            targets: Tensor::new(vec![voxels.len(), classes], targets)?,
        })
    }
}

/// Draws `count` voxels: a `foreground_fraction` share from labelled
/// foreground, the rest uniformly over the volume.
pub fn sample_query_voxels<R: Rng + ?Sized>(
    scan: &CineScan,
    count: usize,
    foreground_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let foreground: Vec<usize> = (0..scan.voxels())
        .filter(|&v| scan.labels[v] != BACKGROUND)
        .collect();
    let n_fg = if foreground.is_empty() {
        0
    } else {
        (count as f64 * foreground_fraction).round() as usize
    };
    let mut voxels = Vec::with_capacity(count);
    for _ in 0..count - n_fg {
        voxels.push(rng.random_range(0..scan.voxels()));
    }
    for _ in 0..n_fg {
        voxels.push(foreground[rng.random_range(0..foreground.len())]);
    }
    voxels
}

/// Weighted Dice + BCE on sigmoid outputs, with gradients for every parameter.
pub fn loss_and_grads(
    params: &ModelParams,
    samples: &KSpaceSampleSet,
    batch: &QueryBatch,
    dice_weight: f64,
    bce_weight: f64,
) -> Result<(LossRecord, Vec<Vec<f64>>)> {
    let mut t = Tape::new();
    let bound = params.bind(&mut t, true);
    let latents = bound.encoder_forward(&mut t, samples)?;
    let logits = bound.decoder_forward(&mut t, latents, &batch.queries)?;
    let probs = t.sigmoid(logits);
    let targets = t.constant(batch.targets.clone());
    let dice = soft_dice_loss(&mut t, probs, targets)?;
    let bce = bce_loss(&mut t, probs, targets)?;
    let wd = t.scale(dice, dice_weight);
    let wb = t.scale(bce, bce_weight);
    let total = t.add(wd, wb)?;
    t.backward(total)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, p)| t.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    let record = LossRecord {
        step: 0,
        dice: t.value(dice).data()[0],
        bce: t.value(bce).data()[0],
        total: t.value(total).data()[0],
    };
    Ok((record, grads))
}

/// Model parameters, optimizer state and the global step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, adam: AdamConfig) -> Self {
        let optimizer = Adam::new(adam, params.tensors());
        Self {
            params,
            optimizer,
            step: 0,
        }
    }
}

/// Scan order for `epoch`; a pure function of the seed so runs can resume.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Random stream for global step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    rng.set_stream(step);
    rng
}

/// Runs `config.steps` optimizer steps continuing from `state.step`.
///
/// Every visit to a scan draws a fresh mask and B0 phase. `on_step` sees
/// each loss record as it is produced.
pub fn train(
    state: &mut TrainState,
    dataset: &[CineScan],
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    config.validate()?;
    state.optimizer.config = config.adam;
    let n = dataset.len() as u64;
    let classes = state.params.config().classes;
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut records = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let step = state.step;
        let epoch = step / n;
        if epoch != order_epoch {
            order = epoch_order(dataset.len(), config.seed, epoch);
            order_epoch = epoch;
        }
        let scan = &dataset[order[(step % n) as usize]];
        let mut rng = step_rng(config.seed, step);
        let (samples, _) = undersample(scan, &config.undersample, &mut rng)?;
        let voxels = sample_query_voxels(scan, config.queries_per_step, config.foreground_fraction, &mut rng);
        let batch = QueryBatch::from_voxels(scan, &voxels, classes)?;
        let (mut record, grads) =
            loss_and_grads(&state.params, &samples, &batch, config.dice_weight, config.bce_weight)?;
        state.optimizer.update(state.params.tensors_mut(), &grads)?;
        state.step += 1;
        record.step = state.step;
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}
