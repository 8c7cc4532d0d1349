//! JSON run configuration. Every section is optional; absent fields take defaults
//! and unknown keys are rejected.

use crate::kspace::{B0Params, UndersampleConfig};
use crate::metrics::EvalConfig;
use crate::model::{ModelConfig, DEFAULT_QUERY_CHUNK};
use crate::phantom::{Jitter, PhantomParams, TissueIntensities, NUM_CLASSES};
use crate::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    pub kspace: KSpaceSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// `[y, x]`; defaults to the image centre.
    pub center: Option<[f64; 2]>,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub aspect: f64,
    pub contraction_fraction: f64,
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub intensities: IntensitySection,
    pub jitter: JitterSection,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let p = PhantomParams::default();
        Self {
            height: p.height,
            width: p.width,
            frames: p.frames,
            center: None,
            inner_radius: p.inner_radius,
            outer_radius: p.outer_radius,
            aspect: p.aspect,
            contraction_fraction: p.contraction_fraction,
            texture_amplitude: p.texture_amplitude,
            noise_std: p.noise_std,
            intensities: IntensitySection::default(),
            jitter: JitterSection::default(),
            train_count: 200,
            val_count: 20,
            test_count: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensitySection {
    pub background: f64,
    pub blood: f64,
    pub myocardium: f64,
}

impl Default for IntensitySection {
    fn default() -> Self {
        let t = TissueIntensities::default();
        Self {
            background: t.background,
            blood: t.blood,
            myocardium: t.myocardium,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterSection {
    pub center: f64,
    pub radius: f64,
    pub thickness: f64,
    pub contraction: f64,
    pub aspect: f64,
    pub intensity: f64,
}

impl Default for JitterSection {
    fn default() -> Self {
        let j = Jitter::default();
        Self {
            center: j.center,
            radius: j.radius,
            thickness: j.thickness,
            contraction: j.contraction,
            aspect: j.aspect,
            intensity: j.intensity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KSpaceSection {
    #[serde(rename = "R")]
    pub acceleration: f64,
    /// Defaults to `H/4`.
    pub sigma_lines: Option<f64>,
    pub sigma_b0: f64,
    pub sigma_b0_offset: f64,
    pub per_frame_masks: bool,
}

impl Default for KSpaceSection {
    fn default() -> Self {
        let u = UndersampleConfig::default();
        Self {
            acceleration: u.acceleration,
            sigma_lines: u.sigma_lines,
            sigma_b0: u.b0.sigma_ramp,
            sigma_b0_offset: u.b0.sigma_offset,
            per_frame_masks: u.per_frame_masks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "M")]
    pub latents: usize,
    #[serde(rename = "D")]
    pub width: usize,
    pub heads: usize,
    #[serde(rename = "L_enc")]
    pub encoder_layers: usize,
    #[serde(rename = "L_dec")]
    pub decoder_layers: usize,
    #[serde(rename = "F")]
    pub frequencies: usize,
    pub ff_mult: usize,
    pub modulated_features: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            latents: m.latents,
            width: m.width,
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            frequencies: m.frequencies,
            ff_mult: m.ff_mult,
            modulated_features: m.modulated_features,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    #[serde(rename = "P_train")]
    pub queries_per_step: usize,
    pub foreground_fraction: f64,
    pub dice_weight: f64,
    pub bce_weight: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            lr: t.adam.lr,
            queries_per_step: t.queries_per_step,
            foreground_fraction: t.foreground_fraction,
            dice_weight: t.dice_weight,
            bce_weight: t.bce_weight,
            seed: t.seed,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(rename = "R_list")]
    pub accelerations: Vec<f64>,
    pub seed: u64,
    pub query_chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            accelerations: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            seed: 0,
            query_chunk: DEFAULT_QUERY_CHUNK,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Checks every derived domain config.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.phantom_params().validate().map_err(|e| invalid(&e))?;
        self.model_config().validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        let j = &self.phantom.jitter;
        if [j.center, j.radius, j.thickness, j.contraction, j.aspect, j.intensity]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(ConfigError::Invalid("jitter amounts must be finite and >= 0".into()));
        }
        if self.phantom.train_count + self.phantom.val_count + self.phantom.test_count == 0 {
            return Err(ConfigError::Invalid("dataset counts are all zero".into()));
        }
        if self.eval.accelerations.is_empty() {
            return Err(ConfigError::Invalid("eval.R_list is empty".into()));
        }
        for &r in self.eval.accelerations.iter().chain([&self.kspace.acceleration]) {
            if !r.is_finite() || r < 1.0 {
                return Err(ConfigError::Invalid(format!("acceleration {r} must be >= 1")));
            }
        }
        if let Some(s) = self.kspace.sigma_lines {
            if !s.is_finite() || s < 0.0 {
                return Err(ConfigError::Invalid("kspace.sigma_lines must be >= 0".into()));
            }
        }
        if !(self.kspace.sigma_b0 >= 0.0 && self.kspace.sigma_b0_offset >= 0.0) {
            return Err(ConfigError::Invalid("B0 spreads must be >= 0".into()));
        }
        if self.eval.query_chunk == 0 {
            return Err(ConfigError::Invalid("eval.query_chunk must be positive".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every default filled in, including `sigma_lines` and `center`.
    pub fn resolved_json(&self) -> String {
        let mut full = self.clone();
        full.kspace.sigma_lines = Some(self.undersample_config().sigma_for(self.phantom.height));
        let p = self.phantom_params();
        full.phantom.center = Some([p.center.0, p.center.1]);
        let mut text = serde_json::to_string_pretty(&full).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn phantom_params(&self) -> PhantomParams {
        let s = &self.phantom;
        let center = s
            .center
            .map_or((s.height as f64 / 2.0, s.width as f64 / 2.0), |[y, x]| (y, x));
        PhantomParams {
            height: s.height,
            width: s.width,
            frames: s.frames,
            center,
            inner_radius: s.inner_radius,
            outer_radius: s.outer_radius,
            aspect: s.aspect,
            contraction_fraction: s.contraction_fraction,
            intensities: TissueIntensities {
                background: s.intensities.background,
                blood: s.intensities.blood,
                myocardium: s.intensities.myocardium,
            },
            texture_amplitude: s.texture_amplitude,
            noise_std: s.noise_std,
            seed: s.seed,
        }
    }

    pub fn jitter(&self) -> Jitter {
        let j = &self.phantom.jitter;
        Jitter {
            center: j.center,
            radius: j.radius,
            thickness: j.thickness,
            contraction: j.contraction,
            aspect: j.aspect,
            intensity: j.intensity,
        }
    }

    pub fn undersample_config(&self) -> UndersampleConfig {
        UndersampleConfig {
            acceleration: self.kspace.acceleration,
            sigma_lines: self.kspace.sigma_lines,
            b0: B0Params {
                sigma_ramp: self.kspace.sigma_b0,
                sigma_offset: self.kspace.sigma_b0_offset,
            },
            per_frame_masks: self.kspace.per_frame_masks,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            latents: m.latents,
            width: m.width,
            heads: m.heads,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            frequencies: m.frequencies,
            classes: NUM_CLASSES,
            ff_mult: m.ff_mult,
            modulated_features: m.modulated_features,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            undersample: self.undersample_config(),
            steps: t.steps,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            queries_per_step: t.queries_per_step,
            foreground_fraction: t.foreground_fraction,
            dice_weight: t.dice_weight,
            bce_weight: t.bce_weight,
            seed: t.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            accelerations: self.eval.accelerations.clone(),
            undersample: self.undersample_config(),
            seed: self.eval.seed,
            query_chunk: self.eval.query_chunk,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"kspace": {"R": 4, "bogus": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
    }

    #[test]
    fn wrong_types_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"M": "many"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"steps": -1}}"#).is_err());
    }

    #[test]
    fn semantic_errors_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"D": 30, "heads": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"R_list": []}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"kspace": {"R": 0.5}}"#).is_err());
    }

    #[test]
    fn resolved_dump_reparses_and_fills_optionals() {
        let cfg = RunConfig::from_json(r#"{"kspace": {"R": 4}}"#).unwrap();
        let dump = cfg.resolved_json();
        let again = RunConfig::from_json(&dump).unwrap();
        assert_eq!(again.kspace.acceleration, 4.0);
        assert_eq!(again.kspace.sigma_lines, Some(16.0));
        assert_eq!(again.phantom.center, Some([32.0, 32.0]));
        assert_eq!(again.resolved_json(), dump);
    }
}
