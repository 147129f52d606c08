//! The experiment configuration document. One TOML file drives every
//! subcommand; unknown keys are rejected so typos fail loudly, and the
//! resolved document (after any `--seed` override) is written next to
//! each run's outputs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use asymseg::fusion::FusionMode;
use asymseg::losses::LossSpec;
use asymseg::model::TrainConfig;
use asymseg::synth::{LesionLoad, SynthSpec};
use asymseg::volume::Dims;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub fusion: FusionSection,
    pub evaluate: EvaluateSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Number of volume/mask pairs gen-data writes.
    pub images: usize,
    pub dims: [usize; 3],
    pub channels: usize,
    /// Lesion-load preset: low, medium, or high.
    pub preset: String,
    /// Optional overrides on top of the preset.
    pub noise_sigma: Option<f64>,
    pub intensity_shift: Option<Vec<f64>>,
    pub lesion_fraction: Option<f64>,
    pub lesion_count: Option<[usize; 2]>,
    pub lesion_radius: Option<[f64; 2]>,
    pub spacing: Option<[f64; 3]>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            images: 2,
            dims: [32, 32, 32],
            channels: 1,
            preset: "medium".into(),
            noise_sigma: None,
            intensity_shift: None,
            lesion_fraction: None,
            lesion_count: None,
            lesion_radius: None,
            spacing: None,
        }
    }
}

impl SynthSection {
    /// Spec for one image; the stream seed is offset by the image index
    /// so every image differs while the whole dataset stays a pure
    /// function of the run seed.
    pub fn to_spec(&self, run_seed: u64, image_index: u64) -> Result<SynthSpec> {
        let load: LesionLoad = self
            .preset
            .parse()
            .with_context(|| format!("config key synth.preset = {:?}", self.preset))?;
        let dims = Dims::new(self.dims[0], self.dims[1], self.dims[2]);
        let mut spec = SynthSpec::preset(load, dims, self.channels, run_seed + image_index);
        if let Some(sigma) = self.noise_sigma {
            spec.noise_sigma = sigma;
        }
        if let Some(shift) = &self.intensity_shift {
            spec.intensity_shift = shift.clone();
        }
        if let Some(fraction) = self.lesion_fraction {
            spec.lesion_fraction = fraction;
        }
        if let Some([lo, hi]) = self.lesion_count {
            spec.lesion_count = (lo, hi);
        }
        if let Some([lo, hi]) = self.lesion_radius {
            spec.lesion_radius = (lo, hi);
        }
        if let Some(spacing) = self.spacing {
            spec.spacing = spacing;
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Loss kind: f_beta, gdl, or focal.
    pub loss: String,
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_interval: u64,
    pub steps: u64,
    pub patch_size: usize,
    pub overlap: f64,
    pub quota: usize,
    pub min_lesion_voxels: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            loss: "f_beta".into(),
            beta: 1.5,
            alpha: 0.25,
            gamma: 2.0,
            learning_rate: 0.0005,
            lr_decay: 0.95,
            lr_interval: 500,
            steps: 500,
            patch_size: 16,
            overlap: 0.5,
            quota: 8,
            min_lesion_voxels: 10,
        }
    }
}

impl TrainSection {
    pub fn loss_spec(&self) -> Result<LossSpec> {
        let spec = match self.loss.as_str() {
            "f_beta" => LossSpec::FBeta { beta: self.beta },
            "gdl" => LossSpec::Gdl,
            "focal" => LossSpec::Focal {
                alpha: self.alpha,
                gamma: self.gamma,
            },
            other => bail!("config key train.loss = {other:?}; expected f_beta, gdl, or focal"),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_train_config(&self, run_seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            loss: self.loss_spec()?,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            lr_interval: self.lr_interval,
            steps: self.steps,
            patch_size: self.patch_size,
            overlap: self.overlap,
            quota: self.quota,
            min_lesion_voxels: self.min_lesion_voxels,
            rng_seed: run_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub mode: String,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            mode: "spline".into(),
        }
    }
}

impl FusionSection {
    pub fn mode(&self) -> Result<FusionMode> {
        self.mode
            .parse()
            .with_context(|| format!("config key fusion.mode = {:?}", self.mode))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub n_thresholds: usize,
    /// Voxel spacing in mm; defaults to the ground-truth header.
    pub spacing: Option<[f64; 3]>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            n_thresholds: 100,
            spacing: None,
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

/// Serialize the post-override configuration for run provenance.
pub fn resolved_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serialization cannot fail")
}
