use serde::{Deserialize, Serialize};

use super::latent::LatentLayout;
use super::loss::LossWeights;
use super::schedule::Schedule;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::semantics::LabelCodebook;
use crate::ssm::PartSsm;

/// How reverse sampling initializes the label columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelInit {
    /// The padding mean forward-noised to the last step.
    #[default]
    NoisedPadding,
    /// Standard normal draws.
    PureNoise,
}

/// Network and diffusion sizes chosen before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub model_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    pub diffusion_steps: usize,
    pub weights: LossWeights,
    pub noisy_labels: bool,
    pub label_init: LabelInit,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            model_dim: 128,
            blocks: 4,
            heads: 4,
            time_dim: 128,
            ff_mult: 4,
            diffusion_steps: 200,
            weights: LossWeights::default(),
            noisy_labels: true,
            label_init: LabelInit::NoisedPadding,
        }
    }
}

/// Everything needed to sample and decode: shape models, label codebook,
/// noise schedule and denoiser weights.
#[derive(Debug, Clone)]
pub struct ShapeModel {
    pub category_names: Vec<String>,
    pub layout: LatentLayout,
    pub options: ModelOptions,
    pub schedule: Schedule,
    pub codebook: LabelCodebook,
    pub ssms: Vec<PartSsm>,
    pub denoiser: Denoiser<f32>,
}

impl ShapeModel {
    /// Fresh model with randomly initialized denoiser weights.
    pub fn new(category_names: Vec<String>, ssms: Vec<PartSsm>, options: ModelOptions, seed: u64) -> Result<Self> {
        let layout = LatentLayout::from_ssms(&ssms)?;
        let codebook = LabelCodebook::standard(layout.m());
        let denoiser = Denoiser::init(denoiser_config(&layout, &options), seed)?;
        let schedule = Schedule::cosine(options.diffusion_steps)?;
        Self::from_parts(category_names, ssms, options, schedule, codebook, denoiser)
    }

    pub fn from_parts(
        category_names: Vec<String>,
        ssms: Vec<PartSsm>,
        options: ModelOptions,
        schedule: Schedule,
        codebook: LabelCodebook,
        denoiser: Denoiser<f32>,
    ) -> Result<Self> {
        options.weights.validate()?;
        let layout = LatentLayout::from_ssms(&ssms)?;
        if category_names.len() != layout.m() {
            return Err(Error::ConfigMismatch(format!(
                "{} category names for {} shape models",
                category_names.len(),
                layout.m()
            )));
        }
        if codebook.classes() != layout.classes() || codebook.dim() != layout.classes() {
            return Err(Error::ConfigMismatch(
                "label codebook does not match category count".into(),
            ));
        }
        if *denoiser.config() != denoiser_config(&layout, &options) {
            return Err(Error::ConfigMismatch(
                "denoiser shape does not match latent layout".into(),
            ));
        }
        if schedule.steps() != options.diffusion_steps {
            return Err(Error::ConfigMismatch(
                "schedule length differs from configured steps".into(),
            ));
        }
        if let Some(p) = ssms.first().map(PartSsm::p) {
            if ssms.iter().any(|s| s.p() != p) {
                return Err(Error::ConfigMismatch("shape models disagree on points per part".into()));
            }
        }
        Ok(Self {
            category_names,
            layout,
            options,
            schedule,
            codebook,
            ssms,
            denoiser,
        })
    }

    pub fn m(&self) -> usize {
        self.layout.m()
    }

    pub fn points_per_part(&self) -> usize {
        self.ssms[0].p()
    }

    /// Fails with a config mismatch unless the model has `m` categories
    /// with the given per-category latent sizes.
    pub fn expect_layout(&self, geometry_dims: &[usize]) -> Result<()> {
        if self.layout.geometry_dims != geometry_dims {
            return Err(Error::ConfigMismatch(format!(
                "model latent sizes {:?}, expected {:?}",
                self.layout.geometry_dims, geometry_dims
            )));
        }
        Ok(())
    }
}

pub(crate) fn denoiser_config(layout: &LatentLayout, options: &ModelOptions) -> DenoiserConfig {
    DenoiserConfig {
        geometry_dim: layout.geometry_width(),
        classes: layout.classes(),
        model_dim: options.model_dim,
        blocks: options.blocks,
        heads: options.heads,
        time_dim: options.time_dim,
        ff_mult: options.ff_mult,
    }
}
