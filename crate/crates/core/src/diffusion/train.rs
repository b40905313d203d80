use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::latent::ShapeLatent;
use super::loss::{loss_graph, make_batch, LossBatch, LossParts, LossWeights};
use super::model::ShapeModel;
use crate::autodiff::{Adam, AdamConfig, Graph, Tensor};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Learning rate at the end of the cosine decay, as a fraction of `lr`.
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Decay of the parameter moving average that replaces the trained
    /// weights at the end; 0 keeps the raw weights.
    #[serde(default)]
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_size: 64,
            lr: 5e-4,
            warmup: 800,
            final_lr_fraction: 0.05,
            clip_norm: 1.0,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::InvalidArgument("invalid learning-rate settings".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument("ema_decay must be in [0, 1)".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidArgument("clip_norm must be nonnegative".into()));
        }
        Ok(())
    }

    /// Learning rate at zero-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup.min(self.steps)).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_gradients<T: Real>(
    denoiser: &Denoiser<T>,
    batch: &LossBatch<T>,
    weights: &LossWeights,
) -> Result<(LossParts, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let vars = denoiser.params().bind(&mut g);
    let out = denoiser.forward(&mut g, &vars, &batch.inputs, &batch.steps, batch.m)?;
    let loss = loss_graph(&mut g, out.geometry, out.logits, batch, weights)?;
    let parts = loss.read(&g);
    let mut grads = g.backward(loss.total)?;
    Ok((parts, denoiser.params().collect_grads(&vars, &mut grads)))
}

/// Loss without gradients.
pub fn evaluate_loss<T: Real>(
    denoiser: &Denoiser<T>,
    batch: &LossBatch<T>,
    weights: &LossWeights,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let vars: Vec<_> = denoiser
        .params()
        .tensors()
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let out = denoiser.forward(&mut g, &vars, &batch.inputs, &batch.steps, batch.m)?;
    Ok(loss_graph(&mut g, out.geometry, out.logits, batch, weights)?.read(&g))
}

/// Trains the denoiser in place; returns the per-step losses. `on_step` is
/// called after every optimizer step.
pub fn train(
    model: &mut ShapeModel,
    latents: &[ShapeLatent],
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossParts),
) -> Result<Vec<LossParts>> {
    config.validate()?;
    if latents.is_empty() {
        return Err(Error::Empty("training latents".into()));
    }
    for l in latents {
        l.validate(&model.layout)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.denoiser.params(),
    );
    let mut history = Vec::with_capacity(config.steps);
    let mut ema: Vec<Tensor<f32>> = model.denoiser.params().tensors().to_vec();
    for step in 0..config.steps {
        let picks: Vec<&ShapeLatent> = (0..config.batch_size)
            .map(|_| &latents[rng.random_range(0..latents.len())])
            .collect();
        let batch = make_batch::<f32, _>(
            &model.layout,
            &model.codebook,
            &model.schedule,
            &picks,
            model.options.noisy_labels,
            &mut rng,
        )?;
        let (parts, mut grads) = loss_and_gradients(&model.denoiser, &batch, &model.options.weights)?;
        if config.clip_norm > 0.0 {
            clip(&mut grads, config.clip_norm);
        }
        adam.set_lr(config.lr_at(step));
        adam.step(model.denoiser.params_mut(), &grads)?;
        if config.ema_decay > 0.0 {
            // Bias-corrected warm start: early averages lean on recent weights.
            let decay = config.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
            for (e, p) in ema.iter_mut().zip(model.denoiser.params().tensors()) {
                for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
                    *a = decay * *a + (1.0 - decay) * b;
                }
            }
        }
        on_step(step, &parts);
        history.push(parts);
    }
    if config.ema_decay > 0.0 {
        for (i, e) in ema.into_iter().enumerate() {
            *model.denoiser.params_mut().tensor_mut(i) = e;
        }
    }
    Ok(history)
}

fn clip(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Median of a window of loss totals.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
