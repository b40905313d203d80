use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Noise schedule over steps `0..T`.
///
/// Step `t` has cumulative signal level `ᾱ_t = Π_{s≤t} α_s`; the level before
/// step 0 is taken to be 1 (no noise), so the last reverse step returns the
/// clean-latent prediction unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Cosine schedule with `β` clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let f = |t: f64| {
            let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let betas = (0..steps)
            .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).clamp(0.0, MAX_BETA))
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `ᾱ_{t-1}`, with the pre-step-0 level equal to 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }

    /// Reverse-step coefficients `(c_x0, c_xt, variance)` of the Gaussian
    /// posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let beta = self.betas[t];
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bar_prev(t);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        (c0, ct, var)
    }
}

/// `√ᾱ z₀ + √(1-ᾱ) ε` at an explicit signal level.
pub fn noise_to_level(alpha_bar: f64, z0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values with {} noise draws",
            z0.len(),
            eps.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::InvalidArgument(format!(
            "signal level {alpha_bar} outside [0, 1]"
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// Forward-noises `z0` to step `t`.
pub fn forward_noise(schedule: &Schedule, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    noise_to_level(schedule.alpha_bar(t), z0, eps)
}
