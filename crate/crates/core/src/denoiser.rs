//! Time-conditioned set denoiser: per-token geometry and label encoders,
//! attention blocks with adaptive (shift/scale) layer norm driven by a
//! sinusoidal step embedding, and separate geometry and label heads.
//!
//! Inputs are stacked item-major: item `b` owns rows `b*m .. (b+1)*m`.
//! There is no positional encoding over tokens, so the network is
//! permutation equivariant within an item.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Geometry columns per token.
    pub geometry_dim: usize,
    /// Label classes per token, padding included.
    pub classes: usize,
    pub model_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
}

impl DenoiserConfig {
    pub fn new(geometry_dim: usize, classes: usize) -> Self {
        Self {
            geometry_dim,
            classes,
            model_dim: 128,
            blocks: 4,
            heads: 4,
            time_dim: 128,
            ff_mult: 4,
        }
    }

    pub fn token_width(&self) -> usize {
        self.geometry_dim + self.classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.geometry_dim == 0 || self.classes < 2 {
            return bad("denoiser needs geometry columns and at least two classes");
        }
        if self.model_dim < 2 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be a positive multiple of heads");
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even");
        }
        if self.blocks == 0 || self.ff_mult == 0 {
            return bad("blocks and ff_mult must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    modulation: Dense,
    qkv: Dense,
    out: Dense,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_geometry: Dense,
    enc_labels: Dense,
    time1: Dense,
    time2: Dense,
    blocks: Vec<Block>,
    final_modulation: Dense,
    head_geometry: Dense,
    head_labels: Dense,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserVars {
    /// `(items*m) x geometry_dim` clean-latent prediction.
    pub geometry: Var,
    /// `(items*m) x classes` label logits.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    layout: Layout,
}

struct Builder<'a, T, R> {
    params: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: rand::Rng> Builder<'_, T, R> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Result<Dense> {
        let std = gain / (fan_in as f64).sqrt();
        let w = self
            .params
            .insert_normal(&format!("{name}.w"), fan_in, fan_out, std, self.rng)?;
        let b = self.params.insert(&format!("{name}.b"), Tensor::zeros(1, fan_out))?;
        Ok(Dense { w, b })
    }
}

/// Sinusoidal embedding of integer steps, `steps.len() x width`.
pub fn step_embedding<T: Real>(steps: &[usize], width: usize) -> Tensor<T> {
    let half = width / 2;
    let mut out = Tensor::zeros(steps.len(), width);
    for (r, &t) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out.set(r, i, T::lit(arg.sin()));
            out.set(r, half + i, T::lit(arg.cos()));
        }
    }
    out
}

impl<T: Real> Denoiser<T> {
    /// Random initialization, deterministic per seed.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng: &mut rng,
        };
        let d = config.model_dim;
        let dg = d / 2;
        let enc_geometry = b.dense("enc_geometry", config.geometry_dim, dg, 1.0)?;
        let enc_labels = b.dense("enc_labels", config.classes, d - dg, 1.0)?;
        let time1 = b.dense("time1", config.time_dim, d, 1.0)?;
        let time2 = b.dense("time2", d, d, 1.0)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            blocks.push(Block {
                modulation: b.dense(&format!("block{i}.modulation"), d, 4 * d, 0.1)?,
                qkv: b.dense(&format!("block{i}.qkv"), d, 3 * d, 1.0)?,
                out: b.dense(&format!("block{i}.out"), d, d, 0.5)?,
                ff1: b.dense(&format!("block{i}.ff1"), d, config.ff_mult * d, 1.0)?,
                ff2: b.dense(&format!("block{i}.ff2"), config.ff_mult * d, d, 0.5)?,
            });
        }
        let final_modulation = b.dense("final.modulation", d, 2 * d, 0.1)?;
        let head_geometry = b.dense("head_geometry", d, config.geometry_dim, 1.0)?;
        let head_labels = b.dense("head_labels", d, config.classes, 1.0)?;
        Ok(Self {
            config,
            params,
            layout: Layout {
                enc_geometry,
                enc_labels,
                time1,
                time2,
                blocks,
                final_modulation,
                head_geometry,
                head_labels,
            },
        })
    }

    /// Rebuilds a denoiser around stored parameters, checking names and shapes.
    pub fn from_params(config: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::init(config, 0)?;
        if template.params.names() != params.names()
            || template
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::ConfigMismatch("parameters do not match denoiser config".into()));
        }
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("stored denoiser parameters".into()));
        }
        Ok(Self {
            config,
            params,
            layout: template.layout,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, z: &Tensor<T>, steps: &[usize], m: usize) -> Result<()> {
        if m == 0 || steps.is_empty() || z.rows() != steps.len() * m {
            return Err(Error::ShapeMismatch(format!(
                "{} token rows for {} items of {m} slots",
                z.rows(),
                steps.len()
            )));
        }
        if z.cols() != self.config.token_width() {
            return Err(Error::ShapeMismatch(format!(
                "token width {} (expected {})",
                z.cols(),
                self.config.token_width()
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `g`. `vars` must come from `self.params().bind(g)`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        z: &Tensor<T>,
        steps: &[usize],
        m: usize,
    ) -> Result<DenoiserVars> {
        self.check_input(z, steps, m)?;
        let c = &self.config;
        let d = c.model_dim;
        let linear = |g: &mut Graph<T>, x: Var, l: Dense| -> Result<Var> {
            let y = g.matmul(x, vars[l.w])?;
            g.add_row(y, vars[l.b])
        };
        let adaptive_norm = |g: &mut Graph<T>, x: Var, shift: Var, scale: Var| -> Result<Var> {
            let n = g.layer_norm(x, T::lit(LN_EPS))?;
            let s = g.add_scalar(scale, T::one())?;
            let y = g.mul(n, s)?;
            g.add(y, shift)
        };

        let input = g.constant(z.clone());
        let geometry = g.slice_cols(input, 0, c.geometry_dim)?;
        let labels = g.slice_cols(input, c.geometry_dim, c.token_width())?;
        let eg = linear(g, geometry, self.layout.enc_geometry)?;
        let el = linear(g, labels, self.layout.enc_labels)?;
        let mut h = g.concat_cols(eg, el)?;

        let temb = g.constant(step_embedding(steps, c.time_dim));
        let t1 = linear(g, temb, self.layout.time1)?;
        let t1 = g.gelu(t1)?;
        let t2 = linear(g, t1, self.layout.time2)?;
        let cond = g.gelu(t2)?;

        let dh = d / c.heads;
        let attn_scale = T::lit(1.0 / (dh as f64).sqrt());
        for block in &self.layout.blocks {
            let modulation = linear(g, cond, block.modulation)?;
            let modulation = g.repeat_rows(modulation, m)?;
            let shift1 = g.slice_cols(modulation, 0, d)?;
            let scale1 = g.slice_cols(modulation, d, 2 * d)?;
            let shift2 = g.slice_cols(modulation, 2 * d, 3 * d)?;
            let scale2 = g.slice_cols(modulation, 3 * d, 4 * d)?;

            let x = adaptive_norm(g, h, shift1, scale1)?;
            let qkv = linear(g, x, block.qkv)?;
            let mut heads_out: Option<Var> = None;
            for head in 0..c.heads {
                let q = g.slice_cols(qkv, head * dh, (head + 1) * dh)?;
                let k = g.slice_cols(qkv, d + head * dh, d + (head + 1) * dh)?;
                let v = g.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh)?;
                let scores = g.group_matmul_nt(q, k, m)?;
                let scores = g.scale(scores, attn_scale)?;
                let weights = g.softmax(scores)?;
                let o = g.group_matmul(weights, v, m)?;
                heads_out = Some(match heads_out {
                    None => o,
                    Some(prev) => g.concat_cols(prev, o)?,
                });
            }
            let attended = linear(g, heads_out.expect("at least one head"), block.out)?;
            h = g.add(h, attended)?;

            let x = adaptive_norm(g, h, shift2, scale2)?;
            let f = linear(g, x, block.ff1)?;
            let f = g.gelu(f)?;
            let f = linear(g, f, block.ff2)?;
            h = g.add(h, f)?;
        }

        let modulation = linear(g, cond, self.layout.final_modulation)?;
        let modulation = g.repeat_rows(modulation, m)?;
        let shift = g.slice_cols(modulation, 0, d)?;
        let scale = g.slice_cols(modulation, d, 2 * d)?;
        let x = adaptive_norm(g, h, shift, scale)?;
        let geometry = linear(g, x, self.layout.head_geometry)?;
        let logits = linear(g, x, self.layout.head_labels)?;
        Ok(DenoiserVars { geometry, logits })
    }

    /// Inference: returns `(geometry prediction, label logits)`.
    pub fn predict(&self, z: &Tensor<T>, steps: &[usize], m: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&mut g, &vars, z, steps, m)?;
        Ok((g.value(out.geometry).clone(), g.value(out.logits).clone()))
    }
}
