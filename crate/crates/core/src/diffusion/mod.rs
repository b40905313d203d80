//! Set-valued latent diffusion over part latents: noise schedule, latent
//! layout, training objective, samplers and checkpoints.

mod checkpoint;
mod latent;
mod loss;
mod model;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::fnv1a;
pub use latent::{
    decode_row, decode_shape, encode_shape, is_structurally_valid, part_row, real_categories, LatentLayout, ShapeLatent,
};
pub use loss::{kl_standard_normal, loss_graph, make_batch, LossBatch, LossParts, LossVars, LossWeights};
pub use model::{LabelInit, ModelOptions, ShapeModel};
pub use sampler::{
    complete, default_refine_start, item_rng, leading_half, refine_dims, renoise_and_resample, sample, sample_one,
};
pub use schedule::{forward_noise, noise_to_level, Schedule};
pub use train::{evaluate_loss, loss_and_gradients, median, train, TrainConfig};
