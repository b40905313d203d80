//! Ancestral sampling with clean-latent prediction, plus guided variants in
//! which known entries are replaced by forward-noised copies of their clean
//! values before every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::latent::{padding_row, ShapeLatent};
use super::model::{LabelInit, ShapeModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Items denoised together; kernels are row-independent, so chunking does
/// not change results.
const CHUNK: usize = 256;

/// RNG for item `index` of a seeded request; each item owns a stream so
/// results do not depend on how many items are requested together.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct Chain {
    state: Vec<f64>,
    /// Clean values of entries held fixed, by flat index.
    known: Vec<Option<f64>>,
    rng: ChaCha8Rng,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn run_chains(model: &ShapeModel, chains: &mut [Chain], start: usize) -> Result<()> {
    for chunk in chains.chunks_mut(CHUNK) {
        run_chunk(model, chunk, start)?;
    }
    Ok(())
}

fn run_chunk(model: &ShapeModel, chains: &mut [Chain], start: usize) -> Result<()> {
    let layout = &model.layout;
    let (m, w, gw, k) = (
        layout.m(),
        layout.row_width(),
        layout.geometry_width(),
        layout.classes(),
    );
    let schedule = &model.schedule;
    let n = chains.len();
    for t in (0..=start).rev() {
        let ab = schedule.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut input = Tensor::<f32>::zeros(n * m, w);
        for (i, chain) in chains.iter_mut().enumerate() {
            for e in 0..m * w {
                if let Some(clean) = chain.known[e] {
                    chain.state[e] = sa * clean + sn * gaussian(&mut chain.rng);
                }
            }
            input.data_mut()[i * m * w..(i + 1) * m * w]
                .iter_mut()
                .zip(&chain.state)
                .for_each(|(dst, &v)| *dst = v as f32);
        }
        let (geometry, logits) = model.denoiser.predict(&input, &vec![t; n], m)?;
        let (c0, ct, var) = schedule.posterior(t);
        let sd = var.sqrt();
        let mut probs = vec![0.0; k];
        for (i, chain) in chains.iter_mut().enumerate() {
            for r in 0..m {
                let row = i * m + r;
                let mut x0 = Vec::with_capacity(w);
                x0.extend(geometry.row(row).iter().map(|&v| v as f64));
                let lg = logits.row(row);
                let max = lg.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut total = 0.0;
                for (p, &l) in probs.iter_mut().zip(lg) {
                    *p = (l as f64 - max).exp();
                    total += *p;
                }
                probs.iter_mut().for_each(|p| *p /= total);
                x0.extend(model.codebook.expected_embedding(&probs));
                let state = &mut chain.state[r * w..(r + 1) * w];
                if t == 0 {
                    state.copy_from_slice(&x0);
                } else {
                    for (s, x) in state.iter_mut().zip(&x0) {
                        *s = c0 * x + ct * *s + sd * gaussian(&mut chain.rng);
                    }
                }
            }
            if chain.state.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("reverse step {t}")));
            }
        }
        debug_assert_eq!(gw + k, w);
    }
    for chain in chains.iter_mut() {
        for (s, known) in chain.state.iter_mut().zip(&chain.known) {
            if let Some(clean) = known {
                *s = *clean;
            }
        }
    }
    Ok(())
}

/// Turns a finished chain into a latent. Rows without fixed entries are
/// classified and snapped to canonical form (class mean labels, unused
/// geometry columns zeroed, padding rows fully reset); other rows are kept
/// as they are.
fn finish(model: &ShapeModel, chain: &Chain) -> Result<ShapeLatent> {
    let layout = &model.layout;
    let (m, w, gw) = (layout.m(), layout.row_width(), layout.geometry_width());
    let mut rows = Vec::with_capacity(m);
    let mut mask = Vec::with_capacity(m);
    for r in 0..m {
        let mut row = chain.state[r * w..(r + 1) * w].to_vec();
        let (class, _) = model.codebook.classify(&row[gw..])?;
        let free = chain.known[r * w..(r + 1) * w].iter().all(Option::is_none);
        if free {
            if class == layout.padding_class() {
                row = padding_row(layout, &model.codebook);
            } else {
                row[layout.geometry_dims[class]..gw].iter_mut().for_each(|v| *v = 0.0);
                row[gw..].copy_from_slice(model.codebook.mean(class)?);
            }
        }
        rows.push(row);
        mask.push(class != layout.padding_class());
    }
    Ok(ShapeLatent { rows, mask })
}

fn fresh_chain(model: &ShapeModel, rng: ChaCha8Rng) -> Chain {
    let layout = &model.layout;
    let (m, w, gw) = (layout.m(), layout.row_width(), layout.geometry_width());
    let mut chain = Chain {
        state: vec![0.0; m * w],
        known: vec![None; m * w],
        rng,
    };
    let last = model.schedule.steps() - 1;
    let ab = model.schedule.alpha_bar(last);
    let padding = model
        .codebook
        .mean(model.codebook.padding_class())
        .expect("padding class")
        .to_vec();
    for r in 0..m {
        for c in 0..w {
            let eps = gaussian(&mut chain.rng);
            chain.state[r * w + c] = if c < gw {
                eps
            } else {
                match model.options.label_init {
                    LabelInit::NoisedPadding => ab.sqrt() * padding[c - gw] + (1.0 - ab).sqrt() * eps,
                    LabelInit::PureNoise => eps,
                }
            };
        }
    }
    chain
}

/// Unconditional sample `index` of a seeded request.
pub fn sample_one(model: &ShapeModel, seed: u64, index: u64) -> Result<ShapeLatent> {
    Ok(sample_range(model, seed, index, 1)?.remove(0))
}

/// `count` unconditional samples using item streams `0..count`.
pub fn sample(model: &ShapeModel, count: usize, seed: u64) -> Result<Vec<ShapeLatent>> {
    sample_range(model, seed, 0, count)
}

fn sample_range(model: &ShapeModel, seed: u64, first: u64, count: usize) -> Result<Vec<ShapeLatent>> {
    let mut chains: Vec<Chain> = (0..count as u64)
        .map(|i| fresh_chain(model, item_rng(seed, first + i)))
        .collect();
    run_chains(model, &mut chains, model.schedule.steps() - 1)?;
    chains.iter().map(|c| finish(model, c)).collect()
}

/// Completes a partial shape: the given rows are held at their values and
/// the remaining rows are generated. Returns `count` completions on item
/// streams `0..count`.
pub fn complete(model: &ShapeModel, fixed: &[(usize, Vec<f64>)], count: usize, seed: u64) -> Result<Vec<ShapeLatent>> {
    let layout = &model.layout;
    let (m, w, gw) = (layout.m(), layout.row_width(), layout.geometry_width());
    if fixed.is_empty() {
        return Err(Error::InvalidArgument("completion needs at least one fixed row".into()));
    }
    let mut used_rows = vec![false; m];
    let mut used_classes = vec![false; layout.m()];
    for (row, values) in fixed {
        if *row >= m {
            return Err(Error::InvalidArgument(format!("fixed row {row} outside 0..{m}")));
        }
        if used_rows[*row] {
            return Err(Error::InvalidArgument(format!("row {row} fixed twice")));
        }
        used_rows[*row] = true;
        if values.len() != w || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "fixed row {row} must hold {w} finite values"
            )));
        }
        let (class, _) = model.codebook.classify(&values[gw..])?;
        if class < layout.m() {
            if used_classes[class] {
                return Err(Error::InvalidArgument(format!(
                    "category {class} fixed in more than one row"
                )));
            }
            used_classes[class] = true;
        }
    }
    let mut chains: Vec<Chain> = (0..count as u64)
        .map(|i| {
            let mut chain = fresh_chain(model, item_rng(seed, i));
            for (row, values) in fixed {
                for (c, &v) in values.iter().enumerate() {
                    chain.known[row * w + c] = Some(v);
                }
            }
            chain
        })
        .collect();
    run_chains(model, &mut chains, model.schedule.steps() - 1)?;
    chains.iter().map(|c| finish(model, c)).collect()
}

/// Re-generates the geometry columns `dims` of `target_row`: they are
/// noised to step `t_start` and denoised while every other entry is held.
/// Entries outside the selection come back bit-identical.
pub fn refine_dims(
    model: &ShapeModel,
    shape: &ShapeLatent,
    target_row: usize,
    dims: &[usize],
    t_start: usize,
    seed: u64,
) -> Result<ShapeLatent> {
    let layout = &model.layout;
    shape.validate(layout)?;
    let (m, w, gw) = (layout.m(), layout.row_width(), layout.geometry_width());
    if target_row >= m {
        return Err(Error::InvalidArgument(format!("row {target_row} outside 0..{m}")));
    }
    if t_start == 0 || t_start >= model.schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "start step {t_start} outside 1..{}",
            model.schedule.steps()
        )));
    }
    if dims.is_empty() {
        return Err(Error::InvalidArgument("no dimensions selected".into()));
    }
    let mut selected = vec![false; gw];
    for &d in dims {
        if d >= gw || selected[d] {
            return Err(Error::InvalidArgument(format!("invalid or repeated dimension {d}")));
        }
        selected[d] = true;
    }
    let flat = shape.flatten();
    let mut chain = Chain {
        state: flat.clone(),
        known: flat.iter().map(|&v| Some(v)).collect(),
        rng: item_rng(seed, 0),
    };
    let ab = model.schedule.alpha_bar(t_start);
    for &d in dims {
        let e = target_row * w + d;
        chain.known[e] = None;
        chain.state[e] = ab.sqrt() * flat[e] + (1.0 - ab).sqrt() * gaussian(&mut chain.rng);
    }
    run_chains(model, std::slice::from_mut(&mut chain), t_start)?;
    let rows = (0..m).map(|r| chain.state[r * w..(r + 1) * w].to_vec()).collect();
    Ok(ShapeLatent {
        rows,
        mask: shape.mask.clone(),
    })
}

/// The first half of the geometry columns used by `category`.
pub fn leading_half(model: &ShapeModel, category: usize) -> Result<Vec<usize>> {
    let q = *model
        .layout
        .geometry_dims
        .get(category)
        .ok_or(Error::UnknownCategory(category as u32))?;
    Ok((0..q.div_ceil(2)).collect())
}

/// Default refinement start: 40% of the chain.
pub fn default_refine_start(model: &ShapeModel) -> usize {
    ((model.schedule.steps() as f64 * 0.4).round() as usize).clamp(1, model.schedule.steps().saturating_sub(1).max(1))
}

/// Forward-noises whole latents to step `t` and denoises them again.
pub fn renoise_and_resample(
    model: &ShapeModel,
    latents: &[ShapeLatent],
    t: usize,
    seed: u64,
) -> Result<Vec<ShapeLatent>> {
    model.schedule.check_step(t)?;
    let ab = model.schedule.alpha_bar(t);
    let mut chains: Vec<Chain> = latents
        .iter()
        .enumerate()
        .map(|(i, latent)| {
            latent.validate(&model.layout)?;
            let mut rng = item_rng(seed, i as u64);
            let state = latent
                .flatten()
                .iter()
                .map(|&v| ab.sqrt() * v + (1.0 - ab).sqrt() * gaussian(&mut rng))
                .collect::<Vec<_>>();
            Ok(Chain {
                known: vec![None; state.len()],
                state,
                rng,
            })
        })
        .collect::<Result<_>>()?;
    run_chains(model, &mut chains, t)?;
    chains.iter().map(|c| finish(model, c)).collect()
}
