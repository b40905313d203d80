use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::latent::{LatentLayout, ShapeLatent};
use super::schedule::Schedule;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::semantics::LabelCodebook;

/// Weights of the geometry MSE, label cross-entropy and latent KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub ce: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            ce: 0.1,
            kl: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.mse, self.ce, self.kl]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// `½(µ² + σ² - ln σ² - 1)`, the KL divergence from `N(µ, σ²)` to `N(0, 1)`.
pub fn kl_standard_normal(mean: f64, var: f64) -> f64 {
    0.5 * (mean * mean + var - var.ln() - 1.0)
}

/// A noised training batch, item-major.
#[derive(Debug, Clone)]
pub struct LossBatch<T> {
    /// `(items*m) x row_width` noised latents fed to the denoiser.
    pub inputs: Tensor<T>,
    pub steps: Vec<usize>,
    pub m: usize,
    /// `(items*m) x geometry_width` clean geometry.
    pub target_geometry: Tensor<T>,
    pub target_classes: Vec<usize>,
    pub real: Vec<bool>,
    /// Geometry columns in use per row (0 on padding rows).
    pub active_dims: Vec<usize>,
}

/// Draws one step and one noise sample per latent.
pub fn make_batch<T: Real, R: Rng + ?Sized>(
    layout: &LatentLayout,
    codebook: &LabelCodebook,
    schedule: &Schedule,
    latents: &[&ShapeLatent],
    noisy_labels: bool,
    rng: &mut R,
) -> Result<LossBatch<T>> {
    if latents.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let (m, w, gw) = (layout.m(), layout.row_width(), layout.geometry_width());
    let rows = latents.len() * m;
    let mut batch = LossBatch {
        inputs: Tensor::zeros(rows, w),
        steps: Vec::with_capacity(latents.len()),
        m,
        target_geometry: Tensor::zeros(rows, gw),
        target_classes: Vec::with_capacity(rows),
        real: Vec::with_capacity(rows),
        active_dims: Vec::with_capacity(rows),
    };
    for (b, latent) in latents.iter().enumerate() {
        latent.validate(layout)?;
        let t = rng.random_range(0..schedule.steps());
        let ab = schedule.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        batch.steps.push(t);
        let classes = latent.classes(layout, codebook)?;
        for r in 0..m {
            let row = b * m + r;
            let class = if latent.mask[r] {
                classes[r]
            } else {
                layout.padding_class()
            };
            batch.target_classes.push(class);
            batch.real.push(latent.mask[r]);
            batch
                .active_dims
                .push(if latent.mask[r] { layout.geometry_dims[class] } else { 0 });
            for (c, &v) in latent.rows[r].iter().enumerate() {
                let clean = if c >= gw && noisy_labels {
                    v + codebook.sigma() * rng.sample::<f64, _>(StandardNormal)
                } else {
                    v
                };
                let eps: f64 = rng.sample(StandardNormal);
                batch.inputs.set(row, c, T::lit(sa * clean + sn * eps));
                if c < gw {
                    batch.target_geometry.set(row, c, T::lit(v));
                }
            }
        }
    }
    Ok(batch)
}

/// Graph handles of the weighted loss and its components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub ce: Var,
    pub kl: Var,
}

/// Loss values read back from a graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub ce: f64,
    pub kl: f64,
}

impl LossVars {
    pub fn read<T: Real>(&self, g: &Graph<T>) -> LossParts {
        let v = |x: Var| g.value(x).item().as_f64();
        LossParts {
            total: v(self.total),
            mse: v(self.mse),
            ce: v(self.ce),
            kl: v(self.kl),
        }
    }
}

/// Records the weighted loss on top of denoiser outputs.
///
/// The MSE covers every geometry column of the real rows; the cross-entropy
/// covers all rows with padding as a class; the KL term compares batch
/// statistics (population variance) of the predicted geometry of real rows
/// against `N(0, 1)`, per geometry column over the rows whose category uses
/// that column, averaged over columns with at least two such rows.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    geometry: Var,
    logits: Var,
    batch: &LossBatch<T>,
    weights: &LossWeights,
) -> Result<LossVars> {
    let rows = batch.real.len();
    if rows == 0 {
        return Err(Error::Empty("loss batch".into()));
    }
    let [pr, gw] = g.value(geometry).shape();
    let [lr, k] = g.value(logits).shape();
    if pr != rows || lr != rows || batch.target_geometry.shape() != [rows, gw] {
        return Err(Error::ShapeMismatch("loss inputs disagree on row count".into()));
    }
    let real: Vec<usize> = (0..rows).filter(|&r| batch.real[r]).collect();
    if real.is_empty() {
        return Err(Error::InvalidArgument("batch contains only padding rows".into()));
    }

    let target = g.constant(batch.target_geometry.clone());
    let pred_real = g.gather_rows(geometry, &real)?;
    let target_real = g.gather_rows(target, &real)?;
    let diff = g.sub(pred_real, target_real)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq)?;

    let mut onehot = Tensor::zeros(rows, k);
    for (r, &c) in batch.target_classes.iter().enumerate() {
        if c >= k {
            return Err(Error::InvalidArgument(format!("target class {c} outside 0..{k}")));
        }
        onehot.set(r, c, T::one());
    }
    let onehot = g.constant(onehot);
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, onehot)?;
    let total_logp = g.sum(picked)?;
    let ce = g.scale(total_logp, T::lit(-1.0 / rows as f64))?;

    let kl = kl_graph(g, geometry, batch, &real, gw)?;

    let a = g.scale(mse, T::lit(weights.mse))?;
    let b = g.scale(ce, T::lit(weights.ce))?;
    let c = g.scale(kl, T::lit(weights.kl))?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars { total, mse, ce, kl })
}

fn kl_graph<T: Real>(g: &mut Graph<T>, geometry: Var, batch: &LossBatch<T>, real: &[usize], gw: usize) -> Result<Var> {
    let mut bounds: Vec<usize> = real.iter().map(|&r| batch.active_dims[r].min(gw)).collect();
    bounds.push(0);
    bounds.sort_unstable();
    bounds.dedup();
    let mut terms: Option<Var> = None;
    let mut dims = 0usize;
    for w in bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let rows: Vec<usize> = real.iter().copied().filter(|&r| batch.active_dims[r] >= hi).collect();
        if rows.len() < 2 {
            continue;
        }
        let n = T::lit(1.0 / rows.len() as f64);
        let x = g.gather_rows(geometry, &rows)?;
        let x = g.slice_cols(x, lo, hi)?;
        let s = g.sum_rows(x)?;
        let mean = g.scale(s, n)?;
        let neg_mean = g.scale(mean, -T::one())?;
        let centered = g.add_row(x, neg_mean)?;
        let sq = g.mul(centered, centered)?;
        let s2 = g.sum_rows(sq)?;
        let var = g.scale(s2, n)?;
        let mean_sq = g.mul(mean, mean)?;
        let log_var = g.ln(var)?;
        let a = g.add(mean_sq, var)?;
        let a = g.sub(a, log_var)?;
        let a = g.sum(a)?;
        dims += hi - lo;
        terms = Some(match terms {
            None => a,
            Some(prev) => g.add(prev, a)?,
        });
    }
    match terms {
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
        Some(sum) => {
            // ½(Σ(µ² + σ² - ln σ²) - dims) / dims
            let shifted = g.add_scalar(sum, T::lit(-(dims as f64)))?;
            g.scale(shifted, T::lit(0.5 / dims as f64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_from(
        geometry: Vec<Vec<f64>>,
        classes: Vec<usize>,
        real: Vec<bool>,
        active: Vec<usize>,
        m: usize,
    ) -> LossBatch<f64> {
        let rows = geometry.len();
        let gw = geometry[0].len();
        LossBatch {
            inputs: Tensor::zeros(rows, gw + 3),
            steps: vec![0; rows / m],
            m,
            target_geometry: Tensor::from_vec(rows, gw, geometry.concat()).unwrap(),
            target_classes: classes,
            real,
            active_dims: active,
        }
    }

    fn eval(pred: &Tensor<f64>, logits: &Tensor<f64>, batch: &LossBatch<f64>) -> LossParts {
        let mut g = Graph::new();
        let p = g.param(pred.clone());
        let l = g.param(logits.clone());
        loss_graph(&mut g, p, l, batch, &LossWeights::default())
            .unwrap()
            .read(&g)
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_standard_normal(0.0, 1.0), 0.0);
        assert_eq!(kl_standard_normal(1.0, 1.0), 0.5);
    }

    #[test]
    fn kl_from_batch_statistics() {
        // one column, real rows {0, 2}: mean 1, population variance 1
        let batch = batch_from(
            vec![vec![0.0], vec![2.0], vec![0.0]],
            vec![0, 0, 2],
            vec![true, true, false],
            vec![1, 1, 0],
            3,
        );
        let pred = batch.target_geometry.clone();
        let parts = eval(&pred, &Tensor::zeros(3, 3), &batch);
        assert_eq!(parts.kl, 0.5);
        assert_eq!(parts.mse, 0.0);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let batch = batch_from(vec![vec![0.0]; 5], vec![0, 1, 2, 3, 4], vec![true; 5], vec![1; 5], 5);
        let mut g = Graph::new();
        // Spread predictions keep the batch variance in the KL term positive.
        let p = g.param(Tensor::from_vec(5, 1, vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap());
        let l = g.param(Tensor::full(5, 5, 0.3));
        let parts = loss_graph(&mut g, p, l, &batch, &LossWeights::default())
            .unwrap()
            .read(&g);
        assert!((parts.ce - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let batch = batch_from(
            vec![vec![1.0], vec![-1.0], vec![0.0]],
            vec![0, 1, 2],
            vec![true, true, false],
            vec![1, 1, 0],
            3,
        );
        let mut logits = Tensor::full(3, 3, -800.0);
        for (r, &c) in batch.target_classes.iter().enumerate() {
            logits.set(r, c, 0.0);
        }
        let parts = eval(&batch.target_geometry.clone(), &logits, &batch);
        assert_eq!((parts.mse, parts.ce, parts.kl), (0.0, 0.0, 0.0));
    }

    #[test]
    fn padding_rows_do_not_touch_mse_or_kl() {
        let batch = batch_from(
            vec![vec![0.5, 0.1], vec![-0.7, 0.2], vec![0.0, 0.0], vec![1.1, 0.0]],
            vec![0, 1, 3, 2],
            vec![true, true, false, true],
            vec![2, 2, 0, 1],
            4,
        );
        let pred = Tensor::from_vec(4, 2, vec![0.4, 0.3, -0.2, 0.0, 9.0, -9.0, 1.0, 0.5]).unwrap();
        let logits = Tensor::zeros(4, 4);
        let base = eval(&pred, &logits, &batch);
        let mut moved = pred.clone();
        moved.set(2, 0, -3.0);
        moved.set(2, 1, 42.0);
        let after = eval(&moved, &logits, &batch);
        assert_eq!(base.mse, after.mse);
        assert_eq!(base.kl, after.kl);

        let mut g = Graph::new();
        let p = g.param(pred);
        let l = g.param(logits);
        let vars = loss_graph(&mut g, p, l, &batch, &LossWeights::default()).unwrap();
        let grads = g.backward(vars.total).unwrap();
        assert_eq!(grads.get(p).unwrap().row(2), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_all_padding() {
        let batch = batch_from(vec![vec![0.0]; 2], vec![1, 1], vec![false, false], vec![0, 0], 2);
        let mut g = Graph::new();
        let p = g.param(Tensor::zeros(2, 1));
        let l = g.param(Tensor::zeros(2, 2));
        assert!(loss_graph(&mut g, p, l, &batch, &LossWeights::default()).is_err());
    }
}
