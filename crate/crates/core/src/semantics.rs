//! Continuous part-label embeddings: one isotropic Gaussian per class, with
//! an extra class for empty (padding) slots.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LABEL_SCALE: f64 = 2.0;
pub const DEFAULT_LABEL_SIGMA: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCodebook {
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl LabelCodebook {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if means.len() < 2 {
            return Err(Error::InvalidArgument("codebook needs at least two classes".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::ShapeMismatch("codebook means differ in dimension".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
        }
        for (i, a) in means.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("codebook mean".into()));
            }
            if means[..i].iter().any(|b| b == a) {
                return Err(Error::InvalidArgument(format!("codebook mean {i} duplicates another")));
            }
        }
        Ok(Self { means, sigma })
    }

    /// `m` real classes plus padding, with class `k` centred at `scale * e_k`
    /// in `R^{m+1}`. The padding class is the last one, `k = m`.
    pub fn one_hot(m: usize, scale: f64, sigma: f64) -> Result<Self> {
        let k = m + 1;
        let means = (0..k)
            .map(|c| (0..k).map(|j| if j == c { scale } else { 0.0 }).collect())
            .collect();
        Self::new(means, sigma)
    }

    pub fn standard(m: usize) -> Self {
        Self::one_hot(m, DEFAULT_LABEL_SCALE, DEFAULT_LABEL_SIGMA).expect("valid default codebook")
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn padding_class(&self) -> usize {
        self.means.len() - 1
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn mean(&self, class: usize) -> Result<&[f64]> {
        self.means
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("class {class} outside 0..{}", self.classes())))
    }

    /// The class mean, or a draw from the class Gaussian when `noisy`.
    pub fn embed<R: Rng + ?Sized>(&self, class: usize, noisy: bool, rng: &mut R) -> Result<Vec<f64>> {
        let mean = self.mean(class)?;
        Ok(if noisy {
            mean.iter()
                .map(|m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            mean.to_vec()
        })
    }

    /// Posterior over classes under equal priors, and its mode (lowest class on ties).
    pub fn classify(&self, z: &[f64]) -> Result<(usize, Vec<f64>)> {
        if z.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "label latent of length {}, expected {}",
                z.len(),
                self.dim()
            )));
        }
        let two_var = 2.0 * self.sigma * self.sigma;
        let logits: Vec<f64> = self
            .means
            .iter()
            .map(|m| -m.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / two_var)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / total).collect();
        let mut best = 0;
        for (k, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = k;
            }
        }
        Ok((best, probs))
    }

    /// Expected embedding under a class distribution.
    pub fn expected_embedding(&self, probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (p, mean) in probs.iter().zip(&self.means) {
            for (o, m) in out.iter_mut().zip(mean) {
                *o += p * m;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clean_embedding_is_mean_and_round_trips() {
        let cb = LabelCodebook::standard(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..5 {
            let z = cb.embed(k, false, &mut rng).unwrap();
            assert_eq!(z, cb.mean(k).unwrap());
            let (c, probs) = cb.classify(&z).unwrap();
            assert_eq!(c, k);
            assert!(probs.iter().enumerate().all(|(j, p)| j == k || *p < probs[k]));
        }
        assert!(cb.embed(5, false, &mut rng).is_err());
        assert!(cb.classify(&[0.0; 4]).is_err());
    }

    #[test]
    fn equidistant_point_ties_to_lowest() {
        let cb = LabelCodebook::standard(4);
        let (c, probs) = cb.classify(&[1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c, 0);
        assert_eq!(probs[0], probs[1]);
    }

    #[test]
    fn two_class_posterior_by_hand() {
        let cb = LabelCodebook::new(vec![vec![0.0], vec![2.0]], 1.0).unwrap();
        let (c, probs) = cb.classify(&[0.5]).unwrap();
        // p0 = 1 / (1 + exp(-(2.25 - 0.25) / 2)) = 1 / (1 + e^-1)
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(c, 0);
        assert!((probs[0] - expected).abs() < 1e-15);
        assert!((probs[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn noisy_embeddings_rarely_misclassify() {
        let cb = LabelCodebook::standard(4);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 100_000;
        let mut wrong = 0;
        for i in 0..draws {
            let k = i % 5;
            let z = cb.embed(k, true, &mut rng).unwrap();
            if cb.classify(&z).unwrap().0 != k {
                wrong += 1;
            }
        }
        assert!((wrong as f64) / (draws as f64) < 1e-4, "{wrong} misclassified");
    }

    #[test]
    fn invalid_codebooks_rejected() {
        assert!(LabelCodebook::new(vec![vec![0.0], vec![0.0]], 1.0).is_err());
        assert!(LabelCodebook::new(vec![vec![0.0], vec![1.0]], 0.0).is_err());
        assert!(LabelCodebook::new(vec![vec![0.0], vec![1.0, 2.0]], 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn translation_and_sigma_invariance(
                z in prop::collection::vec(-3.0f64..3.0, 5),
                shift in prop::collection::vec(-5.0f64..5.0, 5),
                sigma in 0.05f64..3.0,
            ) {
                let base = LabelCodebook::standard(4);
                let (c0, p0) = base.classify(&z).unwrap();
                let moved = LabelCodebook::new(
                    base.means().iter().map(|m| m.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect(),
                    base.sigma(),
                ).unwrap();
                let zs: Vec<f64> = z.iter().zip(&shift).map(|(a, s)| a + s).collect();
                let (c1, p1) = moved.classify(&zs).unwrap();
                prop_assert_eq!(c0, c1);
                for (a, b) in p0.iter().zip(&p1) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                let wide = LabelCodebook::new(base.means().to_vec(), sigma).unwrap();
                prop_assert_eq!(wide.classify(&z).unwrap().0, c0);
            }
        }
    }
}
