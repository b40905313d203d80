//! Per-category linear statistical shape models.
//!
//! A part with `p` corresponded points is a vector in `R^{3p}`. Fitting keeps
//! the top `q` principal directions of the training covariance (divisor
//! `n - 1`); latents are whitened coordinates, so the training latents have
//! zero mean and unit sample variance under that same divisor.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{KdTree, Point3, PointCloud};
use crate::synthetic::{CategoryId, CorrespondedCloud};

/// Eigenvalues below this are treated as numerically zero and never kept.
pub const RANK_EPSILON: f64 = 1e-10;
pub const DEFAULT_Q: usize = 64;
pub const DEFAULT_RIDGE: f64 = 1e-3;
const MAX_FIT_ITERATIONS: usize = 50;
/// Prior draws used as extra starting points by [`fit_latent_least_squares`].
pub const RANDOM_STARTS: usize = 128;
const AXIS_START: f64 = 1.5;
const START_SEED: u64 = 0x5eed;

const SSM_MAGIC: &[u8; 4] = b"PSSM";
const SSM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PartSsm {
    category: CategoryId,
    p: usize,
    mean: Vec<f64>,
    /// `3p x q`, orthonormal columns, largest-magnitude entry of each column positive.
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
}

/// Outcome of [`fit_ssm`], including the rank clamp if one happened.
#[derive(Debug, Clone)]
pub struct SsmFit {
    pub ssm: PartSsm,
    pub requested_q: usize,
    pub samples: usize,
}

impl SsmFit {
    pub fn clamped(&self) -> bool {
        self.ssm.q() < self.requested_q
    }
}

impl PartSsm {
    /// Assembles a model from explicit parameters, checking every invariant.
    pub fn from_parts(
        category: CategoryId,
        mean: Vec<f64>,
        basis: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        total_variance: f64,
    ) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 || !dim.is_multiple_of(3) {
            return Err(Error::ShapeMismatch(format!("mean of length {dim}")));
        }
        let q = eigenvalues.len();
        if basis.nrows() != dim || basis.ncols() != q || q == 0 {
            return Err(Error::ShapeMismatch(format!(
                "basis {}x{} for dimension {dim} and {q} eigenvalues",
                basis.nrows(),
                basis.ncols()
            )));
        }
        if eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0)) || eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "eigenvalues must be positive and descending".into(),
            ));
        }
        if mean.iter().chain(basis.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shape model parameters".into()));
        }
        let gram = basis.transpose() * &basis;
        let off = (gram - DMatrix::identity(q, q)).amax();
        if off > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "basis not orthonormal (deviation {off:e})"
            )));
        }
        Ok(Self {
            category,
            p: dim / 3,
            mean,
            basis,
            eigenvalues,
            total_variance,
        })
    }

    pub fn category(&self) -> CategoryId {
        self.category
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Trace of the training covariance, i.e. the sum of all eigenvalues.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn mean_shape(&self) -> CorrespondedCloud {
        CorrespondedCloud::new(self.category, unflatten(&self.mean))
    }

    /// Cumulative explained-variance ratio after each retained component.
    pub fn explained_variance(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.eigenvalues
            .iter()
            .map(|l| {
                acc += l;
                acc / self.total_variance
            })
            .collect()
    }

    /// Whitened latent `Λ^{-1/2} Q̂ᵀ (x - x̄)`.
    pub fn encode(&self, cloud: &CorrespondedCloud) -> Result<Vec<f64>> {
        if cloud.len() != self.p {
            return Err(Error::ShapeMismatch(format!(
                "cloud has {} points, model expects {}",
                cloud.len(),
                self.p
            )));
        }
        let centered: Vec<f64> = cloud.to_flat().iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((0..self.q())
            .map(|k| {
                let col = self.basis.column(k);
                let dot: f64 = col.iter().zip(&centered).map(|(a, b)| a * b).sum();
                dot / self.eigenvalues[k].sqrt()
            })
            .collect())
    }

    /// `x̄ + Q̂ (z ⊙ √Λ)` reshaped to template order.
    pub fn decode(&self, z: &[f64]) -> Result<CorrespondedCloud> {
        Ok(CorrespondedCloud::new(self.category, unflatten(&self.decode_flat(z)?)))
    }

    pub fn decode_flat(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.q() {
            return Err(Error::ShapeMismatch(format!(
                "latent of length {}, expected {}",
                z.len(),
                self.q()
            )));
        }
        let mut out = vec![0.0; self.mean.len()];
        for (k, (&zk, &l)) in z.iter().zip(&self.eigenvalues).enumerate() {
            let w = zk * l.sqrt();
            for (o, b) in out.iter_mut().zip(self.basis.column(k).iter()) {
                *o += b * w;
            }
        }
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o += m;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let q = self.q();
        let mut buf = Vec::with_capacity(20 + 8 * (self.mean.len() * (q + 1) + q + 1));
        buf.extend_from_slice(SSM_MAGIC);
        for v in [SSM_VERSION, self.category, self.p as u32, q as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let floats = self
            .mean
            .iter()
            .chain(self.basis.as_slice())
            .chain(&self.eigenvalues)
            .chain(std::iter::once(&self.total_variance));
        for v in floats {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[0..4] != SSM_MAGIC {
            return Err(Error::Corrupt("shape model header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != SSM_VERSION {
            return Err(Error::VersionMismatch {
                found: word(0),
                expected: SSM_VERSION,
            });
        }
        let (category, p, q) = (word(1), word(2) as usize, word(3) as usize);
        let dim = 3 * p;
        let nfloats = dim + dim * q + q + 1;
        if bytes.len() != 20 + 8 * nfloats {
            return Err(Error::Corrupt(format!(
                "shape model payload of {} bytes, expected {}",
                bytes.len() - 20,
                8 * nfloats
            )));
        }
        let floats: Vec<f64> = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mean = floats[..dim].to_vec();
        let basis = DMatrix::from_column_slice(dim, q, &floats[dim..dim + dim * q]);
        let eigenvalues = floats[dim + dim * q..dim + dim * q + q].to_vec();
        Self::from_parts(category, mean, basis, eigenvalues, floats[nfloats - 1])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn unflatten(flat: &[f64]) -> Vec<Point3<f64>> {
    flat.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

/// Fits a PCA shape model to corresponded parts of one category.
///
/// Eigenpairs come from the `n x n` Gram matrix when `n < 3p`, otherwise
/// from the `3p x 3p` covariance. Eigenvalues below [`RANK_EPSILON`] are
/// dropped, clamping `q` with a warning.
pub fn fit_ssm(parts: &[CorrespondedCloud], q: usize) -> Result<SsmFit> {
    let n = parts.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 parts to fit, got {n}")));
    }
    let p = parts[0].len();
    let category = parts[0].category;
    if p == 0 {
        return Err(Error::Empty("part with no points".into()));
    }
    if let Some(bad) = parts.iter().find(|c| c.len() != p) {
        return Err(Error::ShapeMismatch(format!(
            "inconsistent point counts {p} and {}",
            bad.len()
        )));
    }
    if parts.iter().any(|c| c.category != category) {
        return Err(Error::InvalidArgument("parts from different categories".into()));
    }
    let dim = 3 * p;
    if q == 0 || q > (n - 1).min(dim) {
        return Err(Error::InvalidArgument(format!(
            "q = {q} outside 1..={} for n = {n}, 3p = {dim}",
            (n - 1).min(dim)
        )));
    }

    let mut data = DMatrix::<f64>::zeros(n, dim);
    for (i, part) in parts.iter().enumerate() {
        for (j, v) in part.to_flat().into_iter().enumerate() {
            data[(i, j)] = v;
        }
    }
    let mean: Vec<f64> = (0..dim).map(|j| data.column(j).sum() / n as f64).collect();
    for j in 0..dim {
        let m = mean[j];
        data.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let denom = (n - 1) as f64;
    let total_variance = data.iter().map(|v| v * v).sum::<f64>() / denom;

    let (values, vectors) = if n < dim {
        let gram = (&data * data.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let keep: Vec<usize> = order
            .into_iter()
            .take(q)
            .filter(|&k| eig.eigenvalues[k] >= RANK_EPSILON)
            .collect();
        let mut basis = DMatrix::zeros(dim, keep.len());
        for (c, &k) in keep.iter().enumerate() {
            let s = eig.eigenvalues[k];
            let v = data.transpose() * eig.eigenvectors.column(k) / (denom * s).sqrt();
            basis.set_column(c, &v);
        }
        (keep.iter().map(|&k| eig.eigenvalues[k]).collect::<Vec<_>>(), basis)
    } else {
        let cov = (data.transpose() * &data) / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        let keep: Vec<usize> = order
            .into_iter()
            .take(q)
            .filter(|&k| eig.eigenvalues[k] >= RANK_EPSILON)
            .collect();
        let mut basis = DMatrix::zeros(dim, keep.len());
        for (c, &k) in keep.iter().enumerate() {
            basis.set_column(c, &eig.eigenvectors.column(k));
        }
        (keep.iter().map(|&k| eig.eigenvalues[k]).collect::<Vec<_>>(), basis)
    };
    if values.is_empty() {
        return Err(Error::RankDeficient(format!(
            "category {category}: covariance has no eigenvalue above {RANK_EPSILON:e}"
        )));
    }
    if values.len() < q {
        log::warn!(
            "category {category}: q clamped from {q} to {} (numerical rank of {n} samples)",
            values.len()
        );
    }
    let mut basis = vectors;
    reorthonormalize(&mut basis);
    canonicalize_signs(&mut basis);
    let ssm = PartSsm::from_parts(category, mean, basis, values, total_variance)?;
    Ok(SsmFit {
        ssm,
        requested_q: q,
        samples: n,
    })
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

// Two passes of modified Gram-Schmidt: the Gram route loses orthogonality
// in proportion to λ_max / λ_k.
fn reorthonormalize(basis: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for k in 0..basis.ncols() {
            for j in 0..k {
                let dot = basis.column(j).dot(&basis.column(k));
                let prev = basis.column(j).clone_owned();
                basis.column_mut(k).axpy(-dot, &prev, 1.0);
            }
            let norm = basis.column(k).norm();
            basis.column_mut(k).unscale_mut(norm);
        }
    }
}

/// Flips each column so its largest-magnitude entry (first on ties) is positive.
fn canonicalize_signs(basis: &mut DMatrix<f64>) {
    for k in 0..basis.ncols() {
        let mut best = 0;
        for (i, v) in basis.column(k).iter().enumerate() {
            if v.abs() > basis[(best, k)].abs() {
                best = i;
            }
        }
        if basis[(best, k)] < 0.0 {
            basis.column_mut(k).neg_mut();
        }
    }
}

/// Result of [`fit_latent_least_squares`].
#[derive(Debug, Clone)]
pub struct LatentFit {
    pub latent: Vec<f64>,
    /// Mean squared distance between observed points and their assigned model points.
    pub residual: f64,
    pub iterations: usize,
    /// Regularized objective after each solve.
    pub objective_trace: Vec<f64>,
    /// Template index assigned to each observed point.
    pub assignment: Vec<usize>,
}

impl LatentFit {
    /// Final regularized objective.
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Fits a latent to an uncorresponded partial observation.
///
/// Alternates nearest-template-point assignment on the current decoded shape
/// with the closed-form ridge solution of
/// `min_z Σ ||o_j - decode(z)[a_j]||² + ridge ||z||²` until the assignment
/// stops changing or 50 iterations. The alternation only finds a local
/// minimum, so it is run from the mean shape, from `±1.5` along each latent
/// axis and from [`RANDOM_STARTS`] fixed pseudo-random prior draws; the run
/// with the lowest final objective wins (earliest start on ties).
pub fn fit_latent_least_squares(ssm: &PartSsm, observed: &PointCloud<f64>, ridge: f64) -> Result<LatentFit> {
    let q = ssm.q();
    let mut starts = vec![vec![0.0; q]];
    for k in 0..q {
        for s in [AXIS_START, -AXIS_START] {
            let mut z = vec![0.0; q];
            z[k] = s;
            starts.push(z);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    starts.extend((0..RANDOM_STARTS).map(|_| (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()));
    // A start may hit singular normal equations (ridge 0); it only fails
    // the fit when every start does.
    let mut best: Option<(f64, LatentFit)> = None;
    let mut first_error = None;
    for start in &starts {
        match fit_latent_from(ssm, observed, ridge, start) {
            Ok(fit) => {
                let objective = fit.objective();
                if best.as_ref().is_none_or(|(b, _)| objective < *b) {
                    best = Some((objective, fit));
                }
            }
            Err(e @ (Error::InvalidArgument(_) | Error::Empty(_))) => return Err(e),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    match (best, first_error) {
        (Some((_, fit)), _) => Ok(fit),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one start"),
    }
}

/// [`fit_latent_least_squares`] started from latent `start`.
pub fn fit_latent_from(ssm: &PartSsm, observed: &PointCloud<f64>, ridge: f64, start: &[f64]) -> Result<LatentFit> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be finite and >= 0")));
    }
    let q = ssm.q();
    if start.len() != q {
        return Err(Error::ShapeMismatch(format!(
            "start latent of length {}, expected {q}",
            start.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::Empty("observed cloud".into()));
    }
    let sqrt_l: Vec<f64> = ssm.eigenvalues.iter().map(|l| l.sqrt()).collect();
    // Scaled basis rows: row r of Q̂ times √Λ.
    let scaled = |r: usize, k: usize| ssm.basis[(r, k)] * sqrt_l[k];
    let obs = observed.points();
    let mut z = start.to_vec();
    let mut assignment: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut sq_residual = 0.0;
    while iterations < MAX_FIT_ITERATIONS {
        let decoded = unflatten(&ssm.decode_flat(&z)?);
        let tree = KdTree::build(&decoded)?;
        let next = obs
            .iter()
            .map(|o| tree.nearest(o).map(|(i, _)| i))
            .collect::<Result<Vec<_>>>()?;
        if next == assignment {
            break;
        }
        assignment = next;
        iterations += 1;

        let mut a = DMatrix::<f64>::zeros(q, q);
        let mut b = DVector::<f64>::zeros(q);
        for (o, &idx) in obs.iter().zip(&assignment) {
            let target = [o.x, o.y, o.z];
            for c in 0..3 {
                let r = 3 * idx + c;
                let resid = target[c] - ssm.mean[r];
                for k in 0..q {
                    let bk = scaled(r, k);
                    b[k] += bk * resid;
                    for l in k..q {
                        a[(k, l)] += bk * scaled(r, l);
                    }
                }
            }
        }
        for k in 0..q {
            a[(k, k)] += ridge;
            for l in 0..k {
                a[(k, l)] = a[(l, k)];
            }
        }
        let chol = a.cholesky().ok_or_else(|| {
            if ridge == 0.0 {
                Error::Singular("normal equations are singular for this observation; ridge > 0 is required".into())
            } else {
                Error::Singular("normal equations not positive definite".into())
            }
        })?;
        let sol = chol.solve(&b);
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent least-squares solve".into()));
        }
        z = sol.iter().copied().collect();

        let fitted = ssm.decode_flat(&z)?;
        sq_residual = obs
            .iter()
            .zip(&assignment)
            .map(|(o, &idx)| {
                let f = Point3::new(fitted[3 * idx], fitted[3 * idx + 1], fitted[3 * idx + 2]);
                o.dist2(&f)
            })
            .sum::<f64>();
        trace.push(sq_residual + ridge * z.iter().map(|v| v * v).sum::<f64>());
    }
    Ok(LatentFit {
        latent: z,
        residual: sq_residual / obs.len() as f64,
        iterations,
        objective_trace: trace,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PartSsm {
        let basis = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        PartSsm::from_parts(0, vec![1.0, 2.0, 0.0], basis, vec![4.0], 4.0).unwrap()
    }

    #[test]
    fn decode_toy_case() {
        let out = toy().decode(&[0.5]).unwrap();
        assert_eq!(out.points, vec![Point3::new(2.0, 2.0, 0.0)]);
        assert_eq!(toy().decode(&[0.0]).unwrap().points, vec![Point3::new(1.0, 2.0, 0.0)]);
    }

    #[test]
    fn dimension_mismatches() {
        let s = toy();
        assert!(s.decode(&[0.0, 1.0]).is_err());
        assert!(s.encode(&CorrespondedCloud::new(0, vec![Point3::origin(); 2])).is_err());
    }

    #[test]
    fn invariants_checked_on_assembly() {
        let basis = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(PartSsm::from_parts(0, vec![0.0; 3], basis, vec![2.0, 1.0], 3.0).is_err());
        let basis = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(PartSsm::from_parts(0, vec![0.0; 3], basis.clone(), vec![1.0, 2.0], 3.0).is_err());
        assert!(PartSsm::from_parts(0, vec![0.0; 3], basis, vec![2.0, 0.0], 3.0).is_err());
    }

    #[test]
    fn identical_inputs_are_rank_deficient() {
        let part = CorrespondedCloud::new(0, vec![Point3::new(0.1, 0.2, 0.3); 4]);
        let err = fit_ssm(&vec![part; 5], 2).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn q_range_and_count_checks() {
        let a = CorrespondedCloud::new(0, vec![Point3::new(0.0, 0.0, 0.0); 2]);
        let b = CorrespondedCloud::new(0, vec![Point3::new(1.0, 0.0, 0.0); 2]);
        assert!(fit_ssm(&[a.clone()], 1).is_err());
        assert!(fit_ssm(&[a.clone(), b.clone()], 2).is_err());
        assert!(fit_ssm(&[a.clone(), b.clone()], 0).is_err());
        let short = CorrespondedCloud::new(0, vec![Point3::origin(); 3]);
        assert!(fit_ssm(&[a, b, short], 1).is_err());
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let s = toy();
        let bytes = s.to_bytes();
        assert_eq!(PartSsm::from_bytes(&bytes).unwrap(), s);
        assert!(matches!(
            PartSsm::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corrupt(_))
        ));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(
            PartSsm::from_bytes(&wrong),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn ridge_must_be_valid() {
        let obs = PointCloud::new(vec![Point3::new(1.0, 2.0, 0.0)]).unwrap();
        assert!(fit_latent_least_squares(&toy(), &obs, -1.0).is_err());
        assert!(fit_latent_least_squares(&toy(), &obs, f64::NAN).is_err());
    }
}
