//! Point-cloud distances and set-level generative metrics.
//!
//! Chamfer distance here is the sum of the two directed mean squared
//! nearest-neighbour distances. EMD is the mean Euclidean distance of the
//! optimal one-to-one matching.

mod assignment;

pub use assignment::{hungarian, sinkhorn};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{KdTree, Point3, PointCloud};
use crate::scalar::Real;

/// Largest cloud size solved exactly by [`emd`].
pub const EXACT_EMD_LIMIT: usize = 512;
/// Entropic regularization used by [`emd`] above the exact limit.
pub const SINKHORN_EPSILON: f64 = 1e-3;
pub const DEFAULT_EVAL_POINTS: usize = 2048;
pub const DEFAULT_EMD_POINTS: usize = 128;

/// Mean over `a` of the squared distance to the nearest point of `b`.
pub fn directed_chamfer<T: Real>(a: &PointCloud<T>, tree: &KdTree<T>) -> Result<T> {
    let mut total = T::zero();
    for p in a.points() {
        total += tree.nearest(p)?.1;
    }
    Ok(total / T::from_usize(a.len()).unwrap())
}

pub fn chamfer<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T> {
    let (ta, tb) = (KdTree::build(a.points())?, KdTree::build(b.points())?);
    Ok(directed_chamfer(a, &tb)? + directed_chamfer(b, &ta)?)
}

/// Earth mover's distance between equal-size clouds: exact up to
/// [`EXACT_EMD_LIMIT`] points, entropic above.
pub fn emd(a: &PointCloud<f64>, b: &PointCloud<f64>) -> Result<f64> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "EMD needs equal sizes, got {n} and {}",
            b.len()
        )));
    }
    let cost = distance_costs(a.points(), b.points());
    if n <= EXACT_EMD_LIMIT {
        Ok(hungarian(&cost, n)?.1 / n as f64)
    } else {
        sinkhorn(&cost, n, SINKHORN_EPSILON)
    }
}

fn distance_costs(a: &[Point3<f64>], b: &[Point3<f64>]) -> Vec<f64> {
    a.iter().flat_map(|p| b.iter().map(move |q| p.dist(q))).collect()
}

/// Set-level distance selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetDistance {
    Chamfer,
    Emd,
}

/// Full `gen x ref` matrix of cloud distances.
pub fn cross_distances(gen: &[PointCloud<f64>], refs: &[PointCloud<f64>], kind: SetDistance) -> Result<Vec<Vec<f64>>> {
    match kind {
        SetDistance::Chamfer => {
            let gt: Vec<_> = gen.iter().map(|c| KdTree::build(c.points())).collect::<Result<_>>()?;
            let rt: Vec<_> = refs.iter().map(|c| KdTree::build(c.points())).collect::<Result<_>>()?;
            gen.iter()
                .zip(&gt)
                .map(|(g, gtree)| {
                    refs.iter()
                        .zip(&rt)
                        .map(|(r, rtree)| Ok(directed_chamfer(g, rtree)? + directed_chamfer(r, gtree)?))
                        .collect()
                })
                .collect()
        }
        SetDistance::Emd => gen.iter().map(|g| refs.iter().map(|r| emd(g, r)).collect()).collect(),
    }
}

fn argmin(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best
}

fn check_sets(d: &[Vec<f64>]) -> Result<(usize, usize)> {
    let g = d.len();
    let r = d.first().map_or(0, Vec::len);
    if g == 0 || r == 0 {
        return Err(Error::Empty("generated or reference set".into()));
    }
    if d.iter().any(|row| row.len() != r) {
        return Err(Error::ShapeMismatch("ragged distance matrix".into()));
    }
    Ok((g, r))
}

/// Minimum matching distance from a `gen x ref` matrix: mean over references
/// of the distance to the closest generated cloud.
pub fn mmd(d: &[Vec<f64>]) -> Result<f64> {
    let (g, r) = check_sets(d)?;
    let total: f64 = (0..r)
        .map(|j| (0..g).map(|i| d[i][j]).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / r as f64)
}

/// Coverage: fraction of references that are the nearest reference of at
/// least one generated cloud (ties to the lower reference index).
pub fn coverage(d: &[Vec<f64>]) -> Result<f64> {
    let (_, r) = check_sets(d)?;
    let mut hit = vec![false; r];
    for row in d {
        let (j, _) = argmin(row.iter().copied()).expect("nonempty");
        hit[j] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / r as f64)
}

/// Leave-one-out 1-nearest-neighbour accuracy over `gen ∪ ref` (generated
/// first). Needs the within-set matrices as well as the cross matrix.
pub fn one_nna(gen_gen: &[Vec<f64>], ref_ref: &[Vec<f64>], gen_ref: &[Vec<f64>]) -> Result<f64> {
    let (g, r) = check_sets(gen_ref)?;
    if gen_gen.len() != g
        || ref_ref.len() != r
        || gen_gen.iter().any(|x| x.len() != g)
        || ref_ref.iter().any(|x| x.len() != r)
    {
        return Err(Error::ShapeMismatch(
            "within-set matrices do not match the cross matrix".into(),
        ));
    }
    let total = g + r;
    let dist = |a: usize, b: usize| -> f64 {
        match (a < g, b < g) {
            (true, true) => gen_gen[a][b],
            (false, false) => ref_ref[a - g][b - g],
            (true, false) => gen_ref[a][b - g],
            (false, true) => gen_ref[b][a - g],
        }
    };
    let mut correct = 0usize;
    for a in 0..total {
        let (nn, _) = argmin((0..total).map(|b| if b == a { f64::INFINITY } else { dist(a, b) })).expect("nonempty");
        if (nn < g) == (a < g) {
            correct += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Symmetric within-set distance matrix.
pub fn self_distances(set: &[PointCloud<f64>], kind: SetDistance) -> Result<Vec<Vec<f64>>> {
    let n = set.len();
    let mut d = vec![vec![0.0; n]; n];
    match kind {
        SetDistance::Chamfer => {
            let trees: Vec<_> = set.iter().map(|c| KdTree::build(c.points())).collect::<Result<_>>()?;
            for i in 0..n {
                for j in i + 1..n {
                    let v = directed_chamfer(&set[i], &trees[j])? + directed_chamfer(&set[j], &trees[i])?;
                    d[i][j] = v;
                    d[j][i] = v;
                }
            }
        }
        SetDistance::Emd => {
            for i in 0..n {
                for j in i + 1..n {
                    let v = emd(&set[i], &set[j])?;
                    d[i][j] = v;
                    d[j][i] = v;
                }
            }
        }
    }
    Ok(d)
}

/// MMD, COV and 1-NNA for one distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub mmd: f64,
    pub cov: f64,
    pub nna: f64,
}

pub fn set_scores(gen: &[PointCloud<f64>], refs: &[PointCloud<f64>], kind: SetDistance) -> Result<SetScores> {
    let cross = cross_distances(gen, refs, kind)?;
    let gg = self_distances(gen, kind)?;
    let rr = self_distances(refs, kind)?;
    Ok(SetScores {
        mmd: mmd(&cross)?,
        cov: coverage(&cross)?,
        nna: one_nna(&gg, &rr, &cross)?,
    })
}

/// Seeded uniform subsample to at most `max_points` (without replacement).
pub fn subsample(cloud: &PointCloud<f64>, max_points: usize, seed: u64) -> Result<PointCloud<f64>> {
    if cloud.len() <= max_points {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, cloud.len(), max_points).into_vec();
    idx.sort_unstable();
    PointCloud::new(idx.into_iter().map(|i| cloud.points()[i]).collect())
}

/// Seeded resample to exactly `count` points: without replacement when the
/// cloud is large enough, otherwise all points plus uniform repeats.
pub fn resample_exact(cloud: &PointCloud<f64>, count: usize, seed: u64) -> Result<PointCloud<f64>> {
    if count == 0 {
        return Err(Error::InvalidArgument("resample to zero points".into()));
    }
    if cloud.len() >= count {
        return subsample(cloud, count, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = cloud.points().to_vec();
    while pts.len() < count {
        pts.push(cloud.points()[rng.random_range(0..cloud.len())]);
    }
    PointCloud::new(pts)
}

/// Generative-quality report. Distances are stored unscaled; the text table
/// shows Chamfer ×10³ and EMD ×10².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chamfer: SetScores,
    pub emd: Option<SetScores>,
    pub generated: usize,
    pub reference: usize,
    pub eval_points: usize,
    pub emd_points: usize,
    pub chamfer_convention: String,
}

pub const CHAMFER_CONVENTION: &str = "sum of directed mean squared nearest-neighbour distances";

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>12} {:>12}\n", "metric", "CD (x1e3)", "EMD (x1e2)"));
        let emd = |f: fn(&SetScores) -> f64, scale: f64| {
            self.emd
                .as_ref()
                .map_or_else(|| "-".to_string(), |s| format!("{:.4}", f(s) * scale))
        };
        out.push_str(&format!(
            "{:<10} {:>12.4} {:>12}\n",
            "MMD",
            self.chamfer.mmd * 1e3,
            emd(|s| s.mmd, 1e2)
        ));
        out.push_str(&format!(
            "{:<10} {:>12.4} {:>12}\n",
            "COV",
            self.chamfer.cov,
            emd(|s| s.cov, 1.0)
        ));
        out.push_str(&format!(
            "{:<10} {:>12.4} {:>12}\n",
            "1-NNA",
            self.chamfer.nna,
            emd(|s| s.nna, 1.0)
        ));
        out.push_str(&format!(
            "generated {}  reference {}  points {}  emd points {}\nchamfer: {}\n",
            self.generated, self.reference, self.eval_points, self.emd_points, self.chamfer_convention
        ));
        out
    }
}

/// Options for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub eval_points: usize,
    /// Cloud size for EMD; `0` skips the EMD metrics.
    pub emd_points: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            eval_points: DEFAULT_EVAL_POINTS,
            emd_points: DEFAULT_EMD_POINTS,
            seed: 0,
        }
    }
}

/// Scores generated clouds against references. Cloud `i` of either set is
/// subsampled with a seed derived from `i` alone, so identical sets give
/// identical evaluation clouds.
pub fn evaluate(gen: &[PointCloud<f64>], refs: &[PointCloud<f64>], options: &EvalOptions) -> Result<EvalReport> {
    if gen.is_empty() || refs.is_empty() {
        return Err(Error::Empty("generated or reference set".into()));
    }
    let prep = |set: &[PointCloud<f64>], tag: u64, n: usize, exact: bool| -> Result<Vec<PointCloud<f64>>> {
        set.iter()
            .enumerate()
            .map(|(i, c)| {
                let seed = options.seed ^ (tag << 32) ^ i as u64;
                if exact {
                    resample_exact(c, n, seed)
                } else {
                    subsample(c, n, seed)
                }
            })
            .collect()
    };
    let g = prep(gen, 1, options.eval_points, false)?;
    let r = prep(refs, 1, options.eval_points, false)?;
    let chamfer = set_scores(&g, &r, SetDistance::Chamfer)?;
    let emd = if options.emd_points > 0 {
        let g = prep(gen, 2, options.emd_points, true)?;
        let r = prep(refs, 2, options.emd_points, true)?;
        Some(set_scores(&g, &r, SetDistance::Emd)?)
    } else {
        None
    };
    Ok(EvalReport {
        chamfer,
        emd,
        generated: gen.len(),
        reference: refs.len(),
        eval_points: options.eval_points,
        emd_points: options.emd_points,
        chamfer_convention: CHAMFER_CONVENTION.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud<f64> {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn chamfer_hand_case() {
        // A→B: 1; B→A: (1 + 9) / 2 = 5
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 6.0);
        assert_eq!(chamfer(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_matches_exhaustive_and_is_isometry_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_cloud(&mut rng, 60), random_cloud(&mut rng, 45));
        let directed = |x: &PointCloud<f64>, y: &PointCloud<f64>| {
            x.points()
                .iter()
                .map(|p| y.points().iter().map(|q| p.dist2(q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        let oracle = directed(&a, &b) + directed(&b, &a);
        let cd = chamfer(&a, &b).unwrap();
        assert!((cd - oracle).abs() < 1e-12);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let moved = |x: &PointCloud<f64>| {
            PointCloud::new(
                x.points()
                    .iter()
                    .map(|p| Point3::new(c * p.x - s * p.y + 2.0, s * p.x + c * p.y - 1.0, p.z + 0.5))
                    .collect(),
            )
            .unwrap()
        };
        assert!((chamfer(&moved(&a), &moved(&b)).unwrap() - cd).abs() < 1e-9);
    }

    #[test]
    fn emd_assignment_cases() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(emd(&a, &b).unwrap(), 0.0);
        assert!(emd(&a, &cloud(&[[0.0; 3]])).is_err());
    }

    #[test]
    fn emd_dominates_directed_nearest_neighbour_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let (a, b) = (random_cloud(&mut rng, 32), random_cloud(&mut rng, 32));
            let nn = a
                .points()
                .iter()
                .map(|p| b.points().iter().map(|q| p.dist(q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / 32.0;
            assert!(emd(&a, &b).unwrap() >= nn - 1e-12);
        }
    }

    #[test]
    fn duplicate_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set: Vec<_> = (0..8).map(|_| random_cloud(&mut rng, 40)).collect();
        let copies = set.clone();
        for kind in [SetDistance::Chamfer, SetDistance::Emd] {
            let s = set_scores(&set, &copies, kind).unwrap();
            assert_eq!((s.mmd, s.cov, s.nna), (0.0, 1.0, 0.0));
        }
    }

    #[test]
    fn one_nna_separates_distinct_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen: Vec<_> = (0..6).map(|_| random_cloud(&mut rng, 30)).collect();
        let far: Vec<_> = (0..6)
            .map(|_| {
                let c = random_cloud(&mut rng, 30);
                PointCloud::new(c.points().iter().map(|p| *p + Point3::new(50.0, 0.0, 0.0)).collect()).unwrap()
            })
            .collect();
        assert_eq!(set_scores(&gen, &far, SetDistance::Chamfer).unwrap().nna, 1.0);
    }

    #[test]
    fn scores_ignore_set_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen: Vec<_> = (0..7).map(|_| random_cloud(&mut rng, 25)).collect();
        let refs: Vec<_> = (0..5).map(|_| random_cloud(&mut rng, 25)).collect();
        let a = set_scores(&gen, &refs, SetDistance::Chamfer).unwrap();
        let mut g2 = gen.clone();
        g2.reverse();
        let mut r2 = refs.clone();
        r2.rotate_left(2);
        let b = set_scores(&g2, &r2, SetDistance::Chamfer).unwrap();
        assert!((a.mmd - b.mmd).abs() < 1e-12);
        assert_eq!(a.cov, b.cov);
        assert_eq!(a.nna, b.nna);
    }

    #[test]
    fn evaluate_identical_sets_with_subsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set: Vec<_> = (0..5).map(|_| random_cloud(&mut rng, 90)).collect();
        let options = EvalOptions {
            eval_points: 64,
            emd_points: 24,
            seed: 3,
        };
        let report = evaluate(&set, &set.clone(), &options).unwrap();
        let emd = report.emd.unwrap();
        assert_eq!(
            (report.chamfer.mmd, report.chamfer.cov, report.chamfer.nna),
            (0.0, 1.0, 0.0)
        );
        assert_eq!((emd.mmd, emd.cov, emd.nna), (0.0, 1.0, 0.0));
        assert!(report.to_table().contains("1-NNA"));
    }

    #[test]
    fn resampling_is_seeded_and_exact_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_cloud(&mut rng, 50);
        assert_eq!(subsample(&c, 20, 1).unwrap(), subsample(&c, 20, 1).unwrap());
        assert_eq!(subsample(&c, 80, 1).unwrap().len(), 50);
        assert_eq!(resample_exact(&c, 80, 1).unwrap().len(), 80);
        assert!(mmd(&[]).is_err());
    }
}
