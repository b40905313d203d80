//! Pipelines built on a trained model: completing a shape from a partial
//! part observation, mixing parts between shapes, and latent editing.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    complete, decode_shape, default_refine_start, leading_half, part_row, refine_dims, LatentLayout, ShapeLatent,
    ShapeModel,
};
use crate::error::{Error, Result};
use crate::geometry::{KdTree, PointCloud};
use crate::semantics::LabelCodebook;
use crate::ssm::{fit_latent_least_squares, PartSsm, DEFAULT_RIDGE};
use crate::synthetic::{CategoryId, SegmentedShape};

/// A category match is flagged ambiguous unless the runner-up distance
/// exceeds the best by this factor.
pub const AMBIGUITY_RATIO: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMatch {
    pub category: CategoryId,
    /// Mean distance from observed points to the nearest mean-shape point,
    /// one entry per category.
    pub distances: Vec<f64>,
    pub ambiguous: bool,
}

/// Picks the category whose mean shape is closest to `observed` in mean
/// one-directional nearest-neighbour distance. Ties go to the lower id.
pub fn identify_category(observed: &PointCloud<f64>, ssms: &[PartSsm]) -> Result<CategoryMatch> {
    if ssms.is_empty() {
        return Err(Error::Empty("no shape models loaded".into()));
    }
    if observed.is_empty() {
        return Err(Error::Empty("observed cloud".into()));
    }
    let mut distances = Vec::with_capacity(ssms.len());
    for ssm in ssms {
        let tree = KdTree::build(&ssm.mean_shape().points)?;
        let mut total = 0.0;
        for p in observed.points() {
            total += tree.nearest(p)?.1.sqrt();
        }
        distances.push(total / observed.len() as f64);
    }
    let mut best = 0;
    for (i, d) in distances.iter().enumerate() {
        if *d < distances[best] {
            best = i;
        }
    }
    let runner_up = distances
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let ambiguous = runner_up.is_finite() && runner_up <= AMBIGUITY_RATIO * distances[best];
    Ok(CategoryMatch {
        category: best as CategoryId,
        distances,
        ambiguous,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadedCompletion {
    pub matched: CategoryMatch,
    /// Whitened latent fitted to the observation.
    pub latent: Vec<f64>,
    /// Mean squared distance of observed points to the fitted part.
    pub residual: f64,
    /// Row holding the fitted part in every completion.
    pub row: usize,
    pub latents: Vec<ShapeLatent>,
    pub warnings: Vec<String>,
}

impl CascadedCompletion {
    pub fn decode(&self, model: &ShapeModel) -> Result<Vec<SegmentedShape>> {
        self.latents
            .iter()
            .enumerate()
            .map(|(i, l)| {
                decode_shape(
                    &model.layout,
                    &model.codebook,
                    &model.ssms,
                    l,
                    &format!("completion-{i}"),
                )
            })
            .collect()
    }
}

/// Completes whole shapes from a partial observation of one part: the part
/// category is identified against the mean shapes, its latent is fitted to
/// the points, and `k` shapes are generated around it.
pub fn cascaded_complete(
    model: &ShapeModel,
    observed: &PointCloud<f64>,
    k: usize,
    seed: u64,
) -> Result<CascadedCompletion> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let matched = identify_category(observed, &model.ssms)?;
    let category = matched.category as usize;
    let fit = fit_latent_least_squares(&model.ssms[category], observed, DEFAULT_RIDGE)?;
    let row_values = part_row(&model.layout, &model.codebook, category, &fit.latent)?;
    let row = category;
    let latents = complete(model, &[(row, row_values)], k, seed)?;
    let mut warnings = Vec::new();
    if matched.ambiguous {
        warnings.push(format!(
            "category match '{}' is ambiguous: runner-up within {:.0}% of the best distance",
            model.category_names[category],
            (AMBIGUITY_RATIO - 1.0) * 100.0
        ));
    }
    Ok(CascadedCompletion {
        matched,
        latent: fit.latent,
        residual: fit.residual,
        row,
        latents,
        warnings,
    })
}

fn row_of(layout: &LatentLayout, codebook: &LabelCodebook, shape: &ShapeLatent, category: usize) -> Result<usize> {
    shape
        .find_category(layout, codebook, category)?
        .ok_or_else(|| Error::InvalidArgument(format!("shape has no part of category {category}")))
}

/// Adds a part of `category` with whitened geometry `z` in a free row,
/// preferring row `category`.
pub fn add_part(
    layout: &LatentLayout,
    codebook: &LabelCodebook,
    shape: &ShapeLatent,
    category: usize,
    z: &[f64],
) -> Result<ShapeLatent> {
    shape.validate(layout)?;
    if shape.find_category(layout, codebook, category)?.is_some() {
        return Err(Error::InvalidArgument(format!(
            "shape already has a part of category {category}"
        )));
    }
    let row = if shape.mask.get(category) == Some(&false) {
        category
    } else {
        shape
            .mask
            .iter()
            .position(|real| !real)
            .ok_or_else(|| Error::InvalidArgument("shape has no free slot".into()))?
    };
    let mut out = shape.clone();
    out.rows[row] = part_row(layout, codebook, category, z)?;
    out.mask[row] = true;
    Ok(out)
}

/// Turns the row holding `category` back into padding.
pub fn remove_part(
    layout: &LatentLayout,
    codebook: &LabelCodebook,
    shape: &ShapeLatent,
    category: usize,
) -> Result<ShapeLatent> {
    shape.validate(layout)?;
    let row = row_of(layout, codebook, shape, category)?;
    let mut out = shape.clone();
    out.rows[row] = ShapeLatent::empty(layout, codebook).rows.swap_remove(0);
    out.mask[row] = false;
    Ok(out)
}

/// Swaps in new geometry `z` for the part of `category`.
pub fn replace_part(
    layout: &LatentLayout,
    codebook: &LabelCodebook,
    shape: &ShapeLatent,
    category: usize,
    z: &[f64],
) -> Result<ShapeLatent> {
    shape.validate(layout)?;
    let row = row_of(layout, codebook, shape, category)?;
    let mut out = shape.clone();
    out.rows[row] = part_row(layout, codebook, category, z)?;
    Ok(out)
}

/// Blends the geometry of `a`'s part in `row` towards the part of the same
/// category in `b`. Labels and all other rows come from `a`.
pub fn interpolate_part(
    layout: &LatentLayout,
    codebook: &LabelCodebook,
    a: &ShapeLatent,
    b: &ShapeLatent,
    row: usize,
    alpha: f64,
) -> Result<ShapeLatent> {
    a.validate(layout)?;
    b.validate(layout)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if row >= a.m() || !a.mask[row] {
        return Err(Error::InvalidArgument(format!("row {row} is not a real part")));
    }
    let (category, _) = codebook.classify(a.labels(layout, row))?;
    let other = row_of(layout, codebook, b, category)?;
    let mut out = a.clone();
    let gw = layout.geometry_width();
    for (o, zb) in out.rows[row][..gw].iter_mut().zip(&b.rows[other][..gw]) {
        *o = (1.0 - alpha) * *o + alpha * zb;
    }
    Ok(out)
}

/// Replaces the part of `category` in `host` with the donor's part and then
/// regenerates the leading half of its geometry so it fits the host.
/// Returns the mixed latent before refinement and the refined one.
pub fn mix_and_refine(
    model: &ShapeModel,
    host: &ShapeLatent,
    donor: &ShapeLatent,
    category: usize,
    seed: u64,
) -> Result<(ShapeLatent, ShapeLatent)> {
    let (layout, codebook) = (&model.layout, &model.codebook);
    let row = row_of(layout, codebook, host, category)?;
    let mixed = interpolate_part(layout, codebook, host, donor, row, 1.0)?;
    let dims = leading_half(model, category)?;
    let refined = refine_dims(model, &mixed, row, &dims, default_refine_start(model), seed)?;
    Ok((mixed, refined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use nalgebra::DMatrix;

    fn toy_ssm(category: CategoryId, offset: f64) -> PartSsm {
        let mean: Vec<f64> = (0..4).flat_map(|i| [i as f64 + offset, 0.0, 0.0]).collect();
        let mut basis = DMatrix::zeros(12, 1);
        basis[(1, 0)] = 0.5;
        basis[(4, 0)] = 0.5;
        basis[(7, 0)] = 0.5;
        basis[(10, 0)] = 0.5;
        PartSsm::from_parts(category, mean, basis, vec![1.0], 1.0).unwrap()
    }

    fn layout_and_codebook() -> (LatentLayout, LabelCodebook) {
        (LatentLayout::new(vec![2, 1, 2]).unwrap(), LabelCodebook::standard(3))
    }

    #[test]
    fn identify_exact_mean_and_ties() {
        let ssms = vec![toy_ssm(0, 0.0), toy_ssm(1, 10.0)];
        let mean1 = PointCloud::new(ssms[1].mean_shape().points).unwrap();
        let m = identify_category(&mean1, &ssms).unwrap();
        assert_eq!(m.category, 1);
        assert_eq!(m.distances[1], 0.0);
        assert!(!m.ambiguous);
        // Midway between x = 3 (end of category 0) and x = 10 (start of category 1).
        let mid = PointCloud::new(vec![Point3::new(6.5, 0.0, 0.0)]).unwrap();
        let m = identify_category(&mid, &ssms).unwrap();
        assert_eq!(m.category, 0);
        assert!(m.ambiguous);
        assert!(identify_category(&mid, &[]).is_err());
    }

    #[test]
    fn add_remove_replace_slots() {
        let (layout, cb) = layout_and_codebook();
        let empty = ShapeLatent::empty(&layout, &cb);
        let one = add_part(&layout, &cb, &empty, 0, &[0.5, -0.5]).unwrap();
        assert_eq!(one.real_rows(), 1);
        assert!(one.mask[0]);
        assert_eq!(empty.real_rows(), 0);
        assert!(add_part(&layout, &cb, &one, 0, &[0.0, 0.0]).is_err());
        assert!(add_part(&layout, &cb, &one, 1, &[0.0, 0.0]).is_err());
        let two = add_part(&layout, &cb, &one, 1, &[1.0]).unwrap();
        let full = add_part(&layout, &cb, &two, 2, &[1.0, 2.0]).unwrap();
        assert_eq!(full.real_rows(), 3);
        let removed = remove_part(&layout, &cb, &full, 1).unwrap();
        assert_eq!(removed.real_rows(), 2);
        assert_eq!(removed.rows[1], empty.rows[1]);
        assert!(remove_part(&layout, &cb, &removed, 1).is_err());
        let replaced = replace_part(&layout, &cb, &full, 2, &[3.0, 4.0]).unwrap();
        assert_eq!(&replaced.rows[2][..2], &[3.0, 4.0]);
        assert_eq!(replaced.rows[0], full.rows[0]);
        assert!(replace_part(&layout, &cb, &removed, 1, &[0.0]).is_err());
    }

    #[test]
    fn add_uses_first_free_row_when_own_row_taken() {
        let (layout, cb) = layout_and_codebook();
        let mut shape = ShapeLatent::empty(&layout, &cb);
        shape.rows[1] = part_row(&layout, &cb, 0, &[1.0, 1.0]).unwrap();
        shape.mask[1] = true;
        shape.rows[2] = part_row(&layout, &cb, 1, &[1.0]).unwrap();
        shape.mask[2] = true;
        let out = add_part(&layout, &cb, &shape, 2, &[0.0, 0.0]).unwrap();
        assert!(out.mask[0]);
        assert_eq!(cb.classify(out.labels(&layout, 0)).unwrap().0, 2);
    }

    #[test]
    fn interpolation_endpoints() {
        let (layout, cb) = layout_and_codebook();
        let empty = ShapeLatent::empty(&layout, &cb);
        let a = add_part(
            &layout,
            &cb,
            &add_part(&layout, &cb, &empty, 0, &[1.0, 2.0]).unwrap(),
            1,
            &[0.3],
        )
        .unwrap();
        let mut b = add_part(&layout, &cb, &empty, 0, &[-1.0, 5.0]).unwrap();
        b.rows.swap(0, 2);
        b.mask.swap(0, 2);
        assert_eq!(interpolate_part(&layout, &cb, &a, &b, 0, 0.0).unwrap(), a);
        let one = interpolate_part(&layout, &cb, &a, &b, 0, 1.0).unwrap();
        assert_eq!(one.rows[0], b.rows[2]);
        assert_eq!(one.rows[1], a.rows[1]);
        let half = interpolate_part(&layout, &cb, &a, &b, 0, 0.5).unwrap();
        assert_eq!(&half.rows[0][..2], &[0.0, 3.5]);
        assert!(interpolate_part(&layout, &cb, &a, &b, 1, 0.5).is_err());
        assert!(interpolate_part(&layout, &cb, &a, &b, 0, 1.5).is_err());
        assert!(interpolate_part(&layout, &cb, &a, &b, 2, 0.5).is_err());
    }

    #[test]
    fn interpolated_part_decodes_to_full_part() {
        let ssm = toy_ssm(0, 0.0);
        let a = ssm.decode(&[0.0]).unwrap();
        let b = ssm.decode(&[2.0]).unwrap();
        let mid = ssm.decode(&[1.0]).unwrap();
        assert_eq!(mid.len(), 4);
        for ((x, y), z) in a.points.iter().zip(&b.points).zip(&mid.points) {
            assert!((((*x + *y) * 0.5).dist(z)) < 1e-12);
        }
    }
}
