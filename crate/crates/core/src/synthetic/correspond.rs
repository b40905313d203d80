use super::{CorrespondedCloud, PartCategory};
use crate::error::{Error, Result};
use crate::geometry::{KdTree, Point3, PointCloud};

/// Resamples an uncorresponded cloud into template order.
///
/// The raw cloud is aligned once to the template by matching centroids and
/// RMS radii; output point `i` is then the aligned raw point nearest to
/// template point `i`. Raw points may be used more than once.
pub fn correspond_by_template(raw: &PointCloud<f64>, category: &PartCategory) -> Result<CorrespondedCloud> {
    let template = category.template.points();
    let raw_center = raw.centroid();
    let tpl_center = category.template.centroid();
    let raw_radius = rms_radius(raw.points(), raw_center);
    if raw_radius <= 1e-12 * (1.0 + raw_center.norm2().sqrt()) {
        return Err(Error::Degenerate("raw cloud has zero spread".into()));
    }
    let scale = rms_radius(template, tpl_center) / raw_radius;
    let aligned: Vec<Point3<f64>> = raw
        .points()
        .iter()
        .map(|p| (*p - raw_center) * scale + tpl_center)
        .collect();
    let tree = KdTree::build(&aligned)?;
    let points = template
        .iter()
        .map(|t| tree.nearest(t).map(|(i, _)| aligned[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrespondedCloud::new(category.id, points))
}

fn rms_radius(points: &[Point3<f64>], center: Point3<f64>) -> f64 {
    (points.iter().map(|p| p.dist2(&center)).sum::<f64>() / points.len() as f64).sqrt()
}
