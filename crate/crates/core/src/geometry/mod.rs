//! Points, point clouds, rigid normalization and nearest-neighbor queries.

mod kdtree;

pub use kdtree::KdTree;

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Point3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn origin() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> T {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    #[inline]
    pub fn dist2(&self, other: &Self) -> T {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    #[inline]
    pub fn dist(&self, other: &Self) -> T {
        self.dist2(other).sqrt()
    }

    pub fn norm2(&self) -> T {
        self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<U: Real>(&self) -> Point3<U> {
        Point3::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
        )
    }
}

impl<T: Real> Add for Point3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Point3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Mul<T> for Point3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// A non-empty ordered list of finite points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point3<T>>", into = "Vec<Point3<T>>")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct PointCloud<T: Real> {
    points: Vec<Point3<T>>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud has no points".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("point {i} of cloud")));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(flat: &[T]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::ShapeMismatch(format!(
                "flat coordinate buffer of length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect())
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3<T>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn centroid(&self) -> Point3<T> {
        let n = T::from_usize(self.points.len()).unwrap();
        let sum = self.points.iter().fold(Point3::origin(), |acc, p| acc + *p);
        sum * (T::one() / n)
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Point3<T>, Point3<T>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        (lo, hi)
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.iter().map(Point3::cast).collect(),
        }
    }
}

impl<T: Real> TryFrom<Vec<Point3<T>>> for PointCloud<T> {
    type Error = Error;
    fn try_from(points: Vec<Point3<T>>) -> Result<Self> {
        Self::new(points)
    }
}

impl<T: Real> From<PointCloud<T>> for Vec<Point3<T>> {
    fn from(c: PointCloud<T>) -> Self {
        c.points
    }
}

/// Inverse parameters of [`normalize_to_unit_cube`]: a normalized point is
/// `(p + offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitCubeTransform<T> {
    pub scale: T,
    pub offset: Point3<T>,
}

impl<T: Real> UnitCubeTransform<T> {
    pub fn apply(&self, p: Point3<T>) -> Point3<T> {
        (p + self.offset) * self.scale
    }

    pub fn invert(&self, p: Point3<T>) -> Point3<T> {
        p * (T::one() / self.scale) - self.offset
    }
}

/// Centers the bounding box at the origin and scales uniformly so the
/// longest axis spans exactly `[-1, 1]`.
pub fn normalize_to_unit_cube<T: Real>(cloud: &PointCloud<T>) -> Result<(PointCloud<T>, UnitCubeTransform<T>)> {
    let (lo, hi) = cloud.bounds();
    let half = T::lit(0.5);
    let extent = (hi.x - lo.x).max(hi.y - lo.y).max(hi.z - lo.z);
    if extent <= T::zero() {
        return Err(Error::ZeroExtent);
    }
    let center = (lo + hi) * half;
    let transform = UnitCubeTransform {
        scale: T::lit(2.0) / extent,
        offset: Point3::origin() - center,
    };
    let points = cloud.points.iter().map(|p| transform.apply(*p)).collect();
    Ok((PointCloud::new(points)?, transform))
}

/// Exhaustive nearest-neighbor scan; ties resolve to the lowest index.
pub fn nearest_neighbor_scan<T: Real>(query: &Point3<T>, target: &[Point3<T>]) -> Result<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, p) in target.iter().enumerate() {
        let d = query.dist2(p);
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((i, d)),
        }
    }
    best.ok_or_else(|| Error::Empty("nearest-neighbor target".into()))
}

/// Nearest point of `target` to `query` as `(index, squared distance)`.
pub fn nearest_neighbor<T: Real>(query: &Point3<T>, target: &PointCloud<T>) -> Result<(usize, T)> {
    KdTree::build(target.points())?.nearest(query)
}
