use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::scalar::Real;

const LEAF_SIZE: usize = 8;

/// Static 3-d tree over a point slice. Queries return the same answer as
/// [`super::nearest_neighbor_scan`], including the lowest-index tie rule.
#[derive(Debug, Clone)]
pub struct KdTree<T> {
    points: Vec<Point3<T>>,
    index: Vec<usize>,
    axis: Vec<u8>,
}

impl<T: Real> KdTree<T> {
    pub fn build(points: &[Point3<T>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("kd-tree over an empty point set".into()));
        }
        let mut index: Vec<usize> = (0..points.len()).collect();
        let mut axis = vec![0u8; points.len()];
        split(points, &mut index, &mut axis, 0);
        Ok(Self {
            points: index.iter().map(|&i| points[i]).collect(),
            index,
            axis,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(original index, squared distance)` of the nearest point.
    pub fn nearest(&self, query: &Point3<T>) -> Result<(usize, T)> {
        let mut best = (usize::MAX, T::infinity());
        self.search(query, 0, self.points.len(), &mut best);
        Ok(best)
    }

    fn consider(&self, slot: usize, query: &Point3<T>, best: &mut (usize, T)) {
        let d = query.dist2(&self.points[slot]);
        let i = self.index[slot];
        if d < best.1 || (d == best.1 && i < best.0) {
            *best = (i, d);
        }
    }

    fn search(&self, query: &Point3<T>, lo: usize, hi: usize, best: &mut (usize, T)) {
        if hi - lo <= LEAF_SIZE {
            for slot in lo..hi {
                self.consider(slot, query, best);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axis[mid] as usize;
        self.consider(mid, query, best);
        let diff = query.coord(axis) - self.points[mid].coord(axis);
        let (near, far) = if diff < T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(query, near.0, near.1, best);
        // `<=` keeps equal-distance candidates reachable for the tie rule.
        if diff * diff <= best.1 {
            self.search(query, far.0, far.1, best);
        }
    }
}

fn split<T: Real>(points: &[Point3<T>], index: &mut [usize], axis_out: &mut [u8], offset: usize) {
    let n = index.len();
    if n <= LEAF_SIZE {
        return;
    }
    let mut lo = points[index[0]];
    let mut hi = lo;
    for &i in index.iter() {
        let p = points[i];
        lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let spread = hi - lo;
    let axis = if spread.x >= spread.y && spread.x >= spread.z {
        0
    } else if spread.y >= spread.z {
        1
    } else {
        2
    };
    let mid = n / 2;
    index.select_nth_unstable_by(mid, |&a, &b| {
        points[a]
            .coord(axis)
            .partial_cmp(&points[b].coord(axis))
            .unwrap()
            .then(a.cmp(&b))
    });
    axis_out[offset + mid] = axis as u8;
    let (left, rest) = index.split_at_mut(mid);
    split(points, left, &mut axis_out[..], offset);
    split(points, &mut rest[1..], axis_out, offset + mid + 1);
}
