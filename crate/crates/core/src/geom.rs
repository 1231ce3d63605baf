//! Axis-aligned box algebra, centroids and centroid distance matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or direction in scene units.
pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Axis-aligned box given by its minimum and maximum corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Builds a box, rejecting corners with `min > max` on any axis.
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|k| !(min[k] <= max[k])) {
            return Err(Error::InvalidInput(format!(
                "box min {min:?} exceeds max {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    /// `(xmin, ymin, zmin, xmax, ymax, zmax)`.
    pub fn from_array(v: [f64; 6]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2],
        ]
    }

    /// Tight box around a non-empty point set.
    pub fn around(points: impl IntoIterator<Item = Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut min, mut max) = (first, first);
        for p in it {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Some(Self { min, max })
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn center(&self) -> Vec3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        let mut v = 1.0;
        for k in 0..3 {
            let lo = self.min[k].max(other.min[k]);
            let hi = self.max[k].min(other.max[k]);
            if hi <= lo {
                return 0.0;
            }
            v *= hi - lo;
        }
        v
    }
}

/// Volumetric IoU of two boxes. Zero when the union has no volume.
pub fn aabb_iou(a: &Aabb, b: &Aabb) -> f64 {
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Arithmetic mean of a point set.
pub fn centroid(points: &[Vec3]) -> Result<Vec3> {
    if points.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut acc = [0.0; 3];
    for p in points {
        for k in 0..3 {
            acc[k] += p[k];
        }
    }
    let n = points.len() as f64;
    Ok([acc[0] / n, acc[1] / n, acc[2] / n])
}

/// Dense `rows x cols` matrix of Euclidean distances between two centroid lists.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Row-major entries.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn pairwise_distances(a: &[Vec3], b: &[Vec3]) -> DistanceMatrix {
    let mut values = Vec::with_capacity(a.len() * b.len());
    for p in a {
        for q in b {
            values.push(distance(*p, *q));
        }
    }
    DistanceMatrix {
        rows: a.len(),
        cols: b.len(),
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(min: Vec3, side: f64) -> Aabb {
        Aabb::new(min, [min[0] + side, min[1] + side, min[2] + side]).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = cube([0.0; 3], 1.0);
        assert_eq!(aabb_iou(&a, &a), 1.0);
        assert_eq!(aabb_iou(&a, &cube([5.0, 5.0, 5.0], 1.0)), 0.0);
        let a = Aabb::from_array([0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        let b = Aabb::from_array([1.0, 0.0, 0.0, 3.0, 2.0, 2.0]).unwrap();
        assert!((aabb_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = Aabb::new([1.0; 3], [1.0; 3]).unwrap();
        assert_eq!(aabb_iou(&p, &p), 0.0);
        let flat = Aabb::new([0.0; 3], [1.0, 1.0, 0.0]).unwrap();
        assert_eq!(aabb_iou(&flat, &flat), 0.0);
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(Aabb::new([1.0, 0.0, 0.0], [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[[0.0; 3], [2.0; 3]]).unwrap(), [1.0; 3]);
        assert_eq!(centroid(&[[0.5, -2.0, 7.0]]).unwrap(), [0.5, -2.0, 7.0]);
        let c = centroid(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        for v in c {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(centroid(&[]), Err(Error::EmptyMask)));
    }

    #[test]
    fn distance_examples() {
        let d = pairwise_distances(&[[0.0; 3]], &[[0.0; 3]]);
        assert_eq!(d.values(), &[0.0]);
        let d = pairwise_distances(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]);
        assert_eq!(d.get(0, 0), 5.0);
        let a = [[0.0, 1.0, 2.0], [-1.0, 0.5, 3.0]];
        let b = [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [2.0, -1.0, 0.5]];
        let d = pairwise_distances(&a, &b);
        assert_eq!((d.rows(), d.cols()), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                let e: f64 = (0..3).map(|k| (a[i][k] - b[j][k]).powi(2)).sum::<f64>().sqrt();
                assert!((d.get(i, j) - e).abs() < 1e-12);
            }
        }
        assert_eq!(pairwise_distances(&[], &b).rows(), 0);
    }

    fn arb_box() -> impl Strategy<Value = Aabb> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(0.01f64..4.0),
        )
            .prop_map(|(m, e)| Aabb::new(m, [m[0] + e[0], m[1] + e[1], m[2] + e[2]]).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = aabb_iou(&a, &b);
            prop_assert_eq!(ab, aabb_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((aabb_iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn self_distances_zero_diagonal(pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 0..8)) {
            let d = pairwise_distances(&pts, &pts);
            for i in 0..pts.len() {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..pts.len() {
                    prop_assert!(d.get(i, j) >= 0.0);
                }
            }
        }
    }
}
