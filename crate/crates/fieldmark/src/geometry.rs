//! Axis-aligned boxes, normalized pair features, and ray-cast visibility.
//!
//! All model inputs are derived from box geometry alone: a pair of boxes is
//! encoded as eight coordinates normalized by their joint bounding box, which
//! makes every downstream feature invariant to global translation and uniform
//! scaling of the page. Field-to-field graph edges come from casting a fan of
//! rays out of each box center and keeping the first box each ray hits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator guard for degenerate (zero-extent) joint boxes: coordinates
/// along a collapsed axis normalize to 0 instead of dividing by zero.
const EXTENT_EPS: f64 = 1e-9;

/// Axis-aligned bounding box, `min` corner inclusive through `max` corner.
///
/// Serializes as the flat array `[x_min, y_min, x_max, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x_min: v[0], y_min: v[1], x_max: v[2], y_max: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// True when all coordinates are finite and `min <= max` on both axes.
    /// Zero-area boxes are valid.
    pub fn is_valid(&self) -> bool {
        let fin = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        fin && self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    /// Inclusive point containment (boundary counts as inside).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Clamp the box into `[0, width] x [0, height]` page bounds.
    pub fn clamped(&self, width: f64, height: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }
}

/// Bounding box of a quadrilateral given as `[x0, y0, x1, y1, x2, y2, x3, y3]`.
///
/// The corner order does not matter. Errors on non-finite coordinates.
pub fn bounding_box(quad: &[f64; 8]) -> Result<BBox> {
    if quad.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("quad has non-finite coordinates"));
    }
    let xs = [quad[0], quad[2], quad[4], quad[6]];
    let ys = [quad[1], quad[3], quad[5], quad[7]];
    let fold_min = |acc: f64, v: &f64| acc.min(*v);
    let fold_max = |acc: f64, v: &f64| acc.max(*v);
    Ok(BBox {
        x_min: xs.iter().fold(f64::INFINITY, fold_min),
        y_min: ys.iter().fold(f64::INFINITY, fold_min),
        x_max: xs.iter().fold(f64::NEG_INFINITY, fold_max),
        y_max: ys.iter().fold(f64::NEG_INFINITY, fold_max),
    })
}

/// Smallest box containing both `a` and `b`.
pub fn joint_bbox(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x_min: a.x_min.min(b.x_min),
        y_min: a.y_min.min(b.y_min),
        x_max: a.x_max.max(b.x_max),
        y_max: a.y_max.max(b.y_max),
    }
}

/// Relative-position encoding of an ordered box pair.
///
/// Both boxes' corners are normalized into the coordinate frame of their
/// joint bounding box, yielding
/// `[ax_min, ay_min, ax_max, ay_max, bx_min, by_min, bx_max, by_max]` with
/// every value in `[0, 1]`. The encoding depends only on the boxes' relative
/// placement: translating or uniformly scaling both boxes together leaves it
/// unchanged. If the joint box has zero extent along an axis, all normalized
/// coordinates on that axis are 0.
pub fn pair_feature(a: &BBox, b: &BBox) -> [f64; 8] {
    let j = joint_bbox(a, b);
    let dx = j.width().max(EXTENT_EPS);
    let dy = j.height().max(EXTENT_EPS);
    let nx = |x: f64| (x - j.x_min) / dx;
    let ny = |y: f64| (y - j.y_min) / dy;
    [
        nx(a.x_min),
        ny(a.y_min),
        nx(a.x_max),
        ny(a.y_max),
        nx(b.x_min),
        ny(b.y_min),
        nx(b.x_max),
        ny(b.y_max),
    ]
}

/// Number of values produced by [`pair_feature`].
pub const PAIR_FEATURE_DIM: usize = 8;

/// Cast a ray from `origin` at `angle_deg` (degrees, counterclockwise from
/// +x) and return the distance to `b`, or `None` on a miss.
///
/// The hit distance is the smallest `t >= 0` with `origin + t * dir` inside
/// or on the box; an origin already inside yields `0`.
pub fn ray_hit(origin: (f64, f64), angle_deg: f64, b: &BBox) -> Option<f64> {
    let rad = angle_deg.to_radians();
    let dir = (rad.cos(), rad.sin());
    let (t0x, t1x) = slab_range(origin.0, dir.0, b.x_min, b.x_max)?;
    let (t0y, t1y) = slab_range(origin.1, dir.1, b.y_min, b.y_max)?;
    let enter = t0x.max(t0y);
    let exit = t1x.min(t1y);
    if enter > exit || exit < 0.0 {
        None
    } else {
        Some(enter.max(0.0))
    }
}

/// Parameter interval along one axis where the ray lies inside `[lo, hi]`.
fn slab_range(o: f64, d: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if d == 0.0 {
        if o < lo || o > hi {
            return None;
        }
        return Some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let ta = (lo - o) / d;
    let tb = (hi - o) / d;
    Some(if ta <= tb { (ta, tb) } else { (tb, ta) })
}

/// Directed visibility edges between boxes.
///
/// From each box center, `ray_count` rays are cast at angles
/// `0, step_deg, 2 * step_deg, ...`; each ray contributes an edge to the
/// nearest box it hits (ties broken toward the lowest index). The result is
/// deduplicated, contains no self-edges, and is sorted by `(src, dst)`, so a
/// source's out-degree is at most `ray_count`.
pub fn visibility_edges(boxes: &[BBox], ray_count: usize, step_deg: f64) -> Vec<(usize, usize)> {
    let mut edges = std::collections::BTreeSet::new();
    for (src, sb) in boxes.iter().enumerate() {
        let origin = sb.center();
        for k in 0..ray_count {
            let angle = k as f64 * step_deg;
            let mut best: Option<(f64, usize)> = None;
            for (dst, db) in boxes.iter().enumerate() {
                if dst == src {
                    continue;
                }
                if let Some(t) = ray_hit(origin, angle, db) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, dst));
                    }
                }
            }
            if let Some((_, dst)) = best {
                edges.insert((src, dst));
            }
        }
    }
    edges.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bounding_box_axis_aligned_quad() {
        let b = bounding_box(&[0.0, 0.0, 2.0, 0.0, 2.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(b, BBox::new(0.0, 0.0, 2.0, 1.0));
    }

    #[test]
    fn bounding_box_rotated_quad() {
        let b = bounding_box(&[1.0, 0.0, 2.0, 1.0, 1.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(b, BBox::new(0.0, 0.0, 2.0, 2.0));
    }

    #[test]
    fn bounding_box_degenerate_point_quad() {
        let b = bounding_box(&[3.0; 8]).unwrap();
        assert_eq!(b, BBox::new(3.0, 3.0, 3.0, 3.0));
        assert!(b.is_valid(), "zero-area box should be valid");
    }

    #[test]
    fn bounding_box_rejects_non_finite() {
        assert!(bounding_box(&[0.0, 0.0, f64::NAN, 0.0, 1.0, 1.0, 0.0, 1.0]).is_err());
        assert!(bounding_box(&[0.0, 0.0, f64::INFINITY, 0.0, 1.0, 1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn joint_bbox_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(joint_bbox(&a, &b), BBox::new(0.0, 0.0, 3.0, 3.0));

        let outer = BBox::new(0.0, 0.0, 4.0, 4.0);
        let inner = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert_eq!(joint_bbox(&outer, &inner), outer);

        assert_eq!(joint_bbox(&a, &a), a);
    }

    #[test]
    fn pair_feature_identical_boxes() {
        let a = BBox::new(2.0, 3.0, 5.0, 7.0);
        let f = pair_feature(&a, &a);
        assert_eq!(f, [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn pair_feature_diagonal_neighbors() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        let f = pair_feature(&a, &b);
        assert_eq!(f, [0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn pair_feature_degenerate_axis_is_zero() {
        // Both boxes collapsed to the same vertical line: x-extent is zero.
        let a = BBox::new(4.0, 0.0, 4.0, 1.0);
        let b = BBox::new(4.0, 2.0, 4.0, 3.0);
        let f = pair_feature(&a, &b);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[2], 0.0);
        assert_eq!(f[4], 0.0);
        assert_eq!(f[6], 0.0);
        // y-axis is still informative.
        assert!((f[3] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(f[7], 1.0);
    }

    #[test]
    fn ray_hit_head_on() {
        let b = BBox::new(1.0, -0.5, 2.0, 0.5);
        let t = ray_hit((0.0, 0.0), 0.0, &b).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ray_hit_miss_behind() {
        let b = BBox::new(1.0, -0.5, 2.0, 0.5);
        assert_eq!(ray_hit((0.0, 0.0), 180.0, &b), None);
    }

    #[test]
    fn ray_hit_origin_inside_is_zero() {
        let b = BBox::new(-1.0, -1.0, 1.0, 1.0);
        assert_eq!(ray_hit((0.0, 0.0), 37.0, &b), Some(0.0));
    }

    #[test]
    fn ray_hit_vertical_ray() {
        let b = BBox::new(-0.5, 2.0, 0.5, 3.0);
        let t = ray_hit((0.0, 0.0), 90.0, &b).unwrap();
        assert!((t - 2.0).abs() < 1e-9);
        assert_eq!(ray_hit((0.0, 0.0), 270.0, &b), None);
    }

    #[test]
    fn visibility_occlusion_collinear() {
        // Three identical boxes on a row: the middle one blocks the outer two
        // from seeing each other.
        let boxes = [
            BBox::new(0.0, 0.0, 1.0, 1.0),
            BBox::new(2.0, 0.0, 3.0, 1.0),
            BBox::new(4.0, 0.0, 5.0, 1.0),
        ];
        let edges = visibility_edges(&boxes, 72, 5.0);
        assert_eq!(edges, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn visibility_single_box_empty() {
        assert!(visibility_edges(&[BBox::new(0.0, 0.0, 1.0, 1.0)], 72, 5.0).is_empty());
    }

    #[test]
    fn visibility_two_boxes_mutual() {
        let boxes = [BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(3.0, 0.2, 4.0, 1.2)];
        assert_eq!(visibility_edges(&boxes, 72, 5.0), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn visibility_out_degree_bounded_by_ray_count() {
        // A ring of boxes around a central one; with only 4 rays the center
        // can reach at most 4 neighbors no matter how many surround it.
        let mut boxes = vec![BBox::new(-0.5, -0.5, 0.5, 0.5)];
        for k in 0..12 {
            let a = (k as f64) * std::f64::consts::TAU / 12.0;
            let (cx, cy) = (4.0 * a.cos(), 4.0 * a.sin());
            boxes.push(BBox::new(cx - 0.4, cy - 0.4, cx + 0.4, cy + 0.4));
        }
        let edges = visibility_edges(&boxes, 4, 90.0);
        let from_center = edges.iter().filter(|(s, _)| *s == 0).count();
        assert!(from_center <= 4, "out-degree {from_center} exceeds ray count");
    }

    proptest! {
        #[test]
        fn pair_feature_in_unit_range(
            ax in -50.0..50.0f64, ay in -50.0..50.0f64, aw in 0.1..20.0f64, ah in 0.1..20.0f64,
            bx in -50.0..50.0f64, by in -50.0..50.0f64, bw in 0.1..20.0f64, bh in 0.1..20.0f64,
        ) {
            let a = BBox::new(ax, ay, ax + aw, ay + ah);
            let b = BBox::new(bx, by, bx + bw, by + bh);
            let f = pair_feature(&a, &b);
            for v in f {
                prop_assert!((0.0..=1.0).contains(&v), "feature value {v} out of range");
            }
            // The joint frame is tight: each axis spans exactly [0, 1].
            let xs = [f[0], f[2], f[4], f[6]];
            let ys = [f[1], f[3], f[5], f[7]];
            prop_assert!(xs.iter().cloned().fold(f64::INFINITY, f64::min).abs() < 1e-12);
            prop_assert!((xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1.0).abs() < 1e-12);
            prop_assert!(ys.iter().cloned().fold(f64::INFINITY, f64::min).abs() < 1e-12);
            prop_assert!((ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pair_feature_similarity_invariant(
            ax in -20.0..20.0f64, ay in -20.0..20.0f64, aw in 0.1..10.0f64, ah in 0.1..10.0f64,
            bx in -20.0..20.0f64, by in -20.0..20.0f64, bw in 0.1..10.0f64, bh in 0.1..10.0f64,
            tx in -100.0..100.0f64, ty in -100.0..100.0f64, s in 0.05..20.0f64,
        ) {
            let transform = |b: &BBox| BBox::new(
                s * b.x_min + tx, s * b.y_min + ty, s * b.x_max + tx, s * b.y_max + ty,
            );
            let a = BBox::new(ax, ay, ax + aw, ay + ah);
            let b = BBox::new(bx, by, bx + bw, by + bh);
            let f0 = pair_feature(&a, &b);
            let f1 = pair_feature(&transform(&a), &transform(&b));
            for i in 0..8 {
                prop_assert!((f0[i] - f1[i]).abs() < 1e-9,
                    "component {i} moved by {}", (f0[i] - f1[i]).abs());
            }
        }

        #[test]
        fn ray_hit_periodic_in_angle(
            ox in -5.0..5.0f64, oy in -5.0..5.0f64, angle in 0.0..360.0f64,
            bx in -10.0..10.0f64, by in -10.0..10.0f64, bw in 0.2..5.0f64, bh in 0.2..5.0f64,
        ) {
            let b = BBox::new(bx, by, bx + bw, by + bh);
            let h0 = ray_hit((ox, oy), angle, &b);
            let h1 = ray_hit((ox, oy), angle + 360.0, &b);
            match (h0, h1) {
                (None, None) => {}
                (Some(t0), Some(t1)) => prop_assert!((t0 - t1).abs() < 1e-6),
                other => prop_assert!(false, "periodicity mismatch: {other:?}"),
            }
        }
    }
}
