//! SE(2) poses, the BEV grid convention, and ego-motion feature warping.
//!
//! Grid convention (used by every module): the ego sits at the grid center,
//! the vehicle x-axis (forward) points along increasing row index, and the
//! vehicle y-axis (left) points along increasing column index. World/grid
//! conversions are exact affine maps of this convention.

use crate::autodiff::{Graph, Scalar, Tensor, VarId};

/// Planar rigid pose: translation in meters, yaw in radians, normalized to
/// (-pi, pi].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn identity() -> Self {
        Pose2 { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.x == 0.0 && self.y == 0.0 && self.yaw == 0.0
    }

    /// Rigid-motion composition `self ∘ other`: first apply `other` in the
    /// frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn invert(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// Coordinates of a point given in this pose's frame, expressed in the
    /// parent frame.
    pub fn transform_point(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }
}

/// BEV grid geometry: cell counts, meters per cell, ego-centered origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub resolution: f64,
}

impl GridSpec {
    pub fn new(h: usize, w: usize, resolution: f64) -> Self {
        assert!(h > 0 && w > 0, "grid dimensions must be positive");
        assert!(resolution > 0.0, "grid resolution must be positive");
        GridSpec { h, w, resolution }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.h - 1) as f64 / 2.0, (self.w - 1) as f64 / 2.0)
    }

    /// Ego-frame meters -> continuous grid coordinates (row, col).
    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        let (cr, cc) = self.center();
        (cr + x / self.resolution, cc + y / self.resolution)
    }

    /// Continuous grid coordinates -> ego-frame meters.
    pub fn grid_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let (cr, cc) = self.center();
        ((row - cr) * self.resolution, (col - cc) * self.resolution)
    }

    /// Graph version of [`world_to_grid`] for [n,2] point tensors, so that
    /// gradients flow back to the metric coordinates.
    pub fn world_to_grid_var<T: Scalar>(&self, g: &mut Graph<T>, pts: VarId) -> VarId {
        let (cr, cc) = self.center();
        let scaled = g.scale(pts, T::from_f64(1.0 / self.resolution));
        let center = g.constant(Tensor::from_f64_slice(&[1, 2], &[cr, cc]));
        g.add_row_broadcast(scaled, center)
    }
}

/// Ego-frame waypoints, one row per future timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoints {
    /// [n, 2] meters in the ego frame at the current tick.
    pub waypoints: Vec<[f64; 2]>,
    /// seconds between consecutive waypoints
    pub timestep: f64,
}

impl TrajectoryPoints {
    pub fn new(waypoints: Vec<[f64; 2]>, timestep: f64) -> Self {
        assert!(waypoints.iter().all(|w| w[0].is_finite() && w[1].is_finite()));
        TrajectoryPoints { waypoints, timestep }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }
}

/// Inverse-warps a feature expressed in frame A into frame B.
///
/// `rel` is the pose of frame A expressed in frame B. Each target cell is
/// bilinearly resampled from its source location in A; sources outside the
/// grid read as zero. The warp is differentiable with respect to the feature
/// values (the sampling grid is constant). When `rel` is exactly the
/// identity the output is bit-identical to the input: the source
/// coordinates are computed purely in grid units, so they stay exact
/// integers.
pub fn warp_feature<T: Scalar>(
    g: &mut Graph<T>,
    feature: VarId,
    rel: Pose2,
    spec: &GridSpec,
) -> VarId {
    let pts = g.constant(warp_source_points(rel, spec));
    let sampled = g.bilinear_sample(feature, pts, spec.h, spec.w); // [h*w, c]
    g.transpose(sampled) // [c, h*w]
}

/// Source grid coordinates in frame A for every target cell of frame B.
pub fn warp_source_points<T: Scalar>(rel: Pose2, spec: &GridSpec) -> Tensor<T> {
    let inv = rel.invert();
    let (s, c) = inv.yaw.sin_cos();
    let (cr, cc) = spec.center();
    let (tx, ty) = (inv.x / spec.resolution, inv.y / spec.resolution);
    let mut pts = Tensor::zeros(&[spec.h * spec.w, 2]);
    for i in 0..spec.h {
        for j in 0..spec.w {
            // offsets from the grid center, in cells
            let dx = i as f64 - cr;
            let dy = j as f64 - cc;
            let src_r = cr + c * dx - s * dy + tx;
            let src_c = cc + s * dx + c * dy + ty;
            let idx = (i * spec.w + j) * 2;
            pts.data[idx] = T::from_f64(src_r);
            pts.data[idx + 1] = T::from_f64(src_c);
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn compose_with_identity() {
        let p = Pose2::new(1.5, -2.0, 0.7);
        let q = p.compose(&Pose2::identity());
        assert!((q.x - p.x).abs() < 1e-15 && (q.y - p.y).abs() < 1e-15);
        assert!((q.yaw - p.yaw).abs() < 1e-15);
    }

    #[test]
    fn compose_pure_translation() {
        let p = Pose2::new(1.0, 0.0, 0.0).compose(&Pose2::new(1.0, 0.0, 0.0));
        assert_eq!((p.x, p.y, p.yaw), (2.0, 0.0, 0.0));
    }

    #[test]
    fn compose_after_quarter_turn() {
        // rotation-matrix oracle: R(pi/2) * (1,0) = (0,1)
        let p = Pose2::new(0.0, 0.0, FRAC_PI_2).compose(&Pose2::new(1.0, 0.0, 0.0));
        assert!(p.x.abs() < 1e-15);
        assert!((p.y - 1.0).abs() < 1e-15);
        assert!((p.yaw - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn invert_simple_cases() {
        let id = Pose2::identity().invert();
        assert!(id.is_identity());
        let p = Pose2::new(3.0, 0.0, 0.0).invert();
        assert_eq!((p.x, p.y, p.yaw), (-3.0, 0.0, 0.0));
    }

    #[test]
    fn invert_roundtrip_random_poses() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let p = Pose2::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-3.1..3.1),
            );
            let r = p.compose(&p.invert());
            assert!(r.x.abs() <= 1e-12 && r.y.abs() <= 1e-12 && r.yaw.abs() <= 1e-12);
        }
    }

    #[test]
    fn world_to_grid_convention() {
        let spec = GridSpec::new(48, 48, 0.5);
        let (r, c) = spec.world_to_grid(0.0, 0.0);
        assert_eq!((r, c), (23.5, 23.5));
        let (r, c) = spec.world_to_grid(0.5, 0.0);
        assert_eq!((r, c), (24.5, 23.5));
    }

    #[test]
    fn grid_roundtrip_random_points() {
        use rand::{Rng, SeedableRng};
        let spec = GridSpec::new(31, 17, 0.25);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = rng.gen_range(-20.0..20.0);
            let y = rng.gen_range(-20.0..20.0);
            let (r, c) = spec.world_to_grid(x, y);
            let (x2, y2) = spec.grid_to_world(r, c);
            assert!((x - x2).abs() <= 1e-12 && (y - y2).abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let spec = GridSpec::new(8, 8, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feat = Tensor::from_vec(&[3, 64], data);
        let mut g = Graph::new();
        let f = g.constant(feat.clone());
        let out = warp_feature(&mut g, f, Pose2::identity(), &spec);
        assert_eq!(g.value(out).data, feat.data);
    }

    #[test]
    fn one_cell_translation_warp_is_index_shift() {
        // ego moved one cell forward: rel pose of the old frame in the new
        // frame is (-resolution, 0, 0)
        let spec = GridSpec::new(6, 6, 1.0);
        let mut data = vec![0.0f64; 36];
        for (i, v) in data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let feat = Tensor::from_vec(&[1, 36], data.clone());
        let mut g = Graph::new();
        let f = g.constant(feat);
        let out = warp_feature(&mut g, f, Pose2::new(-1.0, 0.0, 0.0), &spec);
        let got = &g.value(out).data;
        // target row i reads source row i+1; last row falls outside -> zero
        for i in 0..5 {
            for j in 0..6 {
                assert_eq!(got[i * 6 + j], data[(i + 1) * 6 + j]);
            }
        }
        for j in 0..6 {
            assert_eq!(got[5 * 6 + j], 0.0);
        }
    }

    #[test]
    fn constant_field_stays_constant_on_valid_mask() {
        let spec = GridSpec::new(10, 10, 1.0);
        let feat = Tensor::from_vec(&[1, 100], vec![3.25f64; 100]);
        let mut g = Graph::new();
        let f = g.constant(feat);
        let out = warp_feature(&mut g, f, Pose2::new(1.3, -0.4, 0.3), &spec);
        for &v in &g.value(out).data {
            assert!(v == 0.0 || (v - 3.25).abs() < 1e-12 || (0.0..=3.25).contains(&v));
        }
        // interior cells whose full bilinear support is valid keep the value
        let pts = warp_source_points::<f64>(Pose2::new(1.3, -0.4, 0.3), &spec);
        for i in 0..100 {
            let (r, c) = (pts.data[i * 2], pts.data[i * 2 + 1]);
            if r >= 0.0 && c >= 0.0 && r <= 8.0 && c <= 8.0 {
                assert!((g.value(out).data[i] - 3.25).abs() < 1e-12);
            }
        }
    }
}
