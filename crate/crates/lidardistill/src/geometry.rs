//! Rigid transforms and pinhole projection.
//!
//! Projection maps each lidar point to camera-frame coordinates, applies
//! Brown-Conrady distortion on the normalized image plane, and lands on a
//! continuous pixel (u, v) plus its rounded integer pixel. Validity (inside
//! the frustum and image bounds) is data, not an error.

use crate::error::{Error, Result};
use crate::frameio::{ImageFrame, LidarFrame, RigConfig};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Proper rigid transform: `p' = R p + t` with `R` orthonormal, `det R = +1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Validates orthonormality and determinant to 1e-9 before accepting.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        // R^T R = I, column by column.
        for j in 0..3 {
            for k in 0..3 {
                let mut dot = 0.0;
                for i in 0..3 {
                    dot += rotation[i][j] * rotation[i][k];
                }
                let expected = if j == k { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Validation(format!(
                        "rotation not orthonormal: (R^T R)[{j}][{k}] = {dot}"
                    )));
                }
            }
        }
        let det = det3(&rotation);
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Validation(format!("rotation determinant {det}, expected +1")));
        }
        Ok(RigidTransform { rotation, translation })
    }

    /// Rotation about a (not necessarily unit) axis by `angle` radians,
    /// via the Rodrigues formula.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < 1e-12 {
            return Err(Error::Validation("rotation axis has zero length".into()));
        }
        let (ux, uy, uz) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = angle.sin_cos();
        let ic = 1.0 - c;
        let rotation = [
            [c + ux * ux * ic, ux * uy * ic - uz * s, ux * uz * ic + uy * s],
            [uy * ux * ic + uz * s, c + uy * uy * ic, uy * uz * ic - ux * s],
            [uz * ux * ic - uy * s, uz * uy * ic + ux * s, c + uz * uz * ic],
        ];
        RigidTransform::new(rotation, translation)
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> &[f64; 3] {
        &self.translation
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Rotates a direction vector (no translation).
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `compose(a, b)` applies `b` first: `(a ∘ b)(p) = a(b(p))`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a.rotation[i][k] * b.rotation[k][j];
            }
            rotation[i][j] = acc;
        }
    }
    let translation = a.apply(b.translation);
    RigidTransform { rotation, translation }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = t.rotation[j][i];
        }
    }
    let tr = t.translation;
    let translation = [
        -(rotation[0][0] * tr[0] + rotation[0][1] * tr[1] + rotation[0][2] * tr[2]),
        -(rotation[1][0] * tr[0] + rotation[1][1] * tr[1] + rotation[1][2] * tr[2]),
        -(rotation[2][0] * tr[0] + rotation[2][1] * tr[1] + rotation[2][2] * tr[2]),
    ];
    RigidTransform { rotation, translation }
}

pub fn transform_points(t: &RigidTransform, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|&p| t.apply(p)).collect()
}

/// Per-point projection result. Invalid points carry sentinel -1 in the
/// pixel and depth fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub valid: bool,
    /// Continuous pixel coordinates (defined when the point is in front of
    /// the camera at >= min_depth, even if outside the image bounds).
    pub u: f64,
    pub v: f64,
    pub px: i32,
    pub py: i32,
    /// Camera-frame z, meters.
    pub depth: f64,
}

impl ProjectedPoint {
    fn invalid_behind() -> Self {
        ProjectedPoint { valid: false, u: -1.0, v: -1.0, px: -1, py: -1, depth: -1.0 }
    }
}

/// Point-to-pixel assignment for one frame against one rig.
#[derive(Clone, Debug)]
pub struct ProjectionMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<ProjectedPoint>,
}

impl ProjectionMap {
    pub fn valid_count(&self) -> usize {
        self.points.iter().filter(|p| p.valid).count()
    }
}

/// Round half-up: ties go toward positive infinity (35.5 -> 36, -0.5 -> 0).
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Projects every point of `frame` through `rig`: lidar -> camera frame,
/// frustum cut at `min_depth`, Brown-Conrady distortion on normalized
/// coordinates, pinhole mapping, and round-half-up pixel assignment.
pub fn project_points(rig: &RigConfig, frame: &LidarFrame) -> ProjectionMap {
    let intr = &rig.intrinsics;
    let d = &intr.distortion;
    let points = frame
        .points
        .iter()
        .map(|p| {
            let cam = rig.extrinsics.apply([p.x as f64, p.y as f64, p.z as f64]);
            let depth = cam[2];
            if depth < rig.min_depth {
                return ProjectedPoint::invalid_behind();
            }
            let xn = cam[0] / depth;
            let yn = cam[1] / depth;
            let r2 = xn * xn + yn * yn;
            let radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2;
            let xd = xn * radial + 2.0 * d.p1 * xn * yn + d.p2 * (r2 + 2.0 * xn * xn);
            let yd = yn * radial + d.p1 * (r2 + 2.0 * yn * yn) + 2.0 * d.p2 * xn * yn;
            let u = intr.fx * xd + intr.cx;
            let v = intr.fy * yd + intr.cy;
            let pxf = round_half_up(u);
            let pyf = round_half_up(v);
            let in_bounds = pxf >= 0.0 && pxf < intr.width as f64 && pyf >= 0.0 && pyf < intr.height as f64;
            if in_bounds {
                ProjectedPoint { valid: true, u, v, px: pxf as i32, py: pyf as i32, depth }
            } else {
                ProjectedPoint { valid: false, u, v, px: -1, py: -1, depth: -1.0 }
            }
        })
        .collect();
    ProjectionMap { width: intr.width, height: intr.height, points }
}

/// Draws each valid point as a one-pixel dot in point-index order (last
/// drawn wins). The output is always RGB so it can be written as PPM;
/// grayscale inputs are promoted by channel replication.
pub fn render_overlay(image: &ImageFrame, proj: &ProjectionMap, colors: &[[u8; 3]]) -> Result<ImageFrame> {
    if image.width != proj.width || image.height != proj.height {
        return Err(Error::Shape(format!(
            "image is {}x{} but projection map is {}x{}",
            image.width, image.height, proj.width, proj.height
        )));
    }
    if colors.len() != proj.points.len() {
        return Err(Error::Shape(format!(
            "{} colors for {} points",
            colors.len(),
            proj.points.len()
        )));
    }
    let mut pixels = match image.channels {
        3 => image.pixels.clone(),
        1 => image.pixels.iter().flat_map(|&g| [g, g, g]).collect(),
        c => return Err(Error::Validation(format!("unsupported channel count {c}"))),
    };
    for (p, color) in proj.points.iter().zip(colors) {
        if p.valid {
            let base = (p.py as usize * image.width + p.px as usize) * 3;
            pixels[base..base + 3].copy_from_slice(color);
        }
    }
    Ok(ImageFrame {
        timestamp_ns: image.timestamp_ns,
        width: image.width,
        height: image.height,
        channels: 3,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frameio::{Distortion, Intrinsics, Point};
    use proptest::prelude::*;

    fn test_rig(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> RigConfig {
        RigConfig {
            intrinsics: Intrinsics { fx, fy, cx, cy, width, height, distortion: Distortion::default() },
            extrinsics: RigidTransform::identity(),
            min_depth: 0.1,
        }
    }

    fn frame_of(points: Vec<Point>) -> LidarFrame {
        LidarFrame { timestamp_ns: 1, points, labels: None }
    }

    #[test]
    fn invert_identity_is_identity() {
        let t = RigidTransform::identity();
        assert_eq!(invert(&t), t);
    }

    #[test]
    fn pure_translation_moves_points() {
        let t = RigidTransform::new(RigidTransform::identity().rotation, [1.0, 2.0, 3.0]).unwrap();
        assert_eq!(transform_points(&t, &[[0.0, 0.0, 0.0]]), vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let m = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidTransform::new(m, [0.0; 3]).is_err());
        let reflection = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(RigidTransform::new(reflection, [0.0; 3]).is_err());
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let rig = test_rig(100.0, 100.0, 64.0, 48.0, 128, 96);
        let proj = project_points(&rig, &frame_of(vec![Point { x: 0.0, y: 0.0, z: 2.0, intensity: 0.0 }]));
        let p = proj.points[0];
        assert!(p.valid);
        assert_eq!((p.u, p.v), (64.0, 48.0));
        assert_eq!((p.px, p.py), (64, 48));
        assert_eq!(p.depth, 2.0);
    }

    #[test]
    fn hand_computed_pinhole_fixture() {
        let rig = test_rig(100.0, 100.0, 64.0, 48.0, 128, 96);
        let proj = project_points(&rig, &frame_of(vec![Point { x: 0.5, y: -0.3, z: 2.0, intensity: 0.0 }]));
        let p = proj.points[0];
        assert!(p.valid);
        assert!((p.u - 89.0).abs() < 1e-12);
        assert!((p.v - 33.0).abs() < 1e-12);
        assert_eq!((p.px, p.py), (89, 33));
    }

    #[test]
    fn frustum_cut_below_min_depth() {
        let rig = test_rig(100.0, 100.0, 64.0, 48.0, 128, 96);
        let proj = project_points(&rig, &frame_of(vec![Point { x: 0.0, y: 0.0, z: 0.01, intensity: 0.0 }]));
        let p = proj.points[0];
        assert!(!p.valid);
        assert_eq!((p.px, p.py), (-1, -1));
        assert_eq!(p.depth, -1.0);
    }

    #[test]
    fn round_half_up_ties_go_up() {
        assert_eq!(round_half_up(35.5), 36.0);
        assert_eq!(round_half_up(-0.5), 0.0);
        assert_eq!(round_half_up(2.4999), 2.0);
        assert_eq!(round_half_up(-1.5), -1.0);
    }

    #[test]
    fn rounding_applied_identically_on_u_and_v() {
        // u and v both land exactly on a .5 tie; both must round up.
        let rig = test_rig(100.0, 100.0, 0.5, 0.5, 64, 64);
        let proj = project_points(&rig, &frame_of(vec![Point { x: 0.35, y: 0.35, z: 1.0, intensity: 0.0 }]));
        let p = proj.points[0];
        assert_eq!((p.u, p.v), (35.5, 35.5));
        assert_eq!((p.px, p.py), (36, 36));
    }

    #[test]
    fn distortion_shifts_off_axis_points() {
        let mut rig = test_rig(100.0, 100.0, 64.0, 48.0, 128, 96);
        rig.intrinsics.distortion = Distortion { k1: 0.1, k2: 0.0, p1: 0.0, p2: 0.0 };
        // x/z = 0.25, r2 = 0.0625, radial = 1.00625; u = 100*0.25*1.00625 + 64
        let proj = project_points(&rig, &frame_of(vec![Point { x: 0.5, y: 0.0, z: 2.0, intensity: 0.0 }]));
        let p = proj.points[0];
        assert!((p.u - (64.0 + 25.0 * 1.00625)).abs() < 1e-12);
        assert!((p.v - 48.0).abs() < 1e-12);
    }

    #[test]
    fn overlay_without_valid_points_is_identity() {
        let image = ImageFrame {
            timestamp_ns: 1,
            width: 2,
            height: 2,
            channels: 3,
            pixels: (0u8..12).collect(),
        };
        let proj = ProjectionMap {
            width: 2,
            height: 2,
            points: vec![ProjectedPoint::invalid_behind()],
        };
        let out = render_overlay(&image, &proj, &[[255, 0, 0]]).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn overlay_draws_point_and_last_wins() {
        let image = ImageFrame { timestamp_ns: 1, width: 2, height: 1, channels: 3, pixels: vec![0; 6] };
        let at_origin = ProjectedPoint { valid: true, u: 0.0, v: 0.0, px: 0, py: 0, depth: 1.0 };
        let proj = ProjectionMap { width: 2, height: 1, points: vec![at_origin, at_origin] };
        let out = render_overlay(&image, &proj, &[[255, 0, 0], [0, 255, 0]]).unwrap();
        assert_eq!(&out.pixels[0..3], &[0, 255, 0]); // draw order = index order, last wins
    }

    #[test]
    fn overlay_dimension_mismatch_is_error() {
        let image = ImageFrame { timestamp_ns: 1, width: 3, height: 1, channels: 3, pixels: vec![0; 9] };
        let proj = ProjectionMap { width: 2, height: 1, points: vec![] };
        assert!(render_overlay(&image, &proj, &[]).is_err());
    }

    #[test]
    fn validity_monotone_in_image_bounds() {
        let small = test_rig(100.0, 100.0, 16.0, 16.0, 32, 32);
        let mut large = small.clone();
        large.intrinsics.width = 64;
        large.intrinsics.height = 64;
        let frame = frame_of(
            (0..50)
                .map(|i| Point { x: (i as f32 - 25.0) * 0.02, y: (i as f32 - 10.0) * 0.01, z: 1.0, intensity: 0.0 })
                .collect(),
        );
        let p_small = project_points(&small, &frame);
        let p_large = project_points(&large, &frame);
        for (a, b) in p_small.points.iter().zip(&p_large.points) {
            if a.valid {
                assert!(b.valid);
                assert_eq!((a.px, a.py), (b.px, b.py));
            }
        }
    }

    fn arb_rotation() -> impl Strategy<Value = RigidTransform> {
        (
            [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
            0.0f64..std::f64::consts::TAU,
            [-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0],
        )
            .prop_filter_map("degenerate axis", |(axis, angle, t)| {
                RigidTransform::from_axis_angle(axis, angle, t).ok()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn prop_invert_round_trip(t in arb_rotation(), p in [-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0]) {
            let q = invert(&t).apply(t.apply(p));
            for i in 0..3 {
                prop_assert!((q[i] - p[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn prop_transform_preserves_distances(
            t in arb_rotation(),
            a in [-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0],
            b in [-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0],
        ) {
            let d0 = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            let ta = t.apply(a);
            let tb = t.apply(b);
            let d1 = ((ta[0] - tb[0]).powi(2) + (ta[1] - tb[1]).powi(2) + (ta[2] - tb[2]).powi(2)).sqrt();
            prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0));
        }

        #[test]
        fn prop_projection_scale_consistent(
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.5f64..10.0, s in 0.1f64..10.0,
        ) {
            // With zero distortion, scaling a camera-frame point leaves (u, v) unchanged.
            let rig = test_rig(85.0, 92.0, 64.0, 48.0, 128, 96);
            let f1 = frame_of(vec![Point { x: x as f32, y: y as f32, z: z as f32, intensity: 0.0 }]);
            // scale in f64 first, compare continuous coordinates computed from f64 inputs
            let xs = (x as f32 as f64) * s;
            let ys = (y as f32 as f64) * s;
            let zs = (z as f32 as f64) * s;
            let un = 85.0 * (xs / zs) + 64.0;
            let vn = 92.0 * (ys / zs) + 48.0;
            let p1 = project_points(&rig, &f1).points[0];
            if p1.depth >= rig.min_depth {
                prop_assert!((p1.u - un).abs() < 1e-9 * (1.0 + un.abs()));
                prop_assert!((p1.v - vn).abs() < 1e-9 * (1.0 + vn.abs()));
            }
        }
    }
}
