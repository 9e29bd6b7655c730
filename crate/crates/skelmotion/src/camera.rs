//! Pinhole projection, camera sampling for augmentation, and root
//! back-projection from estimated depth.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MIN_DEPTH: f64 = 1e-3;
pub const AUG_DEPTH_RANGE: (f64, f64) = (3.0, 8.0);

/// Bare pinhole placement: a yaw about the subject's vertical axis followed
/// by a translation along +Z. No lens distortion, principal point at the
/// origin, focal length 1 unless overridden.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub focal: f64,
    pub depth_offset: f64,
    pub yaw: f64,
}

impl CameraParams {
    pub fn new(focal: f64, depth_offset: f64, yaw: f64) -> Result<Self> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        Ok(Self { focal, depth_offset, yaw })
    }

    pub fn frontal(depth_offset: f64) -> Self {
        Self { focal: 1.0, depth_offset, yaw: 0.0 }
    }
}

/// Places a subject-space motion in front of the camera: centers the mean
/// root at the origin, applies the yaw about the vertical axis, then pushes
/// the subject out along +Z.
pub fn place_in_camera(positions: &Array3<f64>, cam: &CameraParams) -> Array3<f64> {
    let (t_len, j_len, _) = positions.dim();
    let mut center = [0.0f64; 3];
    for t in 0..t_len {
        for k in 0..3 {
            center[k] += positions[[t, 0, k]];
        }
    }
    for c in &mut center {
        *c /= t_len as f64;
    }
    let (s, c) = cam.yaw.sin_cos();
    let mut out = Array3::zeros((t_len, j_len, 3));
    for t in 0..t_len {
        for j in 0..j_len {
            let x = positions[[t, j, 0]] - center[0];
            let y = positions[[t, j, 1]] - center[1];
            let z = positions[[t, j, 2]] - center[2];
            // yaw about +Y
            out[[t, j, 0]] = c * x + s * z;
            out[[t, j, 1]] = y;
            out[[t, j, 2]] = -s * x + c * z + cam.depth_offset;
        }
    }
    out
}

/// Perspective projection of camera-space positions: `(x, y) = (fX/Z, fY/Z)`.
/// Any joint at or behind the camera plane is an error.
pub fn project_points(camera_space: &Array3<f64>, focal: f64) -> Result<Array3<f64>> {
    let (t_len, j_len, _) = camera_space.dim();
    let mut out = Array3::zeros((t_len, j_len, 2));
    for t in 0..t_len {
        for j in 0..j_len {
            let z = camera_space[[t, j, 2]];
            if z <= MIN_DEPTH {
                return Err(Error::BehindCamera(format!(
                    "joint {j} at frame {t} has depth {z}"
                )));
            }
            out[[t, j, 0]] = focal * camera_space[[t, j, 0]] / z;
            out[[t, j, 1]] = focal * camera_space[[t, j, 1]] / z;
        }
    }
    Ok(out)
}

/// Places the clip with `cam` and projects it to 2D keypoints.
pub fn project(positions: &Array3<f64>, cam: &CameraParams) -> Result<Array3<f64>> {
    project_points(&place_in_camera(positions, cam), cam.focal)
}

/// Uniform camera augmentation: depth in `[3, 8]` normalized units, yaw over
/// the full circle, focal fixed at 1.
pub fn sample_camera(rng: &mut ChaCha8Rng) -> CameraParams {
    let depth = rng.random_range(AUG_DEPTH_RANGE.0..AUG_DEPTH_RANGE.1);
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    CameraParams { focal: 1.0, depth_offset: depth, yaw }
}

/// Inverse of the projection restricted to the root joint:
/// `(X, Y, Z) = (Z x / f, Z y / f, Z)`.
pub fn backproject_root(
    root_2d: &Array2<f64>,
    depth: &[f64],
    focal: f64,
) -> Result<Array2<f64>> {
    let t_len = root_2d.dim().0;
    if depth.len() != t_len {
        return Err(Error::Shape(format!(
            "depth has {} frames, root has {t_len}",
            depth.len()
        )));
    }
    let mut out = Array2::zeros((t_len, 3));
    for t in 0..t_len {
        let z = depth[t];
        if z <= 0.0 {
            return Err(Error::BehindCamera(format!("nonpositive depth {z} at frame {t}")));
        }
        out[[t, 0]] = z * root_2d[[t, 0]] / focal;
        out[[t, 1]] = z * root_2d[[t, 1]] / focal;
        out[[t, 2]] = z;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    #[test]
    fn pinhole_arithmetic() {
        let mut p = Array3::zeros((1, 1, 3));
        p[[0, 0, 0]] = 2.0;
        p[[0, 0, 1]] = 4.0;
        p[[0, 0, 2]] = 2.0;
        let kp = project_points(&p, 1.0).unwrap();
        assert_abs_diff_eq!(kp[[0, 0, 0]], 1.0);
        assert_abs_diff_eq!(kp[[0, 0, 1]], 2.0);
    }

    #[test]
    fn zero_depth_is_behind_camera() {
        let p = Array3::zeros((1, 1, 3));
        assert!(matches!(project_points(&p, 1.0), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn farther_subjects_project_smaller() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut positions = Array3::zeros((4, 5, 3));
        for v in positions.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        let extent = |cam: &CameraParams| -> f64 {
            let kp = project(&positions, cam).unwrap();
            let (mut min_x, mut max_x, mut min_y, mut max_y) =
                (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for t in 0..4 {
                for j in 0..5 {
                    min_x = min_x.min(kp[[t, j, 0]]);
                    max_x = max_x.max(kp[[t, j, 0]]);
                    min_y = min_y.min(kp[[t, j, 1]]);
                    max_y = max_y.max(kp[[t, j, 1]]);
                }
            }
            (max_x - min_x).max(max_y - min_y)
        };
        let near = extent(&CameraParams::frontal(3.0));
        let far = extent(&CameraParams::frontal(6.0));
        assert!(far < near, "doubling depth must shrink the projected extent");
    }

    #[test]
    fn sampled_cameras_are_reproducible_and_in_range() {
        let a = sample_camera(&mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_camera(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut sum = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let cam = sample_camera(&mut rng);
            assert!((AUG_DEPTH_RANGE.0..AUG_DEPTH_RANGE.1).contains(&cam.depth_offset));
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&cam.yaw));
            assert_eq!(cam.focal, 1.0);
            sum += cam.depth_offset;
        }
        let mean = sum / n as f64;
        let expect = (AUG_DEPTH_RANGE.0 + AUG_DEPTH_RANGE.1) / 2.0;
        assert!((mean - expect).abs() / expect < 0.02, "depth mean {mean} vs {expect}");
    }

    #[test]
    fn backprojection_inverts_projection_on_the_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t_len = 50;
        let mut cam_space = Array3::zeros((t_len, 1, 3));
        for t in 0..t_len {
            cam_space[[t, 0, 0]] = rng.random_range(-1.0..1.0);
            cam_space[[t, 0, 1]] = rng.random_range(-1.0..1.0);
            cam_space[[t, 0, 2]] = rng.random_range(2.0..9.0);
        }
        let kp = project_points(&cam_space, 1.0).unwrap();
        let root_2d = ndarray::Array2::from_shape_fn((t_len, 2), |(t, k)| kp[[t, 0, k]]);
        let depth: Vec<f64> = (0..t_len).map(|t| cam_space[[t, 0, 2]]).collect();
        let back = backproject_root(&root_2d, &depth, 1.0).unwrap();
        for t in 0..t_len {
            for k in 0..3 {
                assert_abs_diff_eq!(back[[t, k]], cam_space[[t, 0, k]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn nonpositive_depth_errors() {
        let root_2d = ndarray::Array2::zeros((1, 2));
        assert!(matches!(
            backproject_root(&root_2d, &[0.0], 1.0),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn projection_is_scale_ambiguous() {
        // scaling subject and depth by the same factor leaves 2D unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut positions = Array3::zeros((3, 4, 3));
        for v in positions.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let cam1 = CameraParams { focal: 1.0, depth_offset: 4.0, yaw: 0.7 };
        let cam2 = CameraParams { focal: 1.0, depth_offset: 8.0, yaw: 0.7 };
        let scaled = positions.mapv(|v| v * 2.0);
        let kp1 = project(&positions, &cam1).unwrap();
        let kp2 = project(&scaled, &cam2).unwrap();
        for (a, b) in kp1.iter().zip(kp2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }
}
