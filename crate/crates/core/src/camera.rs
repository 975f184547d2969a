//! Pinhole cameras and the affine (EWA) projection of 3D Gaussians.
//!
//! Camera space follows the usual computer-vision convention: `+x` right,
//! `+y` down, `+z` forward. Pixel `(i, j)` covers `[i, i+1) × [j, j+1)` so
//! its center sits at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::math::{quaternion_to_rotation, rotation_to_quaternion, slerp, Mat3, Quat, Vec3};
use crate::{Error, Result};

/// Low-pass filter added to the projected covariance diagonal, in px².
pub const COV2D_REGULARIZER: f64 = 0.3;
/// Points with camera-space depth at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: usize,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// A Gaussian after projection onto the image plane.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedGaussian {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        rotation: Mat3,
        translation: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("camera has an empty image".into()));
        }
        let ortho = rotation.transpose() * rotation - Mat3::identity();
        if ortho.iter().any(|v| v.abs() >= 1e-6) || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidParameter(
                "camera rotation is not a proper orthonormal matrix".into(),
            ));
        }
        Ok(Self {
            id,
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, image `up` roughly along world `up`.
    pub fn look_at(
        id: usize,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        if !right.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("look_at: up is parallel to view".into()));
        }
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self::new(
            id,
            rotation,
            translation,
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
        )
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point; `None` behind the near plane.
    pub fn project_point(&self, p_cam: &Vec3) -> Option<Vector2<f64>> {
        if p_cam.z <= NEAR_PLANE {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// World-space ray (origin, unit direction) through continuous pixel
    /// coordinates `(px, py)`.
    pub fn ray(&self, px: f64, py: f64) -> (Vec3, Vec3) {
        let d_cam = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        let d = (self.rotation.transpose() * d_cam).normalize();
        (self.center(), d)
    }

    /// Same camera rolled by `angle` radians about its optical axis.
    pub fn rolled(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let roll = Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self {
            rotation: roll * self.rotation,
            translation: roll * self.translation,
            ..self.clone()
        }
    }

    pub fn pose(&self) -> CameraPose {
        CameraPose {
            position: self.center().into(),
            rotation: rotation_to_quaternion(&self.rotation.transpose()),
        }
    }

    pub fn with_pose(&self, pose: &CameraPose) -> Result<Self> {
        let cam_to_world = quaternion_to_rotation(&pose.rotation)?;
        let rotation = cam_to_world.transpose();
        let translation = -(rotation * Vec3::from(pose.position));
        Self::new(
            self.id,
            rotation,
            translation,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
    }
}

/// EWA projection of a Gaussian with world mean `x` and covariance `cov`.
/// Returns `None` when the mean is behind the near plane.
pub fn project_gaussian(x: &Vec3, cov: &Mat3, cam: &Camera) -> Option<ProjectedGaussian> {
    let t = cam.world_to_camera(x);
    let mean = cam.project_point(&t)?;
    let j = projection_jacobian(&t, cam);
    let tw = j * cam.rotation;
    let cov2 = tw * cov * tw.transpose() + Matrix2::identity() * COV2D_REGULARIZER;
    Some(ProjectedGaussian {
        mean,
        cov: cov2,
        depth: t.z,
    })
}

fn projection_jacobian(t: &Vec3, cam: &Camera) -> Matrix2x3<f64> {
    let z2 = t.z * t.z;
    Matrix2x3::new(
        cam.fx / t.z,
        0.0,
        -cam.fx * t.x / z2,
        0.0,
        cam.fy / t.z,
        -cam.fy * t.y / z2,
    )
}

/// Gradient of [`project_gaussian`]. `d_mean` is `dL/dmean2d`, `d_cov2` the
/// full symmetric `dL/dΣ2D`. Returns `(dL/dx, dL/dΣ)`.
pub fn project_gaussian_backward(
    x: &Vec3,
    cov: &Mat3,
    cam: &Camera,
    d_mean: &Vector2<f64>,
    d_cov2: &Matrix2<f64>,
) -> (Vec3, Mat3) {
    let t = cam.world_to_camera(x);
    let j = projection_jacobian(&t, cam);
    let w = cam.rotation;
    let tw = j * w;
    let d_cov = tw.transpose() * d_cov2 * tw;
    let d_tw = (d_cov2 + d_cov2.transpose()) * tw * cov;
    let d_j = d_tw * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let z2 = tz * tz;
    let z3 = z2 * tz;
    let mut d_t = Vec3::new(
        d_mean.x * fx / tz,
        d_mean.y * fy / tz,
        -d_mean.x * fx * tx / z2 - d_mean.y * fy * ty / z2,
    );
    d_t.x += -d_j[(0, 2)] * fx / z2;
    d_t.y += -d_j[(1, 2)] * fy / z2;
    d_t.z += -d_j[(0, 0)] * fx / z2 + d_j[(0, 2)] * 2.0 * fx * tx / z3 - d_j[(1, 1)] * fy / z2
        + d_j[(1, 2)] * 2.0 * fy * ty / z3;
    (w.transpose() * d_t, d_cov)
}

/// Serializable camera description (intrinsics + world-to-camera pose).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraSpec {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraSpec {
    fn from(c: &Camera) -> Self {
        Self {
            id: c.id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: std::array::from_fn(|r| std::array::from_fn(|k| c.rotation[(r, k)])),
            translation: c.translation.into(),
        }
    }
}

impl TryFrom<&CameraSpec> for Camera {
    type Error = Error;

    fn try_from(s: &CameraSpec) -> Result<Self> {
        let rotation = Mat3::from_fn(|r, k| s.rotation[r][k]);
        Camera::new(
            s.id,
            rotation,
            Vec3::from(s.translation),
            s.fx,
            s.fy,
            s.cx,
            s.cy,
            s.width,
            s.height,
        )
    }
}

/// Camera position plus camera-to-world orientation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Camera-to-world rotation as `[w, x, y, z]`.
    pub rotation: Quat,
}

/// Keyframed camera trajectory: positions are interpolated linearly and
/// orientations spherically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraSpline {
    pub keyframes: Vec<CameraPose>,
    /// Frames rendered between consecutive keyframes (inclusive of the first).
    #[serde(default = "default_steps")]
    pub steps_per_segment: usize,
}

fn default_steps() -> usize {
    10
}

impl CameraSpline {
    pub fn sample(&self, t: f64) -> Result<CameraPose> {
        let n = self.keyframes.len();
        if n == 0 {
            return Err(Error::InvalidParameter("camera spline has no keyframes".into()));
        }
        if n == 1 {
            return Ok(self.keyframes[0].clone());
        }
        let t = t.clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (t.floor() as usize).min(n - 2);
        let f = t - i as f64;
        let (a, b) = (&self.keyframes[i], &self.keyframes[i + 1]);
        Ok(CameraPose {
            position: std::array::from_fn(|k| a.position[k] + f * (b.position[k] - a.position[k])),
            rotation: slerp(&a.rotation, &b.rotation, f),
        })
    }

    /// Evenly spaced poses along the whole trajectory.
    pub fn poses(&self) -> Result<Vec<CameraPose>> {
        let segments = self.keyframes.len().saturating_sub(1);
        let count = segments * self.steps_per_segment.max(1) + 1;
        (0..count)
            .map(|i| {
                let t = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
                self.sample(t)
            })
            .collect()
    }
}
