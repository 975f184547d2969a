//! Textured quad rendered behind the splat foreground.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::image::{GrayImage, RgbImage};
use crate::math::{quaternion_to_rotation, Quat, Vec3, IDENTITY_QUAT};
use crate::mip::sample_bilinear;
use crate::raster::RenderOutput;
use crate::{Error, Result};

/// Manual adjustment applied about the quad centroid:
/// `p' = c + translation + scale · R (p − c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatePose {
    pub translation: [f64; 3],
    pub rotation: Quat,
    pub scale: f64,
}

impl Default for PlatePose {
    fn default() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: IDENTITY_QUAT,
            scale: 1.0,
        }
    }
}

/// Planar parallelogram. Corners are ordered top-left, top-right,
/// bottom-right, bottom-left in texture space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backplate {
    pub corners: [[f64; 3]; 4],
    #[serde(default)]
    pub texture_id: Option<usize>,
    #[serde(default)]
    pub pose: PlatePose,
}

/// RGBA output of [`render_backplate`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlateImage {
    pub color: RgbImage,
    pub alpha: GrayImage,
}

/// A ray hit in plate texture coordinates, `s` across and `t` down, both in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateHit {
    pub s: f64,
    pub t: f64,
    pub distance: f64,
}

impl Backplate {
    pub fn new(corners: [[f64; 3]; 4]) -> Result<Self> {
        let plate = Self {
            corners,
            texture_id: None,
            pose: PlatePose::default(),
        };
        plate.validate()?;
        Ok(plate)
    }

    pub fn validate(&self) -> Result<()> {
        let c: Vec<Vec3> = self.corners.iter().map(|&p| Vec3::from(p)).collect();
        let eu = c[1] - c[0];
        let ev = c[3] - c[0];
        let area = eu.cross(&ev).norm();
        if !c.iter().all(|p| p.iter().all(|v| v.is_finite())) || area <= 0.0 {
            return Err(Error::InvalidParameter("backplate corners are degenerate".into()));
        }
        let skew = (c[2] - (c[1] + ev)).norm();
        if skew > 1e-9 * (eu.norm() + ev.norm()) {
            return Err(Error::InvalidParameter(
                "backplate corners must form a parallelogram".into(),
            ));
        }
        if !(self.pose.scale > 0.0) {
            return Err(Error::InvalidParameter("backplate scale must be positive".into()));
        }
        quaternion_to_rotation(&self.pose.rotation)?;
        Ok(())
    }

    /// Corners after applying the pose.
    pub fn posed_corners(&self) -> Result<[Vec3; 4]> {
        let r = quaternion_to_rotation(&self.pose.rotation)?;
        let c: [Vec3; 4] = self.corners.map(Vec3::from);
        let centroid = (c[0] + c[1] + c[2] + c[3]) / 4.0;
        let t = Vec3::from(self.pose.translation);
        Ok(c.map(|p| centroid + t + self.pose.scale * (r * (p - centroid))))
    }

    /// Nearest intersection in front of the ray origin.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Result<Option<PlateHit>> {
        let c = self.posed_corners()?;
        Ok(intersect_parallelogram(&c, origin, dir))
    }
}

pub(crate) fn intersect_parallelogram(c: &[Vec3; 4], origin: &Vec3, dir: &Vec3) -> Option<PlateHit> {
    let eu = c[1] - c[0];
    let ev = c[3] - c[0];
    let n = eu.cross(&ev);
    let denom = n.dot(dir);
    if denom.abs() < 1e-300 {
        return None;
    }
    let distance = n.dot(&(c[0] - origin)) / denom;
    if !(distance > 0.0) {
        return None;
    }
    let rel = origin + dir * distance - c[0];
    // Solve rel = s·eu + t·ev in the plane via the Gram system.
    let (uu, uv, vv) = (eu.dot(&eu), eu.dot(&ev), ev.dot(&ev));
    let (ru, rv) = (rel.dot(&eu), rel.dot(&ev));
    let det = uu * vv - uv * uv;
    let s = (ru * vv - rv * uv) / det;
    let t = (rv * uu - ru * uv) / det;
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
        return None;
    }
    Some(PlateHit { s, t, distance })
}

/// Casts one ray per pixel center and samples `texture` bilinearly at the hit.
pub fn render_backplate(plate: &Backplate, cam: &Camera, texture: &RgbImage) -> Result<PlateImage> {
    plate.validate()?;
    let corners = plate.posed_corners()?;
    let origin = cam.center();
    let (w, h) = (cam.width, cam.height);
    let mut color = RgbImage::new(w, h);
    let mut alpha = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (_, dir) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
            if let Some(hit) = intersect_parallelogram(&corners, &origin, &dir) {
                let tx = hit.s * texture.width as f64 - 0.5;
                let ty = hit.t * texture.height as f64 - 0.5;
                color.set(x, y, sample_texel(texture, tx, ty));
                alpha.data[y * w + x] = 1.0;
            }
        }
    }
    Ok(PlateImage { color, alpha })
}

/// Bilinear lookup in texel units (texel centers at integers), clamped to edge.
fn sample_texel(texture: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let uv = [
        x / (texture.width.max(2) - 1) as f64,
        y / (texture.height.max(2) - 1) as f64,
    ];
    sample_bilinear(texture, uv)
}

/// Over operator with a premultiplied foreground:
/// `fg.color + (1 − fg.alpha) · plate`.
pub fn composite(fg: &RenderOutput, plate: &RgbImage) -> Result<RgbImage> {
    if fg.width != plate.width || fg.height != plate.height {
        return Err(Error::ShapeMismatch(format!(
            "foreground {}x{} vs plate {}x{}",
            fg.width, fg.height, plate.width, plate.height
        )));
    }
    let data = fg
        .color
        .data
        .iter()
        .zip(&fg.alpha.data)
        .zip(&plate.data)
        .map(|((c, &a), p)| std::array::from_fn(|k| c[k] + (1.0 - a) * p[k]))
        .collect();
    Ok(RgbImage {
        width: fg.width,
        height: fg.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat3;

    fn front_camera(w: usize, h: usize) -> Camera {
        Camera::new(0, Mat3::identity(), Vec3::zeros(), 20.0, 20.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    /// Quad at depth `z` exactly covering the frame of `front_camera`.
    fn full_frame_plate(w: usize, h: usize, z: f64) -> Backplate {
        let hx = w as f64 / 2.0 / 20.0 * z;
        let hy = h as f64 / 2.0 / 20.0 * z;
        Backplate::new([[-hx, -hy, z], [hx, -hy, z], [hx, hy, z], [-hx, hy, z]]).unwrap()
    }

    #[test]
    fn square_on_reproduces_texture() {
        let tex = RgbImage::from_fn(12, 8, |x, y| [x as f64 / 11.0, y as f64 / 7.0, ((x * y) % 5) as f64 / 4.0]);
        let out = render_backplate(&full_frame_plate(12, 8, 3.0), &front_camera(12, 8), &tex).unwrap();
        for (a, b) in out.color.data.iter().zip(&tex.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9);
            }
        }
        assert!(out.alpha.data.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn plate_behind_camera_is_transparent() {
        let tex = RgbImage::filled(4, 4, [1.0; 3]);
        let out = render_backplate(&full_frame_plate(10, 10, -3.0), &front_camera(10, 10), &tex).unwrap();
        assert!(out.alpha.data.iter().all(|&a| a == 0.0));
        assert!(out.color.data.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn rejects_non_parallelogram() {
        let r = Backplate::new([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [1.5, 1.0, 1.0], [0.0, 1.0, 1.0]]);
        assert!(r.is_err());
    }

    #[test]
    fn pose_translates_and_scales_about_centroid() {
        let mut p = full_frame_plate(10, 10, 2.0);
        p.pose.translation = [0.0, 0.0, 1.0];
        p.pose.scale = 2.0;
        let c = p.posed_corners().unwrap();
        let orig = full_frame_plate(10, 10, 2.0).corners;
        for k in 0..4 {
            assert!((c[k].x - 2.0 * orig[k][0]).abs() < 1e-12);
            assert!((c[k].z - 3.0).abs() < 1e-12);
        }
    }

    fn fg(alpha: f64, color: [f64; 3]) -> RenderOutput {
        let mut out = crate::raster::render(
            &crate::scene::SplatScene::new(),
            &front_camera(3, 2),
            None,
            &Default::default(),
        )
        .unwrap();
        out.alpha.data.fill(alpha);
        out.color.data.fill(color);
        out
    }

    #[test]
    fn composite_over_operator() {
        let plate = RgbImage::from_fn(3, 2, |x, y| [x as f64 / 2.0, y as f64, 0.3]);
        assert_eq!(composite(&fg(0.0, [0.0; 3]), &plate).unwrap(), plate);
        let front = fg(1.0, [0.2, 0.4, 0.6]);
        assert_eq!(composite(&front, &plate).unwrap(), front.color);
        let half = fg(0.5, [0.1, 0.2, 0.3]);
        let black = RgbImage::new(3, 2);
        assert_eq!(composite(&half, &black).unwrap(), half.color);
        let out = composite(&half, &plate).unwrap();
        for (o, p) in out.data.iter().zip(&plate.data) {
            let expected = [0.1 + 0.5 * p[0], 0.2 + 0.5 * p[1], 0.3 + 0.5 * p[2]];
            assert_eq!(*o, expected);
        }
        assert!(composite(&half, &RgbImage::new(2, 2)).is_err());
    }
}
