//! Synthetic capture stage: a few objects in front of an emissive textured
//! wall, rendered under fixed cameras for a set of wall textures plus a
//! canonical pass with the wall switched off.
//!
//! Light transport is one bounce. For each camera the tracer records, per
//! pixel, the base shading (ambient + key light), a sparse list of weighted
//! wall lookups (direct view, mirror and glass paths) and a form-factor row
//! against a coarse patch grid of the wall for diffuse bounce light. A frame
//! for any wall texture is then a cheap linear function of that texture.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backplate::{intersect_parallelogram, Backplate};
use crate::camera::Camera;
use crate::dataset::{
    BackgroundRecord, CameraRecord, DatasetManifest, FrameRecord, InitPoint, Split, MANIFEST_NAME,
};
use crate::image::RgbImage;
use crate::mip::sample_bilinear;
use crate::scene::ForegroundMask;
use crate::{Error, Result, math::Vec3};

const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Cuboid { min: Vec3, max: Vec3 },
}

#[derive(Clone, Copy, Debug)]
pub struct Material {
    pub albedo: [f64; 3],
    /// Fraction of light reflected as a perfect mirror.
    pub mirror: f64,
    /// Fraction transmitted through the object (cuboids only).
    pub transmission: f64,
    pub tint: [f64; 3],
    pub ior: f64,
}

impl Material {
    pub fn diffuse(albedo: [f64; 3]) -> Self {
        Self {
            albedo,
            mirror: 0.0,
            transmission: 0.0,
            tint: [1.0; 3],
            ior: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StageObject {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub objects: Vec<StageObject>,
    /// The emissive wall. Its texture coordinates follow [`Backplate`].
    pub wall: Backplate,
    pub wall_gain: f64,
    /// Patch grid used for diffuse bounce light from the wall.
    pub wall_patches: (usize, usize),
    pub ambient: f64,
    /// Unit direction toward the key light.
    pub key_direction: Vec3,
    pub key_intensity: f64,
    /// Target the camera arc looks at.
    pub focus: Vec3,
}

struct Hit {
    t: f64,
    point: Vec3,
    normal: Vec3,
    target: Target,
}

#[derive(Clone, Copy)]
enum Target {
    Object(usize),
    Wall { s: f64, t: f64 },
}

fn intersect_shape(shape: &Shape, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let b = oc.dot(d);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > EPS { -b - sq } else { -b + sq };
            (t > EPS).then(|| (t, (o + d * t - center) / radius))
        }
        Shape::Cuboid { min, max } => {
            let (t_near, n_near, t_far, n_far) = slab(&min, &max, o, d)?;
            if t_near > EPS {
                Some((t_near, n_near))
            } else if t_far > EPS {
                Some((t_far, n_far))
            } else {
                None
            }
        }
    }
}

/// Ray-box slab test; normals point outward.
fn slab(min: &Vec3, max: &Vec3, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3, f64, Vec3)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
        let mut na = Vec3::zeros();
        na[a] = -1.0;
        let mut nb = -na;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            std::mem::swap(&mut na, &mut nb);
        }
        if ta > t0 {
            t0 = ta;
            n0 = na;
        }
        if tb < t1 {
            t1 = tb;
            n1 = nb;
        }
    }
    (t0 <= t1).then_some((t0, n0, t1, n1))
}

fn reflect(d: &Vec3, n: &Vec3) -> Vec3 {
    d - n * (2.0 * d.dot(n))
}

fn refract(d: &Vec3, n: &Vec3, eta: f64) -> Option<Vec3> {
    let cos_i = -n.dot(d);
    let k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
    (k >= 0.0).then(|| (d * eta + n * (eta * cos_i - k.sqrt())).normalize())
}

/// Per-pixel light transport for one camera.
#[derive(Clone, Debug, Default)]
pub struct PixelTransport {
    /// Radiance independent of the wall (ambient + key light).
    pub base: [f64; 3],
    /// `(weight, (s, t))` lookups into the wall texture.
    pub lookups: Vec<([f32; 3], [f32; 2])>,
    /// Diffuse albedo weight applied to the bounce-light row.
    pub diffuse: [f64; 3],
    /// Form factors against wall patches, empty when the pixel sees no object.
    pub form: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct CameraTransport {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<PixelTransport>,
    pub mask: ForegroundMask,
    patches: (usize, usize),
}

impl Stage {
    /// Tabletop stage with a diffuse sphere, a mirror sphere, a glass block
    /// and a diffuse cube on a slightly glossy table in front of the wall.
    pub fn desk() -> Self {
        let glass = Material {
            albedo: [0.08; 3],
            mirror: 0.06,
            transmission: 0.86,
            tint: [0.92, 0.97, 1.0],
            ior: 1.5,
        };
        let mirror = Material {
            albedo: [0.05; 3],
            mirror: 0.9,
            transmission: 0.0,
            tint: [0.95, 0.93, 0.88],
            ior: 1.0,
        };
        let table = Material {
            albedo: [0.55, 0.5, 0.45],
            mirror: 0.15,
            ..Material::diffuse([0.0; 3])
        };
        let v = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
        Self {
            objects: vec![
                StageObject {
                    shape: Shape::Cuboid { min: v(-3.0, -0.1, -1.2), max: v(3.0, 0.0, 1.6) },
                    material: table,
                },
                StageObject {
                    shape: Shape::Sphere { center: v(-0.55, 0.26, 0.1), radius: 0.26 },
                    material: Material::diffuse([0.8, 0.3, 0.25]),
                },
                StageObject {
                    shape: Shape::Sphere { center: v(0.05, 0.32, -0.25), radius: 0.32 },
                    material: mirror,
                },
                StageObject {
                    shape: Shape::Cuboid { min: v(0.45, 0.0, 0.1), max: v(0.78, 0.42, 0.4) },
                    material: glass,
                },
                StageObject {
                    shape: Shape::Cuboid { min: v(-0.2, 0.0, 0.35), max: v(0.04, 0.24, 0.59) },
                    material: Material::diffuse([0.25, 0.55, 0.8]),
                },
            ],
            wall: Backplate::new([
                [-4.0, 2.2, -1.2],
                [4.0, 2.2, -1.2],
                [4.0, -0.6, -1.2],
                [-4.0, -0.6, -1.2],
            ])
            .expect("stage wall is a valid quad"),
            wall_gain: 1.0,
            wall_patches: (16, 8),
            ambient: 0.3,
            key_direction: Vec3::new(-0.4, 1.0, 0.7).normalize(),
            key_intensity: 0.55,
            focus: v(0.0, 0.25, 0.0),
        }
    }

    /// `count` cameras on a horizontal arc in front of the stage.
    pub fn camera_arc(&self, count: usize, width: usize, height: usize) -> Result<Vec<Camera>> {
        let (radius, height_above, spread) = (2.7, 0.75, 0.45);
        (0..count)
            .map(|i| {
                let f = if count > 1 { i as f64 / (count - 1) as f64 - 0.5 } else { 0.0 };
                let a = f * spread * 2.0;
                let eye = self.focus + Vec3::new(radius * a.sin(), height_above, radius * a.cos());
                Camera::look_at(i, eye, self.focus, Vec3::y(), 40f64.to_radians(), width, height)
            })
            .collect()
    }

    fn wall_corners(&self) -> [Vec3; 4] {
        self.wall.posed_corners().expect("stage wall pose is valid")
    }

    fn nearest(&self, corners: &[Vec3; 4], o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, n)) = intersect_shape(&obj.shape, o, d) {
                if best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, point: o + d * t, normal: n, target: Target::Object(i) });
                }
            }
        }
        if let Some(h) = intersect_parallelogram(corners, o, d) {
            if h.distance > EPS && best.as_ref().is_none_or(|b| h.distance < b.t) {
                best = Some(Hit {
                    t: h.distance,
                    point: o + d * h.distance,
                    normal: Vec3::zeros(),
                    target: Target::Wall { s: h.s, t: h.t },
                });
            }
        }
        best
    }

    fn occluded(&self, o: &Vec3, d: &Vec3, max_t: f64) -> bool {
        self.objects
            .iter()
            .any(|obj| intersect_shape(&obj.shape, o, d).is_some_and(|(t, _)| t < max_t))
    }

    fn base_shading(&self, point: &Vec3, normal: &Vec3, albedo: &[f64; 3]) -> [f64; 3] {
        let cos = normal.dot(&self.key_direction).max(0.0);
        let lit = if cos > 0.0 && !self.occluded(&(point + normal * 1e-5), &self.key_direction, f64::INFINITY) {
            self.key_intensity * cos
        } else {
            0.0
        };
        albedo.map(|a| a * (self.ambient + lit))
    }

    fn form_factors(&self, corners: &[Vec3; 4], point: &Vec3, normal: &Vec3) -> Vec<f32> {
        let (nx, ny) = self.wall_patches;
        let eu = corners[1] - corners[0];
        let ev = corners[3] - corners[0];
        let wall_n = eu.cross(&ev);
        let area = wall_n.norm() / (nx * ny) as f64;
        let wall_n = wall_n.normalize();
        let origin = point + normal * 1e-5;
        let mut out = vec![0.0f32; nx * ny];
        for py in 0..ny {
            for px in 0..nx {
                let c = corners[0] + eu * ((px as f64 + 0.5) / nx as f64) + ev * ((py as f64 + 0.5) / ny as f64);
                let to = c - point;
                let r2 = to.norm_squared();
                let r = r2.sqrt();
                let w = to / r;
                let cos_s = normal.dot(&w);
                if cos_s <= 0.0 || self.occluded(&origin, &w, r - 1e-4) {
                    continue;
                }
                let cos_w = wall_n.dot(&w).abs();
                out[py * nx + px] = (cos_s * cos_w * area / (std::f64::consts::PI * r2)) as f32;
            }
        }
        out
    }

    /// Follows a mirror or glass ray one step: wall lookups are recorded with
    /// `weight`, object hits contribute their base shading.
    fn secondary(&self, corners: &[Vec3; 4], o: &Vec3, d: &Vec3, weight: [f64; 3], px: &mut PixelTransport) {
        match self.nearest(corners, o, d) {
            Some(Hit { target: Target::Wall { s, t }, .. }) => {
                px.lookups.push((weight.map(|w| (w * self.wall_gain) as f32), [s as f32, t as f32]));
            }
            Some(Hit { target: Target::Object(i), point, normal, .. }) => {
                let m = &self.objects[i].material;
                let diffuse = 1.0 - m.mirror - m.transmission;
                let b = self.base_shading(&point, &normal, &m.albedo);
                for c in 0..3 {
                    px.base[c] += weight[c] * diffuse * b[c];
                }
            }
            None => {}
        }
    }

    fn refract_through(&self, obj: &StageObject, point: &Vec3, normal: &Vec3, d: &Vec3) -> Option<(Vec3, Vec3)> {
        let Shape::Cuboid { min, max } = obj.shape else {
            return None;
        };
        let inside = refract(d, normal, 1.0 / obj.material.ior)?;
        let start = point - normal * 1e-6;
        let (_, _, t_exit, n_exit) = slab(&min, &max, &start, &inside)?;
        let exit = start + inside * t_exit;
        let out = refract(&inside, &(-n_exit), obj.material.ior)?;
        Some((exit + n_exit * 1e-6, out))
    }

    fn trace_sample(&self, corners: &[Vec3; 4], o: &Vec3, d: &Vec3, w: f64, px: &mut PixelTransport, want_form: bool) {
        let Some(hit) = self.nearest(corners, o, d) else {
            return;
        };
        match hit.target {
            Target::Wall { s, t } => {
                px.lookups.push(([(w * self.wall_gain) as f32; 3], [s as f32, t as f32]));
            }
            Target::Object(i) => {
                let obj = &self.objects[i];
                let m = &obj.material;
                let n = hit.normal;
                let diffuse = 1.0 - m.mirror - m.transmission;
                let b = self.base_shading(&hit.point, &n, &m.albedo);
                for c in 0..3 {
                    px.base[c] += w * diffuse * b[c];
                    px.diffuse[c] += w * diffuse * m.albedo[c];
                }
                if want_form && px.form.is_empty() {
                    px.form = self.form_factors(corners, &hit.point, &n);
                }
                if m.mirror > 0.0 {
                    let r = reflect(d, &n);
                    self.secondary(corners, &(hit.point + n * 1e-6), &r, m.tint.map(|t| t * m.mirror * w), px);
                }
                if m.transmission > 0.0 {
                    if let Some((o2, d2)) = self.refract_through(obj, &hit.point, &n, d) {
                        self.secondary(corners, &o2, &d2, m.tint.map(|t| t * m.transmission * w), px);
                    }
                }
            }
        }
    }

    /// Transport for every pixel of `cam`. Sample 0 goes through the pixel
    /// center; the others are jittered uniformly inside the pixel.
    pub fn transport(&self, cam: &Camera, spp: usize, seed: u64) -> Result<CameraTransport> {
        if spp == 0 {
            return Err(Error::InvalidParameter("spp must be at least 1".into()));
        }
        let corners = self.wall_corners();
        let origin = cam.center();
        let (w, h) = (cam.width, cam.height);
        let rows: Vec<(Vec<PixelTransport>, Vec<bool>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((cam.id as u64) << 32) ^ y as u64);
                let mut row = Vec::with_capacity(w);
                let mut mask = Vec::with_capacity(w);
                for x in 0..w {
                    let mut px = PixelTransport::default();
                    let (_, center_dir) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                    mask.push(matches!(
                        self.nearest(&corners, &origin, &center_dir),
                        Some(Hit { target: Target::Object(_), .. })
                    ));
                    let wt = 1.0 / spp as f64;
                    for s in 0..spp {
                        let (jx, jy) = if s == 0 { (0.5, 0.5) } else { (rng.random(), rng.random()) };
                        let (_, d) = cam.ray(x as f64 + jx, y as f64 + jy);
                        self.trace_sample(&corners, &origin, &d, wt, &mut px, true);
                    }
                    row.push(px);
                }
                (row, mask)
            })
            .collect();
        let mut pixels = Vec::with_capacity(w * h);
        let mut mask = Vec::with_capacity(w * h);
        for (r, m) in rows {
            pixels.extend(r);
            mask.extend(m);
        }
        Ok(CameraTransport {
            width: w,
            height: h,
            pixels,
            mask: ForegroundMask { width: w, height: h, data: mask },
            patches: self.wall_patches,
        })
    }

    /// Traces one frame. `texture = None` renders the canonical pass.
    pub fn trace_frame(
        &self,
        cam: &Camera,
        texture: Option<&RgbImage>,
        spp: usize,
        seed: u64,
    ) -> Result<(RgbImage, ForegroundMask)> {
        let t = self.transport(cam, spp, seed)?;
        Ok((t.shade(texture), t.mask))
    }
}

/// Mean texture color over each cell of an `nx × ny` grid in `(s, t)`.
fn patch_means(tex: &RgbImage, (nx, ny): (usize, usize)) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0; 3]; nx * ny];
    let mut counts = vec![0usize; nx * ny];
    for y in 0..tex.height {
        let py = (y * ny / tex.height).min(ny - 1);
        for x in 0..tex.width {
            let px = (x * nx / tex.width).min(nx - 1);
            let p = tex.get(x, y);
            let cell = py * nx + px;
            for c in 0..3 {
                sums[cell][c] += p[c];
            }
            counts[cell] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &n)| s.map(|v| v / n.max(1) as f64)).collect()
}

/// Texture lookup at wall coordinates `(s, t)`, matching the backplate renderer.
fn wall_lookup(tex: &RgbImage, st: [f32; 2]) -> [f64; 3] {
    let x = st[0] as f64 * tex.width as f64 - 0.5;
    let y = st[1] as f64 * tex.height as f64 - 0.5;
    sample_bilinear(tex, [x / (tex.width.max(2) - 1) as f64, y / (tex.height.max(2) - 1) as f64])
}

impl CameraTransport {
    pub fn shade(&self, texture: Option<&RgbImage>) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        let patches = texture.map(|t| patch_means(t, self.patches));
        for (o, px) in out.data.iter_mut().zip(&self.pixels) {
            *o = px.base;
            let (Some(tex), Some(means)) = (texture, patches.as_ref()) else {
                continue;
            };
            for (w, st) in &px.lookups {
                let v = wall_lookup(tex, *st);
                for c in 0..3 {
                    o[c] += w[c] as f64 * v[c];
                }
            }
            if !px.form.is_empty() {
                let mut irr = [0.0; 3];
                for (f, m) in px.form.iter().zip(means) {
                    for c in 0..3 {
                        irr[c] += *f as f64 * m[c];
                    }
                }
                for c in 0..3 {
                    o[c] += px.diffuse[c] * irr[c];
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Gradient,
    Checker,
    Noise,
    Photo,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Procedural stand-ins for LED wall content.
pub fn procedural_texture(kind: TextureKind, size: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    match kind {
        TextureKind::Gradient => {
            let (a, b) = (random_color(&mut rng), random_color(&mut rng));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (ca, sa) = (angle.cos(), angle.sin());
            RgbImage::from_fn(size, size, |x, y| {
                let (u, v) = (x as f64 / n - 0.5, y as f64 / n - 0.5);
                let t = ((u * ca + v * sa) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
                mix(a, b, t)
            })
        }
        TextureKind::Checker => {
            let (a, b) = (random_color(&mut rng), random_color(&mut rng));
            let cells: usize = rng.random_range(3..10);
            RgbImage::from_fn(size, size, |x, y| {
                if (x * cells / size + y * cells / size) % 2 == 0 { a } else { b }
            })
        }
        TextureKind::Noise => {
            let (a, b, c) = (random_color(&mut rng), random_color(&mut rng), random_color(&mut rng));
            let octaves: Vec<(usize, Vec<f64>, Vec<f64>)> = [3usize, 6, 12]
                .iter()
                .map(|&g| {
                    let l1 = (0..(g + 1) * (g + 1)).map(|_| rng.random()).collect();
                    let l2 = (0..(g + 1) * (g + 1)).map(|_| rng.random()).collect();
                    (g, l1, l2)
                })
                .collect();
            RgbImage::from_fn(size, size, |x, y| {
                let (mut n1, mut n2, mut amp, mut total) = (0.0, 0.0, 1.0, 0.0);
                for (g, l1, l2) in &octaves {
                    let fx = x as f64 / n * *g as f64;
                    let fy = y as f64 / n * *g as f64;
                    let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                    let (tx, ty) = (smooth(fx.fract()), smooth(fy.fract()));
                    let at = |l: &Vec<f64>, i: usize, j: usize| l[j * (g + 1) + i];
                    let lerp2 = |l: &Vec<f64>| {
                        let top = at(l, ix, iy) * (1.0 - tx) + at(l, ix + 1, iy) * tx;
                        let bottom = at(l, ix, iy + 1) * (1.0 - tx) + at(l, ix + 1, iy + 1) * tx;
                        top * (1.0 - ty) + bottom * ty
                    };
                    n1 += amp * lerp2(l1);
                    n2 += amp * lerp2(l2);
                    total += amp;
                    amp *= 0.5;
                }
                mix(mix(a, b, n1 / total), c, n2 / total)
            })
        }
        TextureKind::Photo => {
            let (sky, horizon, ground) = (random_color(&mut rng), random_color(&mut rng), random_color(&mut rng));
            let ground = ground.map(|v| v * 0.5);
            let line: f64 = rng.random_range(0.45..0.75);
            let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..rng.random_range(3..7))
                .map(|_| {
                    (random_color(&mut rng), rng.random(), rng.random_range(0.0..line), rng.random_range(0.03..0.15))
                })
                .collect();
            RgbImage::from_fn(size, size, |x, y| {
                let (u, v) = (x as f64 / n, y as f64 / n);
                let mut p = if v < line { mix(sky, horizon, v / line) } else { ground };
                for (col, bx, by, r) in &blobs {
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    let g = (-d2 / (2.0 * r * r)).exp();
                    p = mix(p, *col, g);
                }
                p.map(|c| c.clamp(0.0, 1.0))
            })
        }
    }
}

/// Texture kind for background `k`.
pub fn texture_kind(k: usize) -> TextureKind {
    [TextureKind::Gradient, TextureKind::Checker, TextureKind::Noise, TextureKind::Photo][k % 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Training cameras; one extra held-out camera is added in the middle of the arc.
    pub train_views: usize,
    pub train_textures: usize,
    pub test_textures: usize,
    pub texture_size: usize,
    pub spp: usize,
    pub init_points: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            train_views: 8,
            train_textures: 12,
            test_textures: 4,
            texture_size: 128,
            spp: 16,
            init_points: 6000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("synth config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

fn write_rgb(img: &RgbImage, dir: &Path, rel: &str) -> Result<()> {
    img.save_png(&dir.join(rel))
}

/// Renders the stage into `out`: `images/j{J}_k{K}.png`, `masks/j{J}.png`,
/// `backgrounds/k{K}.png`, `canonical/j{J}.png`, `points.csv` and the manifest.
pub fn generate_dataset(stage: &Stage, cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    if cfg.train_views == 0 || cfg.train_textures == 0 {
        return Err(Error::InvalidParameter("need at least one view and one texture".into()));
    }
    for sub in ["images", "masks", "backgrounds", "canonical"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let total_views = cfg.train_views + 1;
    let arc = stage.camera_arc(total_views, cfg.width, cfg.height)?;
    // The middle of the arc is held out; the rest keep their order.
    let test_slot = total_views / 2;
    let mut cameras: Vec<(Camera, Split)> = Vec::with_capacity(total_views);
    for (slot, cam) in arc.into_iter().enumerate() {
        if slot != test_slot {
            cameras.push((cam, Split::Train));
        }
    }
    let mut test_cam = stage.camera_arc(total_views, cfg.width, cfg.height)?.swap_remove(test_slot);
    test_cam.id = cfg.train_views;
    cameras.push((test_cam, Split::Test));
    for (j, (cam, _)) in cameras.iter_mut().enumerate() {
        cam.id = j;
    }

    let n_tex = cfg.train_textures + cfg.test_textures;
    let mut backgrounds = Vec::with_capacity(n_tex);
    let mut textures = Vec::with_capacity(n_tex);
    for k in 0..n_tex {
        let tex = procedural_texture(texture_kind(k), cfg.texture_size, cfg.seed.wrapping_mul(1000).wrapping_add(k as u64));
        // Round-trip through 8 bits so frames are rendered from exactly the stored texture.
        let tex = RgbImage::from_rgb8(&tex.to_rgb8());
        let rel = format!("backgrounds/k{k}.png");
        write_rgb(&tex, out, &rel)?;
        backgrounds.push(BackgroundRecord {
            id: k,
            path: rel,
            split: if k < cfg.train_textures { Split::Train } else { Split::Test },
        });
        textures.push(tex);
    }

    let mut frames = Vec::new();
    let mut points = Vec::new();
    let mut point_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for (j, (cam, split)) in cameras.iter().enumerate() {
        let transport = stage.transport(cam, cfg.spp, cfg.seed)?;
        let mask_rel = format!("masks/j{j}.png");
        transport.mask.save(&out.join(&mask_rel))?;
        let canonical = transport.shade(None);
        let canon_rel = format!("canonical/j{j}.png");
        write_rgb(&canonical, out, &canon_rel)?;
        frames.push(FrameRecord { j, k: None, image: canon_rel, mask: mask_rel.clone(), background: None });
        for (k, tex) in textures.iter().enumerate() {
            let rel = format!("images/j{j}_k{k}.png");
            write_rgb(&transport.shade(Some(tex)), out, &rel)?;
            frames.push(FrameRecord {
                j,
                k: Some(k),
                image: rel,
                mask: mask_rel.clone(),
                background: Some(backgrounds[k].path.clone()),
            });
        }
        if *split == Split::Train {
            let per_view = cfg.init_points / cfg.train_views;
            sample_points(stage, cam, &canonical, per_view, &mut point_rng, &mut points);
        }
    }
    crate::dataset::save_points(&out.join("points.csv"), &points)?;

    let manifest = DatasetManifest {
        width: cfg.width,
        height: cfg.height,
        cameras: cameras
            .iter()
            .map(|(c, s)| CameraRecord { camera: c.into(), split: *s })
            .collect(),
        backgrounds,
        frames,
        wall: Some(stage.wall.clone()),
        points: Some("points.csv".into()),
        seed: cfg.seed,
    };
    manifest.save(&out.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Samples primary hits of random pixels. Object points are pushed slightly
/// inside the surface so mask culling keeps them from every view.
fn sample_points(
    stage: &Stage,
    cam: &Camera,
    canonical: &RgbImage,
    count: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<InitPoint>,
) {
    let corners = stage.wall_corners();
    let origin = cam.center();
    for _ in 0..count {
        let x = rng.random_range(0..cam.width);
        let y = rng.random_range(0..cam.height);
        let (_, d) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
        let Some(hit) = stage.nearest(&corners, &origin, &d) else {
            continue;
        };
        let (p, on_wall) = match hit.target {
            Target::Object(_) => (hit.point - hit.normal * 0.01, false),
            Target::Wall { .. } => (hit.point, true),
        };
        out.push(InitPoint {
            x: p.x,
            y: p.y,
            z: p.z,
            r: canonical.get(x, y)[0],
            g: canonical.get(x, y)[1],
            b: canonical.get(x, y)[2],
            on_wall,
        });
    }
}
