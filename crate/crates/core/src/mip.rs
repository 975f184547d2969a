//! Mipmapped background textures and the trilinear light lookup used to
//! relight each primitive.
//!
//! Texel convention: `uv = (0, 0)` is the center of the top-left texel and
//! `uv = (1, 1)` the center of the bottom-right one, i.e. a level of size
//! `w × h` is addressed at `(u·(w−1), v·(h−1))`. Addressing is clamp-to-edge.
//!
//! The mip modifier `δ ∈ [0, 1]` maps to a continuous level `ℓ = δ·(N−1)`;
//! the lookup blends the bilinear samples of levels `⌊ℓ⌋` and `⌊ℓ⌋+1` with
//! weight `α = ℓ − ⌊ℓ⌋`. Level indices are piecewise constant, so gradients
//! with respect to `δ` flow only through `α`.

use crate::image::RgbImage;
use crate::{Error, Result};

/// Default number of pyramid levels for 1080p-class textures.
pub const DEFAULT_LEVELS: usize = 8;

#[derive(Clone, Debug)]
pub struct MipPyramid {
    levels: Vec<RgbImage>,
    pub background_id: Option<usize>,
}

/// A light-texture lookup: texture coordinates and mip modifier. Out-of-range
/// values are clamped when sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UvSample {
    pub uv: [f64; 2],
    pub delta: f64,
}

/// Jacobian of a trilinear sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleGradients {
    /// `d_uv[c][a]` = ∂(channel c)/∂(uv component a).
    pub d_uv: [[f64; 2]; 3],
    pub d_delta: [f64; 3],
}

impl UvSample {
    pub fn new(uv: [f64; 2], delta: f64) -> Self {
        Self { uv, delta }
    }

    fn clamped_uv(&self) -> [f64; 2] {
        self.uv.map(|v| v.clamp(0.0, 1.0))
    }
}

impl MipPyramid {
    /// Largest level count supported by a `width × height` texture.
    pub fn max_levels(width: usize, height: usize) -> usize {
        let m = width.min(height).max(1);
        (usize::BITS - m.leading_zeros()) as usize
    }

    /// Builds `levels` levels by repeated 2×2 box filtering. Level 0 is the
    /// input itself.
    pub fn build(image: &RgbImage, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
        }
        let need = 1usize
            .checked_shl(levels as u32 - 1)
            .filter(|_| levels <= 32)
            .ok_or_else(|| Error::InvalidParameter(format!("{levels} mip levels")))?;
        if image.width < need || image.height < need {
            return Err(Error::InvalidParameter(format!(
                "{}x{} texture is too small for {levels} mip levels",
                image.width, image.height
            )));
        }
        let mut out = Vec::with_capacity(levels);
        out.push(image.clone());
        for _ in 1..levels {
            let next = downsample(out.last().unwrap());
            out.push(next);
        }
        Ok(Self {
            levels: out,
            background_id: None,
        })
    }

    /// Builds with `min(levels, max_levels)` levels.
    pub fn build_capped(image: &RgbImage, levels: usize) -> Result<Self> {
        Self::build(image, levels.min(Self::max_levels(image.width, image.height)))
    }

    pub fn with_background_id(mut self, id: usize) -> Self {
        self.background_id = Some(id);
        self
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, n: usize) -> &RgbImage {
        &self.levels[n]
    }

    /// Bounding levels and blend weight for a mip modifier.
    fn level_blend(&self, delta: f64) -> (usize, usize, f64, bool) {
        let top = self.levels.len() - 1;
        let inside = (0.0..=1.0).contains(&delta);
        let l = delta.clamp(0.0, 1.0) * top as f64;
        let lb = (l.floor() as usize).min(top);
        if lb == top {
            return (top, top, 0.0, false);
        }
        (lb, lb + 1, l - lb as f64, inside)
    }

    /// Trilinear lookup: bilinear within the two bracketing levels, linear
    /// across them.
    pub fn sample_trilinear(&self, s: &UvSample) -> [f64; 3] {
        let uv = s.clamped_uv();
        let (lb, ub, alpha, _) = self.level_blend(s.delta);
        let lo = sample_bilinear(&self.levels[lb], uv);
        if alpha == 0.0 {
            return lo;
        }
        let hi = sample_bilinear(&self.levels[ub], uv);
        std::array::from_fn(|c| alpha * hi[c] + (1.0 - alpha) * lo[c])
    }

    /// Value and Jacobian of [`Self::sample_trilinear`]. Coordinates outside
    /// `[0, 1]` get a zero gradient.
    pub fn sample_with_gradients(&self, s: &UvSample) -> ([f64; 3], SampleGradients) {
        let uv = s.clamped_uv();
        let (lb, ub, alpha, delta_live) = self.level_blend(s.delta);
        let (lo, d_lo) = sample_bilinear_grad(&self.levels[lb], uv);
        let (hi, d_hi) = if ub == lb {
            (lo, d_lo)
        } else {
            sample_bilinear_grad(&self.levels[ub], uv)
        };
        let live = [0, 1].map(|a| (0.0..=1.0).contains(&s.uv[a]));
        let top = (self.levels.len() - 1) as f64;
        let mut grads = SampleGradients {
            d_uv: [[0.0; 2]; 3],
            d_delta: [0.0; 3],
        };
        let mut value = [0.0; 3];
        for c in 0..3 {
            value[c] = alpha * hi[c] + (1.0 - alpha) * lo[c];
            for a in 0..2 {
                if live[a] {
                    grads.d_uv[c][a] = alpha * d_hi[c][a] + (1.0 - alpha) * d_lo[c][a];
                }
            }
            if delta_live {
                grads.d_delta[c] = top * (hi[c] - lo[c]);
            }
        }
        (value, grads)
    }

    pub fn sample_gradients(&self, s: &UvSample) -> SampleGradients {
        self.sample_with_gradients(s).1
    }
}

fn downsample(src: &RgbImage) -> RgbImage {
    let w = src.width.div_ceil(2);
    let h = src.height.div_ceil(2);
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for sy in 2 * y..(2 * y + 2).min(src.height) {
            for sx in 2 * x..(2 * x + 2).min(src.width) {
                let p = src.get(sx, sy);
                for c in 0..3 {
                    acc[c] += p[c];
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    })
}

/// Cell origin and fractional offset along one axis of length `size`.
#[inline]
fn axis_cell(t: f64, size: usize) -> (usize, f64, f64) {
    if size < 2 {
        return (0, 0.0, 0.0);
    }
    let span = (size - 1) as f64;
    let x = t * span;
    let i = (x.floor() as usize).min(size - 2);
    (i, x - i as f64, span)
}

/// Bilinear lookup at clamped `uv` in a single level.
pub fn sample_bilinear(level: &RgbImage, uv: [f64; 2]) -> [f64; 3] {
    sample_bilinear_grad(level, uv.map(|v| v.clamp(0.0, 1.0))).0
}

fn sample_bilinear_grad(level: &RgbImage, uv: [f64; 2]) -> ([f64; 3], [[f64; 2]; 3]) {
    let (x0, fx, sx) = axis_cell(uv[0], level.width);
    let (y0, fy, sy) = axis_cell(uv[1], level.height);
    let x1 = (x0 + 1).min(level.width - 1);
    let y1 = (y0 + 1).min(level.height - 1);
    let p00 = level.get(x0, y0);
    let p10 = level.get(x1, y0);
    let p01 = level.get(x0, y1);
    let p11 = level.get(x1, y1);
    let mut v = [0.0; 3];
    let mut d = [[0.0; 2]; 3];
    for c in 0..3 {
        let top = p00[c] + fx * (p10[c] - p00[c]);
        let bottom = p01[c] + fx * (p11[c] - p01[c]);
        v[c] = top + fy * (bottom - top);
        let dx_top = p10[c] - p00[c];
        let dx_bottom = p11[c] - p01[c];
        d[c][0] = sx * (dx_top + fy * (dx_bottom - dx_top));
        d[c][1] = sy * (bottom - top);
    }
    (v, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        RgbImage {
            width: w,
            height: h,
            data,
        }
    }

    #[test]
    fn level_dimensions_round_up() {
        let img = RgbImage::new(13, 9);
        let pyr = MipPyramid::build(&img, 4).unwrap();
        let dims: Vec<_> = (0..4).map(|n| (pyr.level(n).width, pyr.level(n).height)).collect();
        assert_eq!(dims, vec![(13, 9), (7, 5), (4, 3), (2, 2)]);
    }

    #[test]
    fn too_many_levels_rejected() {
        let img = RgbImage::new(8, 8);
        assert!(MipPyramid::build(&img, 4).is_ok());
        assert!(matches!(MipPyramid::build(&img, 5), Err(Error::InvalidParameter(_))));
        assert!(MipPyramid::build(&img, 0).is_err());
        assert_eq!(MipPyramid::max_levels(8, 8), 4);
        assert_eq!(MipPyramid::max_levels(256, 200), 8);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RgbImage::filled(32, 16, [0.5; 3]);
        let pyr = MipPyramid::build(&img, 5).unwrap();
        for n in 0..5 {
            assert!(pyr.level(n).data.iter().all(|p| *p == [0.5; 3]));
        }
        for &(u, v, d) in &[(0.0, 0.0, 0.0), (0.33, 0.71, 0.4), (1.0, 0.5, 0.99)] {
            let s = pyr.sample_trilinear(&UvSample::new([u, v], d));
            assert!(s.iter().all(|x| (x - 0.5).abs() < 1e-15));
            let g = pyr.sample_gradients(&UvSample::new([u, v], d));
            assert!(g.d_uv.iter().flatten().all(|x| x.abs() < 1e-15));
            assert!(g.d_delta.iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn checkerboard_level_one_is_mean() {
        let img = RgbImage::from_fn(2, 2, |x, y| if (x + y) % 2 == 0 { [1.0; 3] } else { [0.0; 3] });
        let pyr = MipPyramid::build(&img, 2).unwrap();
        assert_eq!(pyr.level(1).data, vec![[0.5; 3]]);
    }

    #[test]
    fn box_filter_conserves_mean() {
        let img = random_image(64, 64, 3);
        let pyr = MipPyramid::build(&img, 7).unwrap();
        let m0 = img.mean();
        for n in 1..7 {
            let m = pyr.level(n).mean();
            for c in 0..3 {
                assert!((m[c] - m0[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bilinear_texel_centers_and_midpoints() {
        let img = random_image(5, 4, 9);
        for y in 0..4 {
            for x in 0..5 {
                let uv = [x as f64 / 4.0, y as f64 / 3.0];
                assert_eq!(sample_bilinear(&img, uv), img.get(x, y));
            }
        }
        let mid = sample_bilinear(&img, [1.5 / 4.0, 2.0 / 3.0]);
        let (a, b) = (img.get(1, 2), img.get(2, 2));
        for c in 0..3 {
            assert!((mid[c] - 0.5 * (a[c] + b[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_zero_is_level_zero_bilinear() {
        let img = random_image(32, 32, 1);
        let pyr = MipPyramid::build(&img, 5).unwrap();
        let uv = [0.37, 0.81];
        assert_eq!(pyr.sample_trilinear(&UvSample::new(uv, 0.0)), sample_bilinear(&img, uv));
    }

    #[test]
    fn two_level_midpoint_on_gradient_image() {
        // Horizontal ramp r(x) = x/(w-1) over a 16-wide texture, N = 5:
        // δ = 1.5/4 puts ℓ halfway between levels 1 and 2.
        let img = RgbImage::from_fn(16, 16, |x, _| [x as f64 / 15.0, 0.0, 1.0]);
        let pyr = MipPyramid::build(&img, 5).unwrap();
        let u = 0.4;
        // Level 1 is 8 wide with texel i averaging ramp values 2i and 2i+1.
        let level1 = |i: f64| (2.0 * i + 0.5) / 15.0;
        let level2 = |i: f64| (4.0 * i + 1.5) / 15.0;
        let expected = 0.5 * (level1(u * 7.0) + level2(u * 3.0));
        let got = pyr.sample_trilinear(&UvSample::new([u, 0.5], 1.5 / 4.0));
        assert!((got[0] - expected).abs() < 1e-12, "{} vs {expected}", got[0]);
        assert!((got[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ramp_derivative_is_slope_times_width() {
        let img = RgbImage::from_fn(16, 8, |x, _| [0.1 * x as f64, 0.0, 0.0]);
        let pyr = MipPyramid::build(&img, 1).unwrap();
        let g = pyr.sample_gradients(&UvSample::new([0.43, 0.6], 0.0));
        assert!((g.d_uv[0][0] - 0.1 * 15.0).abs() < 1e-12);
        assert!(g.d_uv[0][1].abs() < 1e-12);
    }

    #[test]
    fn clamped_coordinates_have_zero_gradient() {
        let img = random_image(8, 8, 4);
        let pyr = MipPyramid::build(&img, 3).unwrap();
        let g = pyr.sample_gradients(&UvSample::new([-0.2, 1.3], 0.5));
        assert!(g.d_uv.iter().flatten().all(|v| *v == 0.0));
        let inside = pyr.sample_trilinear(&UvSample::new([0.0, 1.0], 0.5));
        let outside = pyr.sample_trilinear(&UvSample::new([-0.2, 1.3], 0.5));
        assert_eq!(inside, outside);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = random_image(32, 32, 5);
        let pyr = MipPyramid::build(&img, 6).unwrap();
        let h = 1e-5;
        let mut passed = 0;
        let probes = 2000;
        for _ in 0..probes {
            let s = UvSample::new([rng.random_range(0.02..0.98), rng.random_range(0.02..0.98)], rng.random_range(0.02..0.98));
            let g = pyr.sample_gradients(&s);
            let mut ok = true;
            for a in 0..3 {
                let (mut p, mut m) = (s, s);
                if a < 2 {
                    p.uv[a] += h;
                    m.uv[a] -= h;
                } else {
                    p.delta += h;
                    m.delta -= h;
                }
                let (vp, vm) = (pyr.sample_trilinear(&p), pyr.sample_trilinear(&m));
                for c in 0..3 {
                    let fd = (vp[c] - vm[c]) / (2.0 * h);
                    let an = if a < 2 { g.d_uv[c][a] } else { g.d_delta[c] };
                    if (fd - an).abs() > 1e-4 * fd.abs().max(an.abs()) + 1e-8 {
                        ok = false;
                    }
                }
            }
            passed += ok as usize;
        }
        // Kinks at texel and level boundaries account for the rest.
        assert!(passed as f64 >= 0.99 * probes as f64, "{passed}/{probes}");
    }

    proptest! {
        #[test]
        fn sample_bounded_by_texels(
            seed in 0u64..1000,
            u in -0.1f64..1.1,
            v in -0.1f64..1.1,
            d in -0.1f64..1.1,
        ) {
            let img = random_image(12, 10, seed);
            let pyr = MipPyramid::build(&img, 3).unwrap();
            let s = pyr.sample_trilinear(&UvSample::new([u, v], d));
            let (lo, hi) = (0..3).flat_map(|n| pyr.level(n).data.iter().flatten().copied())
                .fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x), b.max(x)));
            for c in s {
                prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
            }
        }

        #[test]
        fn lipschitz_in_uv(seed in 0u64..1000, u in 0.0f64..0.99, v in 0.0f64..1.0, du in 0.0f64..0.01) {
            let img = random_image(9, 9, seed);
            let pyr = MipPyramid::build(&img, 1).unwrap();
            let a = pyr.sample_trilinear(&UvSample::new([u, v], 0.0));
            let b = pyr.sample_trilinear(&UvSample::new([u + du, v], 0.0));
            let mut max_diff: f64 = 0.0;
            for y in 0..9 {
                for x in 0..8 {
                    let (p, q) = (img.get(x, y), img.get(x + 1, y));
                    for c in 0..3 {
                        max_diff = max_diff.max((p[c] - q[c]).abs());
                    }
                }
            }
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() <= max_diff * 8.0 * du + 1e-12);
            }
        }
    }
}
