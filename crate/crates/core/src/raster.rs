//! Tile-based splatting with relit color composition and its analytic
//! backward pass.
//!
//! Each primitive's color is `c̃ + λ̃·Δc`: the canonical SH color, plus a
//! texture lookup `Δc` at the primitive's learned `(uv, δ)` scaled by the
//! learned intensity `λ̃`. A single front-to-back pass accumulates the relit
//! color together with the canonical color and the lighting AOVs.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::camera::{project_gaussian, project_gaussian_backward, Camera};
use crate::image::{GrayImage, RgbImage};
use crate::math::{build_covariance, build_covariance_backward, sigmoid, Vec3};
use crate::mip::{MipPyramid, UvSample};
use crate::scene::SplatScene;
use crate::sh::{eval_with_basis, sh_basis, sh_basis_jacobian, view_vector_gradient, SH_C0, SH_COEFFS};
use crate::{Error, Result};

/// Offset added to the evaluated color SH.
pub const COLOR_OFFSET: f64 = 0.5;

/// Band-0 color coefficient producing `rgb` for a view-independent primitive.
pub fn rgb_to_sh_dc(rgb: f64) -> f64 {
    (rgb - COLOR_OFFSET) / SH_C0
}

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    /// Contributions with smaller alpha are skipped.
    pub alpha_min: f64,
    /// A pixel stops compositing once its transmittance would drop below this.
    pub transmittance_min: f64,
    /// Global multiplier on every primitive's lighting intensity.
    pub lambda_scale: f64,
    pub tile_size: usize,
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            lambda_scale: 1.0,
            tile_size: 16,
            parallel: true,
        }
    }
}

/// Color buffer plus AOVs.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Relit color.
    pub color: RgbImage,
    /// Color from the canonical SH term only.
    pub canonical: RgbImage,
    pub alpha: GrayImage,
    /// Alpha-weighted mean camera depth (0 where alpha is 0).
    pub depth: GrayImage,
    /// Accumulated lighting intensity.
    pub lambda_map: GrayImage,
    /// Accumulated `λ̃·Δc`.
    pub residual_map: RgbImage,
}

impl RenderOutput {
    fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            color: RgbImage::new(width, height),
            canonical: RgbImage::new(width, height),
            alpha: GrayImage::new(width, height),
            depth: GrayImage::new(width, height),
            lambda_map: GrayImage::new(width, height),
            residual_map: RgbImage::new(width, height),
        }
    }
}

/// Decoded view-dependent appearance of one primitive.
#[derive(Clone, Copy, Debug)]
pub struct Appearance {
    pub canonical: [f64; 3],
    pub lambda: f64,
    pub uv: [f64; 2],
    pub delta: f64,
    pub delta_c: [f64; 3],
    pub color: [f64; 3],
}

/// Texture coordinates decoded from the UV coefficients. Band 0 is the
/// direction-independent location itself, higher bands add the usual SH
/// view dependence.
fn decode_uv(coeffs: &crate::sh::ShCoeffs<2>, basis: &[f64; SH_COEFFS]) -> [f64; 2] {
    let sh = eval_with_basis(coeffs, basis);
    [0, 1].map(|a| sh[a] + coeffs[0][a] * (1.0 - basis[0]))
}

fn appearance_with_basis(
    scene: &SplatScene,
    i: usize,
    basis: &[f64; SH_COEFFS],
    pyramid: Option<&MipPyramid>,
    lambda_scale: f64,
) -> Appearance {
    let canonical = eval_with_basis(&scene.color_sh[i], basis).map(|v| v + COLOR_OFFSET);
    let lambda = lambda_scale * eval_with_basis(&scene.intensity_sh[i], basis)[0];
    let uv = decode_uv(&scene.uv_sh[i], basis);
    let delta = sigmoid(scene.mip_delta_raw[i]);
    let delta_c = match pyramid {
        Some(p) => p.sample_trilinear(&UvSample::new(uv, delta)),
        None => [0.0; 3],
    };
    let color = std::array::from_fn(|c| canonical[c] + lambda * delta_c[c]);
    Appearance {
        canonical,
        lambda,
        uv,
        delta,
        delta_c,
        color,
    }
}

/// Appearance of primitive `i` seen along unit direction `dir`.
pub fn appearance(
    scene: &SplatScene,
    i: usize,
    dir: &Vec3,
    pyramid: Option<&MipPyramid>,
    lambda_scale: f64,
) -> Appearance {
    appearance_with_basis(scene, i, &sh_basis(dir), pyramid, lambda_scale)
}

/// Relit color `c̃ + λ̃·Δc` of primitive `i` along `dir`.
pub fn compose_color(
    scene: &SplatScene,
    i: usize,
    dir: &Vec3,
    pyramid: Option<&MipPyramid>,
) -> [f64; 3] {
    appearance(scene, i, dir, pyramid, 1.0).color
}

/// Unnormalized Gaussian falloff `exp(−½ (P−X)ᵀ Σ⁻¹ (P−X))`.
pub fn splat_weight(p: &Vector2<f64>, x: &Vector2<f64>, cov: &Matrix2<f64>) -> f64 {
    let d = p - x;
    let inv = cov.try_inverse().unwrap_or_else(Matrix2::zeros);
    (-0.5 * d.dot(&(inv * d))).exp()
}

#[derive(Clone, Debug)]
struct Prepared {
    index: usize,
    mean: [f64; 2],
    /// Inverse 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    app: Appearance,
}

/// Fields read per pixel in the compositing loops.
#[derive(Clone, Copy, Debug)]
struct Hot {
    mx: f64,
    my: f64,
    /// `power = −(qa·dx² + qb·dx·dy + qc·dy²)`.
    qa: f64,
    qb: f64,
    qc: f64,
    opacity: f64,
    /// `ln(alpha_min / opacity)`: smaller powers cannot reach `alpha_min`.
    log_cut: f64,
}

impl Hot {
    fn new(p: &Prepared, alpha_min: f64) -> Self {
        Self {
            mx: p.mean[0],
            my: p.mean[1],
            qa: 0.5 * p.conic[0],
            qb: p.conic[1],
            qc: 0.5 * p.conic[2],
            opacity: p.opacity,
            log_cut: (alpha_min / p.opacity).ln(),
        }
    }

    /// `(alpha, falloff, dx, dy)` when the contribution reaches `alpha_min`.
    #[inline(always)]
    fn alpha(&self, px: f64, py: f64, alpha_min: f64) -> Option<(f64, f64, f64, f64)> {
        let dx = px - self.mx;
        let dy = py - self.my;
        let power = -(self.qa * dx * dx + self.qb * dx * dy + self.qc * dy * dy);
        if power < self.log_cut {
            return None;
        }
        let w = power.min(0.0).exp();
        let alpha = self.opacity * w;
        (alpha >= alpha_min).then_some((alpha, w, dx, dy))
    }
}

/// Per-tile primitive lists, front to back.
#[derive(Clone, Debug, PartialEq)]
pub struct SortedSplatList {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// `(primitive index, depth)` per tile, depth non-decreasing.
    pub tiles: Vec<Vec<(usize, f64)>>,
}

/// Forward state retained for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderState {
    width: usize,
    height: usize,
    tile_size: usize,
    tiles_x: usize,
    prepared: Vec<Prepared>,
    hot: Vec<Hot>,
    tiles: Vec<Vec<u32>>,
    final_t: Vec<f64>,
    n_contrib: Vec<u32>,
    options: RenderOptions,
}

impl RenderState {
    pub fn sorted_list(&self) -> SortedSplatList {
        SortedSplatList {
            tile_size: self.tile_size,
            tiles_x: self.tiles_x,
            tiles_y: self.tiles.len() / self.tiles_x.max(1),
            tiles: self
                .tiles
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|&p| (self.prepared[p as usize].index, self.prepared[p as usize].depth))
                        .collect()
                })
                .collect(),
        }
    }

    /// Transmittance left after compositing, per pixel.
    pub fn final_transmittance(&self) -> &[f64] {
        &self.final_t
    }
}

fn prepare(
    scene: &SplatScene,
    cam: &Camera,
    pyramid: Option<&MipPyramid>,
    opts: &RenderOptions,
) -> Result<(Vec<Prepared>, Vec<Vec<u32>>, usize, usize)> {
    scene.validate()?;
    let ts = opts.tile_size.max(1);
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let center = cam.center();

    let prep_one = |i: usize| -> Result<Option<(Prepared, [usize; 4])>> {
        let x = scene.position(i);
        let cov = build_covariance(&scene.log_scales[i], &scene.rotations[i])?;
        let Some(proj) = project_gaussian(&x, &cov, cam) else {
            return Ok(None);
        };
        let (a, b, c) = (proj.cov[(0, 0)], proj.cov[(0, 1)], proj.cov[(1, 1)]);
        let det = a * c - b * b;
        if !(det > 0.0) || !det.is_finite() || !proj.mean.iter().all(|v| v.is_finite()) {
            return Ok(None);
        }
        let opacity = sigmoid(scene.opacity_logits[i]);
        if opacity < opts.alpha_min {
            return Ok(None);
        }
        // Bounding box of the ellipse where opacity·falloff ≥ alpha_min,
        // shifted to pixel-center coordinates.
        let reach = (2.0 * (opacity / opts.alpha_min).ln()).sqrt();
        let (ex, ey) = (reach * a.sqrt(), reach * c.sqrt());
        let (mx, my) = (proj.mean.x, proj.mean.y);
        let (lo_x, hi_x) = (mx - ex - 0.5, mx + ex - 0.5);
        let (lo_y, hi_y) = (my - ey - 0.5, my + ey - 0.5);
        if hi_x < -1.0 || hi_y < -1.0 || lo_x >= cam.width as f64 || lo_y >= cam.height as f64 {
            return Ok(None);
        }
        let tile = |v: f64, n: usize| ((v / ts as f64).floor().max(0.0) as usize).min(n - 1);
        let rect = [tile(lo_x, tiles_x), tile(lo_y, tiles_y), tile(hi_x, tiles_x), tile(hi_y, tiles_y)];
        let view = x - center;
        let dir = view / view.norm();
        let app = appearance(scene, i, &dir, pyramid, opts.lambda_scale);
        Ok(Some((
            Prepared {
                index: i,
                mean: [mx, my],
                conic: [c / det, -b / det, a / det],
                depth: proj.depth,
                opacity,
                app,
            },
            rect,
        )))
    };

    let results: Vec<_> = if opts.parallel {
        (0..scene.len()).into_par_iter().map(prep_one).collect::<Result<Vec<_>>>()?
    } else {
        (0..scene.len()).map(prep_one).collect::<Result<Vec<_>>>()?
    };
    let (mut prepared, mut rects): (Vec<_>, Vec<_>) = results.into_iter().flatten().unzip();

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.sort_by(|&p, &q| {
        prepared[p]
            .depth
            .total_cmp(&prepared[q].depth)
            .then(prepared[p].index.cmp(&prepared[q].index))
    });
    let mut sorted_prepared = Vec::with_capacity(prepared.len());
    let mut sorted_rects = Vec::with_capacity(rects.len());
    for &o in &order {
        sorted_prepared.push(std::mem::replace(
            &mut prepared[o],
            Prepared {
                index: 0,
                mean: [0.0; 2],
                conic: [0.0; 3],
                depth: 0.0,
                opacity: 0.0,
                app: Appearance {
                    canonical: [0.0; 3],
                    lambda: 0.0,
                    uv: [0.0; 2],
                    delta: 0.0,
                    delta_c: [0.0; 3],
                    color: [0.0; 3],
                },
            },
        ));
        sorted_rects.push(rects[o]);
    }
    rects.clear();

    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (p, r) in sorted_rects.iter().enumerate() {
        for ty in r[1]..=r[3] {
            for tx in r[0]..=r[2] {
                tiles[ty * tiles_x + tx].push(p as u32);
            }
        }
    }
    Ok((sorted_prepared, tiles, tiles_x, tiles_y))
}

/// Per-pixel accumulators for one tile.
struct TileForward {
    color: Vec<[f64; 3]>,
    canonical: Vec<[f64; 3]>,
    residual: Vec<[f64; 3]>,
    lambda: Vec<f64>,
    depth: Vec<f64>,
    final_t: Vec<f64>,
    n_contrib: Vec<u32>,
}

fn tile_bounds(tile: usize, tiles_x: usize, ts: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let x0 = (tile % tiles_x) * ts;
    let y0 = (tile / tiles_x) * ts;
    (x0, y0, (x0 + ts).min(w), (y0 + ts).min(h))
}

fn forward_tile(
    tile: usize,
    list: &[u32],
    prepared: &[Prepared],
    hot: &[Hot],
    tiles_x: usize,
    cam: &Camera,
    opts: &RenderOptions,
) -> TileForward {
    let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, opts.tile_size, cam.width, cam.height);
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileForward {
        color: vec![[0.0; 3]; n],
        canonical: vec![[0.0; 3]; n],
        residual: vec![[0.0; 3]; n],
        lambda: vec![0.0; n],
        depth: vec![0.0; n],
        final_t: vec![1.0; n],
        n_contrib: vec![0; n],
    };
    let local: Vec<Hot> = list.iter().map(|&pi| hot[pi as usize]).collect();
    let mut k = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut last = 0;
            for (pos, h) in local.iter().enumerate() {
                let Some((alpha, ..)) = h.alpha(px, py, opts.alpha_min) else {
                    continue;
                };
                let p = &prepared[list[pos] as usize];
                let next_t = t * (1.0 - alpha);
                if next_t < opts.transmittance_min {
                    break;
                }
                let wgt = alpha * t;
                for c in 0..3 {
                    out.color[k][c] += p.app.color[c] * wgt;
                    out.canonical[k][c] += p.app.canonical[c] * wgt;
                    out.residual[k][c] += p.app.lambda * p.app.delta_c[c] * wgt;
                }
                out.lambda[k] += p.app.lambda * wgt;
                out.depth[k] += p.depth * wgt;
                t = next_t;
                last = pos + 1;
            }
            out.final_t[k] = t;
            out.n_contrib[k] = last as u32;
            k += 1;
        }
    }
    out
}

/// Forward render; keeps the state needed by [`render_backward`].
pub fn render_with_state(
    scene: &SplatScene,
    cam: &Camera,
    pyramid: Option<&MipPyramid>,
    opts: &RenderOptions,
) -> Result<(RenderOutput, RenderState)> {
    let (prepared, tiles, tiles_x, _) = prepare(scene, cam, pyramid, opts)?;
    let hot: Vec<Hot> = prepared.iter().map(|p| Hot::new(p, opts.alpha_min)).collect();
    let run = |t: usize| forward_tile(t, &tiles[t], &prepared, &hot, tiles_x, cam, opts);
    let tile_out: Vec<TileForward> = if opts.parallel {
        (0..tiles.len()).into_par_iter().map(run).collect()
    } else {
        (0..tiles.len()).map(run).collect()
    };

    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput::empty(w, h);
    let mut final_t = vec![1.0; w * h];
    let mut n_contrib = vec![0; w * h];
    for (tile, t) in tile_out.iter().enumerate() {
        let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, opts.tile_size, w, h);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                let alpha = 1.0 - t.final_t[k];
                out.color.data[i] = t.color[k];
                out.canonical.data[i] = t.canonical[k];
                out.residual_map.data[i] = t.residual[k];
                out.lambda_map.data[i] = t.lambda[k];
                out.alpha.data[i] = alpha;
                out.depth.data[i] = if alpha > 0.0 { t.depth[k] / alpha } else { 0.0 };
                final_t[i] = t.final_t[k];
                n_contrib[i] = t.n_contrib[k];
                k += 1;
            }
        }
    }
    let state = RenderState {
        width: w,
        height: h,
        tile_size: opts.tile_size,
        tiles_x,
        prepared,
        hot,
        tiles,
        final_t,
        n_contrib,
        options: *opts,
    };
    Ok((out, state))
}

/// Renders `scene` from `cam`. Without a pyramid the residual term is zero
/// and the output is the canonical render.
pub fn render(
    scene: &SplatScene,
    cam: &Camera,
    pyramid: Option<&MipPyramid>,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    Ok(render_with_state(scene, cam, pyramid, opts)?.0)
}

/// Upstream gradients of a scalar loss with respect to render outputs.
#[derive(Clone, Copy, Debug)]
pub struct OutputGradients<'a> {
    pub color: &'a [[f64; 3]],
    pub canonical: Option<&'a [[f64; 3]]>,
    pub alpha: Option<&'a [f64]>,
}

/// Parameter gradients plus per-primitive screen-space statistics.
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub grads: SplatScene,
    /// `dL/d(2D mean)` in pixels, zero for primitives not rendered.
    pub mean2d_grad: Vec<[f64; 2]>,
    /// Whether the primitive was projected inside the frame.
    pub visible: Vec<bool>,
}

/// `[mean x, mean y, Q00, Q01, Q11, opacity, color rgb, canonical rgb]`
type Grad2d = [f64; 12];

fn backward_tile(
    tile: usize,
    state: &RenderState,
    cam: &Camera,
    up: &OutputGradients<'_>,
) -> Vec<Grad2d> {
    let list = &state.tiles[tile];
    let opts = &state.options;
    let mut acc = vec![[0.0; 12]; list.len()];
    let local: Vec<Hot> = list.iter().map(|&pi| state.hot[pi as usize]).collect();
    let (x0, y0, x1, y1) = tile_bounds(tile, state.tiles_x, state.tile_size, cam.width, cam.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * state.width + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let g_color = up.color[i];
            let g_canon = up.canonical.map_or([0.0; 3], |g| g[i]);
            let g_alpha = up.alpha.map_or(0.0, |g| g[i]);
            let t_final = state.final_t[i];
            let mut t = t_final;
            let mut behind = [0.0; 3];
            let mut behind_canon = [0.0; 3];
            for pos in (0..state.n_contrib[i] as usize).rev() {
                let Some((alpha, w, dx, dy)) = local[pos].alpha(px, py, opts.alpha_min) else {
                    continue;
                };
                let p = &state.prepared[list[pos] as usize];
                let one_minus = 1.0 - alpha;
                t /= one_minus;
                let wgt = alpha * t;
                let g = &mut acc[pos];
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    g[6 + c] += wgt * g_color[c];
                    g[9 + c] += wgt * g_canon[c];
                    d_alpha += t * (p.app.color[c] - behind[c]) * g_color[c];
                    d_alpha += t * (p.app.canonical[c] - behind_canon[c]) * g_canon[c];
                    behind[c] = alpha * p.app.color[c] + one_minus * behind[c];
                    behind_canon[c] = alpha * p.app.canonical[c] + one_minus * behind_canon[c];
                }
                d_alpha += g_alpha * t_final / one_minus;

                g[5] += d_alpha * w;
                let d_power = d_alpha * p.opacity * w;
                let [a, b, c] = p.conic;
                g[0] += d_power * (a * dx + b * dy);
                g[1] += d_power * (b * dx + c * dy);
                g[2] += -0.5 * d_power * dx * dx;
                g[3] += -0.5 * d_power * dx * dy;
                g[4] += -0.5 * d_power * dy * dy;
            }
        }
    }
    acc
}

/// Gradients of a scalar loss with respect to every parameter group, given
/// the loss gradients at the render outputs. `state` must come from
/// [`render_with_state`] on the same inputs.
pub fn render_backward(
    scene: &SplatScene,
    cam: &Camera,
    pyramid: Option<&MipPyramid>,
    state: &RenderState,
    up: &OutputGradients<'_>,
) -> Result<BackwardOutput> {
    let npix = state.width * state.height;
    if up.color.len() != npix
        || up.canonical.is_some_and(|g| g.len() != npix)
        || up.alpha.is_some_and(|g| g.len() != npix)
    {
        return Err(Error::ShapeMismatch("output gradients do not match the render".into()));
    }
    let opts = state.options;
    let run = |t: usize| backward_tile(t, state, cam, up);
    let per_tile: Vec<Vec<Grad2d>> = if opts.parallel {
        (0..state.tiles.len()).into_par_iter().map(run).collect()
    } else {
        (0..state.tiles.len()).map(run).collect()
    };
    let mut grad2d = vec![[0.0; 12]; state.prepared.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (pos, g) in acc.iter().enumerate() {
            let dst = &mut grad2d[state.tiles[tile][pos] as usize];
            for k in 0..12 {
                dst[k] += g[k];
            }
        }
    }

    let center = cam.center();
    let lambda_scale = opts.lambda_scale;
    let chain = |(p, g): (&Prepared, &Grad2d)| -> Result<(usize, PrimGrad)> {
        let i = p.index;
        let mut out = PrimGrad::default();
        let x = scene.position(i);
        let opacity = p.opacity;
        out.opacity = g[5] * opacity * (1.0 - opacity);

        let q = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
        let g_q = Matrix2::new(g[2], g[3], g[3], g[4]);
        let d_cov2 = -(q * g_q * q);
        let d_mean = Vector2::new(g[0], g[1]);
        out.mean2d = [g[0], g[1]];
        let cov = build_covariance(&scene.log_scales[i], &scene.rotations[i])?;
        let (mut d_x, d_cov) = project_gaussian_backward(&x, &cov, cam, &d_mean, &d_cov2);
        let (d_ls, d_q) = build_covariance_backward(&scene.log_scales[i], &scene.rotations[i], &d_cov)?;
        out.log_scale = d_ls;
        out.rotation = d_q;

        let view = x - center;
        let view_len = view.norm();
        let dir = view / view_len;
        let basis = sh_basis(&dir);
        let jac = sh_basis_jacobian(&dir);

        let g_color: [f64; 3] = [g[6], g[7], g[8]];
        let g_canonical: [f64; 3] = std::array::from_fn(|c| g[6 + c] + g[9 + c]);
        for k in 0..SH_COEFFS {
            out.color[k] = g_canonical.map(|v| v * basis[k]);
        }
        d_x += view_vector_gradient(&scene.color_sh[i], &g_canonical, &dir, view_len, &jac);

        if let Some(pyr) = pyramid {
            let app = &p.app;
            let d_lambda: f64 = (0..3).map(|c| g_color[c] * app.delta_c[c]).sum();
            let d_lambda_coeff = d_lambda * lambda_scale;
            for k in 0..SH_COEFFS {
                out.intensity[k] = [d_lambda_coeff * basis[k]];
            }
            d_x += view_vector_gradient(&scene.intensity_sh[i], &[d_lambda_coeff], &dir, view_len, &jac);

            let (_, sg) = pyr.sample_with_gradients(&UvSample::new(app.uv, app.delta));
            let d_dc: [f64; 3] = g_color.map(|v| v * app.lambda);
            let mut d_uv = [0.0; 2];
            let mut d_delta = 0.0;
            for c in 0..3 {
                d_uv[0] += d_dc[c] * sg.d_uv[c][0];
                d_uv[1] += d_dc[c] * sg.d_uv[c][1];
                d_delta += d_dc[c] * sg.d_delta[c];
            }
            out.uv[0] = d_uv;
            for k in 1..SH_COEFFS {
                out.uv[k] = d_uv.map(|v| v * basis[k]);
            }
            d_x += view_vector_gradient(&scene.uv_sh[i], &d_uv, &dir, view_len, &jac);
            out.mip_delta = d_delta * app.delta * (1.0 - app.delta);
        }
        out.position = d_x.into();
        Ok((i, out))
    };
    let pairs: Vec<_> = state.prepared.iter().zip(&grad2d).collect();
    let prim: Vec<(usize, PrimGrad)> = if opts.parallel {
        pairs.into_par_iter().map(chain).collect::<Result<_>>()?
    } else {
        pairs.into_iter().map(chain).collect::<Result<_>>()?
    };

    let m = scene.len();
    let mut grads = SplatScene::zeros(m);
    let mut mean2d_grad = vec![[0.0; 2]; m];
    let mut visible = vec![false; m];
    for (i, g) in prim {
        grads.positions[i] = g.position;
        grads.log_scales[i] = g.log_scale;
        grads.rotations[i] = g.rotation;
        grads.opacity_logits[i] = g.opacity;
        grads.color_sh[i] = g.color;
        grads.intensity_sh[i] = g.intensity;
        grads.uv_sh[i] = g.uv;
        grads.mip_delta_raw[i] = g.mip_delta;
        mean2d_grad[i] = g.mean2d;
        visible[i] = true;
    }
    Ok(BackwardOutput {
        grads,
        mean2d_grad,
        visible,
    })
}

#[derive(Default)]
struct PrimGrad {
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity: f64,
    color: [[f64; 3]; SH_COEFFS],
    intensity: [[f64; 1]; SH_COEFFS],
    uv: [[f64; 2]; SH_COEFFS],
    mip_delta: f64,
    mean2d: [f64; 2],
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use crate::scene::Splat;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::new(0, crate::math::Mat3::identity(), Vec3::zeros(), 40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0, w, h)
            .unwrap()
    }

    #[test]
    fn weight_hand_cases() {
        let x = Vector2::new(3.0, 4.0);
        assert_eq!(splat_weight(&x, &x, &Matrix2::identity()), 1.0);
        let unit = (-0.5f64).exp();
        let p = Vector2::new(3.0, 5.0);
        assert!((splat_weight(&p, &x, &Matrix2::identity()) - unit).abs() < 1e-12);
        let p = Vector2::new(5.0, 4.0);
        let cov = Matrix2::new(4.0, 0.0, 0.0, 1.0);
        assert!((splat_weight(&p, &x, &cov) - unit).abs() < 1e-12);
    }

    fn textured(value: [f64; 3]) -> MipPyramid {
        MipPyramid::build(&RgbImage::filled(8, 8, value), 3).unwrap()
    }

    #[test]
    fn compose_color_cases() {
        let mut s = SplatScene::new();
        s.push(Splat::isotropic([0.0, 0.0, 2.0], 0.1, 0.9, [0.2, 0.3, 0.4]));
        let dir = Vec3::new(0.0, 0.0, 1.0);
        let canon = compose_color(&s, 0, &dir, None);
        for (a, b) in canon.iter().zip([0.2, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        // λ = 0 → canonical even with a bright texture.
        assert_eq!(compose_color(&s, 0, &dir, Some(&textured([1.0; 3]))), canon);
        // λ = 1 on a black texture → canonical.
        s.intensity_sh[0][0] = [1.0 / SH_C0];
        let black = compose_color(&s, 0, &dir, Some(&textured([0.0; 3])));
        assert_eq!(black, canon);
        // λ = 0.5 on white → canonical + 0.5.
        s.intensity_sh[0][0] = [0.5 / SH_C0];
        let white = compose_color(&s, 0, &dir, Some(&textured([1.0; 3])));
        for c in 0..3 {
            assert!((white[c] - canon[c] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let out = render(&SplatScene::new(), &camera(20, 12), None, &RenderOptions::default()).unwrap();
        assert!(out.color.data.iter().all(|p| *p == [0.0; 3]));
        assert!(out.alpha.data.iter().all(|&a| a == 0.0));
        assert!(out.depth.data.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_primitive_closed_form() {
        let cam = camera(16, 16);
        // Pixel (8, 8) has center (8.5, 8.5); place the primitive on its ray.
        let z = 4.0;
        let pos = [0.5 * z / 40.0, 0.5 * z / 40.0, z];
        let mut s = SplatScene::new();
        s.push(Splat::isotropic(pos, 0.05, 0.8, [0.7, 0.2, 0.1]));
        let out = render(&s, &cam, None, &RenderOptions::default()).unwrap();
        let i = 8 * 16 + 8;
        assert!((out.alpha.data[i] - 0.8).abs() < 1e-9);
        let dir = Vec3::from(pos).normalize();
        let c = compose_color(&s, 0, &dir, None);
        for k in 0..3 {
            assert!((out.color.data[i][k] - 0.8 * c[k]).abs() < 1e-9);
        }
        assert!((out.depth.data[i] - z).abs() < 1e-9);
    }

    #[test]
    fn opaque_front_hides_back() {
        let cam = camera(16, 16);
        let mut s = SplatScene::new();
        let mut front = Splat::isotropic([0.0, 0.0, 2.0], 50.0, 0.5, [1.0, 0.0, 0.0]);
        front.opacity_logit = logit(1.0 - 1e-7);
        s.push(Splat::isotropic([0.0, 0.0, 4.0], 0.2, 0.9, [0.0, 1.0, 0.0]));
        s.push(front);
        let opts = RenderOptions::default();
        let (out, state) = render_with_state(&s, &cam, None, &opts).unwrap();
        assert!(out.color.data.iter().all(|p| p[1].abs() < 1e-12));
        let ones = vec![[1.0; 3]; 256];
        let grads = render_backward(&s, &cam, None, &state, &OutputGradients {
            color: &ones,
            canonical: None,
            alpha: None,
        })
        .unwrap();
        assert!(grads.grads.splat(0).color_sh.iter().flatten().all(|&v| v == 0.0));
        assert!(grads.grads.positions[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sorted_lists_are_depth_ordered() {
        let cam = camera(40, 24);
        let mut s = SplatScene::new();
        for i in 0..30 {
            let f = i as f64;
            s.push(Splat::isotropic([(f * 0.37).sin() * 0.8, (f * 0.61).cos() * 0.5, 3.0 + (f * 1.3).sin()], 0.1, 0.5, [0.5; 3]));
        }
        // Two primitives at identical depth tie-break on index.
        s.push(Splat::isotropic([0.0, 0.0, 3.0], 0.1, 0.5, [0.5; 3]));
        s.push(Splat::isotropic([0.01, 0.0, 3.0], 0.1, 0.5, [0.5; 3]));
        let (_, state) = render_with_state(&s, &cam, None, &RenderOptions::default()).unwrap();
        for tile in state.sorted_list().tiles {
            for pair in tile.windows(2) {
                assert!(pair[0].1 < pair[1].1 || (pair[0].1 == pair[1].1 && pair[0].0 < pair[1].0));
            }
        }
    }
}
