//! Image quality metrics: masked PSNR in RGB / Y / CrCb and windowed SSIM.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
use crate::scene::ForegroundMask;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelMode {
    Rgb,
    Y,
    CrCb,
}

impl ChannelMode {
    pub fn name(self) -> &'static str {
        match self {
            ChannelMode::Rgb => "psnr_rgb",
            ChannelMode::Y => "psnr_y",
            ChannelMode::CrCb => "psnr_crcb",
        }
    }
}

/// Full-range BT.601 `(Y, Cb, Cr)`.
pub fn rgb_to_ycbcr(p: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = p;
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    ]
}

fn check_inputs(a: &RgbImage, b: &RgbImage, mask: Option<&ForegroundMask>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height {
            return Err(Error::ShapeMismatch("mask does not match image".into()));
        }
        if m.count() == 0 {
            return Err(Error::InvalidParameter("mask is empty".into()));
        }
    }
    Ok(())
}

/// Mean squared error over masked pixels after clamping both images to `[0, 1]`.
pub fn mse(a: &RgbImage, b: &RgbImage, mode: ChannelMode, mask: Option<&ForegroundMask>) -> Result<f64> {
    check_inputs(a, b, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (pa, pb)) in a.data.iter().zip(&b.data).enumerate() {
        if mask.is_some_and(|m| !m.data[i]) {
            continue;
        }
        let pa = pa.map(|v| v.clamp(0.0, 1.0));
        let pb = pb.map(|v| v.clamp(0.0, 1.0));
        let channels: &[usize] = match mode {
            ChannelMode::Rgb => &[0, 1, 2],
            ChannelMode::Y => &[0],
            ChannelMode::CrCb => &[1, 2],
        };
        let (pa, pb) = match mode {
            ChannelMode::Rgb => (pa, pb),
            _ => (rgb_to_ycbcr(pa), rgb_to_ycbcr(pb)),
        };
        for &c in channels {
            let d = pa[c] - pb[c];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidParameter("no pixels to compare".into()));
    }
    Ok(sum / n as f64)
}

/// `10·log10(1/MSE)`; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &RgbImage, b: &RgbImage, mode: ChannelMode, mask: Option<&ForegroundMask>) -> Result<f64> {
    let e = mse(a, b, mode, mask)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "same"-size Gaussian blur with zero padding.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out = &mut tmp[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            let k0 = lo + r - x;
            out[x] = row[lo..hi].iter().zip(&k[k0..]).map(|(v, kv)| v * kv).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r + 1).min(h);
        let dst = &mut out[y * w..(y + 1) * w];
        for sy in lo..hi {
            let kv = k[sy + r - y];
            let srow = &tmp[sy * w..(sy + 1) * w];
            for (d, v) in dst.iter_mut().zip(srow) {
                *d += kv * v;
            }
        }
    }
    out
}

struct ChannelStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    s: Vec<f64>,
    n1: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

fn channel_stats(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> ChannelStats {
    let mu_a = blur(a, w, h, k);
    let mu_b = blur(b, w, h, k);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let e_aa = blur(&sq(a, a), w, h, k);
    let e_bb = blur(&sq(b, b), w, h, k);
    let e_ab = blur(&sq(a, b), w, h, k);
    let n = w * h;
    let (mut s, mut n1, mut d1, mut d2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        n1[i] = 2.0 * ma * mb + SSIM_C1;
        let n2 = 2.0 * cov + SSIM_C2;
        d1[i] = ma * ma + mb * mb + SSIM_C1;
        d2[i] = var_a + var_b + SSIM_C2;
        s[i] = n1[i] * n2 / (d1[i] * d2[i]);
    }
    ChannelStats { mu_a, mu_b, s, n1, d1, d2 }
}

/// Per-pixel SSIM averaged over the three channels.
pub fn ssim_map(a: &RgbImage, b: &RgbImage) -> Result<Vec<f64>> {
    check_inputs(a, b, None)?;
    let k = gaussian_kernel();
    let (w, h) = (a.width, a.height);
    let mut out = vec![0.0; w * h];
    for c in 0..3 {
        let st = channel_stats(&a.channel(c).data, &b.channel(c).data, w, h, &k);
        for (o, s) in out.iter_mut().zip(&st.s) {
            *o += s / 3.0;
        }
    }
    Ok(out)
}

/// Mean SSIM over windows centered on masked-in pixels, computed on clamped images.
pub fn ssim(a: &RgbImage, b: &RgbImage, mask: Option<&ForegroundMask>) -> Result<f64> {
    check_inputs(a, b, mask)?;
    let map = ssim_map(&a.clamped(), &b.clamped())?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, v) in map.iter().enumerate() {
        if mask.is_none_or(|m| m.data[i]) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidParameter("no pixels to compare".into()));
    }
    Ok(sum / n as f64)
}

/// Mean SSIM over all pixels and channels (no clamping) and its gradient
/// with respect to `a`.
pub fn ssim_with_gradient(a: &RgbImage, b: &RgbImage) -> Result<(f64, Vec<[f64; 3]>)> {
    check_inputs(a, b, None)?;
    let k = gaussian_kernel();
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let norm = 1.0 / (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = vec![[0.0; 3]; n];
    for c in 0..3 {
        let ca = a.channel(c).data;
        let cb = b.channel(c).data;
        let st = channel_stats(&ca, &cb, w, h, &k);
        let (mut gm, mut gab, mut gaa) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let s = st.s[i];
            let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
            let inv = 1.0 / (st.d1[i] * st.d2[i]);
            let n2 = s * st.d1[i] * st.d2[i] / st.n1[i];
            // d S / d μa, accounting for μa inside the variance and covariance.
            gm[i] = norm
                * (2.0 * mb * n2 * inv - 2.0 * ma * s / st.d1[i] - 2.0 * mb * st.n1[i] * inv
                    + 2.0 * ma * s / st.d2[i]);
            gab[i] = norm * 2.0 * st.n1[i] * inv;
            gaa[i] = -norm * s / st.d2[i];
            total += s;
        }
        let gm = blur(&gm, w, h, &k);
        let gab = blur(&gab, w, h, &k);
        let gaa = blur(&gaa, w, h, &k);
        for i in 0..n {
            grad[i][c] = gm[i] + cb[i] * gab[i] + 2.0 * ca[i] * gaa[i];
        }
    }
    Ok((total * norm, grad))
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub j: usize,
    pub k: usize,
    pub metric: String,
    pub value: f64,
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Dataset(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
    Ok(())
}

pub fn save_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(f, rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x as u64 * 73 + y as u64 * 151 + seed * 977) % 101) as f64 / 100.0;
            [v, (v * 3.7).fract(), (v * 7.3 + 0.1).fract()]
        })
    }

    #[test]
    fn psnr_cases() {
        let a = noise(9, 7, 1);
        assert_eq!(psnr(&a, &a, ChannelMode::Rgb, None).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a, &a, ChannelMode::Y, None).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a, &a, ChannelMode::CrCb, None).unwrap(), f64::INFINITY);
        let base = RgbImage::filled(8, 8, [0.4; 3]);
        let off = RgbImage::filled(8, 8, [0.5; 3]);
        assert!((psnr(&base, &off, ChannelMode::Rgb, None).unwrap() - 20.0).abs() < 1e-9);
        // Gray offset moves only luma.
        assert!((psnr(&base, &off, ChannelMode::Y, None).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&base, &off, ChannelMode::CrCb, None).unwrap() > 100.0);
    }

    #[test]
    fn mask_excludes_pixels() {
        let a = noise(8, 8, 2);
        let mut b = a.clone();
        let mut mask = ForegroundMask::filled(8, 8, true);
        for x in 0..8 {
            mask.data[x] = false;
            b.data[x] = [1.0, 0.0, 1.0];
        }
        b.data[20] = [0.0; 3];
        let mut c = b.clone();
        for x in 0..8 {
            c.data[x] = [0.0, 1.0, 0.3];
        }
        let pb = psnr(&a, &b, ChannelMode::Rgb, Some(&mask)).unwrap();
        let pc = psnr(&a, &c, ChannelMode::Rgb, Some(&mask)).unwrap();
        assert_eq!(pb, pc);
        assert!(psnr(&a, &b, ChannelMode::Rgb, Some(&ForegroundMask::filled(8, 8, false))).is_err());
        assert!(psnr(&a, &noise(8, 7, 0), ChannelMode::Rgb, None).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = noise(24, 20, 3);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let checker = RgbImage::from_fn(24, 24, |x, y| [((x + y) % 2) as f64; 3]);
        let inverted = checker.map(|p| p.map(|v| 1.0 - v));
        assert!(ssim(&checker, &inverted, None).unwrap() < -0.5);
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        // Zero padding makes border windows see less mass; compare at the center.
        let a = RgbImage::filled(31, 31, [0.3; 3]);
        let b = RgbImage::filled(31, 31, [0.5; 3]);
        let map = ssim_map(&a, &b).unwrap();
        let expected = (2.0 * 0.3 * 0.5 + SSIM_C1) / (0.09 + 0.25 + SSIM_C1);
        assert!((map[15 * 31 + 15] - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = noise(14, 13, 4);
        let b = noise(14, 13, 5);
        let (_, g) = ssim_with_gradient(&a, &b).unwrap();
        let h = 1e-6;
        for &(i, c) in &[(0, 0), (17, 1), (90, 2), (181, 0), (100, 1)] {
            let mut p = a.clone();
            p.data[i][c] += h;
            let mut m = a.clone();
            m.data[i][c] -= h;
            let fd = (ssim_with_gradient(&p, &b).unwrap().0 - ssim_with_gradient(&m, &b).unwrap().0) / (2.0 * h);
            assert!((fd - g[i][c]).abs() < 1e-7 + 1e-5 * fd.abs(), "{i},{c}: {fd} vs {}", g[i][c]);
        }
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[MetricRow { scene: "s".into(), j: 1, k: 2, metric: "psnr_rgb".into(), value: 30.5 }])
            .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "scene,j,k,metric,value\ns,1,2,psnr_rgb,30.5\n");
    }

    proptest! {
        #[test]
        fn symmetric(s1 in 0u64..50, s2 in 50u64..100) {
            let a = noise(12, 12, s1);
            let b = noise(12, 12, s2);
            for mode in [ChannelMode::Rgb, ChannelMode::Y, ChannelMode::CrCb] {
                prop_assert_eq!(psnr(&a, &b, mode, None).unwrap(), psnr(&b, &a, mode, None).unwrap());
            }
            prop_assert!((ssim(&a, &b, None).unwrap() - ssim(&b, &a, None).unwrap()).abs() < 1e-12);
        }
    }
}
