//! Real spherical harmonics up to degree 3, in the constant ordering used by
//! the reference Gaussian splatting renderer.

use crate::math::Vec3;

pub const SH_COEFFS: usize = 16;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Sixteen coefficients, each holding `D` channels.
pub type ShCoeffs<const D: usize> = [[f64; D]; SH_COEFFS];

/// Basis values at a unit direction.
pub fn sh_basis(dir: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to the
/// (unnormalized) direction components.
pub fn sh_basis_jacobian(dir: &Vec3) -> [[f64; 3]; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let s = |c: f64, v: [f64; 3]| [c * v[0], c * v[1], c * v[2]];
    [
        [0.0; 3],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        s(SH_C2[0], [y, x, 0.0]),
        s(SH_C2[1], [0.0, z, y]),
        s(SH_C2[2], [-2.0 * x, -2.0 * y, 4.0 * z]),
        s(SH_C2[3], [z, 0.0, x]),
        s(SH_C2[4], [2.0 * x, -2.0 * y, 0.0]),
        s(SH_C3[0], [6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0]),
        s(SH_C3[1], [y * z, x * z, x * y]),
        s(SH_C3[2], [-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z]),
        s(SH_C3[3], [-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy]),
        s(SH_C3[4], [4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z]),
        s(SH_C3[5], [2.0 * x * z, -2.0 * y * z, xx - yy]),
        s(SH_C3[6], [3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0]),
    ]
}

/// Evaluates `D`-channel coefficients along a unit view direction.
pub fn eval_sh<const D: usize>(coeffs: &ShCoeffs<D>, dir: &Vec3) -> [f64; D] {
    eval_with_basis(coeffs, &sh_basis(dir))
}

pub fn eval_with_basis<const D: usize>(coeffs: &ShCoeffs<D>, basis: &[f64; SH_COEFFS]) -> [f64; D] {
    let mut out = [0.0; D];
    for (b, c) in basis.iter().zip(coeffs) {
        for (o, v) in out.iter_mut().zip(c) {
            *o += b * v;
        }
    }
    out
}

/// Gradient of `Σ_ch grad[ch] · eval_sh(coeffs, d)[ch]` with respect to the
/// raw (unnormalized) view vector `v`, where `d = v / |v|`.
pub fn view_vector_gradient<const D: usize>(
    coeffs: &ShCoeffs<D>,
    grad: &[f64; D],
    dir: &Vec3,
    view_len: f64,
    jacobian: &[[f64; 3]; SH_COEFFS],
) -> Vec3 {
    let mut d_dir = Vec3::zeros();
    for (jac, c) in jacobian.iter().zip(coeffs).skip(1) {
        let w: f64 = c.iter().zip(grad).map(|(a, b)| a * b).sum();
        d_dir += Vec3::new(jac[0], jac[1], jac[2]) * w;
    }
    (d_dir - dir * dir.dot(&d_dir)) / view_len
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: [f64; 3]) -> Vec3 {
        Vec3::new(v[0], v[1], v[2]).normalize()
    }

    #[test]
    fn band_zero_constant() {
        let mut c: ShCoeffs<1> = [[0.0]; 16];
        c[0] = [2.0];
        for d in [[1.0, 0.0, 0.0], [0.3, -0.4, 0.8], [0.0, 0.0, -1.0]] {
            let v = eval_sh(&c, &unit(d))[0];
            assert!((v - 2.0 * 0.282_094_79).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_coeffs_give_zero() {
        let c: ShCoeffs<3> = [[0.0; 3]; 16];
        assert_eq!(eval_sh(&c, &unit([0.2, 0.5, 0.1])), [0.0; 3]);
    }

    #[test]
    fn band_one_is_odd() {
        let mut c: ShCoeffs<2> = [[0.0; 2]; 16];
        c[1] = [0.7, -0.1];
        c[2] = [0.2, 0.5];
        c[3] = [-0.4, 0.3];
        let d = unit([0.3, -0.5, 0.6]);
        let a = eval_sh(&c, &d);
        let b = eval_sh(&c, &(-d));
        for i in 0..2 {
            assert!((a[i] + b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn basis_jacobian_matches_finite_differences() {
        let v = Vec3::new(0.31, -0.47, 0.62);
        let jac = sh_basis_jacobian(&v);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = v;
            let mut m = v;
            p[axis] += h;
            m[axis] -= h;
            let (bp, bm) = (sh_basis(&p), sh_basis(&m));
            for k in 0..SH_COEFFS {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - jac[k][axis]).abs() < 1e-8, "basis {k} axis {axis}");
            }
        }
    }

    #[test]
    fn view_gradient_matches_finite_differences() {
        let mut coeffs: ShCoeffs<3> = [[0.0; 3]; 16];
        for (k, c) in coeffs.iter_mut().enumerate() {
            *c = [0.1 * k as f64, -0.05 * k as f64 + 0.3, (k as f64 * 0.7).sin()];
        }
        let grad = [0.4, -1.1, 0.25];
        let v = Vec3::new(1.3, -0.4, 2.2);
        let f = |v: &Vec3| {
            let out = eval_sh(&coeffs, &v.normalize());
            out.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>()
        };
        let dir = v.normalize();
        let analytic = view_vector_gradient(&coeffs, &grad, &dir, v.norm(), &sh_basis_jacobian(&dir));
        for axis in 0..3 {
            let h = 1e-6;
            let mut p = v;
            let mut m = v;
            p[axis] += h;
            m[axis] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[axis]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn evaluation_is_linear(
            a in prop::collection::vec(-2.0f64..2.0, 48),
            b in prop::collection::vec(-2.0f64..2.0, 48),
            s in -3.0f64..3.0,
            t in -3.0f64..3.0,
            d in prop::array::uniform3(-1.0f64..1.0),
        ) {
            prop_assume!(d.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let dir = unit(d);
            let to_coeffs = |v: &[f64]| -> ShCoeffs<3> {
                std::array::from_fn(|k| [v[3 * k], v[3 * k + 1], v[3 * k + 2]])
            };
            let (ca, cb) = (to_coeffs(&a), to_coeffs(&b));
            let mixed: ShCoeffs<3> = std::array::from_fn(|k| {
                std::array::from_fn(|c| s * ca[k][c] + t * cb[k][c])
            });
            let lhs = eval_sh(&mixed, &dir);
            let (ea, eb) = (eval_sh(&ca, &dir), eval_sh(&cb, &dir));
            for c in 0..3 {
                prop_assert!((lhs[c] - (s * ea[c] + t * eb[c])).abs() < 1e-12);
            }
        }
    }
}
