//! Rotations, covariance construction and the scalar squashing functions
//! shared by the scene parameterization.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn normalized(q: &Quat) -> Result<(Quat, f64)> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "quaternion {q:?} has no usable norm"
        )));
    }
    Ok(([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm))
}

/// Rotation matrix of a (not necessarily unit) quaternion. The quaternion is
/// normalized first.
pub fn quaternion_to_rotation(q: &Quat) -> Result<Mat3> {
    let ([w, x, y, z], _) = normalized(q)?;
    Ok(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Pulls a gradient with respect to the rotation matrix back onto the raw
/// (unnormalized) quaternion.
pub fn quaternion_to_rotation_backward(q: &Quat, d_rot: &Mat3) -> Result<Quat> {
    let ([w, x, y, z], norm) = normalized(q)?;
    let g = |r: usize, c: usize| d_rot[(r, c)];
    let gw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let gy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let gz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    // d(q/|q|)/dq = (I - q̂q̂ᵀ)/|q|
    let unit = [w, x, y, z];
    let grad = [gw, gx, gy, gz];
    let dot: f64 = unit.iter().zip(&grad).map(|(a, b)| a * b).sum();
    Ok(std::array::from_fn(|i| (grad[i] - unit[i] * dot) / norm))
}

/// `R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn build_covariance(log_scale: &[f64; 3], q: &Quat) -> Result<Mat3> {
    let rot = quaternion_to_rotation(q)?;
    let m = rot * Mat3::from_diagonal(&Vec3::from_fn(|i, _| log_scale[i].exp()));
    Ok(m * m.transpose())
}

/// Gradient of [`build_covariance`]: takes `dL/dΣ` (full 3×3, symmetric) and
/// returns `(dL/dlog_scale, dL/dq)`.
pub fn build_covariance_backward(
    log_scale: &[f64; 3],
    q: &Quat,
    d_cov: &Mat3,
) -> Result<([f64; 3], Quat)> {
    let rot = quaternion_to_rotation(q)?;
    let scale = Vec3::from_fn(|i, _| log_scale[i].exp());
    let m = rot * Mat3::from_diagonal(&scale);
    let d_m = (d_cov + d_cov.transpose()) * m;
    let d_rot = d_m * Mat3::from_diagonal(&scale);
    let mut d_log_scale = [0.0; 3];
    for (k, d) in d_log_scale.iter_mut().enumerate() {
        let ds: f64 = (0..3).map(|i| rot[(i, k)] * d_m[(i, k)]).sum();
        *d = ds * scale[k];
    }
    Ok((d_log_scale, quaternion_to_rotation_backward(q, &d_rot)?))
}

/// Spherical linear interpolation between unit quaternions.
pub fn slerp(a: &Quat, b: &Quat, t: f64) -> Quat {
    let mut b = *b;
    let mut dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    if dot < 0.0 {
        b = b.map(|v| -v);
        dot = -dot;
    }
    if dot > 0.9995 {
        let q: Quat = std::array::from_fn(|i| a[i] + t * (b[i] - a[i]));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        return q.map(|v| v / n);
    }
    let theta = dot.clamp(-1.0, 1.0).acos();
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    std::array::from_fn(|i| wa * a[i] + wb * b[i])
}

/// Unit quaternion of a rotation matrix.
pub fn rotation_to_quaternion(r: &Mat3) -> Quat {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn max_abs(m: &Mat3) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn identity_quaternion_is_identity() {
        let r = quaternion_to_rotation(&IDENTITY_QUAT).unwrap();
        assert!(max_abs(&(r - Mat3::identity())) < 1e-15);
    }

    #[test]
    fn z_quaternion_is_half_turn_about_z() {
        let r = quaternion_to_rotation(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0));
        assert!(max_abs(&(r - expected)) < 1e-15);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(
            quaternion_to_rotation(&[0.0; 4]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn covariance_hand_cases() {
        let c = build_covariance(&[0.0; 3], &IDENTITY_QUAT).unwrap();
        assert!(max_abs(&(c - Mat3::identity())) < 1e-15);
        let c = build_covariance(&[2f64.ln(), 0.0, 0.0], &IDENTITY_QUAT).unwrap();
        let expected = Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0));
        assert!(max_abs(&(c - expected)) < 1e-12);
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = [0.7, -0.2, 0.4, 0.3];
        let weights = Mat3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.4, 0.2, 0.8, -0.6);
        let loss = |q: &Quat| quaternion_to_rotation(q).unwrap().component_mul(&weights).sum();
        let analytic = quaternion_to_rotation_backward(&q, &weights).unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (loss(&qp) - loss(&qm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let ls = [0.1, -0.5, 0.3];
        let q = [0.5, 0.5, -0.1, 0.2];
        let weights = Mat3::new(0.3, -1.2, 0.5, 0.9, 0.1, -0.4, 0.2, 0.8, -0.6);
        let loss = |ls: &[f64; 3], q: &Quat| {
            build_covariance(ls, q).unwrap().component_mul(&weights).sum()
        };
        let (d_ls, d_q) = build_covariance_backward(&ls, &q, &weights).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let (mut p, mut m) = (ls, ls);
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &q) - loss(&m, &q)) / (2.0 * h);
            assert!((fd - d_ls[i]).abs() < 1e-6, "scale {i}: {fd} vs {}", d_ls[i]);
        }
        for i in 0..4 {
            let (mut p, mut m) = (q, q);
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&ls, &p) - loss(&ls, &m)) / (2.0 * h);
            assert!((fd - d_q[i]).abs() < 1e-6, "rot {i}: {fd} vs {}", d_q[i]);
        }
    }

    #[test]
    fn matrix_quaternion_round_trip() {
        let q = [0.3, -0.6, 0.2, 0.7];
        let r = quaternion_to_rotation(&q).unwrap();
        let back = quaternion_to_rotation(&rotation_to_quaternion(&r)).unwrap();
        assert!(max_abs(&(r - back)) < 1e-12);
    }

    fn quat_strategy() -> impl Strategy<Value = Quat> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("norm", |q| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(q in quat_strategy()) {
            let r = quaternion_to_rotation(&q).unwrap();
            prop_assert!(max_abs(&(r.transpose() * r - Mat3::identity())) < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            q in quat_strategy(),
            ls in prop::array::uniform3(-1.5f64..1.5),
        ) {
            let cov = build_covariance(&ls, &q).unwrap();
            prop_assert!(max_abs(&(cov - cov.transpose())) < 1e-12);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            let mut expected: Vec<f64> = ls.iter().map(|s| (2.0 * s).exp()).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                prop_assert!(*a > 0.0);
            }
        }
    }
}
