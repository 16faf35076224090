//! Small rotation and frame utilities shared by the body model, the
//! rasterizer and the optimizers.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Below this angle the Rodrigues map and its derivative use series expansions.
const SMALL_ANGLE: f64 = 1e-6;

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
#[inline]
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Axis-angle vector to rotation matrix.
pub fn rodrigues(v: &Vec3) -> Mat3 {
    let theta2 = v.norm_squared();
    let k = skew(v);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + a * k + b * k * k
}

/// Rotation matrix to axis-angle vector (principal branch, angle in `[0, π]`).
pub fn rodrigues_log(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-8 {
        return vee(r);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near π the antisymmetric part vanishes; read the axis off R + I.
        let b = (r + Mat3::identity()) * 0.5;
        let (col, _) = (0..3)
            .map(|i| (i, b[(i, i)]))
            .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
        let axis = b.column(col).into_owned();
        let axis = axis / axis.norm().max(1e-300);
        return axis * theta;
    }
    vee(r) * (theta / theta.sin())
}

/// Partial derivatives `∂R/∂v_k` of [`rodrigues`] for `k = 0, 1, 2`.
pub fn rodrigues_jacobian(v: &Vec3) -> [Mat3; 3] {
    let theta2 = v.norm_squared();
    let e = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        let k = skew(v);
        return e.map(|ei| {
            let ek = skew(&ei);
            ek + 0.5 * (ek * k + k * ek)
        });
    }
    let r = rodrigues(v);
    let i_minus_r = Mat3::identity() - r;
    let kv = skew(v);
    e.map(|ei| {
        let w = v.cross(&(i_minus_r * ei));
        (v.dot(&ei) * kv + skew(&w)) * r / theta2
    })
}

/// Contract an upstream gradient `dL/dR` with [`rodrigues_jacobian`].
pub fn rodrigues_backward(v: &Vec3, grad_r: &Mat3) -> Vec3 {
    let jac = rodrigues_jacobian(v);
    Vec3::new(
        jac[0].component_mul(grad_r).sum(),
        jac[1].component_mul(grad_r).sum(),
        jac[2].component_mul(grad_r).sum(),
    )
}

/// Geodesic angle between two rotations.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    let cos = (((a.transpose() * b).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    cos.acos()
}

/// Deterministic orthonormal frame whose third column is `n`.
///
/// The first tangent is Gram-Schmidt of the world axis least aligned with `n`.
pub fn tangent_frame(n: &Vec3) -> Mat3 {
    let n = n.normalize();
    let a = n.abs();
    let axis = if a.x <= a.y && a.x <= a.z {
        Vec3::x()
    } else if a.y <= a.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let t1 = (axis - n * n.dot(&axis)).normalize();
    let t2 = n.cross(&t1);
    Mat3::from_columns(&[t1, t2, n])
}

/// Orthonormalize the first two columns of `m` by Gram-Schmidt and complete
/// the frame with their cross product.
///
/// Left-multiplying `m` by a rotation commutes with this projection, and a
/// rotation matrix is a fixed point.
pub fn gram_schmidt(m: &Mat3) -> Mat3 {
    let a = m.column(0).into_owned();
    let b = m.column(1).into_owned();
    let c0 = a / a.norm();
    let u = b - c0 * c0.dot(&b);
    let c1 = u / u.norm();
    let c2 = c0.cross(&c1);
    Mat3::from_columns(&[c0, c1, c2])
}

/// Reverse-mode derivative of [`gram_schmidt`].
pub fn gram_schmidt_backward(m: &Mat3, grad_out: &Mat3) -> Mat3 {
    let a = m.column(0).into_owned();
    let b = m.column(1).into_owned();
    let n1 = a.norm();
    let c0 = a / n1;
    let s = c0.dot(&b);
    let u = b - c0 * s;
    let n2 = u.norm();
    let c1 = u / n2;

    let g2 = grad_out.column(2).into_owned();
    let mut g0 = grad_out.column(0).into_owned() + c1.cross(&g2);
    let g1 = grad_out.column(1).into_owned() + g2.cross(&c0);

    let du = (g1 - c1 * c1.dot(&g1)) / n2;
    let mut db = du;
    g0 -= du * s;
    let ds = -c0.dot(&du);
    g0 += b * ds;
    db += c0 * ds;

    let da = (g0 - c0 * c0.dot(&g0)) / n1;
    Mat3::from_columns(&[da, db, Vec3::zeros()])
}

/// Gradient with respect to a right-multiplied tangent perturbation
/// `R(δ) = R · exp([δ]×)` evaluated at `δ = 0`, given `dL/dR`.
pub fn rotation_tangent_grad(r: &Mat3, grad_r: &Mat3) -> Vec3 {
    let a = r.transpose() * grad_r;
    Vec3::new(
        a[(2, 1)] - a[(1, 2)],
        a[(0, 2)] - a[(2, 0)],
        a[(1, 0)] - a[(0, 1)],
    )
}

/// Apply a right-multiplied tangent step to a unit quaternion.
pub fn retract(q: &Quat, delta: &Vec3) -> Quat {
    let step = Quat::from_scaled_axis(*delta);
    let mut out = q * step;
    out.renormalize();
    out
}

pub fn quat_from_matrix(m: &Mat3) -> Quat {
    Quat::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*m))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        assert_eq!(rodrigues(&Vec3::zeros()), Mat3::identity());
    }

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = rodrigues(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let y = r * Vec3::x();
        assert!((y - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn rodrigues_inverse_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v = random_vec(&mut rng, 3.0);
            let p = rodrigues(&v) * rodrigues(&-v);
            assert!((p - Mat3::identity()).norm() < 1e-10);
        }
    }

    #[test]
    fn log_inverts_rodrigues() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let v = random_vec(&mut rng, 1.7);
            let back = rodrigues_log(&rodrigues(&v));
            assert!((back - v).norm() < 1e-9, "{v} vs {back}");
        }
        let near_pi = Vec3::new(0.0, std::f64::consts::PI - 1e-9, 0.0);
        let back = rodrigues_log(&rodrigues(&near_pi));
        assert!((rodrigues(&back) - rodrigues(&near_pi)).norm() < 1e-6);
    }

    #[test]
    fn rodrigues_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for trial in 0..40 {
            let v = if trial == 0 {
                Vec3::zeros()
            } else {
                random_vec(&mut rng, 2.0)
            };
            let jac = rodrigues_jacobian(&v);
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let fd = (rodrigues(&(v + e)) - rodrigues(&(v - e))) / (2.0 * h);
                assert!((fd - jac[k]).norm() < 1e-7, "k={k} v={v}");
            }
        }
    }

    #[test]
    fn tangent_frame_is_orthonormal_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let n = random_vec(&mut rng, 1.0).normalize();
            let f = tangent_frame(&n);
            assert!((f.transpose() * f - Mat3::identity()).norm() < 1e-12);
            assert!((f.determinant() - 1.0).abs() < 1e-12);
            assert!((f.column(2) - n).norm() < 1e-12);
            assert_eq!(f, tangent_frame(&n));
        }
    }

    #[test]
    fn gram_schmidt_fixed_point_and_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let r = rodrigues(&random_vec(&mut rng, 2.0));
            assert!((gram_schmidt(&r) - r).norm() < 1e-12);
            let m = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + 2.0 * Mat3::identity();
            let q = rodrigues(&random_vec(&mut rng, 2.0));
            assert!((gram_schmidt(&(q * m)) - q * gram_schmidt(&m)).norm() < 1e-10);
        }
    }

    #[test]
    fn gram_schmidt_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..20 {
            let m = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + 1.5 * Mat3::identity();
            let g = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let analytic = gram_schmidt_backward(&m, &g);
            for i in 0..3 {
                for j in 0..3 {
                    let mut mp = m;
                    mp[(i, j)] += h;
                    let mut mm = m;
                    mm[(i, j)] -= h;
                    let fd = ((gram_schmidt(&mp) - gram_schmidt(&mm)).component_mul(&g)).sum()
                        / (2.0 * h);
                    assert!((fd - analytic[(i, j)]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn tangent_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        let r = rodrigues(&random_vec(&mut rng, 2.0));
        let g = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let analytic = rotation_tangent_grad(&r, &g);
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let fd = ((r * rodrigues(&e) - r * rodrigues(&-e)).component_mul(&g)).sum() / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8);
        }
    }
}
