//! EWA projection of a 3D Gaussian onto the image plane, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::Gaussian;
use crate::error::{Error, Result};
use crate::store::CameraPose;

pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic variance (pixels²) added to every projected covariance.
pub const COV2D_DILATION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    /// Pixel radius beyond which the Gaussian's alpha is below the floor.
    pub radius: f64,
    pub(crate) p_cam: Vector3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
}

pub fn quat_to_rotmat(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient with respect to the raw (unnormalized) quaternion given the
/// gradient with respect to the rotation matrix.
fn rotmat_backward(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g = Vector4::new(
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    );
    (g - u * u.dot(&g)) / n
}

/// Projects one Gaussian. `Ok(None)` means culled: behind the near plane,
/// too transparent to ever reach `alpha_min`, or entirely off-image.
///
/// With `alpha_min == 0` the footprint is unbounded and only the near plane
/// culls.
pub fn project(
    g: &Gaussian,
    camera: &CameraPose,
    width: usize,
    height: usize,
    alpha_min: f64,
) -> Result<Option<Projected>> {
    if !g.position.iter().chain(g.rotation.iter()).chain(g.scale.iter()).all(|v| v.is_finite())
        || !g.alpha_logit.is_finite()
    {
        return Err(Error::NumericalFailure {
            step: 0,
            what: "non-finite Gaussian parameters in projection".into(),
        });
    }
    let p_cam = camera.to_camera(&g.position);
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    if z <= NEAR_PLANE {
        return Ok(None);
    }
    let (fx, fy, s) = (camera.fx(), camera.fy(), camera.skew());
    let mean2d = Vector2::new((fx * x + s * y) / z + camera.cx(), fy * y / z + camera.cy());
    let jacobian = Matrix2x3::new(
        fx / z,
        s / z,
        -(fx * x + s * y) / (z * z),
        0.0,
        fy / z,
        -fy * y / (z * z),
    );
    let w = camera.rotation();
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2d = jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * COV2D_DILATION;
    let det = cov2d.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::NumericalFailure {
            step: 0,
            what: "projected covariance is not positive definite".into(),
        });
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let opacity = g.opacity();

    let radius = if alpha_min > 0.0 {
        if opacity.min(0.99) < alpha_min {
            return Ok(None);
        }
        let half_tr = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
        let lambda_max = half_tr + (half_tr * half_tr - det).max(0.0).sqrt();
        let r = (2.0 * (opacity / alpha_min).ln() * lambda_max).sqrt();
        let off = mean2d.x + r < 0.0
            || mean2d.y + r < 0.0
            || mean2d.x - r > width as f64
            || mean2d.y - r > height as f64;
        if off {
            return Ok(None);
        }
        r
    } else {
        f64::INFINITY
    };

    Ok(Some(Projected {
        mean2d,
        cov2d,
        conic,
        depth: z,
        opacity,
        radius,
        p_cam,
        jacobian,
        cov_cam,
    }))
}

/// Pulls gradients on the 2D mean and conic back to world position, raw
/// quaternion and scale.
pub(crate) fn project_backward(
    g: &Gaussian,
    camera: &CameraPose,
    proj: &Projected,
    d_mean2d: &Vector2<f64>,
    d_conic: &Matrix2<f64>,
) -> (Vector3<f64>, Vector4<f64>, Vector3<f64>) {
    let a = &proj.conic;
    // conic = cov2d^-1  =>  dL/dcov2d = -A^T G A^T
    let d_cov2d = -(a.transpose() * d_conic * a.transpose());
    let j = &proj.jacobian;
    let d_cov_cam = j.transpose() * d_cov2d * j;
    let d_j = d_cov2d * j * proj.cov_cam.transpose() + d_cov2d.transpose() * j * proj.cov_cam;

    let (x, y, z) = (proj.p_cam.x, proj.p_cam.y, proj.p_cam.z);
    let (fx, fy, s) = (camera.fx(), camera.fy(), camera.skew());
    let (z2, z3) = (z * z, z * z * z);
    let mut d_pc = Vector3::new(
        d_mean2d.x * fx / z,
        d_mean2d.x * s / z + d_mean2d.y * fy / z,
        -d_mean2d.x * (fx * x + s * y) / z2 - d_mean2d.y * fy * y / z2,
    );
    d_pc.x += d_j[(0, 2)] * (-fx / z2);
    d_pc.y += d_j[(0, 2)] * (-s / z2) + d_j[(1, 2)] * (-fy / z2);
    d_pc.z += d_j[(0, 0)] * (-fx / z2)
        + d_j[(0, 1)] * (-s / z2)
        + d_j[(0, 2)] * (2.0 * (fx * x + s * y) / z3)
        + d_j[(1, 1)] * (-fy / z2)
        + d_j[(1, 2)] * (2.0 * fy * y / z3);

    let w = camera.rotation();
    let d_position = w.transpose() * d_pc;

    let d_sigma = w.transpose() * d_cov_cam * w;
    let r = g.rotation_matrix();
    let m = r * Matrix3::from_diagonal(&g.scale);
    // sigma = M M^T  =>  dL/dM = (G + G^T) M
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let d_scale = Vector3::from_fn(|k, _| (0..3).map(|i| d_m[(i, k)] * r[(i, k)]).sum());
    let d_r = d_m * Matrix3::from_diagonal(&g.scale);
    let d_rotation = rotmat_backward(&g.rotation, &d_r);
    (d_position, d_rotation, d_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraPose {
        CameraPose::look_at(
            32,
            24,
            0.9,
            Vector3::new(0.3, -2.0, 0.5),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap()
    }

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
        let q = Vector4::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Gaussian {
            position: Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            rotation: q / q.norm(),
            scale: Vector3::new(rng.random_range(0.02..0.3), rng.random_range(0.02..0.3), rng.random_range(0.02..0.3)),
            alpha_logit: rng.random_range(-1.0..2.0),
            color: [0.0; 3],
            feature: vec![],
        }
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let cam = CameraPose::from_fov(40, 30, 1.0, Matrix4::identity()).unwrap();
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.1, 0.8, [1.0; 3], vec![]);
        let p = project(&g, &cam, 40, 30, 1.0 / 255.0).unwrap().unwrap();
        assert!((p.mean2d - Vector2::new(20.0, 15.0)).norm() < 1e-12);
        assert!((p.depth - 3.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = CameraPose::from_fov(40, 30, 1.0, Matrix4::identity()).unwrap();
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, -1.0), 0.1, 0.8, [1.0; 3], vec![]);
        assert!(project(&g, &cam, 40, 30, 1.0 / 255.0).unwrap().is_none());
        let g = Gaussian::isotropic(Vector3::new(50.0, 0.0, 1.0), 0.01, 0.8, [1.0; 3], vec![]);
        assert!(project(&g, &cam, 40, 30, 1.0 / 255.0).unwrap().is_none());
    }

    #[test]
    fn non_finite_is_numerical_failure() {
        let cam = camera();
        let mut g = Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, [0.0; 3], vec![]);
        g.position.x = f64::NAN;
        assert!(matches!(project(&g, &cam, 32, 24, 0.0), Err(Error::NumericalFailure { .. })));
    }

    #[test]
    fn covariance_matches_dense_jacobian_oracle() {
        // Oracle: numerical Jacobian of the pinhole map, covariance built
        // from an explicit rotation/scale product.
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let g = random_gaussian(&mut rng);
            let Some(p) = project(&g, &cam, 32, 24, 0.0).unwrap() else { continue };
            let pix = |pw: Vector3<f64>| {
                let pc = cam.intrinsics * cam.to_camera(&pw);
                Vector2::new(pc.x / pc.z, pc.y / pc.z)
            };
            let h = 1e-6;
            let mut jw = nalgebra::Matrix2x3::zeros();
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let col = (pix(g.position + e) - pix(g.position - e)) / (2.0 * h);
                jw.set_column(k, &col);
            }
            let q = g.rotation;
            let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
            let r = Matrix3::new(
                w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
                2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x),
                2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z,
            );
            let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
            let sigma = r * s2 * r.transpose();
            let oracle = jw * sigma * jw.transpose() + Matrix2::identity() * COV2D_DILATION;
            let scale = oracle.abs().max();
            assert!((oracle - p.cov2d).abs().max() / scale < 1e-8, "{oracle} vs {}", p.cov2d);
            let eig = p.cov2d.symmetric_eigenvalues();
            assert!(eig.min() >= COV2D_DILATION - 1e-12);
        }
    }
}
