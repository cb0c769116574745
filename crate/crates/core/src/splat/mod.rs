//! CPU rasterizer for 3D Gaussians with color and semantic channels.
//!
//! Forward blending is front-to-back alpha compositing of per-Gaussian
//! color `c` and feature `f`; backward is exact reverse mode over the same
//! contributor lists, optionally down to position, rotation and scale.

mod checkpoint;
mod project;
mod render;

use nalgebra::{Matrix3, Vector3, Vector4};

pub use checkpoint::{load_scene, quantize_scene, save_scene, SceneHeader, SCENE_FORMAT};
pub use project::{project, quat_to_rotmat, Projected, COV2D_DILATION, NEAR_PLANE};
pub use render::{render, render_backward, render_with, GaussianGrads, RenderOptions, RenderState, SplatOutput, TILE_SIZE};

pub const COLOR_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`, unit length.
    pub rotation: Vector4<f64>,
    /// Per-axis standard deviations, strictly positive.
    pub scale: Vector3<f64>,
    /// Opacity before the sigmoid.
    pub alpha_logit: f64,
    pub color: [f64; COLOR_DIM],
    pub feature: Vec<f64>,
}

impl Gaussian {
    pub fn isotropic(position: Vector3<f64>, sigma: f64, opacity: f64, color: [f64; 3], feature: Vec<f64>) -> Self {
        Self {
            position,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            scale: Vector3::repeat(sigma),
            alpha_logit: logit(opacity),
            color,
            feature,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.alpha_logit)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotmat(&self.rotation)
    }

    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.position.iter().chain(self.rotation.iter()).chain(self.scale.iter()).all(|v| v.is_finite())
            && self.alpha_logit.is_finite()
            && self.color.iter().chain(&self.feature).all(|v| v.is_finite());
        finite && self.scale.iter().all(|&s| s > 0.0) && (self.rotation.norm() - 1.0).abs() <= 1e-6
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
