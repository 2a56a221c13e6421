//! Pinhole camera with two-term radial distortion.
//!
//! Projection model, applied to a world point `x_w`:
//!
//! ```text
//! x_c = R x_w + t                      (world to camera)
//! n   = (x_c.x / x_c.z, x_c.y / x_c.z) (normalized image plane)
//! d   = n * (1 + k1 r^2 + k2 r^4)      (radial distortion, r^2 = |n|^2)
//! p   = (fx d.x + u0, fy d.y + v0)     (pixels)
//! ```
//!
//! Undistortion inverts the radial factor by fixed-point iteration; two
//! distortion terms at the magnitudes this crate allows (|k| <= 0.5) keep
//! the iteration strongly contractive over the image footprint.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// Pixel position (u, v).
pub type Pixel = Vector2<f64>;

/// Minimum camera-frame depth accepted by `project`.
pub const Z_MIN: f64 = 1e-6;

const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_STEP_TOL: f64 = 1e-12;
const UNDISTORT_RESIDUAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
    pub k1: f64,
    pub k2: f64,
    /// World-to-camera pose.
    pub pose: RigidTransform,
    pub width: f64,
    pub height: f64,
}

impl PinholeCamera {
    /// Checks the invariants every consumer of a camera relies on:
    /// positive focal lengths and image size, distortion within +-0.5,
    /// and finite fields throughout.
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::invalid(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.k1.abs() <= 0.5 && self.k2.abs() <= 0.5) {
            return Err(Error::invalid(format!(
                "distortion out of range, k1={} k2={}",
                self.k1, self.k2
            )));
        }
        let fields = [
            self.fx,
            self.fy,
            self.u0,
            self.v0,
            self.k1,
            self.k2,
            self.width,
            self.height,
        ];
        if fields.iter().any(|x| !x.is_finite())
            || self.pose.translation.iter().any(|x| !x.is_finite())
            || self.pose.rotation.matrix().iter().any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("camera field"));
        }
        Ok(())
    }

    /// Radial factor applied to a normalized point.
    #[inline]
    fn radial(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Distorts a normalized image-plane point.
    #[inline]
    pub fn distort(&self, n: &Vector2<f64>) -> Vector2<f64> {
        n * self.radial(n.norm_squared())
    }

    /// Inverts [`distort`](Self::distort) by fixed-point iteration
    /// `n <- d / radial(|n|^2)`, at most 20 iterations, stopping early
    /// once the step falls under 1e-12. Fails with `UndistortDiverged`
    /// if the recovered point does not reproduce `d` within 1e-6.
    pub fn undistort(&self, d: &Vector2<f64>) -> Result<Vector2<f64>> {
        let mut n = *d;
        for _ in 0..UNDISTORT_MAX_ITERS {
            let next = d / self.radial(n.norm_squared());
            let step = (next - n).norm();
            n = next;
            if step < UNDISTORT_STEP_TOL {
                break;
            }
        }
        let residual = (self.distort(&n) - d).norm();
        if residual > UNDISTORT_RESIDUAL_TOL {
            return Err(Error::UndistortDiverged { residual });
        }
        Ok(n)
    }

    /// Projects a world point to pixels. Fails with `BehindCamera` when
    /// the camera-frame depth is below [`Z_MIN`].
    #[inline]
    pub fn project(&self, x_w: &Vector3<f64>) -> Result<Pixel> {
        let x_c = self.pose.apply(x_w);
        if x_c.z < Z_MIN {
            return Err(Error::BehindCamera { z: x_c.z });
        }
        let inv_z = 1.0 / x_c.z;
        let nx = x_c.x * inv_z;
        let ny = x_c.y * inv_z;
        let r2 = nx * nx + ny * ny;
        let f = self.radial(r2);
        Ok(Pixel::new(
            self.fx * (nx * f) + self.u0,
            self.fy * (ny * f) + self.v0,
        ))
    }

    /// World point at camera-frame depth `z_c = depth` along the
    /// undistorted ray through `p`. Requires `depth > 0`.
    pub fn unproject(&self, p: &Pixel, depth: f64) -> Result<Vector3<f64>> {
        if depth.is_nan() || depth <= 0.0 {
            return Err(Error::invalid(format!(
                "unproject depth must be positive, got {depth}"
            )));
        }
        let d = Vector2::new((p.x - self.u0) / self.fx, (p.y - self.v0) / self.fy);
        let n = self.undistort(&d)?;
        let x_c = Vector3::new(n.x * depth, n.y * depth, depth);
        Ok(self.pose.inverse().apply(&x_c))
    }

    /// Whether a pixel lies in the half-open image rectangle
    /// `[0, width) x [0, height)`.
    #[inline]
    pub fn in_bounds(&self, p: &Pixel) -> bool {
        p.x >= 0.0 && p.x < self.width && p.y >= 0.0 && p.y < self.height
    }
}
