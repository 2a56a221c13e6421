//! Deterministic frustum point sampling.
//!
//! Proxy points approximate the scene content a camera will actually
//! observe: uniform over the image plane, disparity-linear in depth so
//! near structure is represented as densely as far structure. Sampling
//! is seeded and the draw order is fixed, so a `(camera, seed, m)`
//! triple always yields the same points.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};

/// Sampling controls with the defaults used throughout the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxySettings {
    pub m: usize,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
}

impl Default for ProxySettings {
    fn default() -> Self {
        ProxySettings {
            m: 1000,
            near: 0.2,
            far: 100.0,
            seed: 0,
        }
    }
}

/// World-space proxy points tied to the camera and settings that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyPointSet {
    pub points: Vec<Vector3<f64>>,
    pub settings: ProxySettings,
}

/// Depth at disparity fraction `s in [0, 1]`: linear in `1/d` between
/// `near` and `far`.
fn disparity_depth(near: f64, far: f64, s: f64) -> f64 {
    1.0 / ((1.0 - s) / near + s / far)
}

/// Samples `m` points uniformly over the pixel grid and disparity range
/// of `camera`, then lifts them to world space through the camera model
/// (distortion included).
pub fn sample_frustum(camera: &PinholeCamera, settings: &ProxySettings) -> Result<ProxyPointSet> {
    camera.validate()?;
    if settings.m == 0 {
        return Err(Error::invalid("proxy point count must be at least 1"));
    }
    if !(settings.near > 0.0 && settings.far > settings.near) {
        return Err(Error::invalid(format!(
            "need 0 < near < far, got near={} far={}",
            settings.near, settings.far
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut points = Vec::with_capacity(settings.m);
    for _ in 0..settings.m {
        // Draw order is part of the format: u, v, then disparity.
        let u = camera.width * rng.random::<f64>();
        let v = camera.height * rng.random::<f64>();
        let s = rng.random::<f64>();
        let d = disparity_depth(settings.near, settings.far, s);
        let p = camera.unproject(&nalgebra::Vector2::new(u, v), d)?;
        points.push(p);
    }
    Ok(ProxyPointSet {
        points,
        settings: *settings,
    })
}
