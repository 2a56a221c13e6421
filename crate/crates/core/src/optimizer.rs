//! Adam, the camera learning-rate schedule, and the shared-intrinsics
//! variance penalty.
//!
//! The schedule decays log-linearly between its endpoints and is gated
//! by a cosine warmup that rises from `warmup_floor` to 1 over the
//! first `warmup_steps` steps. The optimizer itself is standard Adam
//! with bias correction; it acts on whatever residual vector it is
//! given, so preconditioned and raw coordinates share one code path.
//!
//! The shared-intrinsics loss softly ties per-camera intrinsics
//! together: for each group (focal, principal point, distortion) it
//! penalizes the variance of the realized values across cameras. Means
//! are computed as an offset from the first camera's value, so a fleet
//! of identical intrinsics produces a loss and gradients of exactly
//! zero, not merely small.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};

/// Log-linear decay with cosine warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_steps: usize,
    pub warmup_floor: f64,
}

impl Schedule {
    /// Learning rate at step `t` of a `total`-step run.
    ///
    /// `base(t)` interpolates `ln lr_start .. ln lr_end` linearly in
    /// `t / total`; `warm(t)` rises from `warmup_floor` to exactly 1 at
    /// `t = warmup_steps` and stays there. Endpoints are returned
    /// exactly rather than through the interpolant.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        assert!(total > 0, "schedule needs a positive step count");
        assert!(t <= total, "step {t} beyond total {total}");
        assert!(
            self.lr_start > 0.0 && self.lr_end > 0.0,
            "learning rates must be positive"
        );
        let frac = t as f64 / total as f64;
        let base = if frac == 0.0 {
            self.lr_start
        } else if frac == 1.0 {
            self.lr_end
        } else {
            (self.lr_start.ln() + (self.lr_end.ln() - self.lr_start.ln()) * frac).exp()
        };
        let warm = if self.warmup_steps == 0 || t >= self.warmup_steps {
            1.0
        } else {
            let u = t as f64 / self.warmup_steps as f64;
            self.warmup_floor
                + (1.0 - self.warmup_floor) * 0.5 * (1.0 - (std::f64::consts::PI * u).cos())
        };
        base * warm
    }
}

/// Adam moment state for one residual vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            t: 0,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            beta1,
            beta2,
            eps,
        }
    }

    /// The usual defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn standard(dim: usize) -> Self {
        AdamState::new(dim, 0.9, 0.999, 1e-8)
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// A zero gradient on fresh state leaves `params` bitwise
    /// unchanged: the moments stay zero and the update is exactly
    /// `0 / (0 + eps)`.
    pub fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>, lr: f64) -> Result<()> {
        if grad.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "adam step",
                expected: self.m.len(),
                got: grad.len().max(params.len()),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index: i });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..self.m.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Variance-penalty weights per intrinsics group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharedWeights {
    pub focal: f64,
    pub principal: f64,
    pub distortion: f64,
}

impl Default for SharedWeights {
    fn default() -> Self {
        SharedWeights {
            focal: 0.1,
            principal: 0.01,
            distortion: 0.01,
        }
    }
}

impl SharedWeights {
    pub const ZERO: SharedWeights = SharedWeights {
        focal: 0.0,
        principal: 0.0,
        distortion: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.focal == 0.0 && self.principal == 0.0 && self.distortion == 0.0
    }
}

/// Optimizer configuration for one refinement run.
///
/// The learning-rate endpoints keep the 10:1 decay ratio of the camera
/// schedule but are scaled for a short desk-size run (2000 steps, 100
/// warmup) on the reprojection objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptSettings {
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_steps: usize,
    pub warmup_floor: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shared_weights: SharedWeights,
}

impl Default for OptSettings {
    fn default() -> Self {
        OptSettings {
            lr_start: 7e-1,
            lr_end: 7e-2,
            warmup_steps: 100,
            warmup_floor: 1e-8,
            steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shared_weights: SharedWeights::default(),
        }
    }
}

impl OptSettings {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            warmup_steps: self.warmup_steps,
            warmup_floor: self.warmup_floor,
        }
    }

    pub fn adam(&self, dim: usize) -> AdamState {
        AdamState::new(dim, self.beta1, self.beta2, self.eps)
    }
}

/// Realized intrinsics in the order fx, fy, u0, v0, k1, k2.
pub fn camera_intrinsics(cam: &PinholeCamera) -> [f64; 6] {
    [cam.fx, cam.fy, cam.u0, cam.v0, cam.k1, cam.k2]
}

/// An intrinsics group: its index range inside [`camera_intrinsics`]
/// and the weight it carries.
type WeightGroup = (std::ops::Range<usize>, fn(&SharedWeights) -> f64);

/// Index ranges of the intrinsics groups inside [`camera_intrinsics`].
const GROUPS: [WeightGroup; 3] = [
    (0..2, |w| w.focal),
    (2..4, |w| w.principal),
    (4..6, |w| w.distortion),
];

/// Variance of each intrinsic across cameras, weighted per group and
/// averaged over the group's two entries, with analytic gradients.
///
/// Returns the loss and, per camera, the gradient with respect to each
/// realized intrinsic. Fewer than two cameras have nothing to agree
/// on; that degenerate call returns zeros.
pub fn shared_intrinsics_loss(
    intrinsics: &[[f64; 6]],
    weights: &SharedWeights,
) -> (f64, Vec<[f64; 6]>) {
    let n = intrinsics.len();
    let mut grads = vec![[0.0; 6]; n];
    if n < 2 {
        return (0.0, grads);
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (range, pick) in GROUPS.iter() {
        let w = pick(weights) / range.len() as f64;
        for j in range.clone() {
            // Offset from the first camera so identical values cancel
            // exactly and the loss is a true zero, not round-off.
            let reference = intrinsics[0][j];
            let mean = reference
                + intrinsics.iter().map(|v| v[j] - reference).sum::<f64>() * inv_n;
            for (i, v) in intrinsics.iter().enumerate() {
                let d = v[j] - mean;
                loss += w * d * d * inv_n;
                grads[i][j] = w * 2.0 * d * inv_n;
            }
        }
    }
    (loss, grads)
}
