//! Camera refinement toolkit built around preconditioned residual
//! parameterizations.
//!
//! A camera is refined by optimizing a residual vector `delta` that a
//! [`params::Parameterization`] turns into a perturbed copy of the base
//! camera. Because the residual entries live in wildly different units
//! (radians, world lengths, pixels, log scales), raw gradient descent on
//! them is badly conditioned. The [`precond`] module measures how much
//! image-space motion each residual axis produces over a cloud of proxy
//! points sampled in the camera frustum, and builds a whitening transform
//! that equalizes those motions. Optimizing in the whitened space removes
//! the unit mismatch.
//!
//! Modules are layered bottom-up:
//!
//! * [`geometry`] — rotations, rigid transforms, screw-axis exp/log.
//! * [`camera`] — pinhole projection with two-term radial distortion.
//! * [`params`] — residual layouts for seven camera parameterizations.
//! * [`derivatives`] — finite-difference Jacobians of the projection.
//! * [`sampler`] — seeded frustum point sampling, disparity-linear in depth.
//! * [`precond`] — proxy covariance and dampened inverse-square-root
//!   preconditioners.
//! * [`optimizer`] — Adam, the warmup/log-decay schedule, and the
//!   shared-intrinsics variance penalty.
//! * [`harness`] — synthetic ring scenes, perturbation protocol, and the
//!   end-to-end refinement loop.

pub mod camera;
pub mod derivatives;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod optimizer;
pub mod params;
mod parallel;
pub mod precond;
pub mod sampler;

pub use error::{Error, Result};

/// Caps the data-parallel thread pool at `n` threads (0 keeps the
/// default, one per logical core). Call once at process start; later
/// calls and calls after parallel work keep the existing pool. Without
/// the `parallel` feature every map is sequential and this is a no-op.
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
