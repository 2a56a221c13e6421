//! Central-difference Jacobians of the projection through a residual map.
//!
//! Reference semantics for every derivative in the crate: symmetric
//! central differences with per-axis step `h_r = step * max(1, |delta_r|)`
//! and default `step` [`FD_STEP`]. Columns are independent probes, so
//! they may be evaluated in parallel; nothing here reduces across points
//! or columns in a scheduling-dependent order, which keeps results
//! bitwise identical for any thread count.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::camera::{Pixel, PinholeCamera};
use crate::error::{Error, Result};
use crate::parallel::map_range;
use crate::params::ResidualMap;

/// Default relative step for central differences.
pub const FD_STEP: f64 = 1e-5;

fn probe_pair<M: ResidualMap>(
    map: &M,
    base: &PinholeCamera,
    delta: &DVector<f64>,
    axis: usize,
    step: f64,
) -> Result<(PinholeCamera, PinholeCamera, f64)> {
    let h = step * delta[axis].abs().max(1.0);
    let mut plus = delta.clone();
    plus[axis] += h;
    let mut minus = delta.clone();
    minus[axis] -= h;
    Ok((map.realize(base, &plus)?, map.realize(base, &minus)?, h))
}

fn project_checked(cam: &PinholeCamera, x: &Vector3<f64>) -> Result<Pixel> {
    let p = cam.project(x)?;
    if !(p.x.is_finite() && p.y.is_finite()) {
        return Err(Error::NonFinite("projected pixel"));
    }
    Ok(p)
}

/// Jacobian of the stacked projections with respect to the residual,
/// shape `2m x k`: point `i` fills rows `2i` (du) and `2i + 1` (dv).
/// Uses the default step rule.
pub fn projection_jacobian<M: ResidualMap + Sync>(
    map: &M,
    base: &PinholeCamera,
    delta: &DVector<f64>,
    points: &[Vector3<f64>],
) -> Result<DMatrix<f64>> {
    projection_jacobian_with_step(map, base, delta, points, FD_STEP)
}

/// [`projection_jacobian`] with an explicit relative step, used to check
/// the O(h^2) truncation behavior of the differences.
pub fn projection_jacobian_with_step<M: ResidualMap + Sync>(
    map: &M,
    base: &PinholeCamera,
    delta: &DVector<f64>,
    points: &[Vector3<f64>],
    step: f64,
) -> Result<DMatrix<f64>> {
    let k = map.dim();
    if delta.len() != k {
        return Err(Error::BadLayout {
            expected: k,
            got: delta.len(),
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let m = points.len();
    let columns: Vec<Result<Vec<f64>>> = map_range(k, |r| {
        let (cam_plus, cam_minus, h) = probe_pair(map, base, delta, r, step)?;
        let inv_2h = 1.0 / (2.0 * h);
        let mut col = Vec::with_capacity(2 * m);
        for x in points {
            let p = project_checked(&cam_plus, x)?;
            let q = project_checked(&cam_minus, x)?;
            col.push((p.x - q.x) * inv_2h);
            col.push((p.y - q.y) * inv_2h);
        }
        Ok(col)
    });
    let mut j = DMatrix::zeros(2 * m, k);
    for (r, col) in columns.into_iter().enumerate() {
        let col = col?;
        for (row, val) in col.into_iter().enumerate() {
            j[(row, r)] = val;
        }
    }
    Ok(j)
}

/// Mean squared reprojection error of a realized camera over
/// (world point, observed pixel) pairs.
pub fn reprojection_mse(cam: &PinholeCamera, observations: &[(Vector3<f64>, Pixel)]) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut sum = 0.0;
    for (x, obs) in observations {
        let p = project_checked(cam, x)?;
        let du = p.x - obs.x;
        let dv = p.y - obs.y;
        sum += du * du + dv * dv;
    }
    Ok(sum / observations.len() as f64)
}

/// Value and gradient of the mean squared reprojection error at `delta`.
///
/// The gradient is `(2/m) J^T r` with `J` the central-difference Jacobian
/// and `r` the stacked residuals; it agrees with central differences of
/// the scalar loss to the same truncation order. Points behind the camera
/// in any probe abort with `BehindCamera`; nothing is silently dropped.
pub fn loss_gradient<M: ResidualMap + Sync>(
    map: &M,
    base: &PinholeCamera,
    delta: &DVector<f64>,
    observations: &[(Vector3<f64>, Pixel)],
) -> Result<(f64, DVector<f64>)> {
    let k = map.dim();
    if delta.len() != k {
        return Err(Error::BadLayout {
            expected: k,
            got: delta.len(),
        });
    }
    if observations.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let m = observations.len() as f64;

    // Residuals at the center point, shared by every column probe.
    let center = map.realize(base, delta)?;
    let mut residuals = Vec::with_capacity(observations.len());
    let mut sum = 0.0;
    for (x, obs) in observations {
        let p = project_checked(&center, x)?;
        let du = p.x - obs.x;
        let dv = p.y - obs.y;
        sum += du * du + dv * dv;
        residuals.push((du, dv));
    }
    let mse = sum / m;

    let entries: Vec<Result<f64>> = map_range(k, |r| {
        let (cam_plus, cam_minus, h) = probe_pair(map, base, delta, r, FD_STEP)?;
        let inv_2h = 1.0 / (2.0 * h);
        // Column of J dotted with the residuals, accumulated in point
        // order so the result is independent of column scheduling.
        let mut acc = 0.0;
        for ((x, _), (ru, rv)) in observations.iter().zip(&residuals) {
            let p = project_checked(&cam_plus, x)?;
            let q = project_checked(&cam_minus, x)?;
            acc += (p.x - q.x) * inv_2h * ru + (p.y - q.y) * inv_2h * rv;
        }
        Ok(acc)
    });
    let mut grad = DVector::zeros(k);
    for (r, e) in entries.into_iter().enumerate() {
        grad[r] = e? * 2.0 / m;
    }
    Ok((mse, grad))
}

/// Central-difference Jacobian of the realized intrinsics
/// `(fx, fy, u0, v0, k1, k2)` with respect to the residual, shape `6 x k`.
/// This is the chain-rule factor for losses defined on intrinsics.
pub fn intrinsics_jacobian<M: ResidualMap + Sync>(
    map: &M,
    base: &PinholeCamera,
    delta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let k = map.dim();
    if delta.len() != k {
        return Err(Error::BadLayout {
            expected: k,
            got: delta.len(),
        });
    }
    let columns: Vec<Result<[f64; 6]>> = map_range(k, |r| {
        let (plus, minus, h) = probe_pair(map, base, delta, r, FD_STEP)?;
        let inv_2h = 1.0 / (2.0 * h);
        Ok([
            (plus.fx - minus.fx) * inv_2h,
            (plus.fy - minus.fy) * inv_2h,
            (plus.u0 - minus.u0) * inv_2h,
            (plus.v0 - minus.v0) * inv_2h,
            (plus.k1 - minus.k1) * inv_2h,
            (plus.k2 - minus.k2) * inv_2h,
        ])
    });
    let mut j = DMatrix::zeros(6, k);
    for (r, col) in columns.into_iter().enumerate() {
        let col = col?;
        for row in 0..6 {
            j[(row, r)] = col[row];
        }
    }
    Ok(j)
}
