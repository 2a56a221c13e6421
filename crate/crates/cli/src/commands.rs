//! The four subcommands. Every file lands inside the chosen output
//! directory, and identical configs produce byte-identical files.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use camopt_core::camera::PinholeCamera;
use camopt_core::derivatives::{projection_jacobian, projection_jacobian_with_step};
use camopt_core::geometry::{exp_so3, log_so3, rot6d_to_rotation, RigidTransform};
use camopt_core::harness::{make_scene, run_experiments, ArmRecord};
use camopt_core::optimizer::{shared_intrinsics_loss, SharedWeights};
use camopt_core::params::{ParamFlags, ParamKind, Parameterization, ResidualMap};
use camopt_core::precond::{build, covariance, motion_magnitudes, wrap, Mode, PrecondRecord};
use camopt_core::sampler::{sample_frustum, ProxySettings};

use crate::config::{flags_label, RunConfig};
use crate::svg::heatmap;
use crate::CliError;

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::write(dir.join(name), contents)
        .map_err(|e| CliError::Config(format!("writing {name}: {e}")))
}

/// Builds the configured camera's covariance and preconditioner, writes
/// both as JSON plus SVG heatmaps, and self-checks the whitening when
/// run undampened.
pub fn precondition(config: &RunConfig, out_dir: &Path, strict: bool) -> Result<(), CliError> {
    let cam = config.camera.build()?;
    let param = config.precond.parameterization()?;
    let mode = config.precond.mode()?;
    let points = sample_frustum(&cam, &config.proxy)?.points;
    let cov = covariance(&param, &cam, &points)?;
    let pre = build(&cov, config.precond.lambda, config.precond.mu, mode)?;

    let record = PrecondRecord::new(param.canonical_name(), &cov, &pre);
    let sigma_half = PrecondRecord {
        p_inv: Vec::new(),
        ..record.clone()
    };
    let p_inv_half = PrecondRecord {
        sigma: Vec::new(),
        ..record
    };
    let to_json = |r: &PrecondRecord| {
        serde_json::to_string_pretty(r).map_err(|e| CliError::Config(e.to_string()))
    };
    write_file(out_dir, "sigma.json", &(to_json(&sigma_half)? + "\n"))?;
    write_file(out_dir, "p_inv.json", &(to_json(&p_inv_half)? + "\n"))?;

    let labels = param.axis_names();
    let name = param.canonical_name();
    write_file(
        out_dir,
        "covariance.svg",
        &heatmap(&cov.sigma, labels, &format!("covariance ({name})")),
    )?;
    write_file(
        out_dir,
        "p_inv.svg",
        &heatmap(&pre.p_inv, labels, &format!("preconditioner ({name})")),
    )?;

    println!(
        "wrote sigma.json, p_inv.json, covariance.svg, p_inv.svg for {name} (k={}, m={}, clamped={})",
        cov.sigma.nrows(),
        cov.m,
        pre.clamped
    );

    if config.precond.lambda == 0.0 && config.precond.mu == 0.0 && mode == Mode::Full {
        let wrapped = wrap(param, &pre)?;
        let white = covariance(&wrapped, &cam, &points)?;
        let k = white.sigma.nrows();
        let dev = (&white.sigma - DMatrix::identity(k, k))
            .iter()
            .fold(0.0f64, |a, x| a.max(x.abs()));
        println!("whitening self-check: max|J~'J~ - I| = {dev:.6e}");
        if strict && (dev.is_nan() || dev > 1e-4) {
            return Err(CliError::Numeric(format!(
                "whitening deviation {dev:e} above 1e-4"
            )));
        }
    }
    Ok(())
}

/// Tabulates raw and preconditioned per-axis RMS pixel displacements
/// for every parameterization in the grid, at the configured camera.
pub fn trails(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let cam = config.camera.build()?;
    let mode = config.precond.mode()?;
    let points = sample_frustum(&cam, &config.proxy)?.points;

    let mut csv = String::from("kind,flags,axis,raw_rms,preconditioned_rms\n");
    for param in config.grid.parameterizations()? {
        let raw = motion_magnitudes(&param, &cam, &points)?;
        let cov = covariance(&param, &cam, &points)?;
        let pre = build(&cov, config.precond.lambda, config.precond.mu, mode)?;
        let wrapped = wrap(param, &pre)?;
        let conditioned = motion_magnitudes(&wrapped, &cam, &points)?;
        for (axis, name) in param.axis_names().iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                param.kind.name(),
                flags_label(param.flags),
                name,
                raw[axis],
                conditioned[axis]
            ));
        }
    }
    write_file(out_dir, "motion_magnitudes.csv", &csv)?;
    println!("wrote motion_magnitudes.csv");
    Ok(())
}

/// Runs the experiment grid and writes the trajectory CSV, a per-arm
/// summary, and a ranked standings table to standard output.
pub fn refine(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let scene = make_scene(
        config.scene.n_cameras,
        config.scene.n_points,
        config.scene.layout,
        config.scene.seed,
    )?;
    let arms = config.grid.arms()?;
    let template = config.perturb.resolve()?;
    let settings = camopt_core::harness::RefineSettings {
        opt: config.opt,
        proxy: config.proxy,
        lambda: config.precond.lambda,
        mu: config.precond.mu,
        log_every: config.log_every,
    };
    let records = run_experiments(&scene, &template, &arms, &settings)?;

    let mut csv = String::from(
        "experiment_id,kind,flags,mode,seed,step,mse,rot_err_deg_mean,pos_err_mean,focal_err_px_mean\n",
    );
    for r in &records {
        let id = r.arm.id();
        for p in &r.outcome.trajectory {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                id,
                r.arm.param.kind.name(),
                flags_label(r.arm.param.flags),
                r.arm.mode.name(),
                r.arm.seed,
                p.step,
                p.mse,
                p.metrics.rotation_err_deg_mean,
                p.metrics.position_err_mean,
                p.metrics.focal_err_px_mean
            ));
        }
    }
    write_file(out_dir, "results.csv", &csv)?;

    let summaries: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "experiment_id": r.arm.id(),
                "kind": r.arm.param.kind.name(),
                "flags": flags_label(r.arm.param.flags),
                "mode": r.arm.mode.name(),
                "seed": r.arm.seed,
                "final": r.outcome.final_point(),
                "clamp_events": r.outcome.clamp_events,
                "wall_ms": r.wall_ms,
            })
        })
        .collect();
    let summary = serde_json::to_string_pretty(&summaries)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write_file(out_dir, "summary.json", &(summary + "\n"))?;

    print_standings(&records);
    println!(
        "wrote results.csv and summary.json ({} arms, {} cameras)",
        records.len(),
        scene.gt_cameras.len()
    );
    Ok(())
}

/// Mean final rotation error per (mode, parameterization), best first.
fn print_standings(records: &[ArmRecord]) {
    let mut groups: Vec<(String, String, Vec<f64>, Vec<f64>)> = Vec::new();
    for r in records {
        let mode = r.arm.mode.name().to_string();
        let kind = r.arm.param.canonical_name();
        let f = r.outcome.final_point();
        match groups.iter_mut().find(|g| g.0 == mode && g.1 == kind) {
            Some(g) => {
                g.2.push(f.metrics.rotation_err_deg_mean);
                g.3.push(f.mse);
            }
            None => groups.push((
                mode,
                kind,
                vec![f.metrics.rotation_err_deg_mean],
                vec![f.mse],
            )),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rows: Vec<(String, String, f64, f64, usize)> = groups
        .into_iter()
        .map(|(m, k, rot, mse)| (m, k, mean(&rot), mean(&mse), rot.len()))
        .collect();
    rows.sort_by(|a, b| a.2.total_cmp(&b.2));

    println!("{:<6} {:<26} {:>14} {:>14} {:>6}", "mode", "kind", "rot_err_deg", "mse_px2", "seeds");
    for (mode, kind, rot, mse, n) in rows {
        println!("{mode:<6} {kind:<26} {rot:>14.6e} {mse:>14.6e} {n:>6}");
    }
}

/// Fast invariant sweep: geometry round trips, projection Jacobian
/// agreement, whitening, and the shared-intrinsics gradient, each line
/// reporting its measured worst case.
pub fn selfcheck() -> Result<(), CliError> {
    let check = |name: &str, value: f64, bound: f64| -> Result<(), CliError> {
        if value <= bound {
            println!("ok   {name:<44} {value:9.3e} (bound {bound:.0e})");
            Ok(())
        } else {
            Err(CliError::Numeric(format!(
                "selfcheck {name}: {value:e} above {bound:e}"
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let unit = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        )
        .normalize()
    };

    let mut worst = 0.0f64;
    for _ in 0..500 {
        let w = unit(&mut rng) * ((std::f64::consts::PI - 1e-2) * rng.random::<f64>());
        worst = worst.max((log_so3(&exp_so3(&w)).map_err(numeric)? - w).norm());
    }
    check("so3 exp/log round trip", worst, 1e-9)?;

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a: [f64; 6] = std::array::from_fn(|_| 2.0 * rng.random::<f64>() - 1.0);
        if let Ok(r) = rot6d_to_rotation(&a) {
            worst = worst.max(r.orthonormality_error());
        }
    }
    check("rot6d orthonormality", worst, 1e-12)?;

    let cam = PinholeCamera {
        fx: 500.0,
        fy: 480.0,
        u0: 320.0,
        v0: 240.0,
        k1: 0.08,
        k2: -0.04,
        pose: RigidTransform::new(exp_so3(&Vector3::new(0.2, -0.3, 0.1)), Vector3::new(0.2, -0.1, 4.0)),
        width: 640.0,
        height: 480.0,
    };
    let mut worst = 0.0f64;
    for gx in 0..9 {
        for gy in 0..9 {
            let px = nalgebra::Vector2::new(
                cam.width * (0.1 + 0.1 * gx as f64),
                cam.height * (0.1 + 0.1 * gy as f64),
            );
            let x = cam.unproject(&px, 3.0).map_err(numeric)?;
            worst = worst.max((cam.project(&x).map_err(numeric)? - px).norm());
        }
    }
    check("distortion round trip (px)", worst, 1e-8)?;

    let points = sample_frustum(
        &cam,
        &ProxySettings {
            m: 400,
            seed: 5,
            ..ProxySettings::default()
        },
    )
    .map_err(numeric)?
    .points;
    let mut worst = 0.0f64;
    for kind in ParamKind::ALL {
        let param = Parameterization::plain(kind);
        let delta = DVector::zeros(param.dim());
        let jac = projection_jacobian(&param, &cam, &delta, &points).map_err(numeric)?;
        let coarse =
            projection_jacobian_with_step(&param, &cam, &delta, &points, 2e-4).map_err(numeric)?;
        let fine =
            projection_jacobian_with_step(&param, &cam, &delta, &points, 1e-4).map_err(numeric)?;
        let target = (&fine * 4.0 - &coarse) / 3.0;
        for r in 0..jac.nrows() {
            for c in 0..jac.ncols() {
                let (a, b) = (jac[(r, c)], target[(r, c)]);
                worst = worst.max((a - b).abs() / (a.abs().max(b.abs()) * 1e-5).max(1e-6));
            }
        }
    }
    check("projection jacobian vs FD (of tolerance)", worst, 1.0)?;

    let param = Parameterization::plain(ParamKind::Se3Focal);
    let cov = covariance(&param, &cam, &points).map_err(numeric)?;
    let pre = build(&cov, 0.0, 0.0, Mode::Full).map_err(numeric)?;
    let wrapped = wrap(param, &pre).map_err(numeric)?;
    let white = covariance(&wrapped, &cam, &points).map_err(numeric)?;
    let k = white.sigma.nrows();
    let dev = (&white.sigma - DMatrix::identity(k, k))
        .iter()
        .fold(0.0f64, |a, x| a.max(x.abs()));
    check("whitening identity", dev, 1e-4)?;

    let pre = build(&cov, 0.1, 1e-8, Mode::Full).map_err(numeric)?;
    let mut sigma_d = cov.sigma.clone();
    for i in 0..k {
        sigma_d[(i, i)] += 0.1 * cov.sigma[(i, i)] + 1e-8;
    }
    let err = (&pre.p_inv * sigma_d * &pre.p_inv - DMatrix::identity(k, k))
        .iter()
        .fold(0.0f64, |a, x| a.max(x.abs()));
    check("dampened inverse square root", err, 1e-8)?;

    let weights = SharedWeights::default();
    let sets: Vec<[f64; 6]> = (0..4)
        .map(|_| std::array::from_fn(|_| 100.0 + rng.random::<f64>()))
        .collect();
    let (_, grads) = shared_intrinsics_loss(&sets, &weights);
    let mut worst = 0.0f64;
    for i in 0..sets.len() {
        for j in 0..6 {
            let h = 1e-6;
            let mut up = sets.clone();
            let mut dn = sets.clone();
            up[i][j] += h;
            dn[i][j] -= h;
            let fd = (shared_intrinsics_loss(&up, &weights).0
                - shared_intrinsics_loss(&dn, &weights).0)
                / (2.0 * h);
            worst = worst.max((grads[i][j] - fd).abs());
        }
    }
    check("shared-intrinsics gradient vs FD", worst, 1e-8)?;

    let param = Parameterization::new(ParamKind::Scnerf, ParamFlags::ALL[3]);
    let out = param
        .realize(&cam, &DVector::zeros(param.dim()))
        .map_err(numeric)?;
    if out != cam {
        return Err(CliError::Numeric("zero residual moved the camera".into()));
    }
    println!("ok   zero residual is the identity");

    println!("selfcheck passed");
    Ok(())
}

fn numeric(e: camopt_core::Error) -> CliError {
    CliError::from(e)
}
