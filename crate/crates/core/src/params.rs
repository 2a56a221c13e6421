//! Residual parameterizations: how a flat residual vector perturbs a base
//! camera.
//!
//! Seven layouts are supported. The residual ordering is frozen as
//! pose block, focal, principal point, distortion:
//!
//! ```text
//! se3                   [w1 w2 w3 v1 v2 v3]                               k = 6
//! se3_focal             [w1 w2 w3 v1 v2 v3 f]                             k = 7
//! se3_focal_pp          [w1 w2 w3 v1 v2 v3 f u0 v0]                       k = 9
//! se3_focal_intrinsics  [w1 w2 w3 v1 v2 v3 f u0 v0 k1 k2]                 k = 11
//! focal_pose            [w1 w2 w3 x y z f]                                k = 7
//! focal_pose_intrinsics [w1 w2 w3 x y z f u0 v0 k1 k2]                    k = 11
//! scnerf                [a1..a6 x y z fu fv u0 v0 k1 k2]                  k = 15
//! ```
//!
//! Pose semantics:
//! * `se3` family: screw-axis residual, `pose' = exp_se3(log_se3(pose) + d)`.
//! * `focal_pose` family: so(3) residual on the rotation; `(x, y, z)` act on
//!   the world-to-camera translation as `z' = z (+) dz`,
//!   `x' = (dx / fx0 + x/z) z'` (and likewise y), so dx and dy are
//!   image-plane shifts in pixel units and dz is a dolly. Requires base
//!   `t_z > 0`.
//! * `scnerf`: additive residual on the 6D rotation encoding, additive
//!   world-frame residual on the camera center, and per-axis focal
//!   residuals `(fu, fv)`.
//!
//! Scalar residual styles are switched by [`ParamFlags`]:
//! * unflagged, every scalar residual is plain additive (`f' = f + df`,
//!   `z' = z + dz`);
//! * `log_scale` makes length-like residuals multiplicative,
//!   `f' = f exp(df)` and for `focal_pose` `z' = z exp(dz)`;
//! * `pixel_scale` multiplies pixel-unit residuals (focal when additive,
//!   principal point, `focal_pose` dx/dy) by the base fx, converting them
//!   to world-scaled steps (`f' = f + fx0 df`).
//!
//! When both flags are set, `log_scale` wins for length-like entries and
//! `pixel_scale` still applies to the principal point and dx/dy. Flags
//! change the map, not its image: any camera reachable by one flag state
//! is reachable by the others (for positive focal targets).
//!
//! An all-zero residual returns the base camera bitwise. This makes
//! zero-gradient fixed points exactly stationary downstream; the map is
//! continuous at zero to machine precision regardless.

use nalgebra::{DVector, Vector3};
use std::fmt;
use std::str::FromStr;

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::geometry::{
    exp_se3, exp_so3, log_se3, log_so3, rot6d_to_rotation, rotation_to_rot6d, RigidTransform,
    ScrewAxis,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Se3,
    Se3Focal,
    Se3FocalPp,
    Se3FocalIntrinsics,
    FocalPose,
    FocalPoseIntrinsics,
    Scnerf,
}

impl ParamKind {
    pub const ALL: [ParamKind; 7] = [
        ParamKind::Se3,
        ParamKind::Se3Focal,
        ParamKind::Se3FocalPp,
        ParamKind::Se3FocalIntrinsics,
        ParamKind::FocalPose,
        ParamKind::FocalPoseIntrinsics,
        ParamKind::Scnerf,
    ];

    pub fn dim(&self) -> usize {
        match self {
            ParamKind::Se3 => 6,
            ParamKind::Se3Focal => 7,
            ParamKind::Se3FocalPp => 9,
            ParamKind::Se3FocalIntrinsics => 11,
            ParamKind::FocalPose => 7,
            ParamKind::FocalPoseIntrinsics => 11,
            ParamKind::Scnerf => 15,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ParamKind::Se3 => "se3",
            ParamKind::Se3Focal => "se3_focal",
            ParamKind::Se3FocalPp => "se3_focal_pp",
            ParamKind::Se3FocalIntrinsics => "se3_focal_intrinsics",
            ParamKind::FocalPose => "focal_pose",
            ParamKind::FocalPoseIntrinsics => "focal_pose_intrinsics",
            ParamKind::Scnerf => "scnerf",
        }
    }

    /// Residual axis names in layout order.
    pub fn axis_names(&self) -> &'static [&'static str] {
        const SE3: [&str; 6] = ["rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z"];
        const SE3F: [&str; 7] = [
            "rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z", "focal",
        ];
        const SE3FPP: [&str; 9] = [
            "rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z", "focal", "pp_u", "pp_v",
        ];
        const SE3FI: [&str; 11] = [
            "rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z", "focal", "pp_u", "pp_v",
            "k1", "k2",
        ];
        const FP: [&str; 7] = [
            "rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z", "focal",
        ];
        const FPI: [&str; 11] = [
            "rot_x", "rot_y", "rot_z", "trans_x", "trans_y", "trans_z", "focal", "pp_u", "pp_v",
            "k1", "k2",
        ];
        const SC: [&str; 15] = [
            "rot6d_1", "rot6d_2", "rot6d_3", "rot6d_4", "rot6d_5", "rot6d_6", "trans_x",
            "trans_y", "trans_z", "focal_u", "focal_v", "pp_u", "pp_v", "k1", "k2",
        ];
        match self {
            ParamKind::Se3 => &SE3,
            ParamKind::Se3Focal => &SE3F,
            ParamKind::Se3FocalPp => &SE3FPP,
            ParamKind::Se3FocalIntrinsics => &SE3FI,
            ParamKind::FocalPose => &FP,
            ParamKind::FocalPoseIntrinsics => &FPI,
            ParamKind::Scnerf => &SC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ParamFlags {
    pub pixel_scale: bool,
    pub log_scale: bool,
}

impl ParamFlags {
    pub const NONE: ParamFlags = ParamFlags {
        pixel_scale: false,
        log_scale: false,
    };
    pub const PIX: ParamFlags = ParamFlags {
        pixel_scale: true,
        log_scale: false,
    };
    pub const LOG: ParamFlags = ParamFlags {
        pixel_scale: false,
        log_scale: true,
    };
    pub const PIX_LOG: ParamFlags = ParamFlags {
        pixel_scale: true,
        log_scale: true,
    };

    pub const ALL: [ParamFlags; 4] = [
        ParamFlags::NONE,
        ParamFlags::PIX,
        ParamFlags::LOG,
        ParamFlags::PIX_LOG,
    ];
}

/// Anything that turns a residual vector into a realized camera.
pub trait ResidualMap {
    fn dim(&self) -> usize;
    fn realize(&self, base: &PinholeCamera, residual: &DVector<f64>) -> Result<PinholeCamera>;
}

impl<M: ResidualMap + ?Sized> ResidualMap for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn realize(&self, base: &PinholeCamera, residual: &DVector<f64>) -> Result<PinholeCamera> {
        (**self).realize(base, residual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Parameterization {
    pub kind: ParamKind,
    pub flags: ParamFlags,
}

impl Parameterization {
    pub fn new(kind: ParamKind, flags: ParamFlags) -> Self {
        Parameterization { kind, flags }
    }

    pub fn plain(kind: ParamKind) -> Self {
        Parameterization {
            kind,
            flags: ParamFlags::NONE,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn axis_names(&self) -> &'static [&'static str] {
        self.kind.axis_names()
    }

    /// Canonical name, e.g. `focal_pose_intrinsics+pix+log`.
    pub fn canonical_name(&self) -> String {
        let mut s = self.kind.name().to_string();
        if self.flags.pixel_scale {
            s.push_str("+pix");
        }
        if self.flags.log_scale {
            s.push_str("+log");
        }
        s
    }

    /// Focal update shared by all kinds. `f0x` is the base fx, the unit
    /// reference for pixel scaling.
    fn apply_focal(&self, f: f64, d: f64, f0x: f64) -> f64 {
        if self.flags.log_scale {
            f * d.exp()
        } else if self.flags.pixel_scale {
            f + f0x * d
        } else {
            f + d
        }
    }

    fn pixel_unit(&self, f0x: f64) -> f64 {
        if self.flags.pixel_scale {
            f0x
        } else {
            1.0
        }
    }

    /// Realizes the perturbed camera. An all-zero residual returns the
    /// base bitwise. Errors: `BadLayout` on length mismatch, `NonFinite`
    /// on non-finite entries, `AngleNearPi`/`DegenerateBasis` from the
    /// rotation maps, and `InvalidInput` when the realized camera is not
    /// physical (non-positive focal) or a base precondition fails.
    pub fn apply(&self, base: &PinholeCamera, delta: &DVector<f64>) -> Result<PinholeCamera> {
        let k = self.dim();
        if delta.len() != k {
            return Err(Error::BadLayout {
                expected: k,
                got: delta.len(),
            });
        }
        if delta.iter().all(|x| *x == 0.0) {
            return Ok(*base);
        }
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("residual entry"));
        }

        let f0x = base.fx;
        let mut cam = *base;
        match self.kind {
            ParamKind::Se3
            | ParamKind::Se3Focal
            | ParamKind::Se3FocalPp
            | ParamKind::Se3FocalIntrinsics => {
                let s0 = log_se3(&base.pose)?;
                let s = ScrewAxis {
                    omega: s0.omega + Vector3::new(delta[0], delta[1], delta[2]),
                    v: s0.v + Vector3::new(delta[3], delta[4], delta[5]),
                };
                cam.pose = exp_se3(&s);
                if self.kind != ParamKind::Se3 {
                    cam.fx = self.apply_focal(base.fx, delta[6], f0x);
                    cam.fy = self.apply_focal(base.fy, delta[6], f0x);
                }
                if matches!(
                    self.kind,
                    ParamKind::Se3FocalPp | ParamKind::Se3FocalIntrinsics
                ) {
                    let s_pix = self.pixel_unit(f0x);
                    cam.u0 = base.u0 + s_pix * delta[7];
                    cam.v0 = base.v0 + s_pix * delta[8];
                }
                if self.kind == ParamKind::Se3FocalIntrinsics {
                    cam.k1 = base.k1 + delta[9];
                    cam.k2 = base.k2 + delta[10];
                }
            }
            ParamKind::FocalPose | ParamKind::FocalPoseIntrinsics => {
                let t0 = base.pose.translation;
                if t0.z.is_nan() || t0.z <= 0.0 {
                    return Err(Error::invalid(format!(
                        "focal_pose base needs positive translation depth, got {}",
                        t0.z
                    )));
                }
                let w0 = log_so3(&base.pose.rotation)?;
                let rot = exp_so3(&(w0 + Vector3::new(delta[0], delta[1], delta[2])));
                let s_pix = self.pixel_unit(f0x);
                let z1 = if self.flags.log_scale {
                    t0.z * delta[5].exp()
                } else {
                    t0.z + delta[5]
                };
                let x1 = (s_pix * delta[3] / f0x + t0.x / t0.z) * z1;
                let y1 = (s_pix * delta[4] / f0x + t0.y / t0.z) * z1;
                cam.pose = RigidTransform::new(rot, Vector3::new(x1, y1, z1));
                cam.fx = self.apply_focal(base.fx, delta[6], f0x);
                cam.fy = self.apply_focal(base.fy, delta[6], f0x);
                if self.kind == ParamKind::FocalPoseIntrinsics {
                    cam.u0 = base.u0 + s_pix * delta[7];
                    cam.v0 = base.v0 + s_pix * delta[8];
                    cam.k1 = base.k1 + delta[9];
                    cam.k2 = base.k2 + delta[10];
                }
            }
            ParamKind::Scnerf => {
                let a0 = rotation_to_rot6d(&base.pose.rotation);
                let a = [
                    a0[0] + delta[0],
                    a0[1] + delta[1],
                    a0[2] + delta[2],
                    a0[3] + delta[3],
                    a0[4] + delta[4],
                    a0[5] + delta[5],
                ];
                let rot = rot6d_to_rotation(&a)?;
                let c = base.pose.center() + Vector3::new(delta[6], delta[7], delta[8]);
                cam.pose = RigidTransform::new(rot, -rot.apply(&c));
                cam.fx = self.apply_focal(base.fx, delta[9], f0x);
                cam.fy = self.apply_focal(base.fy, delta[10], f0x);
                let s_pix = self.pixel_unit(f0x);
                cam.u0 = base.u0 + s_pix * delta[11];
                cam.v0 = base.v0 + s_pix * delta[12];
                cam.k1 = base.k1 + delta[13];
                cam.k2 = base.k2 + delta[14];
            }
        }

        if !(cam.fx > 0.0 && cam.fy > 0.0) {
            return Err(Error::invalid(format!(
                "realized camera has non-positive focal fx={} fy={}",
                cam.fx, cam.fy
            )));
        }
        Ok(cam)
    }
}

impl ResidualMap for Parameterization {
    fn dim(&self) -> usize {
        self.dim()
    }
    fn realize(&self, base: &PinholeCamera, residual: &DVector<f64>) -> Result<PinholeCamera> {
        self.apply(base, residual)
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_name())
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    /// Parses `kind[+pix][+log]`, e.g. `se3_focal+log`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('+');
        let kind_name = parts.next().unwrap_or("");
        let kind = ParamKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == kind_name)
            .ok_or_else(|| Error::invalid(format!("unknown parameterization `{kind_name}`")))?;
        let mut flags = ParamFlags::NONE;
        for p in parts {
            match p {
                "pix" => flags.pixel_scale = true,
                "log" => flags.log_scale = true,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown parameterization flag `+{other}`"
                    )))
                }
            }
        }
        Ok(Parameterization { kind, flags })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::PinholeCamera;
    use crate::geometry::{exp_so3, RigidTransform};
    use approx::assert_abs_diff_eq;

    fn base_camera() -> PinholeCamera {
        PinholeCamera {
            fx: 100.0,
            fy: 100.0,
            u0: 320.0,
            v0: 240.0,
            k1: 0.0,
            k2: 0.0,
            pose: RigidTransform::new(
                exp_so3(&Vector3::new(0.1, -0.2, 0.3)),
                Vector3::new(0.5, -0.25, 4.0),
            ),
            width: 640.0,
            height: 480.0,
        }
    }

    #[test]
    fn zero_residual_returns_base_bitwise() {
        let base = base_camera();
        for kind in ParamKind::ALL {
            for flags in ParamFlags::ALL {
                let p = Parameterization::new(kind, flags);
                let cam = p.apply(&base, &DVector::zeros(p.dim())).unwrap();
                assert_eq!(cam, base, "kind {}", p.canonical_name());
            }
        }
    }

    #[test]
    fn continuity_at_zero() {
        // A tiny residual lands within a hair of the base even though the
        // zero fast path is skipped.
        let base = base_camera();
        for kind in ParamKind::ALL {
            let p = Parameterization::plain(kind);
            for r in 0..p.dim() {
                let mut d = DVector::zeros(p.dim());
                d[r] = 1e-12;
                let cam = p.apply(&base, &d).unwrap();
                assert_abs_diff_eq!(cam.fx, base.fx, epsilon = 1e-7);
                assert_abs_diff_eq!(
                    cam.pose.translation,
                    base.pose.translation,
                    epsilon = 1e-7
                );
            }
        }
    }

    #[test]
    fn bad_layout_is_rejected() {
        let base = base_camera();
        let p = Parameterization::plain(ParamKind::Se3);
        match p.apply(&base, &DVector::zeros(7)) {
            Err(Error::BadLayout {
                expected: 6,
                got: 7,
            }) => {}
            other => panic!("expected BadLayout, got {other:?}"),
        }
    }

    #[test]
    fn log_focal_doubles_fx() {
        let base = base_camera();
        let p: Parameterization = "se3_focal+log".parse().unwrap();
        let mut d = DVector::zeros(7);
        d[6] = 2.0_f64.ln();
        let cam = p.apply(&base, &d).unwrap();
        assert_abs_diff_eq!(cam.fx, 200.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cam.fy, 200.0, epsilon = 1e-12);
    }

    #[test]
    fn focal_styles_reach_the_same_camera() {
        // Target fx' = 1.3 fx via each flag state.
        let base = base_camera();
        let cases = [
            (ParamFlags::NONE, 0.3 * base.fx),
            (ParamFlags::PIX, 0.3),
            (ParamFlags::LOG, 1.3_f64.ln()),
        ];
        for (flags, df) in cases {
            let p = Parameterization::new(ParamKind::Se3Focal, flags);
            let mut d = DVector::zeros(7);
            d[6] = df;
            let cam = p.apply(&base, &d).unwrap();
            assert_abs_diff_eq!(cam.fx, 130.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn focal_pose_log_dolly() {
        let mut base = base_camera();
        base.pose = RigidTransform::new(
            crate::geometry::Rotation::identity(),
            Vector3::new(1.0, 0.0, 2.0),
        );
        let p: Parameterization = "focal_pose+log".parse().unwrap();
        let mut d = DVector::zeros(7);
        d[5] = 2.0_f64.ln();
        let cam = p.apply(&base, &d).unwrap();
        // z' = 2 exp(ln 2) = 4, x' = (0/100 + 1/2) * 4 = 2.
        assert_abs_diff_eq!(
            cam.pose.translation,
            Vector3::new(2.0, 0.0, 4.0),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(cam.fx, 100.0, epsilon = 1e-12);
    }

    #[test]
    fn focal_pose_pixel_shift() {
        let mut base = base_camera();
        base.pose = RigidTransform::new(
            crate::geometry::Rotation::identity(),
            Vector3::new(1.0, 0.0, 2.0),
        );
        let p = Parameterization::plain(ParamKind::FocalPose);
        let mut d = DVector::zeros(7);
        d[3] = 100.0; // one focal length of image shift
        let cam = p.apply(&base, &d).unwrap();
        // x' = (100/100 + 1/2) * 2 = 3.
        assert_abs_diff_eq!(
            cam.pose.translation,
            Vector3::new(3.0, 0.0, 2.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn focal_pose_requires_positive_depth() {
        let mut base = base_camera();
        base.pose = RigidTransform::new(
            crate::geometry::Rotation::identity(),
            Vector3::new(0.0, 0.0, -1.0),
        );
        let p = Parameterization::plain(ParamKind::FocalPose);
        let mut d = DVector::zeros(7);
        d[6] = 0.1;
        assert!(matches!(
            p.apply(&base, &d),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn scnerf_center_shift_is_world_frame() {
        let base = base_camera();
        let p = Parameterization::plain(ParamKind::Scnerf);
        let mut d = DVector::zeros(15);
        d[6] = 0.5;
        let cam = p.apply(&base, &d).unwrap();
        let expected = base.pose.center() + Vector3::new(0.5, 0.0, 0.0);
        assert_abs_diff_eq!(cam.pose.center(), expected, epsilon = 1e-12);
        // Rotation untouched by a pure translation residual.
        assert_abs_diff_eq!(
            *cam.pose.rotation.matrix(),
            *base.pose.rotation.matrix(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn scnerf_independent_focal_axes() {
        let base = base_camera();
        let p = Parameterization::plain(ParamKind::Scnerf);
        let mut d = DVector::zeros(15);
        d[9] = 3.0;
        d[10] = -1.5;
        let cam = p.apply(&base, &d).unwrap();
        assert_abs_diff_eq!(cam.fx, 103.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cam.fy, 98.5, epsilon = 1e-12);
    }

    #[test]
    fn pixel_scale_affects_principal_point() {
        let base = base_camera();
        let p: Parameterization = "se3_focal_pp+pix".parse().unwrap();
        let mut d = DVector::zeros(9);
        d[7] = 0.02;
        let cam = p.apply(&base, &d).unwrap();
        assert_abs_diff_eq!(cam.u0, base.u0 + 100.0 * 0.02, epsilon = 1e-12);
    }

    #[test]
    fn canonical_names_round_trip() {
        for kind in ParamKind::ALL {
            for flags in ParamFlags::ALL {
                let p = Parameterization::new(kind, flags);
                let parsed: Parameterization = p.canonical_name().parse().unwrap();
                assert_eq!(parsed, p);
            }
        }
        assert!("se3+bogus".parse::<Parameterization>().is_err());
        assert!("nope".parse::<Parameterization>().is_err());
    }
}
