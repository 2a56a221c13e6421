//! Run configuration: JSON file -> dot-path flag overrides -> typed
//! sections, validated before any computation touches the filesystem.

use nalgebra::Vector3;
use serde::Deserialize;
use serde_json::Value;

use camopt_core::camera::PinholeCamera;
use camopt_core::geometry::{exp_so3, RigidTransform};
use camopt_core::harness::{ExperimentArm, PerturbSpec, PrecondMode, SceneLayout};
use camopt_core::optimizer::OptSettings;
use camopt_core::params::{ParamFlags, ParamKind, Parameterization};
use camopt_core::precond::Mode;
use camopt_core::sampler::ProxySettings;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub perturb: PerturbConfig,
    pub proxy: ProxySettings,
    pub opt: OptSettings,
    pub precond: PrecondConfig,
    pub grid: GridConfig,
    pub camera: CameraConfig,
    /// Trajectory recording stride for refine runs.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneConfig::default(),
            perturb: PerturbConfig::default(),
            proxy: ProxySettings::default(),
            opt: OptSettings::default(),
            precond: PrecondConfig::default(),
            grid: GridConfig::default(),
            camera: CameraConfig::default(),
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_cameras: usize,
    pub n_points: usize,
    pub layout: SceneLayout,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_cameras: 20,
            n_points: 500,
            layout: SceneLayout::default(),
            seed: 0,
        }
    }
}

/// Perturbation template; a named preset seeds the fields and explicit
/// keys override it. The per-arm seed replaces the template's.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub preset: Option<String>,
    pub sigma_lookat: Option<f64>,
    pub sigma_position: Option<f64>,
    pub sigma_focal_log: Option<f64>,
    pub sigma_dolly_log: Option<f64>,
    pub zero_distortion: Option<bool>,
}

impl PerturbConfig {
    pub fn resolve(&self) -> Result<PerturbSpec, CliError> {
        let mut spec = match &self.preset {
            Some(name) => PerturbSpec::preset(name, 0).ok_or_else(|| {
                CliError::Config(format!("unknown perturbation preset \"{name}\""))
            })?,
            None => PerturbSpec::default(),
        };
        if let Some(v) = self.sigma_lookat {
            spec.sigma_lookat = v;
        }
        if let Some(v) = self.sigma_position {
            spec.sigma_position = v;
        }
        if let Some(v) = self.sigma_focal_log {
            spec.sigma_focal_log = v;
        }
        if let Some(v) = self.sigma_dolly_log {
            spec.sigma_dolly_log = v;
        }
        if let Some(v) = self.zero_distortion {
            spec.zero_distortion = v;
        }
        Ok(spec)
    }
}

/// Which parameterization the single-camera commands analyze, and the
/// dampening the preconditioner is built with.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrecondConfig {
    pub kind: String,
    pub flags: String,
    pub mode: String,
    pub lambda: f64,
    pub mu: f64,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        PrecondConfig {
            kind: "se3_focal".into(),
            flags: String::new(),
            mode: "full".into(),
            lambda: 0.1,
            mu: 1e-8,
        }
    }
}

impl PrecondConfig {
    pub fn parameterization(&self) -> Result<Parameterization, CliError> {
        Ok(Parameterization::new(
            parse_kind(&self.kind)?,
            parse_flags(&self.flags)?,
        ))
    }

    pub fn mode(&self) -> Result<Mode, CliError> {
        match self.mode.as_str() {
            "full" => Ok(Mode::Full),
            "diag" => Ok(Mode::Diagonal),
            other => Err(CliError::Config(format!(
                "unknown preconditioner mode \"{other}\" (expected full|diag)"
            ))),
        }
    }
}

/// Experiment grid: the cross product of kinds, flag sets, modes, and
/// perturbation seeds, one arm each.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub kinds: Vec<String>,
    pub flags: Vec<String>,
    pub modes: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            kinds: vec!["focal_pose_intrinsics".into()],
            flags: vec![String::new()],
            modes: vec!["none".into(), "full".into()],
            seeds: vec![0, 1, 2],
        }
    }
}

impl GridConfig {
    pub fn arms(&self) -> Result<Vec<ExperimentArm>, CliError> {
        let mut arms = Vec::new();
        for kind in &self.kinds {
            let kind = parse_kind(kind)?;
            for flags in &self.flags {
                let param = Parameterization::new(kind, parse_flags(flags)?);
                for mode in &self.modes {
                    let mode: PrecondMode = mode
                        .parse()
                        .map_err(|e: camopt_core::Error| CliError::Config(e.to_string()))?;
                    for &seed in &self.seeds {
                        arms.push(ExperimentArm { param, mode, seed });
                    }
                }
            }
        }
        if arms.is_empty() {
            return Err(CliError::Config("experiment grid is empty".into()));
        }
        Ok(arms)
    }

    pub fn parameterizations(&self) -> Result<Vec<Parameterization>, CliError> {
        let mut out = Vec::new();
        for kind in &self.kinds {
            let kind = parse_kind(kind)?;
            for flags in &self.flags {
                out.push(Parameterization::new(kind, parse_flags(flags)?));
            }
        }
        Ok(out)
    }
}

/// The camera the single-camera commands (precondition, trails) study.
/// `omega` is an axis-angle rotation and `translation` the world-to-
/// camera offset, so the default looks down +z from four units away.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
    pub k1: f64,
    pub k2: f64,
    pub width: f64,
    pub height: f64,
    pub omega: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            fx: 500.0,
            fy: 500.0,
            u0: 320.0,
            v0: 240.0,
            k1: 0.0,
            k2: 0.0,
            width: 640.0,
            height: 480.0,
            omega: [0.0; 3],
            translation: [0.0, 0.0, 4.0],
        }
    }
}

impl CameraConfig {
    pub fn build(&self) -> Result<PinholeCamera, CliError> {
        let cam = PinholeCamera {
            fx: self.fx,
            fy: self.fy,
            u0: self.u0,
            v0: self.v0,
            k1: self.k1,
            k2: self.k2,
            pose: RigidTransform::new(
                exp_so3(&Vector3::from(self.omega)),
                Vector3::from(self.translation),
            ),
            width: self.width,
            height: self.height,
        };
        cam.validate()
            .map_err(|e| CliError::Config(format!("camera: {e}")))?;
        Ok(cam)
    }
}

pub fn parse_kind(name: &str) -> Result<ParamKind, CliError> {
    ParamKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| {
            let known: Vec<&str> = ParamKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Config(format!(
                "unknown parameterization \"{name}\" (expected one of {})",
                known.join(", ")
            ))
        })
}

/// Flag sets are written as "+"-joined tokens: "", "pix", "log", "pix+log".
pub fn parse_flags(s: &str) -> Result<ParamFlags, CliError> {
    let mut flags = ParamFlags::NONE;
    for token in s.split('+').filter(|t| !t.is_empty()) {
        match token {
            "pix" => flags.pixel_scale = true,
            "log" => flags.log_scale = true,
            other => {
                return Err(CliError::Config(format!(
                    "unknown residual flag \"{other}\" (expected pix, log)"
                )))
            }
        }
    }
    Ok(flags)
}

pub fn flags_label(flags: ParamFlags) -> &'static str {
    match (flags.pixel_scale, flags.log_scale) {
        (false, false) => "",
        (true, false) => "pix",
        (false, true) => "log",
        (true, true) => "pix+log",
    }
}

/// Splits dot-path config overrides (`--opt.steps=500`) out of the raw
/// argument list so the flag parser never sees them.
/// Arguments for the flag parser plus the extracted `(path, value)`
/// override pairs.
pub type SplitArgs = (Vec<String>, Vec<(String, String)>);

pub fn split_overrides(argv: Vec<String>) -> Result<SplitArgs, CliError> {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    for arg in argv {
        let Some(body) = arg.strip_prefix("--") else {
            plain.push(arg);
            continue;
        };
        let (path, value) = match body.split_once('=') {
            Some((p, v)) => (p, Some(v)),
            None => (body, None),
        };
        if !path.contains('.') {
            plain.push(arg);
            continue;
        }
        match value {
            Some(v) => overrides.push((path.to_string(), v.to_string())),
            None => {
                return Err(CliError::Config(format!(
                    "config override --{path} needs =value"
                )))
            }
        }
    }
    Ok((plain, overrides))
}

/// Sets `path` (dot-separated) inside a JSON tree, creating objects on
/// the way. Values parse as JSON literals, falling back to strings.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut segments = path.split('.').peekable();
    while let Some(seg) = segments.next() {
        let map = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("override --{path}: \"{seg}\" is not a section"))
        })?;
        if segments.peek().is_none() {
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Config(format!("override --{path}: empty path")))
}

pub fn load(
    path: Option<&std::path::Path>,
    overrides: &[(String, String)],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut tree: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("parsing {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for (path, raw) in overrides {
        apply_override(&mut tree, path, raw)?;
    }
    let mut config: RunConfig =
        serde_json::from_value(tree).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        config.scene.seed = s;
        config.proxy.seed = s;
    }
    Ok(config)
}
