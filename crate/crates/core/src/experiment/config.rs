use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::estimator::{DijeConfig, NoiseParams, WarpMode};
use crate::field::{GridShape, PixelCoord};
use crate::flow::{EstimatedFlow, FlowProvider, LkParams, OracleFlow};
use crate::selfrecog::SelfRecogConfig;
use crate::servo::ServoConfig;
use crate::sim::{ArmModel, ArmScene, Attachment, CameraModel, Distractor};

fn config_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Frames processed after the initial one.
    pub frames: u64,
    pub scene: SceneConfig,
    #[serde(default)]
    pub noise: NoiseParams,
    pub flow: FlowConfig,
    #[serde(default)]
    pub warp: WarpConfig,
    #[serde(default)]
    pub excitation: ExcitationConfig,
    #[serde(default)]
    pub selfrecog: Option<SelfRecogConfig>,
    #[serde(default)]
    pub servo: Option<ServoBlock>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub pixels_per_meter: f64,
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub arm: ArmModel,
    pub q0: Vec<f64>,
    pub camera: CameraConfig,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    #[serde(default)]
    pub pixel_noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FlowConfig {
    Oracle {
        #[serde(default)]
        noise_std: f64,
    },
    Estimator {
        #[serde(default = "default_levels")]
        levels: usize,
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default = "default_min_eigen")]
        min_eigen: f64,
    },
}

fn default_levels() -> usize {
    LkParams::default().levels
}
fn default_window() -> usize {
    LkParams::default().window
}
fn default_iterations() -> usize {
    LkParams::default().iterations
}
fn default_min_eigen() -> f64 {
    LkParams::default().min_eigen
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpConfig {
    pub mode: WarpMode,
    #[serde(default = "yes")]
    pub warp_variance: bool,
}

fn yes() -> bool {
    true
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            mode: WarpMode::Predicted,
            warp_variance: true,
        }
    }
}

/// Open-loop joint trajectory added on top of the servo commands:
/// `q_m(k) = q0_m + A_m (sin(2 pi k / T_m + phi_m) - sin(phi_m))`, active
/// for frames `k <= stop_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExcitationConfig {
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    #[serde(default)]
    pub periods: Vec<f64>,
    #[serde(default)]
    pub phases: Vec<f64>,
    #[serde(default)]
    pub stop_frame: Option<u64>,
}

impl ExcitationConfig {
    /// Offset from `q0` at frame `k`.
    pub fn offset(&self, joint: usize, frame: u64) -> f64 {
        let a = self.amplitudes.get(joint).copied().unwrap_or(0.0);
        if a == 0.0 {
            return 0.0;
        }
        let t = self.periods[joint];
        let phi = self.phases.get(joint).copied().unwrap_or(0.0);
        let k = self.stop_frame.map_or(frame, |s| frame.min(s)) as f64;
        a * ((2.0 * PI * k / t + phi).sin() - phi.sin())
    }

    fn validate(&self, n: usize) -> Result<(), ExperimentError> {
        if self.amplitudes.is_empty() {
            return Ok(());
        }
        if self.amplitudes.len() != n || self.periods.len() != n {
            return Err(config_err(format!(
                "excitation needs {n} amplitudes and periods, got {} and {}",
                self.amplitudes.len(),
                self.periods.len()
            )));
        }
        if !self.phases.is_empty() && self.phases.len() != n {
            return Err(config_err(format!("excitation needs {n} phases")));
        }
        if self
            .amplitudes
            .iter()
            .chain(&self.phases)
            .any(|v| !v.is_finite())
            || self.periods.iter().any(|t| !(t.is_finite() && *t > 0.0))
        {
            return Err(config_err(
                "excitation values must be finite with periods > 0",
            ));
        }
        Ok(())
    }
}

/// Scheduled servo event: a new target, optionally with `p_self` moved to a
/// different point on the arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub frame: u64,
    pub target: [f64; 2],
    #[serde(default)]
    pub redefine: Option<Attachment>,
    /// Control steps allowed to bring the error under `servo_error_max`.
    #[serde(default)]
    pub deadline_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoBlock {
    pub law: ServoConfig,
    /// Frames between control steps; each command is spread evenly over them.
    #[serde(default = "default_cadence")]
    pub cadence: u64,
    /// Control starts at this frame.
    #[serde(default = "default_bootstrap")]
    pub bootstrap_frames: u64,
    /// Initial `p_self`.
    pub attach: Attachment,
    pub waypoints: Vec<Waypoint>,
}

fn default_cadence() -> u64 {
    21
}
fn default_bootstrap() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Max median relative Frobenius error at the last frame, over pixels on
    /// the arm in at least `visibility_fraction` of frames.
    pub jacobian_error_max: Option<f64>,
    pub visibility_fraction: f64,
    /// Min mean IoU over frames after `iou_warmup` where the tip moved at
    /// least `iou_min_tip_motion` px.
    pub iou_min: Option<f64>,
    pub iou_warmup: u64,
    pub iou_min_tip_motion: f64,
    /// Max mean distractor false-positive fraction over the last `fp_window` frames.
    pub distractor_fp_max: Option<f64>,
    pub fp_window: u64,
    /// Max servo error at each waypoint deadline.
    pub servo_error_max: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            jacobian_error_max: None,
            visibility_fraction: 0.8,
            iou_min: None,
            iou_warmup: 150,
            iou_min_tip_motion: 0.5,
            distractor_fp_max: None,
            fp_window: 100,
            servo_error_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub dump_frames: bool,
    pub dump_fields: bool,
    pub dump_masks: bool,
    /// Dump every n-th frame.
    pub dump_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            dump_frames: false,
            dump_fields: false,
            dump_masks: false,
            dump_every: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let scene = self.initial_scene()?;
        let n = scene.n_joints();
        self.noise.validate().map_err(config_err)?;
        self.excitation.validate(n)?;
        self.flow_provider()?;
        if let Some(s) = &self.selfrecog {
            s.validate().map_err(config_err)?;
        }
        if let Some(servo) = &self.servo {
            servo.law.validate().map_err(config_err)?;
            if !servo.law.active_joints.is_empty() && servo.law.active_joints.len() != n {
                return Err(config_err(format!("active_joints needs {n} entries")));
            }
            if servo.cadence == 0 {
                return Err(config_err("servo cadence must be >= 1"));
            }
            scene.forward_points(servo.attach).map_err(config_err)?;
            let mut last = 0;
            for w in &servo.waypoints {
                if w.frame < last {
                    return Err(config_err("waypoints must be in frame order"));
                }
                last = w.frame;
                if !w.target.iter().all(|v| v.is_finite()) {
                    return Err(config_err("waypoint target must be finite"));
                }
                if let Some(a) = w.redefine {
                    scene.forward_points(a).map_err(config_err)?;
                }
            }
        }
        let t = &self.thresholds;
        if !(0.0..=1.0).contains(&t.visibility_fraction) {
            return Err(config_err("visibility_fraction must be in [0, 1]"));
        }
        if self.output.dump_every == 0 {
            return Err(config_err("dump_every must be >= 1"));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<GridShape, ExperimentError> {
        GridShape::new(self.scene.camera.width, self.scene.camera.height).map_err(config_err)
    }

    pub fn initial_scene(&self) -> Result<ArmScene, ExperimentError> {
        let c = &self.scene.camera;
        let camera = CameraModel::new(
            c.pixels_per_meter,
            PixelCoord::new(c.principal_point[0], c.principal_point[1]),
            self.shape()?,
        )
        .map_err(config_err)?;
        let mut scene = ArmScene::new(self.scene.arm.clone(), self.scene.q0.clone(), camera)
            .map_err(config_err)?
            .with_distractors(self.scene.distractors.clone())
            .map_err(config_err)?
            .with_texture_seed(self.seed);
        let noise = self.scene.pixel_noise_std;
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(config_err("pixel_noise_std must be >= 0"));
        }
        scene.pixel_noise_std = noise;
        Ok(scene)
    }

    pub fn dije_config(&self) -> DijeConfig {
        DijeConfig {
            noise: self.noise,
            mode: self.warp.mode,
            warp_variance: self.warp.warp_variance,
        }
    }

    pub fn flow_provider(&self) -> Result<Box<dyn FlowProvider>, ExperimentError> {
        match self.flow {
            FlowConfig::Oracle { noise_std } => {
                if !(noise_std.is_finite() && noise_std >= 0.0) {
                    return Err(config_err("flow noise_std must be >= 0"));
                }
                Ok(Box::new(OracleFlow {
                    noise_std,
                    seed: self.seed ^ 0xF10E,
                }))
            }
            FlowConfig::Estimator {
                levels,
                window,
                iterations,
                min_eigen,
            } => {
                let params = LkParams {
                    levels,
                    window,
                    iterations,
                    min_eigen,
                };
                params.validate().map_err(config_err)?;
                Ok(Box::new(EstimatedFlow { params }))
            }
        }
    }
}
