//! Markerless point servoing on the dense Jacobian field.

use nalgebra::{DMatrix, Matrix2, Matrix2xX, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::DenseJacobianField;
use crate::field::{GridShape, PixelCoord};
use crate::flow::FlowField;

#[derive(Debug, Error, PartialEq)]
pub enum ServoError {
    #[error("invalid servo configuration: {0}")]
    InvalidConfig(String),
    #[error("active joint mask has {got} entries, field has {expected} joints")]
    JointCount { expected: usize, got: usize },
    #[error("non-finite tracked point")]
    NonFinitePoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPoint {
    pub p_self: PixelCoord,
    pub p_target: PixelCoord,
}

impl TrackedPoint {
    pub fn new(p_self: PixelCoord, p_target: PixelCoord) -> Result<Self, ServoError> {
        if !(p_self.is_finite() && p_target.is_finite()) {
            return Err(ServoError::NonFinitePoint);
        }
        Ok(Self { p_self, p_target })
    }

    /// `p_target - p_self`.
    pub fn error(&self) -> [f64; 2] {
        [
            self.p_target.x - self.p_self.x,
            self.p_target.y - self.p_self.y,
        ]
    }

    pub fn error_norm(&self) -> f64 {
        self.p_self.distance(self.p_target)
    }
}

const ADVECT_ITERATIONS: usize = 4;

/// Move `p_self` to the current-frame position `x` with `x - u(x) = p_self`.
///
/// The flow is indexed on the current frame, so this is a short fixed-point
/// iteration `x <- p_self + u(x)` starting from `x = p_self`.
pub fn advect_point(pt: TrackedPoint, flow: &FlowField) -> TrackedPoint {
    let shape: GridShape = flow.shape();
    let mut x = pt.p_self;
    for _ in 0..ADVECT_ITERATIONS {
        let u = flow.interpolate(x);
        let next = shape.clamp(pt.p_self.offset(u[0], u[1]));
        if next.distance(x) < 1e-9 {
            x = next;
            break;
        }
        x = next;
    }
    TrackedPoint {
        p_self: x,
        p_target: pt.p_target,
    }
}

/// Bilinearly interpolated 2xN Jacobian at `at`.
pub fn jacobian_at(field: &DenseJacobianField, at: PixelCoord) -> Matrix2xX<f64> {
    let n = field.n_joints();
    let rows = field.jacobian_at(at);
    Matrix2xX::from_fn(n, |r, c| rows[r * n + c])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoConfig {
    pub k_p: f64,
    #[serde(default)]
    pub damping: f64,
    /// Per-joint enable mask; empty means every joint is active.
    #[serde(default)]
    pub active_joints: Vec<bool>,
    /// Singular values below `rcond * sigma_max` are dropped from the
    /// pseudoinverse.
    #[serde(default = "default_rcond")]
    pub rcond: f64,
    /// Clamp on `max |dq_m|`; `null` disables it.
    #[serde(default = "default_max_step")]
    pub max_step: Option<f64>,
}

fn default_rcond() -> f64 {
    1e-6
}

fn default_max_step() -> Option<f64> {
    Some(0.1)
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            k_p: 0.034,
            damping: 0.0,
            active_joints: Vec::new(),
            rcond: default_rcond(),
            max_step: default_max_step(),
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        if !(self.k_p.is_finite() && self.k_p > 0.0) {
            return Err(ServoError::InvalidConfig(format!(
                "k_p must be > 0, got {}",
                self.k_p
            )));
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return Err(ServoError::InvalidConfig(format!(
                "damping must be >= 0, got {}",
                self.damping
            )));
        }
        if !(self.rcond.is_finite() && (0.0..1.0).contains(&self.rcond)) {
            return Err(ServoError::InvalidConfig(format!(
                "rcond must be in [0, 1), got {}",
                self.rcond
            )));
        }
        if let Some(m) = self.max_step {
            if !(m.is_finite() && m > 0.0) {
                return Err(ServoError::InvalidConfig(format!(
                    "max_step must be > 0, got {m}"
                )));
            }
        }
        Ok(())
    }

    fn active(&self, n: usize) -> Result<Vec<usize>, ServoError> {
        if self.active_joints.is_empty() {
            return Ok((0..n).collect());
        }
        if self.active_joints.len() != n {
            return Err(ServoError::JointCount {
                expected: n,
                got: self.active_joints.len(),
            });
        }
        Ok((0..n).filter(|&m| self.active_joints[m]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoCommand {
    pub dq: Vec<f64>,
    /// Set when every singular value of the active Jacobian is below 1e-12.
    pub degenerate: bool,
}

const SIGMA_FLOOR: f64 = 1e-12;

/// Pseudoinverse of a 2xM matrix. Returns `None` when it is numerically zero.
fn pseudo_inverse(j: &DMatrix<f64>, damping: f64, rcond: f64) -> Option<DMatrix<f64>> {
    let svd = j.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if sigma_max < SIGMA_FLOOR {
        return None;
    }
    if damping > 0.0 {
        let jt = j.transpose();
        let jjt = j * &jt;
        let m = Matrix2::new(
            jjt[(0, 0)] + damping * damping,
            jjt[(0, 1)],
            jjt[(1, 0)],
            jjt[(1, 1)] + damping * damping,
        );
        let inv = m.try_inverse()?;
        let inv = DMatrix::from_fn(2, 2, |r, c| inv[(r, c)]);
        return Some(jt * inv);
    }
    let cutoff = rcond * sigma_max;
    let u = svd.u.as_ref()?;
    let v_t = svd.v_t.as_ref()?;
    let mut pinv = DMatrix::zeros(j.ncols(), j.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            pinv += v_t.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    Some(pinv)
}

/// `dq = k_p J^# (p_target - p_self)` on the active joints.
pub fn servo_step(
    pt: &TrackedPoint,
    field: &DenseJacobianField,
    cfg: &ServoConfig,
) -> Result<ServoCommand, ServoError> {
    cfg.validate()?;
    let n = field.n_joints();
    let active = cfg.active(n)?;
    let mut dq = vec![0.0; n];
    if active.is_empty() {
        return Ok(ServoCommand {
            dq,
            degenerate: true,
        });
    }
    let full = jacobian_at(field, pt.p_self);
    let j = DMatrix::from_fn(2, active.len(), |r, c| full[(r, active[c])]);
    let Some(pinv) = pseudo_inverse(&j, cfg.damping, cfg.rcond) else {
        return Ok(ServoCommand {
            dq,
            degenerate: true,
        });
    };
    let e = pt.error();
    let step = pinv * Vector2::new(e[0], e[1]) * cfg.k_p;
    for (c, &m) in active.iter().enumerate() {
        dq[m] = step[c];
    }
    if let Some(limit) = cfg.max_step {
        let peak = dq.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        if peak > limit {
            let scale = limit / peak;
            dq.iter_mut().for_each(|d| *d *= scale);
        }
    }
    Ok(ServoCommand {
        dq,
        degenerate: false,
    })
}

/// One row of the servo log.
#[derive(Debug, Clone, PartialEq)]
pub struct ServoLogRow {
    pub frame_index: u64,
    pub point: TrackedPoint,
    pub command: ServoCommand,
}

impl ServoLogRow {
    pub fn csv_header(n_joints: usize) -> String {
        let mut h =
            String::from("frame_index,p_self_x,p_self_y,p_target_x,p_target_y,error_norm_px");
        for m in 0..n_joints {
            h.push_str(&format!(",dq_{m}"));
        }
        h.push_str(",degenerate_flag");
        h
    }

    pub fn csv_row(&self) -> String {
        let p = &self.point;
        let mut row = format!(
            "{},{},{},{},{},{}",
            self.frame_index,
            p.p_self.x,
            p.p_self.y,
            p.p_target.x,
            p.p_target.y,
            p.error_norm()
        );
        for d in &self.command.dq {
            row.push_str(&format!(",{d}"));
        }
        row.push_str(if self.command.degenerate { ",1" } else { ",0" });
        row
    }
}
