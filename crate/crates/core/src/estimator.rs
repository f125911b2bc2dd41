//! Dense image Jacobian estimation.
//!
//! Every pixel carries a 2xN Jacobian (x-row then y-row, row-major) and a
//! single N-vector of variances shared by both rows, so the per-pixel state is
//! `3N` contiguous scalars. One step is a warp of the previous field to the
//! current frame followed by an independent Kalman update at every pixel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, GridShape, PixelCoord, VectorField};
use crate::flow::FlowField;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("observed-flow warp requested without a flow field")]
    MissingFlow,
    #[error("shape mismatch: field {field:?}, flow {flow:?}")]
    ShapeMismatch { field: GridShape, flow: GridShape },
    #[error("expected {expected} joints, got {got}")]
    JointCount { expected: usize, got: usize },
    #[error("joint sample must be non-empty and finite")]
    InvalidJointSample,
    #[error("invalid noise parameters: q_process = {q_process}, r_obs = {r_obs}")]
    InvalidNoise { q_process: f64, r_obs: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Joint displacement between two consecutive frames (radians/frame).
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    qdot: Vec<f64>,
}

impl JointSample {
    pub fn new(qdot: Vec<f64>) -> Result<Self, EstimatorError> {
        if qdot.is_empty() || qdot.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::InvalidJointSample);
        }
        Ok(Self { qdot })
    }

    pub fn zeros(n_joints: usize) -> Self {
        Self {
            qdot: vec![0.0; n_joints.max(1)],
        }
    }

    #[inline]
    pub fn n_joints(&self) -> usize {
        self.qdot.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.qdot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub q_process: f64,
    pub r_obs: f64,
}

impl NoiseParams {
    pub fn new(q_process: f64, r_obs: f64) -> Result<Self, EstimatorError> {
        let n = Self { q_process, r_obs };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.q_process.is_finite() && self.q_process >= 0.0)
            || !(self.r_obs.is_finite() && self.r_obs > 0.0)
        {
            return Err(EstimatorError::InvalidNoise {
                q_process: self.q_process,
                r_obs: self.r_obs,
            });
        }
        Ok(())
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            q_process: 1e-4,
            r_obs: 1.0,
        }
    }
}

/// How the previous field is carried to the current frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpMode {
    /// Displace by the flow the current estimate predicts, `J_i q̇`.
    Predicted,
    /// Displace by the measured flow `u_i`.
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DijeConfig {
    pub noise: NoiseParams,
    pub mode: WarpMode,
    /// Warp the variance channels along with the Jacobian. When false each
    /// pixel keeps its own variance.
    pub warp_variance: bool,
}

impl Default for DijeConfig {
    fn default() -> Self {
        Self {
            noise: NoiseParams::default(),
            mode: WarpMode::Predicted,
            warp_variance: true,
        }
    }
}

/// Per-pixel Jacobians and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseJacobianField {
    n_joints: usize,
    state: VectorField,
}

impl DenseJacobianField {
    /// Zero Jacobians, unit variances.
    pub fn init(shape: GridShape, n_joints: usize) -> Result<Self, EstimatorError> {
        if n_joints == 0 {
            return Err(EstimatorError::JointCount {
                expected: 1,
                got: 0,
            });
        }
        let mut state = VectorField::zeros(shape, 3 * n_joints)?;
        for px in state.as_mut_slice().chunks_exact_mut(3 * n_joints) {
            px[2 * n_joints..].fill(1.0);
        }
        Ok(Self { n_joints, state })
    }

    /// Wrap a raw `3N`-channel state; variances must be non-negative.
    pub fn from_state(n_joints: usize, state: VectorField) -> Result<Self, EstimatorError> {
        if n_joints == 0 || state.dim() != 3 * n_joints {
            return Err(EstimatorError::JointCount {
                expected: state.dim() / 3,
                got: n_joints,
            });
        }
        if !state.is_finite() {
            return Err(FieldError::NonFinite(
                state
                    .as_slice()
                    .iter()
                    .position(|v| !v.is_finite())
                    .unwrap_or(0),
            )
            .into());
        }
        if state
            .pixels()
            .any(|px| px[2 * n_joints..].iter().any(|v| *v < 0.0))
        {
            return Err(EstimatorError::InvalidNoise {
                q_process: 0.0,
                r_obs: 0.0,
            });
        }
        Ok(Self { n_joints, state })
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.state.shape()
    }

    #[inline]
    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    /// Scalars stored per pixel: `2N` Jacobian entries plus `N` variances.
    #[inline]
    pub fn scalars_per_pixel(&self) -> usize {
        self.state.dim()
    }

    #[inline]
    pub fn state(&self) -> &VectorField {
        &self.state
    }

    /// Row-major 2xN Jacobian at pixel `i`.
    #[inline]
    pub fn jac(&self, i: usize) -> &[f64] {
        &self.state.pixel(i)[..2 * self.n_joints]
    }

    #[inline]
    pub fn var(&self, i: usize) -> &[f64] {
        &self.state.pixel(i)[2 * self.n_joints..]
    }

    /// Jacobian rows as `2N`-vectors, for clustering.
    pub fn jacobian_vectors(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.state.pixels().map(move |px| &px[..2 * self.n_joints])
    }

    /// Bilinear interpolation of the Jacobian channels at `at`.
    pub fn jacobian_at(&self, at: PixelCoord) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.n_joints];
        self.state.interpolate_into(at, &mut out);
        out
    }

    fn check_joints(&self, qdot: &JointSample) -> Result<(), EstimatorError> {
        if qdot.n_joints() != self.n_joints {
            return Err(EstimatorError::JointCount {
                expected: self.n_joints,
                got: qdot.n_joints(),
            });
        }
        Ok(())
    }

    fn check_flow(&self, flow: &FlowField) -> Result<(), EstimatorError> {
        if flow.shape() != self.shape() {
            return Err(EstimatorError::ShapeMismatch {
                field: self.shape(),
                flow: flow.shape(),
            });
        }
        Ok(())
    }
}

pub fn init_field(shape: GridShape, n_joints: usize) -> Result<DenseJacobianField, EstimatorError> {
    DenseJacobianField::init(shape, n_joints)
}

/// `J q̇` for a row-major 2xN Jacobian.
#[inline]
pub fn predicted_flow(jac: &[f64], qdot: &[f64]) -> [f64; 2] {
    let n = qdot.len();
    let mut u = [0.0; 2];
    for (m, q) in qdot.iter().enumerate() {
        u[0] += jac[m] * q;
        u[1] += jac[n + m] * q;
    }
    u
}

/// Prediction step: carry the previous field to the current frame and
/// inflate the variances by `q_process`.
pub fn predict_warp(
    field: &DenseJacobianField,
    qdot: &JointSample,
    observed_flow: Option<&FlowField>,
    cfg: &DijeConfig,
) -> Result<DenseJacobianField, EstimatorError> {
    field.check_joints(qdot)?;
    cfg.noise.validate()?;
    let shape = field.shape();
    let n = field.n_joints;
    let q = qdot.as_slice();
    let flow = match cfg.mode {
        WarpMode::Observed => {
            let flow = observed_flow.ok_or(EstimatorError::MissingFlow)?;
            field.check_flow(flow)?;
            Some(flow)
        }
        WarpMode::Predicted => None,
    };
    let source = |i: usize| {
        let x = shape.coord(i);
        let u = match flow {
            Some(flow) => flow.get(i),
            None => predicted_flow(field.jac(i), q),
        };
        PixelCoord::new(x.x - u[0], x.y - u[1])
    };

    let mut out = vec![0.0; shape.len() * 3 * n];
    let src = &field.state;
    out.par_chunks_mut(3 * n).enumerate().for_each(|(i, px)| {
        let at = source(i);
        if cfg.warp_variance {
            src.interpolate_into(at, px);
        } else {
            src.interpolate_into(at, &mut px[..2 * n]);
            px[2 * n..].copy_from_slice(field.var(i));
        }
        for p in &mut px[2 * n..] {
            *p += cfg.noise.q_process;
        }
    });
    Ok(DenseJacobianField {
        n_joints: n,
        state: VectorField::from_vec(shape, 3 * n, out)?,
    })
}

/// Kalman update of one pixel in place.
///
/// With `d = pᵀ(q̇⊙q̇) + r`, the Jacobian moves by the outer product of the
/// innovation `u - J q̇` and the gain `(p⊙q̇)/d`, and each variance shrinks by
/// the factor `1 - p_m q̇_m² / d`.
#[inline]
pub fn kf_update_pixel(jac: &mut [f64], var: &mut [f64], qdot: &[f64], u: [f64; 2], r_obs: f64) {
    let n = qdot.len();
    let denom = var.iter().zip(qdot).map(|(p, q)| p * q * q).sum::<f64>() + r_obs;
    let pred = predicted_flow(jac, qdot);
    let e = [u[0] - pred[0], u[1] - pred[1]];
    for m in 0..n {
        let g = var[m] * qdot[m] / denom;
        jac[m] += e[0] * g;
        jac[n + m] += e[1] * g;
    }
    for (p, q) in var.iter_mut().zip(qdot) {
        *p *= 1.0 - *p * q * q / denom;
    }
}

/// Update step applied to every pixel independently.
pub fn kf_update(
    field: &DenseJacobianField,
    qdot: &JointSample,
    flow: &FlowField,
    noise: &NoiseParams,
) -> Result<DenseJacobianField, EstimatorError> {
    let mut out = field.clone();
    kf_update_in_place(&mut out, qdot, flow, noise)?;
    Ok(out)
}

pub fn kf_update_in_place(
    field: &mut DenseJacobianField,
    qdot: &JointSample,
    flow: &FlowField,
    noise: &NoiseParams,
) -> Result<(), EstimatorError> {
    field.check_joints(qdot)?;
    field.check_flow(flow)?;
    noise.validate()?;
    let n = field.n_joints;
    let q = qdot.as_slice();
    let r = noise.r_obs;
    field
        .state
        .as_mut_slice()
        .par_chunks_mut(3 * n)
        .enumerate()
        .for_each(|(i, px)| {
            let (jac, var) = px.split_at_mut(2 * n);
            kf_update_pixel(jac, var, q, flow.get(i), r);
        });
    Ok(())
}

/// Warp then update. The input field is left untouched.
pub fn dije_step(
    field: &DenseJacobianField,
    qdot: &JointSample,
    flow: &FlowField,
    cfg: &DijeConfig,
) -> Result<DenseJacobianField, EstimatorError> {
    let mut next = predict_warp(field, qdot, Some(flow), cfg)?;
    kf_update_in_place(&mut next, qdot, flow, &cfg.noise)?;
    Ok(next)
}

/// Fixed-weight update: `ΔJ = (u - J q̇)(q̇ᵀW)/(ρ + q̇ᵀ W q̇)` with diagonal `W`.
///
/// Equals the Kalman Jacobian update when the variances are held at `W` and
/// the observation noise is `ρ`.
pub fn hosoda_update(
    jac: &[f64],
    qdot: &JointSample,
    u: [f64; 2],
    weights: &[f64],
    rho: f64,
) -> Vec<f64> {
    let q = qdot.as_slice();
    let n = q.len();
    assert_eq!(jac.len(), 2 * n, "jacobian must be 2xN");
    assert_eq!(weights.len(), n, "one weight per joint");
    assert!(rho > 0.0, "rho must be positive");
    let pred = predicted_flow(jac, q);
    let e = [u[0] - pred[0], u[1] - pred[1]];
    let denom = rho + q.iter().zip(weights).map(|(q, w)| q * w * q).sum::<f64>();
    let mut out = jac.to_vec();
    for m in 0..n {
        let row = q[m] * weights[m] / denom;
        out[m] += e[0] * row;
        out[n + m] += e[1] * row;
    }
    out
}

/// Stateful wrapper that owns the current field.
#[derive(Debug, Clone)]
pub struct Dije {
    pub config: DijeConfig,
    field: DenseJacobianField,
}

impl Dije {
    pub fn new(
        shape: GridShape,
        n_joints: usize,
        config: DijeConfig,
    ) -> Result<Self, EstimatorError> {
        config.noise.validate()?;
        Ok(Self {
            config,
            field: DenseJacobianField::init(shape, n_joints)?,
        })
    }

    pub fn field(&self) -> &DenseJacobianField {
        &self.field
    }

    pub fn step(
        &mut self,
        qdot: &JointSample,
        flow: &FlowField,
    ) -> Result<&DenseJacobianField, EstimatorError> {
        self.field = dije_step(&self.field, qdot, flow, &self.config)?;
        Ok(&self.field)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(w: usize, h: usize) -> GridShape {
        GridShape::new(w, h).unwrap()
    }

    fn qd(v: &[f64]) -> JointSample {
        JointSample::new(v.to_vec()).unwrap()
    }

    #[test]
    fn init_is_zero_jacobian_unit_variance() {
        let f = init_field(shape(4, 4), 2).unwrap();
        assert_eq!(f.scalars_per_pixel(), 6);
        for i in 0..16 {
            assert_eq!(f.jac(i), &[0.0; 4]);
            assert_eq!(f.var(i), &[1.0, 1.0]);
        }
        let f = init_field(shape(2, 2), 1).unwrap();
        assert!(f.jacobian_vectors().all(|j| j == [0.0, 0.0]));
        assert!((0..4).all(|i| f.var(i) == [1.0]));
        assert!(init_field(shape(2, 2), 0).is_err());
    }

    #[test]
    fn scalar_hand_case() {
        let mut jac = [0.0, 0.0];
        let mut var = [1.0];
        kf_update_pixel(&mut jac, &mut var, &[1.0], [1.0, 0.0], 1.0);
        assert_eq!(jac, [0.5, 0.0]);
        assert_eq!(var, [0.5]);
    }

    #[test]
    fn zero_excitation_is_a_no_op() {
        let mut jac = [1.5, -2.0, 0.25, 4.0];
        let mut var = [0.3, 0.7];
        kf_update_pixel(&mut jac, &mut var, &[0.0, 0.0], [3.0, -1.0], 1.0);
        assert_eq!(jac, [1.5, -2.0, 0.25, 4.0]);
        assert_eq!(var, [0.3, 0.7]);
    }

    #[test]
    fn zero_innovation_keeps_jacobian_but_shrinks_variance() {
        let mut jac = [2.0, -1.0, 0.5, 3.0];
        let q = [0.2, -0.4];
        let u = predicted_flow(&jac, &q);
        let mut var = [1.0, 1.0];
        kf_update_pixel(&mut jac, &mut var, &q, u, 1.0);
        assert_eq!(jac, [2.0, -1.0, 0.5, 3.0]);
        assert!(var[0] < 1.0 && var[1] < 1.0);
    }

    #[test]
    fn observed_mode_requires_flow() {
        let f = init_field(shape(3, 3), 1).unwrap();
        let cfg = DijeConfig {
            mode: WarpMode::Observed,
            ..Default::default()
        };
        assert_eq!(
            predict_warp(&f, &qd(&[0.1]), None, &cfg),
            Err(EstimatorError::MissingFlow)
        );
    }

    #[test]
    fn zero_qdot_predicted_warp_only_inflates_variance() {
        let mut f = init_field(shape(5, 4), 2).unwrap();
        for (i, px) in f.state.as_mut_slice().chunks_exact_mut(6).enumerate() {
            px[0] = i as f64;
            px[3] = -(i as f64) * 0.5;
        }
        let cfg = DijeConfig::default();
        let out = predict_warp(&f, &qd(&[0.0, 0.0]), None, &cfg).unwrap();
        for i in 0..20 {
            assert_eq!(out.jac(i), f.jac(i));
            assert_eq!(out.var(i), &[1.0 + 1e-4, 1.0 + 1e-4]);
        }
    }

    #[test]
    fn constant_field_is_warp_invariant() {
        let mut f = init_field(shape(6, 5), 2).unwrap();
        for px in f.state.as_mut_slice().chunks_exact_mut(6) {
            px[..4].copy_from_slice(&[3.0, -1.0, 2.0, 0.5]);
        }
        let cfg = DijeConfig::default();
        let out = predict_warp(&f, &qd(&[0.7, -0.3]), None, &cfg).unwrap();
        for i in 0..30 {
            assert_eq!(out.jac(i), &[3.0, -1.0, 2.0, 0.5]);
            assert!((out.var(i)[0] - (1.0 + 1e-4)).abs() < 1e-15);
        }
    }

    #[test]
    fn warp_without_variance_keeps_own_variance() {
        let mut f = init_field(shape(4, 3), 1).unwrap();
        for (i, px) in f.state.as_mut_slice().chunks_exact_mut(3).enumerate() {
            px[0] = (i % 4) as f64;
            px[2] = 0.1 * i as f64;
        }
        let cfg = DijeConfig {
            warp_variance: false,
            noise: NoiseParams::new(0.0, 1.0).unwrap(),
            ..Default::default()
        };
        let out = predict_warp(&f, &qd(&[0.5]), None, &cfg).unwrap();
        for i in 0..12 {
            assert_eq!(out.var(i), f.var(i));
        }
    }

    #[test]
    fn step_leaves_input_untouched() {
        let f = init_field(shape(3, 3), 1).unwrap();
        let before = f.clone();
        let flow = FlowField::constant(f.shape(), [1.0, 0.0]);
        let out = dije_step(&f, &qd(&[1.0]), &flow, &DijeConfig::default()).unwrap();
        assert_eq!(f, before);
        assert_ne!(out, before);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let f = init_field(shape(3, 3), 2).unwrap();
        let flow = FlowField::zeros(shape(3, 3));
        assert!(matches!(
            kf_update(&f, &qd(&[1.0]), &flow, &NoiseParams::default()),
            Err(EstimatorError::JointCount { .. })
        ));
        let other = FlowField::zeros(shape(4, 3));
        assert!(matches!(
            kf_update(&f, &qd(&[1.0, 0.0]), &other, &NoiseParams::default()),
            Err(EstimatorError::ShapeMismatch { .. })
        ));
        assert!(NoiseParams::new(1e-4, 0.0).is_err());
        assert!(NoiseParams::new(-1.0, 1.0).is_err());
        assert!(JointSample::new(vec![]).is_err());
        assert!(JointSample::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn hosoda_hand_case_and_zero_excitation() {
        let j = hosoda_update(&[0.0, 0.0], &qd(&[1.0]), [1.0, 0.0], &[1.0], 1.0);
        assert_eq!(j, vec![0.5, 0.0]);
        let j0 = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            hosoda_update(&j0, &qd(&[0.0, 0.0]), [5.0, 5.0], &[1.0, 2.0], 0.5),
            j0.to_vec()
        );
    }
}
