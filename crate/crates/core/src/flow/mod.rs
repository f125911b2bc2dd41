//! Dense optical flow between consecutive frames.
//!
//! Flow is indexed on the *current* frame: `u_i` is the displacement of the
//! scene point visible at pixel `x_i`, so that point was at `x_i - u_i` in the
//! previous frame. Providers share the [`FlowProvider`] interface so the
//! estimator does not care where flow comes from.

mod lk;

pub use lk::{flow_estimate, LkParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::field::{FieldError, GridShape, PixelCoord, VectorField};
use crate::sim::{ArmScene, Hit};

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("frame shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(GridShape, GridShape),
    #[error("invalid estimator parameters: {0}")]
    InvalidParams(String),
    #[error("intensity {value} at pixel {index} outside [0, 1]")]
    IntensityRange { index: usize, value: f64 },
    #[error("provider needs rendered frames")]
    MissingFrames,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    field: VectorField,
    index: u64,
}

impl Frame {
    pub fn new(shape: GridShape, intensity: Vec<f64>, index: u64) -> Result<Self, FlowError> {
        if let Some((i, &v)) = intensity
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(FlowError::IntensityRange { index: i, value: v });
        }
        Ok(Self {
            field: VectorField::from_vec(shape, 1, intensity)?,
            index,
        })
    }

    pub fn from_fn<F>(shape: GridShape, index: u64, f: F) -> Result<Self, FlowError>
    where
        F: Fn(PixelCoord) -> f64 + Sync,
    {
        let field = VectorField::from_fn(shape, 1, |p, o| o[0] = f(p))?;
        Self::new(shape, field.into_vec(), index)
    }

    pub fn constant(shape: GridShape, value: f64, index: u64) -> Result<Self, FlowError> {
        Self::new(shape, vec![value; shape.len()], index)
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.field.shape()
    }

    #[inline]
    pub fn index(&self) -> u64 {
        self.index
    }

    #[inline]
    pub fn intensities(&self) -> &[f64] {
        self.field.as_slice()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.field.at(x, y)[0]
    }
}

/// Per-pixel displacement in pixels/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    field: VectorField,
}

impl FlowField {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            field: VectorField::zeros(shape, 2).expect("dim 2"),
        }
    }

    pub fn constant(shape: GridShape, u: [f64; 2]) -> Self {
        let mut f = Self::zeros(shape);
        for px in f.field.as_mut_slice().chunks_exact_mut(2) {
            px.copy_from_slice(&u);
        }
        f
    }

    pub fn from_field(field: VectorField) -> Result<Self, FieldError> {
        if field.dim() != 2 {
            return Err(FieldError::LengthMismatch {
                width: field.shape().width(),
                height: field.shape().height(),
                dim: 2,
                got: field.dim(),
            });
        }
        Ok(Self { field })
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.field.shape()
    }

    #[inline]
    pub fn field(&self) -> &VectorField {
        &self.field
    }

    #[inline]
    pub fn get(&self, i: usize) -> [f64; 2] {
        let p = self.field.pixel(i);
        [p[0], p[1]]
    }

    #[inline]
    pub fn interpolate(&self, at: PixelCoord) -> [f64; 2] {
        let mut out = [0.0; 2];
        self.field.interpolate_into(at, &mut out);
        out
    }
}

/// True displacement of the scene point visible at `p` in `curr`.
///
/// The foremost layer at `p` decides: distractors move rigidly, arm points
/// are mapped back through their link-local coordinates, and the background
/// is static.
pub fn oracle_flow_at(prev: &ArmScene, curr: &ArmScene, p: PixelCoord) -> [f64; 2] {
    let (o_curr, a_curr) = curr.arm.chain(&curr.q);
    let (o_prev, a_prev) = prev.arm.chain(&prev.q);
    OracleCtx {
        prev,
        curr,
        o_curr: &o_curr,
        a_curr: &a_curr,
        o_prev: &o_prev,
        a_prev: &a_prev,
    }
    .flow_at(p)
}

struct OracleCtx<'a> {
    prev: &'a ArmScene,
    curr: &'a ArmScene,
    o_curr: &'a [[f64; 2]],
    a_curr: &'a [f64],
    o_prev: &'a [[f64; 2]],
    a_prev: &'a [f64],
}

impl OracleCtx<'_> {
    fn flow_at(&self, p: PixelCoord) -> [f64; 2] {
        let w = self.curr.camera.unproject(p);
        match self.curr.hit_test(w, self.o_curr, self.a_curr) {
            Hit::Background => [0.0, 0.0],
            Hit::Distractor { index, .. } => {
                let now = self
                    .curr
                    .camera
                    .project(self.curr.distractors[index].center_at(self.curr.frame_index));
                let before = self
                    .prev
                    .camera
                    .project(self.prev.distractors[index].center_at(self.prev.frame_index));
                [now.x - before.x, now.y - before.y]
            }
            Hit::Link {
                link,
                along,
                across,
            } => {
                let wp = self
                    .prev
                    .link_point(link, along, across, self.o_prev, self.a_prev);
                let before = self.prev.camera.project(wp);
                [p.x - before.x, p.y - before.y]
            }
        }
    }
}

/// Dense ground-truth flow from `prev` to `curr`.
pub fn flow_oracle(prev: &ArmScene, curr: &ArmScene) -> FlowField {
    let (o_curr, a_curr) = curr.arm.chain(&curr.q);
    let (o_prev, a_prev) = prev.arm.chain(&prev.q);
    let ctx = OracleCtx {
        prev,
        curr,
        o_curr: &o_curr,
        a_curr: &a_curr,
        o_prev: &o_prev,
        a_prev: &a_prev,
    };
    let field = VectorField::from_fn(curr.shape(), 2, |p, o| {
        o.copy_from_slice(&ctx.flow_at(p));
    })
    .expect("dim 2");
    FlowField { field }
}

/// Everything a provider may look at for one frame pair.
#[derive(Debug, Clone, Copy)]
pub struct FlowInput<'a> {
    pub prev_scene: &'a ArmScene,
    pub curr_scene: &'a ArmScene,
    pub prev_frame: Option<&'a Frame>,
    pub curr_frame: Option<&'a Frame>,
}

pub trait FlowProvider: Send + Sync {
    /// Whether `compute` needs rendered frames in its input.
    fn needs_frames(&self) -> bool;

    fn compute(&self, input: &FlowInput<'_>) -> Result<FlowField, FlowError>;
}

/// Simulator ground truth, optionally with additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleFlow {
    pub noise_std: f64,
    pub seed: u64,
}

impl OracleFlow {
    pub fn exact() -> Self {
        Self {
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl FlowProvider for OracleFlow {
    fn needs_frames(&self) -> bool {
        false
    }

    fn compute(&self, input: &FlowInput<'_>) -> Result<FlowField, FlowError> {
        let (a, b) = (input.prev_scene.shape(), input.curr_scene.shape());
        if a != b {
            return Err(FlowError::ShapeMismatch(a, b));
        }
        let mut flow = flow_oracle(input.prev_scene, input.curr_scene);
        if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.seed
                    ^ input
                        .curr_scene
                        .frame_index
                        .wrapping_mul(0xA24B_AED4_963E_E407),
            );
            let normal = Normal::new(0.0, self.noise_std)
                .map_err(|e| FlowError::InvalidParams(e.to_string()))?;
            for v in flow.field.as_mut_slice() {
                *v += normal.sample(&mut rng);
            }
        }
        Ok(flow)
    }
}

/// Image-based pyramidal local least-squares estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatedFlow {
    pub params: LkParams,
}

impl FlowProvider for EstimatedFlow {
    fn needs_frames(&self) -> bool {
        true
    }

    fn compute(&self, input: &FlowInput<'_>) -> Result<FlowField, FlowError> {
        match (input.prev_frame, input.curr_frame) {
            (Some(prev), Some(curr)) => flow_estimate(prev, curr, &self.params),
            _ => Err(FlowError::MissingFrames),
        }
    }
}
