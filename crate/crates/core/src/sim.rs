//! Deterministic planar N-link arm world.
//!
//! World coordinates are meters with `y` up; the orthographic camera maps the
//! world origin to the principal point and flips `y`, so image rows grow
//! downwards. Links are capsules carrying a seeded texture attached to their
//! link-local frame, so the texture moves rigidly with the body.

use std::f64::consts::PI;

use nalgebra::Matrix2xX;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, GridShape, PixelCoord, VectorField};
use crate::flow::{flow_oracle, FlowField, Frame};
use crate::selfrecog::SelfMask;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("bad attachment: link {link}, offset {offset}")]
    BadAttachment { link: usize, offset: f64 },
    #[error("invalid arm model: {0}")]
    InvalidArm(String),
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("joint vector has {got} entries, arm has {expected} joints")]
    JointCount { expected: usize, got: usize },
    #[error("joint {joint} value {value} outside limits [{lo}, {hi}]")]
    OutsideLimits {
        joint: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
}

pub type World = [f64; 2];

/// Kinematic and geometric description of a planar revolute chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub link_widths: Vec<f64>,
    #[serde(default)]
    pub base_position: World,
    pub joint_limits: Vec<[f64; 2]>,
}

impl ArmModel {
    pub fn uniform(n_links: usize, length: f64, width: f64) -> Self {
        Self {
            link_lengths: vec![length; n_links],
            link_widths: vec![width; n_links],
            base_position: [0.0, 0.0],
            joint_limits: vec![[-PI, PI]; n_links],
        }
    }

    #[inline]
    pub fn n_links(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.n_links();
        if n == 0 {
            return Err(SimError::InvalidArm("arm needs at least one link".into()));
        }
        if self.link_widths.len() != n || self.joint_limits.len() != n {
            return Err(SimError::InvalidArm(format!(
                "{n} link lengths but {} widths and {} joint limits",
                self.link_widths.len(),
                self.joint_limits.len()
            )));
        }
        if self
            .link_lengths
            .iter()
            .any(|l| !(l.is_finite() && *l > 0.0))
        {
            return Err(SimError::InvalidArm("link lengths must be > 0".into()));
        }
        if self
            .link_widths
            .iter()
            .any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(SimError::InvalidArm("link widths must be > 0".into()));
        }
        if self
            .joint_limits
            .iter()
            .any(|[lo, hi]| lo.partial_cmp(hi).is_none_or(|o| o.is_gt()))
        {
            return Err(SimError::InvalidArm(
                "joint limits must satisfy lo <= hi".into(),
            ));
        }
        if !self.base_position.iter().all(|v| v.is_finite()) {
            return Err(SimError::InvalidArm("base position must be finite".into()));
        }
        Ok(())
    }

    /// Joint origins `o_0..o_n` (the last entry is the tip) and the cumulative
    /// link angles for configuration `q`.
    pub fn chain(&self, q: &[f64]) -> (Vec<World>, Vec<f64>) {
        let mut origins = Vec::with_capacity(self.n_links() + 1);
        let mut angles = Vec::with_capacity(self.n_links());
        let mut p = self.base_position;
        let mut theta = 0.0;
        origins.push(p);
        for (qi, len) in q.iter().zip(&self.link_lengths) {
            theta += qi;
            p = [p[0] + len * theta.cos(), p[1] + len * theta.sin()];
            angles.push(theta);
            origins.push(p);
        }
        (origins, angles)
    }
}

/// Orthographic planar camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub pixels_per_meter: f64,
    pub principal_point: PixelCoord,
    pub shape: GridShape,
}

impl CameraModel {
    pub fn new(
        pixels_per_meter: f64,
        principal_point: PixelCoord,
        shape: GridShape,
    ) -> Result<Self, SimError> {
        if !(pixels_per_meter.is_finite() && pixels_per_meter > 0.0) {
            return Err(SimError::InvalidCamera(
                "pixels_per_meter must be > 0".into(),
            ));
        }
        if !principal_point.is_finite() {
            return Err(SimError::InvalidCamera(
                "principal point must be finite".into(),
            ));
        }
        Ok(Self {
            pixels_per_meter,
            principal_point,
            shape,
        })
    }

    #[inline]
    pub fn project(&self, w: World) -> PixelCoord {
        PixelCoord::new(
            self.principal_point.x + self.pixels_per_meter * w[0],
            self.principal_point.y - self.pixels_per_meter * w[1],
        )
    }

    #[inline]
    pub fn unproject(&self, p: PixelCoord) -> World {
        [
            (p.x - self.principal_point.x) / self.pixels_per_meter,
            (self.principal_point.y - p.y) / self.pixels_per_meter,
        ]
    }
}

/// Textured axis-aligned rectangle following a sinusoidal sweep.
///
/// The center at frame `k` is `center + amplitude * sin(2 pi k / period + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distractor {
    pub size: World,
    pub center: World,
    #[serde(default)]
    pub amplitude: World,
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub texture_seed: u64,
    /// Drawn behind the arm instead of in front of it.
    #[serde(default)]
    pub behind: bool,
}

impl Distractor {
    pub fn center_at(&self, frame_index: u64) -> World {
        let s = (2.0 * PI * frame_index as f64 / self.period + self.phase).sin();
        [
            self.center[0] + self.amplitude[0] * s,
            self.center[1] + self.amplitude[1] * s,
        ]
    }

    fn local(&self, frame_index: u64, w: World) -> Option<World> {
        let c = self.center_at(frame_index);
        let local = [w[0] - c[0], w[1] - c[1]];
        (local[0].abs() <= 0.5 * self.size[0] && local[1].abs() <= 0.5 * self.size[1])
            .then_some(local)
    }

    fn validate(&self) -> Result<(), SimError> {
        let ok = self.size.iter().all(|v| v.is_finite() && *v > 0.0)
            && self
                .center
                .iter()
                .chain(&self.amplitude)
                .all(|v| v.is_finite())
            && self.period.is_finite()
            && self.period > 0.0
            && self.phase.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidArm(
                "distractor needs positive size and period, finite motion".into(),
            ))
        }
    }
}

/// A point rigidly attached to a link, `offset` meters from its proximal joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attachment {
    pub link: usize,
    pub offset: f64,
}

/// What a world point hits, foremost layer first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hit {
    Background,
    Link {
        link: usize,
        along: f64,
        across: f64,
    },
    Distractor {
        index: usize,
        local: World,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmScene {
    pub arm: ArmModel,
    pub q: Vec<f64>,
    pub camera: CameraModel,
    pub distractors: Vec<Distractor>,
    pub texture_seed: u64,
    pub frame_index: u64,
    /// Standard deviation of additive Gaussian pixel noise (intensity units).
    pub pixel_noise_std: f64,
}

impl ArmScene {
    pub fn new(arm: ArmModel, q: Vec<f64>, camera: CameraModel) -> Result<Self, SimError> {
        arm.validate()?;
        let scene = Self {
            arm,
            q,
            camera,
            distractors: Vec::new(),
            texture_seed: 0,
            frame_index: 0,
            pixel_noise_std: 0.0,
        };
        scene.check_joints()?;
        Ok(scene)
    }

    pub fn with_distractors(mut self, distractors: Vec<Distractor>) -> Result<Self, SimError> {
        for d in &distractors {
            d.validate()?;
        }
        self.distractors = distractors;
        Ok(self)
    }

    pub fn with_texture_seed(mut self, seed: u64) -> Self {
        self.texture_seed = seed;
        self
    }

    fn check_joints(&self) -> Result<(), SimError> {
        if self.q.len() != self.arm.n_links() {
            return Err(SimError::JointCount {
                expected: self.arm.n_links(),
                got: self.q.len(),
            });
        }
        for (joint, (&value, &[lo, hi])) in self.q.iter().zip(&self.arm.joint_limits).enumerate() {
            if !(value >= lo && value <= hi) {
                return Err(SimError::OutsideLimits {
                    joint,
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n_joints(&self) -> usize {
        self.arm.n_links()
    }

    pub fn shape(&self) -> GridShape {
        self.camera.shape
    }

    fn attachment_world(&self, attach: Attachment) -> Result<(World, Vec<World>), SimError> {
        if attach.link >= self.arm.n_links()
            || !(attach.offset >= 0.0 && attach.offset <= self.arm.link_lengths[attach.link])
        {
            return Err(SimError::BadAttachment {
                link: attach.link,
                offset: attach.offset,
            });
        }
        let (origins, angles) = self.arm.chain(&self.q);
        let o = origins[attach.link];
        let t = angles[attach.link];
        Ok((
            [
                o[0] + attach.offset * t.cos(),
                o[1] + attach.offset * t.sin(),
            ],
            origins,
        ))
    }

    /// Image position of a point attached to the arm.
    pub fn forward_points(&self, attach: Attachment) -> Result<PixelCoord, SimError> {
        let (w, _) = self.attachment_world(attach)?;
        Ok(self.camera.project(w))
    }

    /// Closed-form image Jacobian (pixels/radian) of an attached point.
    pub fn analytic_jacobian(&self, attach: Attachment) -> Result<Matrix2xX<f64>, SimError> {
        let (w, origins) = self.attachment_world(attach)?;
        let mut j = Matrix2xX::zeros(self.n_joints());
        self.fill_jacobian(w, attach.link, &origins, j.as_mut_slice());
        Ok(j)
    }

    // Column-major 2xN (nalgebra storage order).
    fn fill_jacobian(&self, w: World, link: usize, origins: &[World], col_major: &mut [f64]) {
        let ppm = self.camera.pixels_per_meter;
        for m in 0..=link {
            let o = origins[m];
            // d(world)/dq_m = perp(w - o_m); image y is flipped.
            col_major[2 * m] = -ppm * (w[1] - o[1]);
            col_major[2 * m + 1] = -ppm * (w[0] - o[0]);
        }
    }

    /// Row-major (x-row then y-row) Jacobian of world point `w` on `link`.
    pub fn write_jacobian_rows(&self, w: World, link: usize, origins: &[World], rows: &mut [f64]) {
        let n = self.n_joints();
        let ppm = self.camera.pixels_per_meter;
        rows.fill(0.0);
        for m in 0..=link {
            let o = origins[m];
            rows[m] = -ppm * (w[1] - o[1]);
            rows[n + m] = -ppm * (w[0] - o[0]);
        }
    }

    /// Arm capsule containing `w`, distal links on top.
    pub fn arm_hit(
        &self,
        w: World,
        origins: &[World],
        angles: &[f64],
    ) -> Option<(usize, f64, f64)> {
        for link in (0..self.arm.n_links()).rev() {
            let o = origins[link];
            let (s, c) = angles[link].sin_cos();
            let d = [w[0] - o[0], w[1] - o[1]];
            let along = d[0] * c + d[1] * s;
            let across = -d[0] * s + d[1] * c;
            let len = self.arm.link_lengths[link];
            let clamped = along.clamp(0.0, len);
            let dist2 = (along - clamped).powi(2) + across.powi(2);
            let r = 0.5 * self.arm.link_widths[link];
            if dist2 <= r * r {
                return Some((link, along, across));
            }
        }
        None
    }

    /// First distractor covering `w` among those in front of (`behind == false`)
    /// or behind the arm.
    pub fn distractor_hit(&self, w: World, behind: bool) -> Option<(usize, World)> {
        self.distractors
            .iter()
            .enumerate()
            .filter(|(_, d)| d.behind == behind)
            .find_map(|(i, d)| d.local(self.frame_index, w).map(|l| (i, l)))
    }

    /// Foremost layer at a world point: front distractors, arm, rear
    /// distractors, background.
    pub fn hit_test(&self, w: World, origins: &[World], angles: &[f64]) -> Hit {
        if let Some((index, local)) = self.distractor_hit(w, false) {
            return Hit::Distractor { index, local };
        }
        if let Some((link, along, across)) = self.arm_hit(w, origins, angles) {
            return Hit::Link {
                link,
                along,
                across,
            };
        }
        match self.distractor_hit(w, true) {
            Some((index, local)) => Hit::Distractor { index, local },
            None => Hit::Background,
        }
    }

    /// World position of a link-local point under this scene's configuration.
    pub fn link_point(
        &self,
        link: usize,
        along: f64,
        across: f64,
        origins: &[World],
        angles: &[f64],
    ) -> World {
        let o = origins[link];
        let (s, c) = angles[link].sin_cos();
        [o[0] + along * c - across * s, o[1] + along * s + across * c]
    }

    /// Render the frame and the ground truth. When `prev` is given, the
    /// ground truth also carries the true flow from `prev` to `self`.
    pub fn render(&self, prev: Option<&ArmScene>) -> (Frame, GroundTruth) {
        self.render_over(prev, &Backdrop::new(self))
    }

    /// [`render`](Self::render) with precomputed background samples. A
    /// backdrop built for another camera or texture seed is ignored.
    pub fn render_over(
        &self,
        prev: Option<&ArmScene>,
        backdrop: &Backdrop,
    ) -> (Frame, GroundTruth) {
        let shape = self.shape();
        let (origins, angles) = self.arm.chain(&self.q);
        let textures = SceneTextures::new(self);
        let n = self.n_joints();
        let fresh;
        let backdrop = if backdrop.fits(self) {
            backdrop
        } else {
            fresh = Backdrop::new(self);
            &fresh
        };
        let mut intensity = vec![0.0; shape.len()];
        let mut arm_mask = vec![false; shape.len()];
        let mut silhouette = vec![false; shape.len()];
        let mut distractor_mask = vec![false; shape.len()];
        let mut jac = vec![0.0; shape.len() * 2 * n];

        use rayon::prelude::*;
        intensity
            .par_iter_mut()
            .zip(arm_mask.par_iter_mut())
            .zip(silhouette.par_iter_mut())
            .zip(distractor_mask.par_iter_mut())
            .zip(jac.par_chunks_mut(2 * n))
            .enumerate()
            .for_each(|(i, ((((value, arm), sil), dis), jrow))| {
                let p = shape.coord(i);
                let mut acc = 0.0;
                for (k, (dx, dy)) in SUBSAMPLES.into_iter().enumerate() {
                    let w = self.camera.unproject(p.offset(dx, dy));
                    acc += match self.hit_test(w, &origins, &angles) {
                        Hit::Background => backdrop.samples[4 * i + k],
                        hit => textures.shade(hit, w),
                    };
                }
                *value = 0.25 * acc;
                let w = self.camera.unproject(p);
                let on_arm = self.arm_hit(w, &origins, &angles);
                *sil = on_arm.is_some();
                let front = self.distractor_hit(w, false).is_some();
                *dis = front || (on_arm.is_none() && self.distractor_hit(w, true).is_some());
                if let (Some((link, _, _)), false) = (on_arm, front) {
                    *arm = true;
                    self.write_jacobian_rows(w, link, &origins, jrow);
                }
            });

        if self.pixel_noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.texture_seed ^ self.frame_index.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let normal = Normal::new(0.0, self.pixel_noise_std).expect("finite std");
            for v in intensity.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        for v in intensity.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }

        let frame = Frame::new(shape, intensity, self.frame_index).expect("intensities in range");
        let flow = prev.map(|prev| flow_oracle(prev, self));
        let truth = GroundTruth {
            arm_mask: SelfMask::from_vec(shape, arm_mask).expect("shape"),
            silhouette: SelfMask::from_vec(shape, silhouette).expect("shape"),
            distractor_mask: SelfMask::from_vec(shape, distractor_mask).expect("shape"),
            jacobians: VectorField::from_vec(shape, 2 * n, jac).expect("finite"),
            flow,
        };
        (frame, truth)
    }

    /// Advance the scene: `q <- clamp(q + dq)`, distractors moved to `frame_index`.
    pub fn step_scene(&self, dq: &[f64], frame_index: u64) -> ArmScene {
        let mut next = self.clone();
        for ((q, d), [lo, hi]) in next.q.iter_mut().zip(dq).zip(&self.arm.joint_limits) {
            *q = (*q + d).clamp(*lo, *hi);
        }
        next.frame_index = frame_index;
        next
    }

    /// Image position of the arm tip.
    pub fn tip(&self) -> PixelCoord {
        let (origins, _) = self.arm.chain(&self.q);
        self.camera
            .project(*origins.last().expect("non-empty chain"))
    }
}

/// Simulator-side truth for one rendered frame.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Arm pixels not occluded by a distractor.
    pub arm_mask: SelfMask,
    /// Arm pixels regardless of occlusion.
    pub silhouette: SelfMask,
    pub distractor_mask: SelfMask,
    /// Analytic image Jacobian (row-major 2xN) on `arm_mask` pixels, zero elsewhere.
    pub jacobians: VectorField,
    pub flow: Option<FlowField>,
}

const SUBSAMPLES: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

/// Background texture samples for a fixed camera and texture seed. The
/// background never moves, so a run can shade it once.
#[derive(Debug, Clone)]
pub struct Backdrop {
    camera: CameraModel,
    texture_seed: u64,
    samples: Vec<f64>,
}

impl Backdrop {
    pub fn new(scene: &ArmScene) -> Self {
        let textures = SceneTextures::new(scene);
        let shape = scene.shape();
        let mut samples = vec![0.0; 4 * shape.len()];
        use rayon::prelude::*;
        samples.par_chunks_mut(4).enumerate().for_each(|(i, px)| {
            let p = shape.coord(i);
            for (v, (dx, dy)) in px.iter_mut().zip(SUBSAMPLES) {
                let w = scene.camera.unproject(p.offset(dx, dy));
                *v = textures.background.eval(w[0], w[1]);
            }
        });
        Self {
            camera: scene.camera,
            texture_seed: scene.texture_seed,
            samples,
        }
    }

    fn fits(&self, scene: &ArmScene) -> bool {
        self.camera == scene.camera && self.texture_seed == scene.texture_seed
    }
}

/// Sum-of-sinusoids texture, band-limited so gradient-based flow works on it.
#[derive(Debug, Clone)]
struct Texture {
    mean: f64,
    waves: Vec<[f64; 4]>,
}

impl Texture {
    fn new(seed: u64, pixels_per_meter: f64, mean: f64, contrast: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let waves = (0..n)
            .map(|_| {
                let wavelength_px = rng.random_range(5.0..14.0);
                let k = 2.0 * PI * pixels_per_meter / wavelength_px;
                let dir = rng.random_range(0.0..PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                [k * dir.cos(), k * dir.sin(), phase, contrast / n as f64]
            })
            .collect();
        Self { mean, waves }
    }

    #[inline]
    fn eval(&self, u: f64, v: f64) -> f64 {
        self.mean
            + self
                .waves
                .iter()
                .map(|[kx, ky, ph, a]| a * (kx * u + ky * v + ph).sin())
                .sum::<f64>()
    }
}

struct SceneTextures {
    background: Texture,
    links: Vec<Texture>,
    distractors: Vec<Texture>,
}

impl SceneTextures {
    fn new(scene: &ArmScene) -> Self {
        let ppm = scene.camera.pixels_per_meter;
        let seed = scene.texture_seed.wrapping_mul(0x2545_F491_4F6C_DD1D);
        Self {
            background: Texture::new(seed, ppm, 0.3, 0.35),
            links: (0..scene.arm.n_links())
                .map(|l| Texture::new(seed ^ ((l as u64 + 1) * 0x51_7CC1), ppm, 0.65, 0.45))
                .collect(),
            distractors: scene
                .distractors
                .iter()
                .map(|d| Texture::new(d.texture_seed ^ 0xD157_AC70, ppm, 0.5, 0.45))
                .collect(),
        }
    }

    fn shade(&self, hit: Hit, w: World) -> f64 {
        match hit {
            Hit::Background => self.background.eval(w[0], w[1]),
            Hit::Link {
                link,
                along,
                across,
            } => self.links[link].eval(along, across),
            Hit::Distractor { index, local } => self.distractors[index].eval(local[0], local[1]),
        }
    }
}
