use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::{ExperimentConfig, ExperimentError};
use crate::estimator::{dije_step, init_field, DenseJacobianField, JointSample};
use crate::field::PixelCoord;
use crate::flow::{FlowInput, FlowProvider};
use crate::io::{cluster_csv, write_field, write_frame_pgm, write_mask_pgm, IoError};
use crate::selfrecog::{assign_labels, refresh_model, AsyncClusterer, ClusterModel, SelfMask};
use crate::servo::{advect_point, servo_step, ServoLogRow, TrackedPoint};
use crate::sim::{ArmScene, Attachment, Backdrop, GroundTruth};

pub const REPORT_HEADER: &str =
    "frame,tip_motion_px,qdot_norm,arm_pixels,jac_err_median,self_pixels,iou,\
bg_fp_fraction,distractor_fp_fraction,servo_error_px,servo_true_error_px,control,refresh";

/// Metrics for one processed frame. Missing values are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame: u64,
    pub tip_motion_px: f64,
    pub qdot_norm: f64,
    pub arm_pixels: usize,
    pub jac_err_median: f64,
    pub self_pixels: usize,
    pub iou: f64,
    pub bg_fp_fraction: f64,
    pub distractor_fp_fraction: f64,
    pub servo_error_px: f64,
    pub servo_true_error_px: f64,
    pub control: bool,
    pub refresh: bool,
}

impl FrameMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.frame,
            self.tip_motion_px,
            self.qdot_norm,
            self.arm_pixels,
            self.jac_err_median,
            self.self_pixels,
            self.iou,
            self.bg_fp_fraction,
            self.distractor_fp_fraction,
            self.servo_error_px,
            self.servo_true_error_px,
            self.control as u8,
            self.refresh as u8
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `"<"` or `">="`.
    pub relation: &'static str,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            relation: "<",
            passed: value < threshold,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            relation: ">=",
            passed: value >= threshold,
        }
    }
}

/// Servo error when a waypoint's control-step budget ran out. The tracked
/// error is against the flow-advected `p_self`; the true error is against the
/// attachment point's actual image position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeadlineError {
    pub waypoint: usize,
    pub tracked_px: f64,
    pub true_px: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub render_s: f64,
    pub flow_s: f64,
    pub dije_s: f64,
    pub selfrecog_s: f64,
    pub servo_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub name: String,
    pub n_joints: usize,
    pub rows: Vec<FrameMetrics>,
    pub servo_log: Vec<ServoLogRow>,
    pub checks: Vec<CheckResult>,
    /// Median final Jacobian error over persistently visible arm pixels.
    pub final_jacobian_error: f64,
    /// Tracked and true servo error at each waypoint deadline.
    pub deadlines: Vec<DeadlineError>,
    pub timings: StageTimings,
    pub field: DenseJacobianField,
    pub model: Option<ClusterModel>,
    pub final_scene: ArmScene,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn report_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn servo_csv(&self) -> String {
        let mut s = ServoLogRow::csv_header(self.n_joints);
        s.push('\n');
        for r in &self.servo_log {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            name: &'a str,
            frames: usize,
            passed: bool,
            final_jacobian_error: Option<f64>,
            checks: &'a [CheckResult],
            deadlines: &'a [DeadlineError],
            timings: StageTimings,
        }
        let summary = Summary {
            name: &self.name,
            frames: self.rows.len(),
            passed: self.passed(),
            final_jacobian_error: self
                .final_jacobian_error
                .is_finite()
                .then_some(self.final_jacobian_error),
            checks: &self.checks,
            deadlines: &self.deadlines,
            timings: self.timings,
        };
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    }

    /// Mean of a metric column over the last `window` frames, skipping NaN.
    pub fn tail_mean(&self, window: usize, metric: impl Fn(&FrameMetrics) -> f64) -> f64 {
        let start = self.rows.len().saturating_sub(window);
        finite_mean(self.rows[start..].iter().map(metric))
    }
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Relative Frobenius error of the estimate at every arm pixel (NaN elsewhere).
fn jacobian_errors(field: &DenseJacobianField, truth: &GroundTruth) -> Vec<f64> {
    let dim = 2 * field.n_joints();
    (0..field.shape().len())
        .map(|i| {
            if !truth.arm_mask.get(i) {
                return f64::NAN;
            }
            let t = truth.jacobians.pixel(i);
            let norm: f64 = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return f64::NAN;
            }
            let diff: f64 = field.jac(i)[..dim]
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            diff / norm
        })
        .collect()
}

struct MaskStats {
    iou: f64,
    bg_fp: f64,
    distractor_fp: f64,
}

fn mask_stats(mask: &SelfMask, truth: &GroundTruth) -> MaskStats {
    let (mut bg, mut bg_fp, mut dis, mut dis_fp) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..mask.shape().len() {
        if truth.silhouette.get(i) {
            continue;
        }
        let label = mask.get(i) as usize;
        if truth.distractor_mask.get(i) {
            dis += 1;
            dis_fp += label;
        } else {
            bg += 1;
            bg_fp += label;
        }
    }
    let frac = |fp: usize, n: usize| {
        if n == 0 {
            f64::NAN
        } else {
            fp as f64 / n as f64
        }
    };
    MaskStats {
        iou: mask.iou(&truth.arm_mask),
        bg_fp: frac(bg_fp, bg),
        distractor_fp: frac(dis_fp, dis),
    }
}

struct OutputSink {
    dir: Option<PathBuf>,
    dump_frames: bool,
    dump_fields: bool,
    dump_masks: bool,
    every: u64,
}

impl OutputSink {
    fn path(&self, name: String) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn due(&self, frame: u64) -> bool {
        self.dir.is_some() && frame.is_multiple_of(self.every)
    }
}

fn io_error(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io(IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Servo progress towards one waypoint.
struct Phase {
    index: usize,
    deadline: Option<u64>,
    steps: u64,
    at_deadline: Option<(f64, f64)>,
}

fn runtime(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Runtime(e.to_string())
}

/// Run the closed loop described by `config`. When `config.output.dir` is
/// set, the report files and requested dumps are written there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    let mut timings = StageTimings::default();
    let provider: Box<dyn FlowProvider> = config.flow_provider()?;
    let dije_cfg = config.dije_config();
    let sink = OutputSink {
        dir: config.output.dir.clone(),
        dump_frames: config.output.dump_frames,
        dump_fields: config.output.dump_fields,
        dump_masks: config.output.dump_masks,
        every: config.output.dump_every,
    };
    if let Some(dir) = &sink.dir {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }

    let mut scene = config.initial_scene()?;
    let n = scene.n_joints();
    let shape = scene.shape();
    let mut field = init_field(shape, n).map_err(runtime)?;

    let t = Instant::now();
    let backdrop = Backdrop::new(&scene);
    let (mut frame, _) = scene.render_over(None, &backdrop);
    timings.render_s += t.elapsed().as_secs_f64();
    if sink.dump_frames && sink.due(0) {
        if let Some(p) = sink.path("frame_000000.pgm".into()) {
            write_frame_pgm(&p, &frame)?;
        }
    }

    let servo = config.servo.as_ref();
    let mut tracked: Option<(TrackedPoint, Attachment)> = match servo {
        Some(s) => {
            let p = scene.forward_points(s.attach).map_err(runtime)?;
            Some((TrackedPoint::new(p, p).map_err(runtime)?, s.attach))
        }
        None => None,
    };
    let mut servo_active = false;
    let mut pending_dq = vec![0.0; n];
    let mut pending_frames = 0u64;
    let mut next_waypoint = 0usize;
    let mut phases: Vec<Phase> = Vec::new();
    let mut servo_log = Vec::new();

    let recog = config.selfrecog;
    let clusterer = recog.filter(|r| r.threaded).map(AsyncClusterer::spawn);
    let mut model: Option<Arc<ClusterModel>> = None;

    let mut visible = vec![0u32; shape.len()];
    let mut rows = Vec::with_capacity(config.frames as usize);
    let mut last_truth: Option<GroundTruth> = None;

    for k in 1..=config.frames {
        // Joint command: excitation increment plus the spread servo command.
        let mut dq: Vec<f64> = (0..n)
            .map(|m| config.excitation.offset(m, k) - config.excitation.offset(m, k - 1))
            .collect();
        if pending_frames > 0 {
            for (d, p) in dq.iter_mut().zip(&pending_dq) {
                *d += p;
            }
            pending_frames -= 1;
        }
        let next = scene.step_scene(&dq, k);
        let qdot: Vec<f64> = next.q.iter().zip(&scene.q).map(|(a, b)| a - b).collect();
        let tip_motion = next.tip().distance(scene.tip());

        let t = Instant::now();
        let (next_frame, truth) = next.render_over(None, &backdrop);
        timings.render_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let flow = provider
            .compute(&FlowInput {
                prev_scene: &scene,
                curr_scene: &next,
                prev_frame: Some(&frame),
                curr_frame: Some(&next_frame),
            })
            .map_err(runtime)?;
        timings.flow_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let sample = JointSample::new(qdot.clone()).map_err(runtime)?;
        field = dije_step(&field, &sample, &flow, &dije_cfg).map_err(runtime)?;
        timings.dije_s += t.elapsed().as_secs_f64();
        scene = next;
        frame = next_frame;

        // Self recognition: slow refresh at the cadence, fast labels every frame.
        let t = Instant::now();
        let mut refresh = false;
        let mut mask = None;
        if let Some(rc) = recog {
            if k % rc.cadence == 0 {
                refresh = true;
                let seed = config.seed ^ k.wrapping_mul(0x9E37_79B9);
                match &clusterer {
                    Some(worker) => worker.submit(Arc::new(field.clone()), seed),
                    None => {
                        model = Some(Arc::new(
                            refresh_model(&field, model.as_deref(), &rc, seed).map_err(runtime)?,
                        ));
                    }
                }
            }
            if let Some(worker) = &clusterer {
                model = worker.latest();
            }
            if let Some(m) = &model {
                mask = Some(assign_labels(&field, m).map_err(runtime)?);
            }
        }
        timings.selfrecog_s += t.elapsed().as_secs_f64();

        // Servo: track, apply scheduled events, then control at the cadence.
        let t = Instant::now();
        let mut control = false;
        let (mut servo_err, mut servo_true_err) = (f64::NAN, f64::NAN);
        if let (Some(s), Some((pt, attach))) = (servo, tracked.as_mut()) {
            *pt = advect_point(*pt, &flow);
            while next_waypoint < s.waypoints.len() && s.waypoints[next_waypoint].frame <= k {
                // A deadline that coincides with the next waypoint is measured
                // before the switch.
                if let Some(phase) = phases.last_mut() {
                    if phase.at_deadline.is_none() && phase.deadline == Some(phase.steps) {
                        let true_self = scene.forward_points(*attach).map_err(runtime)?;
                        phase.at_deadline =
                            Some((pt.error_norm(), true_self.distance(pt.p_target)));
                    }
                }
                let w = &s.waypoints[next_waypoint];
                pt.p_target = PixelCoord::new(w.target[0], w.target[1]);
                if let Some(a) = w.redefine {
                    *attach = a;
                    pt.p_self = scene.forward_points(a).map_err(runtime)?;
                }
                phases.push(Phase {
                    index: next_waypoint,
                    deadline: w.deadline_steps,
                    steps: 0,
                    at_deadline: None,
                });
                servo_active = true;
                next_waypoint += 1;
            }
            let true_self = scene.forward_points(*attach).map_err(runtime)?;
            servo_err = pt.error_norm();
            servo_true_err = true_self.distance(pt.p_target);
            if servo_active && k >= s.bootstrap_frames && (k - s.bootstrap_frames) % s.cadence == 0
            {
                let phase = phases.last_mut().expect("active phase");
                if phase.deadline == Some(phase.steps) {
                    phase.at_deadline = Some((servo_err, servo_true_err));
                }
                let cmd = servo_step(pt, &field, &s.law).map_err(runtime)?;
                pending_dq = cmd.dq.iter().map(|d| d / s.cadence as f64).collect();
                pending_frames = s.cadence;
                phase.steps += 1;
                control = true;
                servo_log.push(ServoLogRow {
                    frame_index: k,
                    point: *pt,
                    command: cmd,
                });
            }
        }
        timings.servo_s += t.elapsed().as_secs_f64();

        let errors = jacobian_errors(&field, &truth);
        for (v, m) in visible.iter_mut().zip(truth.arm_mask.as_slice()) {
            *v += *m as u32;
        }
        let stats = mask.as_ref().map(|m| mask_stats(m, &truth));
        rows.push(FrameMetrics {
            frame: k,
            tip_motion_px: tip_motion,
            qdot_norm: qdot.iter().map(|v| v * v).sum::<f64>().sqrt(),
            arm_pixels: truth.arm_mask.count(),
            jac_err_median: median(errors.into_iter().filter(|e| e.is_finite()).collect()),
            self_pixels: mask.as_ref().map_or(0, SelfMask::count),
            iou: stats.as_ref().map_or(f64::NAN, |s| s.iou),
            bg_fp_fraction: stats.as_ref().map_or(f64::NAN, |s| s.bg_fp),
            distractor_fp_fraction: stats.as_ref().map_or(f64::NAN, |s| s.distractor_fp),
            servo_error_px: servo_err,
            servo_true_error_px: servo_true_err,
            control,
            refresh,
        });

        if sink.due(k) {
            if sink.dump_frames {
                if let Some(p) = sink.path(format!("frame_{k:06}.pgm")) {
                    write_frame_pgm(&p, &frame)?;
                }
            }
            if sink.dump_masks {
                if let (Some(p), Some(m)) = (sink.path(format!("mask_{k:06}.pgm")), &mask) {
                    write_mask_pgm(&p, m)?;
                }
            }
            if sink.dump_fields {
                if let Some(p) = sink.path(format!("field_{k:06}.dije")) {
                    write_field(&p, &field, k as u32)?;
                }
            }
        }
        last_truth = Some(truth);
    }

    // Final Jacobian error over pixels visible on the arm for most frames.
    let final_jacobian_error = match &last_truth {
        Some(truth) => {
            let need = (config.thresholds.visibility_fraction * config.frames as f64).ceil() as u32;
            let errors = jacobian_errors(&field, truth);
            median(
                errors
                    .into_iter()
                    .zip(&visible)
                    .filter(|(e, v)| e.is_finite() && **v >= need)
                    .map(|(e, _)| e)
                    .collect(),
            )
        }
        None => f64::NAN,
    };

    let th = &config.thresholds;
    let mut checks = Vec::new();
    if let Some(max) = th.jacobian_error_max {
        checks.push(CheckResult::below(
            "jacobian_error",
            final_jacobian_error,
            max,
        ));
    }
    if let Some(min) = th.iou_min {
        let iou = finite_mean(
            rows.iter()
                .filter(|r| r.frame > th.iou_warmup && r.tip_motion_px >= th.iou_min_tip_motion)
                .map(|r| r.iou),
        );
        checks.push(CheckResult::at_least("mean_iou", iou, min));
    }
    if let Some(max) = th.distractor_fp_max {
        let start = rows.len().saturating_sub(th.fp_window as usize);
        let fp = finite_mean(rows[start..].iter().map(|r| r.distractor_fp_fraction));
        checks.push(CheckResult::below("distractor_fp_fraction", fp, max));
    }
    let deadlines: Vec<DeadlineError> = phases
        .iter()
        .filter(|p| p.deadline.is_some())
        .map(|p| {
            let (tracked_px, true_px) = p.at_deadline.unwrap_or((f64::INFINITY, f64::INFINITY));
            DeadlineError {
                waypoint: p.index,
                tracked_px,
                true_px,
            }
        })
        .collect();
    if let (Some(max), Some(_)) = (th.servo_error_max, servo) {
        for d in &deadlines {
            checks.push(CheckResult::below(
                format!("servo_error_waypoint_{}", d.waypoint),
                d.tracked_px,
                max,
            ));
        }
    }

    timings.total_s = started.elapsed().as_secs_f64();
    drop(clusterer);
    let report = RunReport {
        name: config.name.clone(),
        n_joints: n,
        rows,
        servo_log,
        checks,
        final_jacobian_error,
        deadlines,
        timings,
        field,
        model: model.map(|m| (*m).clone()),
        final_scene: scene,
    };
    if let Some(dir) = &sink.dir {
        write_outputs(dir, &report, servo.is_some())?;
    }
    Ok(report)
}

fn write_outputs(dir: &Path, report: &RunReport, servo: bool) -> Result<(), ExperimentError> {
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_error(&p, e))
    };
    write("report.csv", &report.report_csv())?;
    write("summary.json", &report.summary_json())?;
    let t = &report.timings;
    let mut timing = String::from("stage,seconds\n");
    for (stage, secs) in [
        ("render", t.render_s),
        ("flow", t.flow_s),
        ("dije", t.dije_s),
        ("selfrecog", t.selfrecog_s),
        ("servo", t.servo_s),
        ("total", t.total_s),
    ] {
        let _ = writeln!(timing, "{stage},{secs}");
    }
    write("timings.csv", &timing)?;
    if servo {
        write("servo.csv", &report.servo_csv())?;
    }
    if let Some(m) = &report.model {
        write("clusters.csv", &cluster_csv(m))?;
    }
    Ok(())
}
