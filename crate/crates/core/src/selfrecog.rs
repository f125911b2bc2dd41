//! Dense self-body labeling from the Jacobian field.
//!
//! A slow path clusters the per-pixel Jacobians and scores each cluster by how
//! consistently its center persists between refreshes; a fast path labels
//! every pixel with its nearest center. Clusters whose normalized score exceeds
//! `e_thresh` are taken to be the robot's own body.

use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::DenseJacobianField;
use crate::field::{FieldError, GridShape};

#[derive(Debug, Error, PartialEq)]
pub enum SelfRecogError {
    #[error("k-means needs at least {k} vectors, got {got}")]
    TooFewVectors { k: usize, got: usize },
    #[error("k must be >= 2, got {0}")]
    InvalidK(usize),
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cluster model is empty")]
    EmptyModel,
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Per-pixel boolean label, `true` for self body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelfMask {
    shape: GridShape,
    labels: Vec<bool>,
}

impl SelfMask {
    pub fn empty(shape: GridShape) -> Self {
        Self {
            shape,
            labels: vec![false; shape.len()],
        }
    }

    pub fn from_vec(shape: GridShape, labels: Vec<bool>) -> Result<Self, FieldError> {
        if labels.len() != shape.len() {
            return Err(FieldError::LengthMismatch {
                width: shape.width(),
                height: shape.height(),
                dim: 1,
                got: labels.len(),
            });
        }
        Ok(Self { shape, labels })
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.labels[i]
    }

    #[inline]
    pub fn as_slice(&self) -> &[bool] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &SelfMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.labels.iter().zip(&other.labels) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// How the per-cluster evaluations are rescaled after each refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    /// Scale to unit sum.
    #[default]
    Sum,
    /// Scale so the largest evaluation is 1.
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    pub evals: Vec<f64>,
    pub self_indices: Vec<usize>,
}

impl ClusterModel {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn is_self(&self, index: usize) -> bool {
        self.self_indices.contains(&index)
    }
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index of the nearest center (lowest index on ties) and its squared distance.
#[inline]
pub fn nearest(v: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(v, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iterations: 50,
            tolerance: 1e-8,
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding on `data` (rows of length `dim`).
///
/// Empty clusters are re-seeded to the point farthest from its assigned
/// center. The returned centers are sorted lexicographically.
pub fn kmeans(
    data: &[f64],
    dim: usize,
    params: &KMeansParams,
) -> Result<Vec<Vec<f64>>, SelfRecogError> {
    let k = params.k;
    if k < 2 {
        return Err(SelfRecogError::InvalidK(k));
    }
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(SelfRecogError::DimensionMismatch {
            expected: dim,
            got: data.len(),
        });
    }
    let n = data.len() / dim;
    if n < k {
        return Err(SelfRecogError::TooFewVectors { k, got: n });
    }
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = vec![point(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(point(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = point(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(point(i), &c));
        }
        centers.push(c);
    }

    let mut assign = vec![(0usize, 0.0f64); n];
    for _ in 0..params.max_iterations {
        assign
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, a)| *a = nearest(point(i), &centers));

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut next = centers.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                next[c] = sums[c].iter().map(|s| s * inv).collect();
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold((0usize, -1.0f64), |best, i| {
                        if assign[i].1 > best.1 {
                            (i, assign[i].1)
                        } else {
                            best
                        }
                    })
                    .0;
                taken.push(far);
                next[c] = point(far).to_vec();
            }
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < params.tolerance {
            break;
        }
    }

    centers.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(centers)
}

const CENTER_NORM_EPS: f64 = 1e-9;

/// Consistency reward `1 / sqrt(dist / (|center| + eps) + 0.1)`.
#[inline]
pub fn consistency(dist: f64, center_norm: f64) -> f64 {
    1.0 / (dist / (center_norm + CENTER_NORM_EPS) + 0.1).sqrt()
}

/// Score a fresh set of centers against the previous model.
///
/// Each new center inherits the evaluation of its nearest previous center
/// and scales it by `0.1 (consistency - 1) + 1`. On the first call (no
/// previous model) the previous centers are the new ones with unit scores.
pub fn evaluate_clusters(
    current: Option<&ClusterModel>,
    new_centers: Vec<Vec<f64>>,
    e_thresh: f64,
    normalize: NormalizeMode,
) -> Result<ClusterModel, SelfRecogError> {
    if new_centers.is_empty() {
        return Err(SelfRecogError::EmptyModel);
    }
    let (prev_centers, prev_evals) = match current {
        Some(m) if !m.is_empty() => (m.centers.clone(), m.evals.clone()),
        _ => (new_centers.clone(), vec![1.0; new_centers.len()]),
    };
    let mut evals: Vec<f64> = new_centers
        .iter()
        .map(|c| {
            let (i, d2) = nearest(c, &prev_centers);
            let c = consistency(d2.sqrt(), norm(c));
            (prev_evals[i] * (0.1 * (c - 1.0) + 1.0)).max(0.0)
        })
        .collect();
    let scale = match normalize {
        NormalizeMode::Sum => evals.iter().sum::<f64>(),
        NormalizeMode::Max => evals.iter().cloned().fold(0.0, f64::max),
    };
    if scale > 0.0 && scale.is_finite() {
        evals.iter_mut().for_each(|e| *e /= scale);
    } else {
        let uniform = match normalize {
            NormalizeMode::Sum => 1.0 / evals.len() as f64,
            NormalizeMode::Max => 1.0,
        };
        evals.iter_mut().for_each(|e| *e = uniform);
    }
    let self_indices = evals
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > e_thresh)
        .map(|(i, _)| i)
        .collect();
    Ok(ClusterModel {
        centers: new_centers,
        evals,
        self_indices,
    })
}

/// Label every pixel by its nearest center.
pub fn assign_labels(
    field: &DenseJacobianField,
    model: &ClusterModel,
) -> Result<SelfMask, SelfRecogError> {
    if model.is_empty() {
        return Err(SelfRecogError::EmptyModel);
    }
    let dim = 2 * field.n_joints();
    if let Some(c) = model.centers.iter().find(|c| c.len() != dim) {
        return Err(SelfRecogError::DimensionMismatch {
            expected: dim,
            got: c.len(),
        });
    }
    let mut is_self = vec![false; model.len()];
    for &i in &model.self_indices {
        if let Some(s) = is_self.get_mut(i) {
            *s = true;
        }
    }
    let labels = (0..field.shape().len())
        .into_par_iter()
        .map(|i| is_self[nearest(field.jac(i), &model.centers).0])
        .collect();
    Ok(SelfMask::from_vec(field.shape(), labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfRecogConfig {
    pub n_clusters: usize,
    pub e_thresh: f64,
    /// Frames between cluster refreshes.
    pub cadence: u64,
    pub normalize: NormalizeMode,
    /// Use every `stride`-th pixel as k-means input.
    pub stride: usize,
    pub max_iterations: usize,
    /// Cluster on a background thread; labels then use whichever model is
    /// newest, so runs are no longer bit-reproducible.
    pub threaded: bool,
}

impl Default for SelfRecogConfig {
    fn default() -> Self {
        Self {
            n_clusters: 5,
            e_thresh: 0.2,
            cadence: 15,
            normalize: NormalizeMode::Sum,
            stride: 1,
            max_iterations: 50,
            threaded: false,
        }
    }
}

impl SelfRecogConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_clusters < 2 {
            return Err("n_clusters must be >= 2".into());
        }
        if self.cadence == 0 || self.stride == 0 {
            return Err("cadence and stride must be >= 1".into());
        }
        if !self.e_thresh.is_finite() {
            return Err("e_thresh must be finite".into());
        }
        Ok(())
    }
}

/// Gather the k-means input from a field snapshot.
pub fn clustering_input(field: &DenseJacobianField, stride: usize) -> Vec<f64> {
    field
        .jacobian_vectors()
        .step_by(stride.max(1))
        .flat_map(|j| j.iter().copied())
        .collect()
}

/// One slow-path refresh: cluster the snapshot and score against `current`.
pub fn refresh_model(
    field: &DenseJacobianField,
    current: Option<&ClusterModel>,
    cfg: &SelfRecogConfig,
    seed: u64,
) -> Result<ClusterModel, SelfRecogError> {
    let data = clustering_input(field, cfg.stride);
    let params = KMeansParams {
        max_iterations: cfg.max_iterations,
        ..KMeansParams::new(cfg.n_clusters, seed)
    };
    let centers = kmeans(&data, 2 * field.n_joints(), &params)?;
    evaluate_clusters(current, centers, cfg.e_thresh, cfg.normalize)
}

#[derive(Default)]
struct Shared {
    pending: Option<(Arc<DenseJacobianField>, u64)>,
    model: Option<Arc<ClusterModel>>,
    shutdown: bool,
    refreshes: usize,
}

/// Background clustering worker.
///
/// The estimator publishes snapshots with [`submit`](Self::submit); only the
/// newest unprocessed snapshot is kept. Labelers read the newest published
/// model with [`latest`](Self::latest). Models are replaced as whole values.
pub struct AsyncClusterer {
    shared: Arc<(Mutex<Shared>, Condvar)>,
    handle: Option<JoinHandle<()>>,
}

impl AsyncClusterer {
    pub fn spawn(cfg: SelfRecogConfig) -> Self {
        let shared = Arc::new((Mutex::new(Shared::default()), Condvar::new()));
        let worker = Arc::clone(&shared);
        let handle = std::thread::spawn(move || {
            let (lock, cvar) = &*worker;
            loop {
                let (snapshot, seed, current) = {
                    let mut s = lock.lock().expect("clusterer lock");
                    while s.pending.is_none() && !s.shutdown {
                        s = cvar.wait(s).expect("clusterer lock");
                    }
                    if s.shutdown {
                        return;
                    }
                    let (snap, seed) = s.pending.take().expect("pending snapshot");
                    (snap, seed, s.model.clone())
                };
                let result = refresh_model(&snapshot, current.as_deref(), &cfg, seed);
                let mut s = lock.lock().expect("clusterer lock");
                if let Ok(model) = result {
                    s.model = Some(Arc::new(model));
                }
                s.refreshes += 1;
                cvar.notify_all();
            }
        });
        Self {
            shared,
            handle: Some(handle),
        }
    }

    pub fn submit(&self, snapshot: Arc<DenseJacobianField>, seed: u64) {
        let (lock, cvar) = &*self.shared;
        lock.lock().expect("clusterer lock").pending = Some((snapshot, seed));
        cvar.notify_all();
    }

    pub fn latest(&self) -> Option<Arc<ClusterModel>> {
        self.shared.0.lock().expect("clusterer lock").model.clone()
    }

    /// Block until at least `n` refreshes have completed.
    pub fn wait_for_refreshes(&self, n: usize) {
        let (lock, cvar) = &*self.shared;
        let mut s = lock.lock().expect("clusterer lock");
        while s.refreshes < n {
            s = cvar.wait(s).expect("clusterer lock");
        }
    }
}

impl Drop for AsyncClusterer {
    fn drop(&mut self) {
        {
            let (lock, cvar) = &*self.shared;
            lock.lock().expect("clusterer lock").shutdown = true;
            cvar.notify_all();
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
