//! Oracles and randomized invariant checks shared by the integration tests
//! and the acceptance run.
#![allow(dead_code)]

use dije::estimator::{kf_update_pixel, DenseJacobianField};
use dije::flow::FlowField;
use dije::selfrecog::{ClusterModel, NormalizeMode};
use dije::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

pub const CASES: u32 = 1000;

/// Smooth multi-scale texture.
pub fn texture(x: f64, y: f64) -> f64 {
    let v = 0.5
        + 0.15 * (0.21 * x + 0.05 * y).sin()
        + 0.12 * (0.13 * y - 0.31 * x).cos()
        + 0.08 * (0.33 * x + 0.39 * y).sin()
        + 0.05 * (0.005 * x * y).cos();
    v.clamp(0.0, 1.0)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

pub fn translation_error(prev: &Frame, curr: &Frame, d: [f64; 2], margin: usize) -> f64 {
    let flow = flow_estimate(prev, curr, &LkParams::default()).unwrap();
    let s = flow.shape();
    let mut errs = Vec::new();
    for y in margin..s.height() - margin {
        for x in margin..s.width() - margin {
            let u = flow.get(y * s.width() + x);
            errs.push((u[0] - d[0]).hypot(u[1] - d[1]));
        }
    }
    median(errs)
}

/// Full-matrix Kalman update on the stacked state `[j_x; j_y]` with the
/// observation matrix `blockdiag(q̇ᵀ, q̇ᵀ)`, followed by projection of the
/// covariance onto its diagonal.
pub fn full_kf_step(
    jac: &[f64],
    var: &[f64],
    qdot: &[f64],
    u: [f64; 2],
    q: f64,
    r: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = qdot.len();
    let x = DVector::from_column_slice(jac);
    let mut p = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for m in 0..n {
        p[(m, m)] = var[m] + q;
        p[(n + m, n + m)] = var[m] + q;
    }
    let mut h = DMatrix::<f64>::zeros(2, 2 * n);
    for m in 0..n {
        h[(0, m)] = qdot[m];
        h[(1, n + m)] = qdot[m];
    }
    let s = &h * &p * h.transpose() + DMatrix::identity(2, 2) * r;
    let k = &p * h.transpose() * s.try_inverse().unwrap();
    let innovation = DVector::from_column_slice(&u) - &h * &x;
    let x_new = &x + &k * innovation;
    let p_new = (DMatrix::identity(2 * n, 2 * n) - &k * &h) * &p;
    for m in 0..n {
        assert!(
            (p_new[(m, m)] - p_new[(n + m, n + m)]).abs() < 1e-12,
            "x/y variances tie"
        );
    }
    (
        x_new.as_slice().to_vec(),
        (0..n).map(|m| p_new[(m, m)]).collect(),
    )
}

fn runner() -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases: CASES,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn check<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

pub fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, len)
}

/// Random field with 1-3 joints on a grid of at most 6x6.
pub fn jacobian_field() -> impl Strategy<Value = DenseJacobianField> {
    (1usize..=3, 2usize..=6, 2usize..=6).prop_flat_map(|(n, w, h)| {
        let len = w * h;
        (vec_in(len * 2 * n, -40.0, 40.0), vec_in(len * n, 0.0, 5.0)).prop_map(move |(jac, var)| {
            let mut data = Vec::with_capacity(len * 3 * n);
            for i in 0..len {
                data.extend_from_slice(&jac[i * 2 * n..(i + 1) * 2 * n]);
                data.extend_from_slice(&var[i * n..(i + 1) * n]);
            }
            let state = VectorField::from_vec(GridShape::new(w, h).unwrap(), 3 * n, data).unwrap();
            DenseJacobianField::from_state(n, state).unwrap()
        })
    })
}

/// The update never raises a variance and never makes one negative.
pub fn variance_monotonicity() -> Result<(), String> {
    let pixel = (1usize..=6).prop_flat_map(|n| {
        (
            vec_in(2 * n, -100.0, 100.0),
            vec_in(n, 0.0, 10.0),
            vec_in(n, -1.0, 1.0),
            (-20.0..20.0f64, -20.0..20.0f64),
            1e-6..10.0f64,
        )
    });
    check(pixel, |(mut jac, mut var, qdot, u, r)| {
        let prior = var.clone();
        kf_update_pixel(&mut jac, &mut var, &qdot, [u.0, u.1], r);
        for (p, p0) in var.iter().zip(&prior) {
            prop_assert!(*p <= *p0 && *p >= 0.0, "{p} vs prior {p0}");
        }
        prop_assert!(jac.iter().all(|v| v.is_finite()));
        Ok(())
    })
}

/// Cluster evaluations stay nonnegative and sum to one.
pub fn eval_simplex() -> Result<(), String> {
    let centers = |k: usize, dim: usize| proptest::collection::vec(vec_in(dim, -30.0, 30.0), k);
    let input = (2usize..=7, 1usize..=6).prop_flat_map(move |(k, dim)| {
        (
            centers(k, dim),
            centers(k, dim),
            vec_in(k, 0.0, 1.0),
            0.0..0.5f64,
            any::<bool>(),
        )
    });
    check(input, |(prev, next, evals, e_thresh, max_mode)| {
        let k = prev.len();
        let total: f64 = evals.iter().sum();
        let evals = if total > 0.0 {
            evals.iter().map(|e| e / total).collect()
        } else {
            vec![1.0 / k as f64; k]
        };
        let model = ClusterModel {
            centers: prev,
            evals,
            self_indices: vec![],
        };
        let mode = if max_mode {
            NormalizeMode::Max
        } else {
            NormalizeMode::Sum
        };
        for current in [None, Some(&model)] {
            let m = evaluate_clusters(current, next.clone(), e_thresh, mode).unwrap();
            prop_assert!(m.evals.iter().all(|&e| e >= 0.0));
            match mode {
                NormalizeMode::Sum => {
                    prop_assert!((m.evals.iter().sum::<f64>() - 1.0).abs() < 1e-9)
                }
                NormalizeMode::Max => {
                    prop_assert!((m.evals.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-9)
                }
            }
            let expected: Vec<usize> = (0..k).filter(|&i| m.evals[i] > e_thresh).collect();
            prop_assert_eq!(&m.self_indices, &expected);
        }
        Ok(())
    })
}

/// Bilinear interpolation never leaves the range of its four neighbours.
pub fn interpolation_bounds() -> Result<(), String> {
    let input = (2usize..=7, 2usize..=7, 1usize..=4).prop_flat_map(|(w, h, dim)| {
        (
            Just((w, h, dim)),
            vec_in(w * h * dim, -50.0, 50.0),
            (-0.5..1.5f64, -0.5..1.5f64),
        )
    });
    check(input, |((w, h, dim), data, (fx, fy))| {
        let field = VectorField::from_vec(GridShape::new(w, h).unwrap(), dim, data).unwrap();
        let at = PixelCoord::new(fx * (w - 1) as f64, fy * (h - 1) as f64);
        let (cx, cy) = (
            at.x.clamp(0.0, (w - 1) as f64),
            at.y.clamp(0.0, (h - 1) as f64),
        );
        let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let v = field.interpolate(at);
        for (c, &vc) in v.iter().enumerate().take(dim) {
            let corners = [
                field.at(x0, y0)[c],
                field.at(x1, y0)[c],
                field.at(x0, y1)[c],
                field.at(x1, y1)[c],
            ];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(
                vc >= lo - 1e-12 && vc <= hi + 1e-12,
                "{vc} outside [{lo}, {hi}]"
            );
        }
        Ok(())
    })
}

/// Zero joint motion with zero flow leaves the Jacobians alone and only adds
/// the process noise to the variances.
pub fn zero_excitation_noop() -> Result<(), String> {
    check(
        (jacobian_field(), 0.0..1.0f64, any::<bool>()),
        |(field, q, observed)| {
            let n = field.n_joints();
            let cfg = DijeConfig {
                mode: if observed {
                    WarpMode::Observed
                } else {
                    WarpMode::Predicted
                },
                noise: NoiseParams::new(q, 1.0).unwrap(),
                ..Default::default()
            };
            let out = dije_step(
                &field,
                &JointSample::zeros(n),
                &FlowField::zeros(field.shape()),
                &cfg,
            )
            .unwrap();
            for i in 0..field.shape().len() {
                prop_assert_eq!(out.jac(i), field.jac(i));
                for (p, p0) in out.var(i).iter().zip(field.var(i)) {
                    prop_assert_eq!(*p, p0 + q);
                }
            }
            Ok(())
        },
    )
}
