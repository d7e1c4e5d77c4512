//! Finite-difference suites for every differentiable op and for the whole
//! network.
//!
//! Each op instance is reduced to a scalar with a random bilinear functional
//! `uᵀ·out·v`, so only `matmul` is added on top of the op under test. Inputs
//! are drawn away from the kinks of `relu`, `l1`, the pooling maxima and
//! nearest-point switches, where central differences are meaningless. The
//! network-level checks cannot steer clear of every kink and fall back to
//! one-sided differences where a stencil crosses one.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::geom::{Frame, OrientedPoint, OrientedPointCloud, Pose, Rotation, UnitVec3, Vec3};
use crate::net::{scene_loss, AttentionFlags, NetConfig, NetInput, Network, PsnConfig, Targets, TrainConfig, feature_forward};
use crate::synth::derive_seed;
use crate::tensor::{grad_check, grad_check_piecewise, Graph, PoseDistanceMode, Tensor, Var};

/// Step used for central differences. Smaller steps let rounding noise
/// swamp gradient entries that are tiny next to the loss value.
pub const STEP: f64 = 1e-5;
/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Entries checked one-sided because the stencil crossed a kink.
    pub kinks: usize,
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

/// Normal entries pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let mut t = randn(rng, rows, cols);
    for x in &mut t.data {
        if x.abs() < gap {
            *x = if *x < 0.0 { -gap } else { gap };
        }
    }
    t
}

fn functional(g: &mut Graph, out: Var, u: &Tensor, v: &Tensor) -> Result<Var> {
    let u = g.constant(u.clone())?;
    let v = g.constant(v.clone())?;
    let left = g.matmul(u, out)?;
    g.matmul(left, v)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..6), rng.random_range(1..6))
}

/// Gradient-checks `op` on one random instance.
fn check_instance<F>(rng: &mut ChaCha8Rng, params: Vec<Tensor>, out_shape: (usize, usize), op: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let u = randn(rng, 1, out_shape.0);
    let v = randn(rng, out_shape.1, 1);
    let report = grad_check(
        |g, vars| {
            let out = op(g, vars)?;
            functional(g, out, &u, &v)
        },
        &params,
        STEP,
        OP_TOLERANCE,
    )?;
    Ok(report.worst())
}

fn distinct_columns(t: &mut Tensor, rng: &mut ChaCha8Rng) {
    // strictly separated column values keep the pooled maximum unique
    for c in 0..t.cols {
        let mut order: Vec<usize> = (0..t.rows).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for (rank, r) in order.into_iter().enumerate() {
            t.data[r * t.cols + c] = rank as f64 * 0.1 + rng.random_range(0.0..0.05);
        }
    }
}

fn nearest_is_stable(quat: &Tensor, trans: &Tensor, points: &[[f64; 3]], targets: &[[f64; 3]]) -> bool {
    for i in 0..quat.rows {
        let q = quat.row(i);
        let t = trans.row(i);
        let moved: Vec<[f64; 3]> = points
            .iter()
            .map(|p| {
                let r = rotate(q, p);
                [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
            })
            .collect();
        for y in targets {
            let mut d: Vec<f64> = moved
                .iter()
                .map(|m| ((m[0] - y[0]).powi(2) + (m[1] - y[1]).powi(2) + (m[2] - y[2]).powi(2)).sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            if d.len() > 1 && d[1] - d[0] < 1e-3 {
                return false;
            }
        }
    }
    true
}

fn rotate(q: &[f64], p: &[f64; 3]) -> [f64; 3] {
    let v = [q[1], q[2], q[3]];
    let cross = |a: &[f64; 3], b: &[f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let c1 = cross(&v, p);
    let c2 = cross(&v, &c1);
    [
        p[0] + 2.0 * (q[0] * c1[0] + c2[0]),
        p[1] + 2.0 * (q[0] * c1[1] + c2[1]),
        p[2] + 2.0 * (q[0] * c1[2] + c2[2]),
    ]
}

fn points(rng: &mut ChaCha8Rng, k: usize) -> Vec<[f64; 3]> {
    (0..k)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect()
}

/// Names of the ops covered by [`op_suite`].
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "transpose",
    "concat_cols",
    "slice_cols",
    "relu",
    "row_softmax",
    "row_l2_normalize",
    "mean_pool_rows",
    "max_pool_rows",
    "mse",
    "l1",
    "scalar_scale",
    "broadcast_rows",
    "pose_distance_matched",
    "pose_distance_nearest",
];

/// Runs `instances` random gradient checks of one op.
pub fn op_suite(name: &str, instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (r, c) = dims(&mut rng);
        let e = match name {
            "matmul" => {
                let k = rng.random_range(1..6);
                let (a, b) = (randn(&mut rng, r, k), randn(&mut rng, k, c));
                check_instance(&mut rng, vec![a, b], (r, c), |g, v| g.matmul(v[0], v[1]))?
            }
            "add" => {
                let (a, b) = (randn(&mut rng, r, c), randn(&mut rng, r, c));
                check_instance(&mut rng, vec![a, b], (r, c), |g, v| g.add(v[0], v[1]))?
            }
            "add_row" => {
                let (a, b) = (randn(&mut rng, r, c), randn(&mut rng, 1, c));
                check_instance(&mut rng, vec![a, b], (r, c), |g, v| g.add(v[0], v[1]))?
            }
            "transpose" => {
                let a = randn(&mut rng, r, c);
                check_instance(&mut rng, vec![a], (c, r), |g, v| g.transpose(v[0]))?
            }
            "concat_cols" => {
                let c2 = rng.random_range(1..4);
                let (a, b) = (randn(&mut rng, r, c), randn(&mut rng, r, c2));
                check_instance(&mut rng, vec![a, b], (r, c + c2), |g, v| g.concat_cols(&[v[0], v[1]]))?
            }
            "slice_cols" => {
                let width = c + 2;
                let start = rng.random_range(0..width - 1);
                let end = rng.random_range(start + 1..=width);
                let a = randn(&mut rng, r, width);
                check_instance(&mut rng, vec![a], (r, end - start), move |g, v| g.slice_cols(v[0], start, end))?
            }
            "relu" => {
                let a = away_from_zero(&mut rng, r, c, 1e-3);
                check_instance(&mut rng, vec![a], (r, c), |g, v| g.relu(v[0]))?
            }
            "row_softmax" => {
                let a = randn(&mut rng, r, c);
                check_instance(&mut rng, vec![a], (r, c), |g, v| g.row_softmax(v[0]))?
            }
            "row_l2_normalize" => {
                let a = away_from_zero(&mut rng, r, c, 0.1);
                check_instance(&mut rng, vec![a], (r, c), |g, v| g.row_l2_normalize(v[0]))?
            }
            "mean_pool_rows" => {
                let a = randn(&mut rng, r, c);
                check_instance(&mut rng, vec![a], (1, c), |g, v| g.mean_pool_rows(v[0]))?
            }
            "max_pool_rows" => {
                let mut a = randn(&mut rng, r, c);
                distinct_columns(&mut a, &mut rng);
                check_instance(&mut rng, vec![a], (1, c), |g, v| g.max_pool_rows(v[0]))?
            }
            "mse" => {
                let (a, b) = (randn(&mut rng, r, c), randn(&mut rng, r, c));
                check_instance(&mut rng, vec![a, b], (1, 1), |g, v| g.mse(v[0], v[1]))?
            }
            "l1" => {
                let a = randn(&mut rng, r, c);
                let gap = away_from_zero(&mut rng, r, c, 1e-3);
                let b = Tensor {
                    rows: r,
                    cols: c,
                    data: a.data.iter().zip(&gap.data).map(|(x, d)| x + d).collect(),
                };
                check_instance(&mut rng, vec![a, b], (1, 1), |g, v| g.l1(v[0], v[1]))?
            }
            "scalar_scale" => {
                let a = randn(&mut rng, r, c);
                let s: f64 = rng.sample(StandardNormal);
                check_instance(&mut rng, vec![a], (r, c), move |g, v| g.scalar_scale(v[0], s))?
            }
            "broadcast_rows" => {
                let a = randn(&mut rng, 1, c);
                check_instance(&mut rng, vec![a], (r, c), move |g, v| g.broadcast_rows(v[0], r))?
            }
            "pose_distance_matched" | "pose_distance_nearest" => {
                let nearest = name.ends_with("nearest");
                let k = rng.random_range(2..7);
                let (pts, tgts, quat, trans) = loop {
                    let pts = points(&mut rng, k);
                    let tgts = points(&mut rng, k);
                    let mut quat = randn(&mut rng, r, 4);
                    // normalization is ill-conditioned near the zero quaternion
                    for i in 0..r {
                        let row = &mut quat.data[i * 4..i * 4 + 4];
                        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm < 0.5 {
                            row.iter_mut().for_each(|x| *x *= 0.5 / norm.max(1e-3));
                        }
                    }
                    let trans = randn(&mut rng, r, 3);
                    if !nearest || nearest_is_stable(&quat, &trans, &pts, &tgts) {
                        break (Rc::new(pts), Rc::new(tgts), quat, trans);
                    }
                };
                check_instance(&mut rng, vec![quat, trans], (r, 1), move |g, v| {
                    let mode = if nearest {
                        PoseDistanceMode::Nearest
                    } else {
                        PoseDistanceMode::Matched
                    };
                    g.pose_distance(v[0], v[1], pts.clone(), tgts.clone(), mode)
                })?
            }
            other => panic!("unknown op suite '{other}'"),
        };
        worst = worst.max(e);
    }
    Ok(SuiteResult {
        name: name.into(),
        instances,
        worst,
        tolerance: OP_TOLERANCE,
        passed: worst <= OP_TOLERANCE,
        kinks: 0,
    })
}

/// Every op suite with seeds derived from `seed`.
pub fn op_suites(instances: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    OPS.iter()
        .enumerate()
        .map(|(i, op)| op_suite(op, instances, derive_seed(seed, i as u64)))
        .collect()
}

/// A tiny network configuration for gradient checks.
pub fn tiny_config(n_points: usize) -> NetConfig {
    NetConfig {
        n_points,
        psn: PsnConfig {
            trunk: vec![6, 8, 8],
            exterior: 4,
            output: 8,
        },
        psn_shared: true,
        feature: vec![8],
        decoder: 8,
        regressor: vec![8],
        attention: AttentionFlags::ALL,
    }
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// A random asymmetric instance: a jittered model and a posed, shuffled
/// copy of it as the scene.
pub fn random_instance(n: usize, seed: u64) -> (OrientedPointCloud, OrientedPointCloud, Pose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Vec<OrientedPoint> = (0..n)
        .map(|_| {
            let p = normal3(&mut rng) * 0.05;
            let nrm = UnitVec3::new_normalize(normal3(&mut rng)).unwrap_or_else(UnitVec3::z);
            OrientedPoint::new(p, nrm)
        })
        .collect();
    let model = OrientedPointCloud::new(model, Frame::Model).expect("finite");
    let q = [1.0, 0.3 * rng.random::<f64>(), -0.2, 0.1];
    let gt = Pose::new(Rotation::from_wxyz(q).expect("non-zero"), Vec3::new(0.01, -0.02, 0.5));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut scene = gt.apply_cloud(&model, Frame::Scene).permuted(&perm);
    // observed positions are noisy
    let pts: Vec<OrientedPoint> = scene
        .points()
        .iter()
        .map(|p| OrientedPoint::new(p.position + normal3(&mut rng) * 0.002, p.normal))
        .collect();
    scene = OrientedPointCloud::new(pts, Frame::Scene).expect("finite");
    (scene, model, gt)
}

/// Total loss through the whole network on an `n`-point instance.
pub fn end_to_end(n: usize, seed: u64) -> Result<SuiteResult> {
    let config = tiny_config(n);
    let net = Network::new(config, seed)?;
    let (scene, model, gt) = random_instance(n, derive_seed(seed, 1));
    let input = NetInput::new(&scene, &model)?;
    let targets = Targets::new(&scene, &model, &gt, false);
    let cfg = TrainConfig::default();
    let report = grad_check_piecewise(
        |g, vars| Ok(scene_loss(g, &net, vars, &input, &targets, &model, &scene, &cfg)?.0),
        net.params(),
        STEP,
        NETWORK_TOLERANCE,
    )?;
    Ok(SuiteResult {
        name: "network_total_loss".into(),
        instances: 1,
        worst: report.worst(),
        tolerance: NETWORK_TOLERANCE,
        passed: report.passed(),
        kinks: report.kinks,
    })
}

/// Feature extractors followed by an L1 head against a fixed target.
pub fn feature_head(n: usize, seed: u64) -> Result<SuiteResult> {
    let net = Network::new(tiny_config(n), seed)?;
    let (scene, model, _) = random_instance(n, derive_seed(seed, 1));
    let input = NetInput::new(&scene, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let width = net.config().branch_input_width();
    let target = away_from_zero(&mut rng, n, width, 0.5);
    let report = grad_check_piecewise(
        |g, vars| {
            let xs = g.constant(input.scene.clone())?;
            let xm = g.constant(input.model.clone())?;
            let cs = g.constant(input.scene_channel.clone())?;
            let cm = g.constant(input.model_channel.clone())?;
            let (fs, fm) = feature_forward(g, &net, vars, (xs, cs), (xm, cm))?;
            let t = g.constant(target.clone())?;
            let a = g.l1(fs, t)?;
            let b = g.l1(fm, t)?;
            g.add(a, b)
        },
        net.params(),
        STEP,
        OP_TOLERANCE,
    )?;
    Ok(SuiteResult {
        name: "feature_forward_l1".into(),
        instances: 1,
        worst: report.worst(),
        tolerance: OP_TOLERANCE,
        passed: report.passed(),
        kinks: report.kinks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_instances() {
        for r in op_suites(10, 3).unwrap() {
            assert!(r.passed, "{} worst {:e}", r.name, r.worst);
        }
    }

    #[test]
    fn feature_head_passes() {
        let r = feature_head(8, 1).unwrap();
        assert!(r.passed, "worst {:e}", r.worst);
    }

    #[test]
    fn suite_is_deterministic() {
        assert_eq!(op_suite("row_softmax", 5, 9).unwrap(), op_suite("row_softmax", 5, 9).unwrap());
    }
}
