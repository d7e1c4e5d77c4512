use attnpose::geom::{geodesic_angle, Frame, OrientedPoint, OrientedPointCloud, Pose, Rotation, UnitVec3, Vec3};
use attnpose::metrics::{add_metric, adds_metric, auc};
use attnpose::net::{attention_forward, predict, Network};
use attnpose::gradcheck::{random_instance, tiny_config};
use attnpose::ppf::{attention_target, PpfGammas};
use attnpose::solver::{average_poses, kabsch_align, CorrespondenceSet, Direction, PoseSet, Provenance};
use attnpose::synth::{farthest_point_sampling, gen_shape, render_scene, SceneSpec, ShapeKind, ShapeSpec};
use attnpose::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn rotation() -> impl Strategy<Value = Rotation> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-zero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
        .prop_map(|(w, x, y, z)| Rotation::from_wxyz([w, x, y, z]).unwrap())
}

fn pose() -> impl Strategy<Value = Pose> {
    (rotation(), -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(r, x, y, z)| Pose::new(r, Vec3::new(x, y, z)))
}

fn oriented_point() -> impl Strategy<Value = OrientedPoint> {
    (
        -0.1..0.1f64,
        -0.1..0.1f64,
        -0.1..0.1f64,
        -1.0..1.0f64,
        -1.0..1.0f64,
        -1.0..1.0f64,
    )
        .prop_filter_map("zero normal", |(x, y, z, a, b, c)| {
            UnitVec3::new_normalize(Vec3::new(a, b, c))
                .filter(|_| a * a + b * b + c * c > 1e-2)
                .map(|n| OrientedPoint::new(Vec3::new(x, y, z), n))
        })
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = OrientedPointCloud> {
    prop::collection::vec(oriented_point(), min..max).prop_map(|pts| OrientedPointCloud::new(pts, Frame::Model).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_preserves_distances_and_normal_angles(p in pose(), c in cloud(2, 12)) {
        let moved = p.apply_cloud(&c, Frame::Scene);
        for i in 0..c.len() {
            for j in 0..c.len() {
                let (a, b) = (&c.points()[i], &c.points()[j]);
                let (ma, mb) = (&moved.points()[i], &moved.points()[j]);
                prop_assert!(((a.position - b.position).norm() - (ma.position - mb.position).norm()).abs() < 1e-9);
                let before = a.normal.as_vec().dot(b.normal.as_vec());
                let after = ma.normal.as_vec().dot(mb.normal.as_vec());
                prop_assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_composes_to_identity(p in pose()) {
        let id = p.inverse().compose(&p);
        prop_assert!(geodesic_angle(&id.rotation, &Rotation::identity()) < 1e-9);
        prop_assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn geodesic_angle_is_symmetric_and_bounded(a in rotation(), b in rotation()) {
        let ab = geodesic_angle(&a, &b);
        prop_assert!((ab - geodesic_angle(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&ab));
    }

    #[test]
    fn quaternions_are_canonical(p in pose()) {
        prop_assert!(p.rotation.wxyz()[0] >= 0.0);
    }

    #[test]
    fn attention_target_is_pose_invariant(p in pose(), q in pose(), c in cloud(3, 8)) {
        let g = PpfGammas::default();
        let scene = p.apply_cloud(&c, Frame::Scene);
        let w = attention_target(&scene, &c, &p, &g).unwrap();
        // re-posing the scene and composing the ground truth leaves W unchanged
        let scene2 = q.apply_cloud(&scene, Frame::Scene);
        let w2 = attention_target(&scene2, &c, &q.compose(&p), &g).unwrap();
        for (a, b) in w.weights.iter().zip(&w2.weights) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for i in 0..c.len() {
            prop_assert!((w.get(i, i) - 1.0).abs() < 1e-12);
            prop_assert!(w.row(i).iter().all(|v| *v > 0.0 && *v <= 1.0));
        }
    }

    #[test]
    fn kabsch_recovers_constructed_pose(p in pose(), c in cloud(4, 16)) {
        let pairs: Vec<_> = c.points().iter().map(|m| (*m, p.transform_oriented(m))).collect();
        let set = CorrespondenceSet::new(pairs, Direction::ModelToScene).unwrap();
        if let Ok(found) = kabsch_align(&set, None) {
            prop_assert!(geodesic_angle(&found.rotation, &p.rotation) < 1e-7);
            prop_assert!((found.translation - p.translation).norm() < 1e-8);
            prop_assert!((found.rotation.matrix().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn averaging_identical_poses_is_idempotent(p in pose(), k in 1usize..6) {
        let mut set = PoseSet::default();
        for i in 0..k {
            // alternate quaternion sign to exercise the double cover
            let q = p.rotation.wxyz();
            let r = if i % 2 == 0 { q } else { [-q[0], -q[1], -q[2], -q[3]] };
            set.push(Pose::new(Rotation::from_wxyz(r).unwrap(), p.translation), Provenance::Direct);
        }
        let avg = average_poses(&set).unwrap();
        prop_assert!(geodesic_angle(&avg.rotation, &p.rotation) < 1e-7);
        prop_assert!((avg.translation - p.translation).norm() < 1e-12);
    }

    #[test]
    fn adds_never_exceeds_add(a in pose(), b in pose(), c in cloud(1, 20)) {
        prop_assert!(adds_metric(&a, &b, &c) <= add_metric(&a, &b, &c) + 1e-15);
    }

    #[test]
    fn add_is_symmetric_under_translation_offsets(p in pose(), x in -0.1..0.1f64, c in cloud(1, 10)) {
        let q = Pose::new(p.rotation, p.translation + Vec3::new(x, 0.0, 0.0));
        prop_assert!((add_metric(&p, &q, &c) - add_metric(&q, &p, &c)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_monotone(errors in prop::collection::vec(0.0..0.15f64, 1..30), i in 0usize..30, bump in 0.0..0.05f64) {
        let base = auc(&errors, 0.1).unwrap();
        let mut worse = errors.clone();
        let i = i % worse.len();
        worse[i] += bump;
        prop_assert!(auc(&worse, 0.1).unwrap() <= base + 1e-15);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn fps_returns_exactly_k_distinct(n in 5usize..60, k in 1usize..5, seed in 0u64..50) {
        let spec = ShapeSpec::new(ShapeKind::Box, [0.1, 0.1, 0.1], n, seed).unwrap();
        let pts: Vec<Vec3> = gen_shape(&spec).unwrap().positions().cloned().collect();
        let k = k.min(n);
        let idx = farthest_point_sampling(&pts, k, 0);
        prop_assert_eq!(idx.len(), k);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
    }

    #[test]
    fn rendered_scenes_have_n_points(seed in 0u64..1000) {
        let shape = ShapeSpec::new(ShapeKind::BoxWithBump, [0.1, 0.08, 0.06], 64, 3).unwrap();
        let model = gen_shape(&shape).unwrap();
        let spec = SceneSpec { noise_sigma: 0.002, occlusion: 0.3, resample_to: Some(64), seed, ..SceneSpec::default() };
        let r = render_scene(&model, &spec).unwrap();
        prop_assert_eq!(r.scene.len(), 64);
    }

    #[test]
    fn attention_rows_are_stochastic(data in prop::collection::vec(-3.0..3.0f64, 48)) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(6, 4, data[..24].to_vec()).unwrap()).unwrap();
        let b = g.constant(Tensor::new(6, 4, data[24..].to_vec()).unwrap()).unwrap();
        let (m, mt) = attention_forward(&mut g, a, b).unwrap();
        for v in [m, mt] {
            let t = g.value(v);
            for r in 0..t.rows {
                prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn scene_permutation_permutes_attention_rows_and_scene_predictions(seed in 0u64..100) {
        let (scene, model, _) = random_instance(12, seed);
        let net = Network::new(tiny_config(12), seed).unwrap();
        let perm: Vec<usize> = (0..12).map(|i| (i * 5 + 3) % 12).collect();
        let a = predict(&net, &scene, &model).unwrap();
        let b = predict(&net, &scene.permuted(&perm), &model).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            for (x, y) in b.attention.row(i).iter().zip(a.attention.row(j)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let (pa, pb) = (&a.scene_to_model.pairs[j].1, &b.scene_to_model.pairs[i].1);
            prop_assert!((pa.position - pb.position).norm() < 1e-12);
        }
    }
}
