use attnpose::config::Config;
use attnpose::geom::{Frame, OrientedPoint, OrientedPointCloud, Pose, Rotation, UnitVec3, Vec3};
use attnpose::gradcheck::tiny_config;
use attnpose::io::*;
use attnpose::net::{NetConfig, Network};
use attnpose::solver::{CorrespondenceSet, Direction, PoseSet, Provenance};
use attnpose::synth::{make_dataset, SceneSpec, ShapeKind, ShapeSpec};
use attnpose::tensor::Tensor;
use attnpose::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn wide(rng: &mut ChaCha8Rng) -> f64 {
    // mixes magnitudes so shortest-form printing is exercised
    let m: f64 = rng.random_range(-1.0..1.0);
    m * 10f64.powi(rng.random_range(-12..6))
}

fn random_cloud(rng: &mut ChaCha8Rng) -> OrientedPointCloud {
    let n = rng.random_range(1..40);
    let pts = (0..n)
        .map(|_| {
            let p = Vec3::new(wide(rng), wide(rng), wide(rng));
            let nrm = loop {
                let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if let Some(u) = UnitVec3::new_normalize(v) {
                    break u;
                }
            };
            OrientedPoint::new(p, nrm)
        })
        .collect();
    OrientedPointCloud::new(pts, Frame::Scene).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5];
    Pose::new(Rotation::from_wxyz(q).unwrap(), Vec3::new(wide(rng), wide(rng), wide(rng)))
}

#[test]
fn ply_round_trips_100_random_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let c = random_cloud(&mut rng);
        let back = parse_ply(&ply_to_string(&c), Frame::Scene, None).unwrap();
        assert_eq!(back, c);
    }
}

#[test]
fn pose_json_round_trips_100_random_poses() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let p = random_pose(&mut rng);
        let back = parse_pose_json(&pose_to_json(&p)).unwrap();
        assert_eq!(back.rotation.wxyz(), p.rotation.wxyz());
        assert_eq!(back.translation, p.translation);
    }
}

#[test]
fn pose_sets_round_trip_with_provenance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let mut set = PoseSet::default();
        for i in 0..rng.random_range(1..6) {
            let prov = [Provenance::Direct, Provenance::SceneBranch, Provenance::ModelBranch][i % 3];
            set.push(random_pose(&mut rng), prov);
        }
        let back = parse_pose_set_json(&pose_set_to_json(&set)).unwrap();
        assert_eq!(back.len(), set.len());
        for ((a, pa), (b, pb)) in set.poses.iter().zip(&back.poses) {
            assert_eq!(pa, pb);
            assert_eq!(a.rotation.wxyz(), b.rotation.wxyz());
            assert_eq!(a.translation, b.translation);
        }
    }
}

#[test]
fn matrix_round_trips_100_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..12), rng.random_range(1..12));
        let t = Tensor::new(r, c, (0..r * c).map(|_| wide(&mut rng)).collect()).unwrap();
        let back = parse_matrix(&matrix_to_string(&t)).unwrap();
        assert_eq!(back, t);
    }
}

#[test]
fn checkpoint_round_trips_100_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..100 {
        let mut cfg: NetConfig = tiny_config(rng.random_range(4..20));
        cfg.psn_shared = i % 2 == 0;
        cfg.regressor = vec![rng.random_range(2..10)];
        let net = Network::new(cfg.clone(), rng.random()).unwrap();
        let back = parse_checkpoint(&checkpoint_to_string(&net), Some(&cfg)).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.names(), net.names());
        assert_eq!(back.config(), net.config());
    }
}

#[test]
fn checkpoint_shape_mismatch_is_schema_violation() {
    let net = Network::new(tiny_config(8), 0).unwrap();
    let mut other = tiny_config(8);
    other.decoder = 9;
    let err = parse_checkpoint(&checkpoint_to_string(&net), Some(&other)).unwrap_err();
    assert!(matches!(err, Error::SchemaViolation(_)), "{err}");
    assert!(matches!(parse_checkpoint("{\"format\":\"checkpoint.v0\"}", None), Err(Error::SchemaViolation(_))));
}

#[test]
fn correspondences_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..100 {
        let a = random_cloud(&mut rng);
        let p = random_pose(&mut rng);
        let pairs = a.points().iter().map(|x| (*x, p.transform_oriented(x))).collect();
        let dir = if i % 2 == 0 { Direction::SceneToModel } else { Direction::ModelToScene };
        let set = CorrespondenceSet::new(pairs, dir).unwrap();
        assert_eq!(parse_correspondences(&correspondences_to_json(&set)).unwrap(), set);
    }
}

#[test]
fn config_text_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let mut c = Config::default();
        c.seed = rng.random();
        c.noise_sigma = rng.random_range(0.0..0.01);
        c.weights.phi[3] = rng.random_range(0.0..10.0);
        c.adam.lr = rng.random_range(1e-5..1e-2);
        c.psn_shared = rng.random();
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let shape = ShapeSpec::new(ShapeKind::Cylinder, [0.04, 0.1, 0.0], 32, 2).unwrap();
    let spec = SceneSpec {
        noise_sigma: 0.001,
        occlusion: 0.2,
        resample_to: Some(32),
        ..SceneSpec::default()
    };
    let ds = make_dataset(&shape, 4, &spec, 9).unwrap();
    save_dataset(dir.path(), &ds, 9, 0.5).unwrap();
    let (back, manifest) = load_dataset(dir.path()).unwrap();
    assert_eq!(manifest.seed, 9);
    assert_eq!(back.model, ds.model);
    assert!(back.symmetric);
    for (a, b) in ds.records.iter().zip(&back.records) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.gt.rotation.wxyz(), b.gt.rotation.wxyz());
        assert_eq!(a.gt.translation, b.gt.translation);
    }
}

#[test]
fn ply_error_cases() {
    let missing_nz = "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nproperty double nx\nproperty double ny\nend_header\n0 0 0 0 0\n";
    assert!(matches!(parse_ply(missing_nz, Frame::Scene, None), Err(Error::MissingNormals)));
    let binary = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
    assert!(matches!(parse_ply(binary, Frame::Scene, None), Err(Error::MalformedHeader(_))));
    let nan = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\nnan 0 0 0 0 1\n";
    assert!(matches!(parse_ply(nan, Frame::Scene, None), Err(Error::NonFiniteInput(_))));
}
