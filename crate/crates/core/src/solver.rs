//! Pose recovery from point correspondences and pose-set fusion.
//!
//! Two independent solvers are provided: weighted least squares over all
//! matches ([`kabsch_align`]) and the oriented point-pair construction
//! `T = T_{s→g}⁻¹ · R_x(α) · T_{m→g}` ([`pair_alignment_pose`]), which needs
//! only two matches with normals. [`average_poses`] fuses a candidate set
//! into one pose.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{OrientedPoint, Pose, Rotation, UnitVec3, Vec3};

/// Which way a correspondence set was predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Sources are observed scene points, targets are their model-frame
    /// matches.
    SceneToModel,
    /// Sources are model points, targets are their scene-frame matches.
    ModelToScene,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(OrientedPoint, OrientedPoint)>,
    pub direction: Direction,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(OrientedPoint, OrientedPoint)>, direction: Direction) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptySet);
        }
        Ok(CorrespondenceSet { pairs, direction })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair `i` as `(model point, scene point)` regardless of direction.
    pub fn model_scene(&self, i: usize) -> (&OrientedPoint, &OrientedPoint) {
        let (s, t) = &self.pairs[i];
        match self.direction {
            Direction::SceneToModel => (t, s),
            Direction::ModelToScene => (s, t),
        }
    }

    pub fn provenance(&self) -> Provenance {
        match self.direction {
            Direction::SceneToModel => Provenance::SceneBranch,
            Direction::ModelToScene => Provenance::ModelBranch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Direct,
    SceneBranch,
    ModelBranch,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseSet {
    pub poses: Vec<(Pose, Provenance)>,
}

impl PoseSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn push(&mut self, pose: Pose, provenance: Provenance) {
        self.poses.push((pose, provenance));
    }

    pub fn extend(&mut self, other: PoseSet) {
        self.poses.extend(other.poses);
    }
}

/// Least-squares rigid transform taking model points onto scene points,
/// optionally weighted per pair.
///
/// The returned pose is always model→scene; the set's direction decides which
/// side of each pair is the model point. Reflections are corrected, never
/// returned.
pub fn kabsch_align(c: &CorrespondenceSet, weights: Option<&[f64]>) -> Result<Pose> {
    let n = c.len();
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::SizeMismatch { left: n, right: w.len() });
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::NonFiniteInput("kabsch weights".into()));
        }
    }
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!("{n} pairs, need at least 3")));
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..n).map(weight).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateConfiguration("weights sum to zero".into()));
    }
    let mut src_c = Vec3::zeros();
    let mut tgt_c = Vec3::zeros();
    for i in 0..n {
        let (m, s) = c.model_scene(i);
        src_c += m.position * weight(i);
        tgt_c += s.position * weight(i);
    }
    src_c /= total;
    tgt_c /= total;

    let mut h = Matrix3::zeros();
    for i in 0..n {
        let (m, s) = c.model_scene(i);
        h += weight(i) * (m.position - src_c) * (s.position - tgt_c).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= sv[0] * 1e-12 {
        return Err(Error::DegenerateConfiguration("correspondences span rank < 2".into()));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = v * correction * u.transpose();
    let rotation = Rotation::from_matrix(&r);
    let translation = tgt_c - rotation.rotate(&src_c);
    Ok(Pose::new(rotation, translation))
}

/// Transform that moves `p` to the origin and turns its normal onto `+x`.
///
/// The rotation is the minimal one about `normal × x̂`; a normal equal to
/// `-x̂` is turned by π about `+z`.
pub fn local_frame(p: &OrientedPoint) -> Pose {
    let n = p.normal.as_vec();
    let x = Vec3::x();
    let axis = n.cross(&x);
    let s2 = axis.norm_squared();
    let c = n.dot(&x);
    let rotation = if s2 == 0.0 && c < 0.0 {
        Rotation::from_axis_angle(&UnitVec3::z(), std::f64::consts::PI)
    } else {
        // 1 + cos θ, computed without cancellation when θ is near π
        let w = if c >= 0.0 { 1.0 + c } else { s2 / (1.0 - c) };
        Rotation::from_wxyz([w, axis.x, axis.y, axis.z]).unwrap_or_else(Rotation::identity)
    };
    let translation = -rotation.rotate(&p.position);
    Pose::new(rotation, translation)
}

/// In-plane radius below which the alignment angle is undefined.
const DEGENERATE_RADIUS: f64 = 1e-9;

/// Pose mapping the model pair onto the scene pair: reference points and
/// normals coincide exactly, the second points are aligned by a rotation
/// about the reference normal.
pub fn pair_alignment_pose(
    model_pair: (&OrientedPoint, &OrientedPoint),
    scene_pair: (&OrientedPoint, &OrientedPoint),
) -> Result<Pose> {
    let to_model_frame = local_frame(model_pair.0);
    let to_scene_frame = local_frame(scene_pair.0);
    let pm = to_model_frame.transform_point(&model_pair.1.position);
    let ps = to_scene_frame.transform_point(&scene_pair.1.position);
    let rm = pm.y.hypot(pm.z);
    let rs = ps.y.hypot(ps.z);
    if rm < DEGENERATE_RADIUS || rs < DEGENERATE_RADIUS {
        return Err(Error::DegeneratePair);
    }
    let alpha = ps.z.atan2(ps.y) - pm.z.atan2(pm.y);
    let spin = Pose::from_rotation(Rotation::from_axis_angle(&UnitVec3::x(), alpha));
    Ok(to_scene_frame.inverse().compose(&spin).compose(&to_model_frame))
}

/// Samples `num_pairs` random match pairs and solves each with
/// [`pair_alignment_pose`]; degenerate pairs are skipped.
pub fn poses_from_matches(c: &CorrespondenceSet, num_pairs: usize, seed: u64) -> Result<PoseSet> {
    if c.len() < 2 {
        return Err(Error::DegenerateConfiguration(format!("{} pairs, need at least 2", c.len())));
    }
    if num_pairs == 0 {
        return Err(Error::InvalidConfig {
            key: "num_pairs".into(),
            reason: "must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.len();
    let mut out = PoseSet::default();
    for _ in 0..num_pairs {
        let r = rng.random_range(0..n);
        let mut i = rng.random_range(0..n - 1);
        if i >= r {
            i += 1;
        }
        let (mr, sr) = c.model_scene(r);
        let (mi, si) = c.model_scene(i);
        match pair_alignment_pose((mr, mi), (sr, si)) {
            Ok(pose) => out.push(pose, c.provenance()),
            Err(Error::DegeneratePair) => continue,
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::AllPairsDegenerate);
    }
    Ok(out)
}

/// Arithmetic mean of translations and chordal (eigenvector) mean of
/// rotations, uniform over all members.
pub fn average_poses(set: &PoseSet) -> Result<Pose> {
    average_pose_iter(set.poses.iter().map(|(p, _)| p))
}

pub(crate) fn average_pose_iter<'a>(poses: impl Iterator<Item = &'a Pose>) -> Result<Pose> {
    let mut count = 0usize;
    let mut t = Vec3::zeros();
    let mut acc = Matrix4::zeros();
    let mut reference: Option<Vector4<f64>> = None;
    for pose in poses {
        let [w, x, y, z] = pose.rotation.wxyz();
        let mut q = Vector4::new(w, x, y, z);
        let r = *reference.get_or_insert(q);
        if q.dot(&r) < 0.0 {
            q = -q;
        }
        acc += q * q.transpose();
        t += pose.translation;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySet);
    }
    let eig = SymmetricEigen::new(acc);
    let best = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(best);
    let rotation = Rotation::from_wxyz([q[0], q[1], q[2], q[3]]).ok_or(Error::EmptySet)?;
    Ok(Pose::new(rotation, t / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::geodesic_angle;
    use approx::assert_abs_diff_eq;

    fn op(p: [f64; 3], n: [f64; 3]) -> OrientedPoint {
        OrientedPoint::new(Vec3::from(p), UnitVec3::new_normalize(Vec3::from(n)).unwrap())
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() - 0.5);
        let t = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() + 0.2);
        Pose::new(Rotation::from_wxyz(q).unwrap(), t)
    }

    fn random_oriented(rng: &mut ChaCha8Rng) -> OrientedPoint {
        op(
            [rng.random::<f64>() * 0.2 - 0.1, rng.random::<f64>() * 0.2 - 0.1, rng.random::<f64>() * 0.2 - 0.1],
            [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5],
        )
    }

    fn posed_set(rng: &mut ChaCha8Rng, g: &Pose, n: usize) -> CorrespondenceSet {
        let pairs = (0..n)
            .map(|_| {
                let m = random_oriented(rng);
                (m, g.transform_oriented(&m))
            })
            .collect();
        CorrespondenceSet::new(pairs, Direction::ModelToScene).unwrap()
    }

    #[test]
    fn kabsch_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = posed_set(&mut rng, &Pose::identity(), 10);
        let pose = kabsch_align(&set, None).unwrap();
        assert!(geodesic_angle(&pose.rotation, &Rotation::identity()) < 1e-12);
        assert!(pose.translation.norm() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_constructed_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let g = random_pose(&mut rng);
            let set = posed_set(&mut rng, &g, 30);
            let pose = kabsch_align(&set, None).unwrap();
            assert!(geodesic_angle(&pose.rotation, &g.rotation) < 1e-9);
            assert!((pose.translation - g.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn kabsch_scene_to_model_direction_returns_model_to_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_pose(&mut rng);
        let mut set = posed_set(&mut rng, &g, 12);
        set.pairs.iter_mut().for_each(|(a, b)| std::mem::swap(a, b));
        set.direction = Direction::SceneToModel;
        let pose = kabsch_align(&set, None).unwrap();
        assert!(geodesic_angle(&pose.rotation, &g.rotation) < 1e-9);
    }

    #[test]
    fn kabsch_collinear_is_degenerate() {
        let pairs = (0..3)
            .map(|i| {
                let p = op([i as f64, 0.0, 0.0], [0.0, 0.0, 1.0]);
                (p, p)
            })
            .collect();
        let set = CorrespondenceSet::new(pairs, Direction::ModelToScene).unwrap();
        assert!(matches!(kabsch_align(&set, None), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn kabsch_weights_ignore_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_pose(&mut rng);
        let mut set = posed_set(&mut rng, &g, 10);
        set.pairs[0].1.position += Vec3::new(1.0, 0.0, 0.0);
        let mut w = vec![1.0; 10];
        w[0] = 0.0;
        let pose = kabsch_align(&set, Some(&w)).unwrap();
        assert!(geodesic_angle(&pose.rotation, &g.rotation) < 1e-9);
    }

    #[test]
    fn local_frame_examples() {
        let t = local_frame(&op([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]));
        assert_eq!(t.rotation.wxyz(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.translation, Vec3::zeros());

        let p = op([1.0, 2.0, 3.0], [0.0, 0.0, 1.0]);
        let t = local_frame(&p);
        assert!(t.transform_point(&p.position).norm() < 1e-12);
        assert!((t.rotation.rotate(p.normal.as_vec()) - Vec3::x()).norm() < 1e-12);

        let p = op([0.5, 0.0, 0.0], [-1.0, 0.0, 0.0]);
        let t = local_frame(&p);
        let n = t.rotation.rotate(p.normal.as_vec());
        assert!(n.iter().all(|c| c.is_finite()));
        assert!((n - Vec3::x()).norm() < 1e-12);
        assert!(t.transform_point(&p.position).norm() < 1e-12);
    }

    #[test]
    fn local_frame_near_antipodal() {
        for eps in [1e-4, 1e-8, 1e-12, 1e-15] {
            let p = op([0.1, -0.2, 0.3], [-1.0, eps, -eps]);
            let t = local_frame(&p);
            assert!((t.rotation.rotate(p.normal.as_vec()) - Vec3::x()).norm() < 1e-12, "eps {eps}");
            assert!(t.transform_point(&p.position).norm() < 1e-12);
        }
    }

    #[test]
    fn pair_alignment_identity_and_recovery() {
        let a = op([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let b = op([0.05, 0.02, 0.01], [1.0, 0.0, 0.0]);
        let pose = pair_alignment_pose((&a, &b), (&a, &b)).unwrap();
        assert!(geodesic_angle(&pose.rotation, &Rotation::identity()) < 1e-9);
        assert!(pose.translation.norm() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = random_pose(&mut rng);
            let (a, b) = (random_oriented(&mut rng), random_oriented(&mut rng));
            let (sa, sb) = (g.transform_oriented(&a), g.transform_oriented(&b));
            let pose = pair_alignment_pose((&a, &b), (&sa, &sb)).unwrap();
            assert!(geodesic_angle(&pose.rotation, &g.rotation) < 1e-9);
            assert!((pose.translation - g.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn pair_alignment_degenerate() {
        let a = op([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let on_axis = op([0.0, 0.0, 0.3], [1.0, 0.0, 0.0]);
        assert!(matches!(pair_alignment_pose((&a, &on_axis), (&a, &on_axis)), Err(Error::DegeneratePair)));
    }

    #[test]
    fn poses_from_matches_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_pose(&mut rng);
        let set = posed_set(&mut rng, &g, 40);
        let poses = poses_from_matches(&set, 50, 9).unwrap();
        assert!(!poses.is_empty());
        for (p, prov) in &poses.poses {
            assert_eq!(*prov, Provenance::ModelBranch);
            assert!(geodesic_angle(&p.rotation, &g.rotation) < 1e-6);
            assert!((p.translation - g.translation).norm() < 1e-6);
        }
        let once = poses_from_matches(&set, 1, 3).unwrap();
        assert_eq!(once, poses_from_matches(&set, 1, 3).unwrap());
        assert_eq!(once.len(), 1);
    }

    #[test]
    fn poses_from_matches_filters_degenerate() {
        // (0 → 1) puts point 1 on point 0's normal axis; (1 → 0) does not.
        let p0 = op([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let p1 = op([0.0, 0.0, 0.2], [1.0, 0.0, 0.0]);
        let set = CorrespondenceSet::new(vec![(p0, p0), (p1, p1)], Direction::SceneToModel).unwrap();
        let poses = poses_from_matches(&set, 40, 1).unwrap();
        assert!(poses.len() < 40);
        for (p, prov) in &poses.poses {
            assert_eq!(*prov, Provenance::SceneBranch);
            assert!(geodesic_angle(&p.rotation, &Rotation::identity()) < 1e-9);
        }
        let only_bad = CorrespondenceSet::new(vec![(p0, p0), (p0, p0)], Direction::SceneToModel).unwrap();
        assert!(matches!(poses_from_matches(&only_bad, 5, 1), Err(Error::AllPairsDegenerate)));
    }

    #[test]
    fn averaging_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_pose(&mut rng);
        let mut set = PoseSet::default();
        for _ in 0..5 {
            set.push(g, Provenance::Direct);
        }
        let avg = average_poses(&set).unwrap();
        assert!(geodesic_angle(&avg.rotation, &g.rotation) < 1e-12);
        assert!((avg.translation - g.translation).norm() < 1e-15);

        let ten = Pose::from_rotation(Rotation::from_axis_angle(&UnitVec3::z(), 10f64.to_radians()));
        let mut set = PoseSet::default();
        set.push(Pose::identity(), Provenance::Direct);
        set.push(ten, Provenance::SceneBranch);
        let avg = average_poses(&set).unwrap();
        let five = Rotation::from_axis_angle(&UnitVec3::z(), 5f64.to_radians());
        assert!(geodesic_angle(&avg.rotation, &five) < 1e-6);

        assert!(matches!(average_poses(&PoseSet::default()), Err(Error::EmptySet)));
    }

    #[test]
    fn averaging_ignores_quaternion_sign() {
        let q = Rotation::from_wxyz([0.8, 0.1, -0.5, 0.3]).unwrap();
        let [w, x, y, z] = q.wxyz();
        // raw sign-flipped quaternions go through the same averaging path
        let poses = [Pose::new(q, Vec3::zeros()), Pose::new(q, Vec3::zeros())];
        let flipped = [w, x, y, z].map(|c| -c);
        let avg = average_pose_iter(poses.iter()).unwrap();
        assert!(geodesic_angle(&avg.rotation, &q) < 1e-12);
        assert_abs_diff_eq!(crate::geom::quaternion_angle(flipped, avg.rotation.wxyz()), 0.0, epsilon = 1e-12);
    }
}
