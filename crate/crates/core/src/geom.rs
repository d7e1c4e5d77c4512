//! Rigid-body algebra and oriented point clouds.
//!
//! Poses store the model-to-scene transform `p ↦ R p + t`. Rotations are unit
//! quaternions kept in canonical sign (`w ≥ 0`) so that comparison and
//! averaging never see both covers of the same rotation.

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-9;

/// A direction with unit length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitVec3(Vec3);

impl UnitVec3 {
    /// Normalizes `v`; returns `None` for zero-length or non-finite input.
    pub fn new_normalize(v: Vec3) -> Option<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-300 {
            return None;
        }
        Some(UnitVec3(v / n))
    }

    /// Wraps `v` if it is already unit length within tolerance.
    pub fn new_checked(v: Vec3) -> Option<Self> {
        if v.iter().all(|c| c.is_finite()) && (v.norm() - 1.0).abs() <= UNIT_TOL {
            Some(UnitVec3(v))
        } else {
            None
        }
    }

    pub(crate) fn new_unchecked(v: Vec3) -> Self {
        UnitVec3(v)
    }

    pub fn x() -> Self {
        UnitVec3(Vec3::x())
    }

    pub fn y() -> Self {
        UnitVec3(Vec3::y())
    }

    pub fn z() -> Self {
        UnitVec3(Vec3::z())
    }

    #[inline]
    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    #[inline]
    pub fn into_inner(self) -> Vec3 {
        self.0
    }
}

impl std::ops::Neg for UnitVec3 {
    type Output = UnitVec3;
    fn neg(self) -> UnitVec3 {
        UnitVec3(-self.0)
    }
}

/// Unit quaternion rotation in canonical sign.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(nalgebra::UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(nalgebra::UnitQuaternion::identity())
    }

    /// Builds a rotation from `[w, x, y, z]`, normalizing and canonicalizing.
    /// Returns `None` for a zero or non-finite quaternion.
    pub fn from_wxyz(q: [f64; 4]) -> Option<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = quat.norm();
        if !n.is_finite() || n < 1e-300 {
            return None;
        }
        Some(Self::canonical(Unit::new_unchecked(quat / n)))
    }

    /// Like [`from_wxyz`](Self::from_wxyz) but keeps `q` bit for bit when it
    /// is already a canonical unit quaternion.
    pub fn from_wxyz_exact(q: [f64; 4]) -> Option<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if q.iter().all(|c| c.is_finite()) && q[0] >= 0.0 && (quat.norm() - 1.0).abs() <= 1e-12 {
            return Some(Rotation(Unit::new_unchecked(quat)));
        }
        Self::from_wxyz(q)
    }

    pub fn from_axis_angle(axis: &UnitVec3, angle: f64) -> Self {
        let axis = Unit::new_unchecked(*axis.as_vec());
        Self::canonical(nalgebra::UnitQuaternion::from_axis_angle(&axis, angle))
    }

    /// Rotation whose matrix is the orthonormal matrix closest to `m`.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self::canonical(nalgebra::UnitQuaternion::from_rotation_matrix(&rot))
    }

    fn canonical(q: nalgebra::UnitQuaternion<f64>) -> Self {
        let q = q.into_inner();
        let q = if q.w < 0.0 { -q } else { q };
        Rotation(Unit::new_normalize(q))
    }

    /// `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0.transform_vector(v)
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.inverse())
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self::canonical(self.0 * other.0)
    }

    /// Rotation angle of `self⁻¹ · other` in `[0, π]`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        geodesic_angle(self, other)
    }
}

/// Rigid transform mapping model coordinates into scene coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Pose::new(r, Vec3::zeros())
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    #[inline]
    pub fn transform_normal(&self, n: &UnitVec3) -> UnitVec3 {
        let r = self.rotation.rotate(n.as_vec());
        // rigid maps preserve length analytically; this only absorbs drift
        UnitVec3::new_unchecked(r / r.norm())
    }

    pub fn transform_oriented(&self, p: &OrientedPoint) -> OrientedPoint {
        OrientedPoint {
            position: self.transform_point(&p.position),
            normal: self.transform_normal(&p.normal),
        }
    }

    /// Applies the pose to every point of `cloud` and retags it as `frame`.
    pub fn apply_cloud(&self, cloud: &OrientedPointCloud, frame: Frame) -> OrientedPointCloud {
        OrientedPointCloud {
            points: cloud.points.iter().map(|p| self.transform_oriented(p)).collect(),
            frame,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -inv.rotate(&self.translation),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|c| c.is_finite())
            && self.rotation.wxyz().iter().all(|c| c.is_finite())
    }
}

/// Geodesic distance between two rotations, insensitive to quaternion sign.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    let rel = (a.0.inverse() * b.0).into_inner();
    let s = rel.imag().norm();
    let c = rel.w.abs();
    2.0 * s.atan2(c)
}

/// Angle between two unit quaternions given as raw `[w, x, y, z]` arrays.
/// Accepts either sign of either input.
pub fn quaternion_angle(a: [f64; 4], b: [f64; 4]) -> f64 {
    match (Rotation::from_wxyz(a), Rotation::from_wxyz(b)) {
        (Some(a), Some(b)) => geodesic_angle(&a, &b),
        _ => f64::NAN,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Model,
    Scene,
    Canonical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedPoint {
    pub position: Vec3,
    pub normal: UnitVec3,
}

impl OrientedPoint {
    pub fn new(position: Vec3, normal: UnitVec3) -> Self {
        OrientedPoint { position, normal }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientedPointCloud {
    points: Vec<OrientedPoint>,
    pub frame: Frame,
}

impl OrientedPointCloud {
    /// Validates that the cloud is non-empty and every coordinate is finite.
    pub fn new(points: Vec<OrientedPoint>, frame: Frame) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::TooFewPoints(0));
        }
        for (i, p) in points.iter().enumerate() {
            let finite = p.position.iter().chain(p.normal.as_vec().iter()).all(|c| c.is_finite());
            if !finite {
                return Err(Error::NonFiniteInput(format!("point {i}")));
            }
        }
        Ok(OrientedPointCloud { points, frame })
    }

    /// Builds a cloud from parallel position and normal arrays, normalizing
    /// the normals.
    pub fn from_arrays(positions: &[Vec3], normals: &[Vec3], frame: Frame) -> Result<Self> {
        if positions.len() != normals.len() {
            return Err(Error::SizeMismatch {
                left: positions.len(),
                right: normals.len(),
            });
        }
        let points = positions
            .iter()
            .zip(normals)
            .enumerate()
            .map(|(i, (p, n))| {
                UnitVec3::new_normalize(*n)
                    .map(|n| OrientedPoint::new(*p, n))
                    .ok_or_else(|| Error::NonFiniteInput(format!("normal {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, frame)
    }

    #[inline]
    pub fn points(&self) -> &[OrientedPoint] {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = &Vec3> + '_ {
        self.points.iter().map(|p| &p.position)
    }

    pub fn centroid(&self) -> Vec3 {
        self.positions().sum::<Vec3>() / self.len() as f64
    }

    /// Reorders points so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        OrientedPointCloud {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            frame: self.frame,
        }
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }
}

/// Estimates per-point normals from the `k` nearest neighbours and orients
/// each toward `viewpoint`.
///
/// Neighbourhoods are found by brute force. A neighbourhood whose covariance
/// has rank below two yields [`Error::DegenerateNeighborhood`].
pub fn estimate_normals(positions: &[Vec3], k: usize, viewpoint: &Vec3) -> Result<OrientedPointCloud> {
    if k < 3 {
        return Err(Error::InvalidConfig {
            key: "k".into(),
            reason: "need at least 3 neighbours".into(),
        });
    }
    if positions.len() < 3 {
        return Err(Error::DegenerateNeighborhood { index: 0 });
    }
    let k = k.min(positions.len() - 1);
    let mut points = Vec::with_capacity(positions.len());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(positions.len());
    for (i, p) in positions.iter().enumerate() {
        dists.clear();
        dists.extend(positions.iter().enumerate().map(|(j, q)| ((q - p).norm_squared(), j)));
        dists.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0));
        // the k + 1 smallest include the point itself
        let hood = &dists[..=k];
        let mean = hood.iter().map(|&(_, j)| positions[j]).sum::<Vec3>() / hood.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(_, j) in hood {
            let d = positions[j] - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let largest = eig.eigenvalues[order[2]];
        let middle = eig.eigenvalues[order[1]];
        if !(largest > 0.0) || middle <= largest * 1e-12 {
            return Err(Error::DegenerateNeighborhood { index: i });
        }
        let mut n: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
        if n.dot(&(viewpoint - p)) < 0.0 {
            n = -n;
        }
        let normal = UnitVec3::new_normalize(n).ok_or(Error::DegenerateNeighborhood { index: i })?;
        points.push(OrientedPoint::new(*p, normal));
    }
    OrientedPointCloud::new(points, Frame::Scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let q = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        let t = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        Pose::new(Rotation::from_wxyz(q).unwrap(), t)
    }

    fn random_point(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0)
    }

    fn single(p: Vec3, n: Vec3) -> OrientedPointCloud {
        OrientedPointCloud::new(vec![OrientedPoint::new(p, UnitVec3::new_normalize(n).unwrap())], Frame::Model).unwrap()
    }

    #[test]
    fn identity_apply_is_noop() {
        let cloud = single(Vec3::new(0.3, -0.2, 1.0), Vec3::new(1.0, 2.0, 3.0));
        let out = Pose::identity().apply_cloud(&cloud, Frame::Model);
        assert_eq!(out, cloud);
    }

    #[test]
    fn translation_leaves_normals() {
        let cloud = single(Vec3::zeros(), Vec3::z());
        let out = Pose::from_translation(Vec3::new(0.01, 0.0, 0.0)).apply_cloud(&cloud, Frame::Scene);
        assert_eq!(out.points()[0].position, Vec3::new(0.01, 0.0, 0.0));
        assert_eq!(out.points()[0].normal.as_vec(), &Vec3::z());
        assert_eq!(out.frame, Frame::Scene);
    }

    #[test]
    fn quarter_turn_about_z() {
        let cloud = single(Vec3::x(), Vec3::x());
        let pose = Pose::from_rotation(Rotation::from_axis_angle(&UnitVec3::z(), FRAC_PI_2));
        let p = pose.apply_cloud(&cloud, Frame::Scene).points()[0];
        assert_abs_diff_eq!(p.position, Vec3::y(), epsilon = 1e-12);
        assert_abs_diff_eq!(*p.normal.as_vec(), Vec3::y(), epsilon = 1e-12);
    }

    #[test]
    fn compose_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_pose(&mut rng);
        assert_eq!(Pose::identity().compose(&b).translation, b.translation);
        assert!(Pose::identity().compose(&b).rotation.angle_to(&b.rotation) < 1e-12);

        let quarter = Pose::from_rotation(Rotation::from_axis_angle(&UnitVec3::z(), FRAC_PI_2));
        let half = quarter.compose(&quarter);
        let expect = Rotation::from_axis_angle(&UnitVec3::z(), PI);
        assert!(half.rotation.angle_to(&expect) < 1e-12);

        for _ in 0..20 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let ab = a.compose(&b);
            for _ in 0..100 {
                let p = random_point(&mut rng);
                let dev = (ab.transform_point(&p) - a.transform_point(&b.transform_point(&p))).norm();
                assert!(dev < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(Pose::identity().inverse(), Pose::identity());
        let t = Vec3::new(0.1, -0.4, 2.0);
        let inv = Pose::from_translation(t).inverse();
        assert_eq!(inv.translation, -t);
        assert!(inv.rotation.angle_to(&Rotation::identity()) == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pose = random_pose(&mut rng);
        let round = pose.inverse().compose(&pose);
        for _ in 0..100 {
            let p = random_point(&mut rng);
            assert!((round.transform_point(&p) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn geodesic_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_pose(&mut rng).rotation;
        assert!(geodesic_angle(&q, &q) < 1e-15);
        let rx = Rotation::from_axis_angle(&UnitVec3::x(), FRAC_PI_2);
        assert_abs_diff_eq!(geodesic_angle(&Rotation::identity(), &rx), FRAC_PI_2, epsilon = 1e-12);
        let w = q.wxyz();
        let neg = [-w[0], -w[1], -w[2], -w[3]];
        assert!(quaternion_angle(w, neg) < 1e-12);
    }

    #[test]
    fn canonical_sign() {
        let r = Rotation::from_wxyz([-0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(r.wxyz()[0] >= 0.0);
    }

    #[test]
    fn normals_on_plane() {
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                pts.push(Vec3::new(i as f64 * 0.1, j as f64 * 0.13 + 0.01 * i as f64, 0.0));
            }
        }
        let cloud = estimate_normals(&pts, 5, &Vec3::new(0.0, 0.0, 5.0)).unwrap();
        for p in cloud.points() {
            assert_abs_diff_eq!(p.normal.as_vec().z.abs(), 1.0, epsilon = 1e-9);
            assert!(p.normal.as_vec().z > 0.0);
        }
    }

    #[test]
    fn normals_on_sphere() {
        // Fibonacci sphere; the analytic normal is the position itself.
        let n = 400;
        let golden = PI * (3.0 - 5f64.sqrt());
        let mut pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        pts.push(Vec3::z());
        let cloud = estimate_normals(&pts, 10, &Vec3::new(0.0, 0.0, 10.0)).unwrap();
        let pole = cloud.points().last().unwrap();
        let angle = pole.normal.as_vec().dot(&Vec3::z()).clamp(-1.0, 1.0).acos();
        assert!(angle < 5f64.to_radians(), "angle {angle}");
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0];
        assert!(matches!(
            estimate_normals(&pts, 3, &Vec3::z()),
            Err(Error::DegenerateNeighborhood { .. })
        ));
    }

    #[test]
    fn empty_and_nan_clouds_rejected() {
        assert!(OrientedPointCloud::new(vec![], Frame::Model).is_err());
        let bad = OrientedPoint::new(Vec3::new(f64::NAN, 0.0, 0.0), UnitVec3::z());
        assert!(matches!(OrientedPointCloud::new(vec![bad], Frame::Model), Err(Error::NonFiniteInput(_))));
    }
}
