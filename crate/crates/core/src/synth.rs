//! Deterministic synthetic objects and scenes.
//!
//! Shapes are sampled on their surface with analytic normals. A scene poses a
//! dense copy of the shape, culls back faces, cuts out a contiguous occluded
//! region, perturbs positions with Gaussian noise and resamples to a fixed
//! point count with farthest-point sampling.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Frame, OrientedPoint, OrientedPointCloud, Pose, Rotation, UnitVec3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Cylinder,
    Sphere,
    /// A box with an off-center hemispherical bump on its `+z` face; no
    /// proper rotation maps it onto itself.
    BoxWithBump,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(ShapeKind::Box),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "sphere" => Ok(ShapeKind::Sphere),
            "box_with_bump" => Ok(ShapeKind::BoxWithBump),
            other => Err(Error::InvalidConfig {
                key: "shape".into(),
                reason: format!("unknown shape '{other}'"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Sphere => "sphere",
            ShapeKind::BoxWithBump => "box_with_bump",
        }
    }

    /// Whether the object is scored with ADD-S.
    pub fn is_symmetric(&self) -> bool {
        !matches!(self, ShapeKind::BoxWithBump)
    }
}

/// Shape parameters. `dims` means `[radius, -, -]` for a sphere,
/// `[radius, height, -]` for a cylinder and edge lengths for the boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub dims: [f64; 3],
    pub n_points: usize,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, dims: [f64; 3], n_points: usize, seed: u64) -> Result<Self> {
        let s = ShapeSpec {
            kind,
            dims,
            n_points,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let used = match self.kind {
            ShapeKind::Sphere => 1,
            ShapeKind::Cylinder => 2,
            ShapeKind::Box | ShapeKind::BoxWithBump => 3,
        };
        if self.dims[..used].iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidConfig {
                key: "dims".into(),
                reason: "dimensions must be positive".into(),
            });
        }
        if self.n_points < 4 {
            return Err(Error::InvalidConfig {
                key: "n_points".into(),
                reason: "need at least 4 points".into(),
            });
        }
        Ok(())
    }

    /// Same shape sampled with a different count and seed.
    pub fn resampled(&self, n_points: usize, seed: u64) -> Self {
        ShapeSpec {
            n_points,
            seed,
            ..*self
        }
    }
}

/// Bump geometry for [`ShapeKind::BoxWithBump`]: center on the `+z` face and
/// radius.
fn bump_geometry(dims: &[f64; 3]) -> (Vec3, f64) {
    let r = 0.25 * dims[0].min(dims[1]);
    let center = Vec3::new(0.2 * dims[0], 0.1 * dims[1], 0.5 * dims[2]);
    (center, r)
}

/// Samples the surface of the shape with analytic outward normals.
pub fn gen_shape(spec: &ShapeSpec) -> Result<OrientedPointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points: Vec<OrientedPoint> = (0..spec.n_points).map(|_| sample_surface(spec, &mut rng)).collect();
    OrientedPointCloud::new(points, Frame::Model)
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn box_face_point(rng: &mut ChaCha8Rng, dims: &[f64; 3], face: usize) -> OrientedPoint {
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut p = Vec3::new(
        (rng.random::<f64>() - 0.5) * dims[0],
        (rng.random::<f64>() - 0.5) * dims[1],
        (rng.random::<f64>() - 0.5) * dims[2],
    );
    p[axis] = sign * 0.5 * dims[axis];
    let mut n = Vec3::zeros();
    n[axis] = sign;
    OrientedPoint::new(p, UnitVec3::new_unchecked(n))
}

fn box_face_areas(d: &[f64; 3]) -> [f64; 6] {
    let (yz, xz, xy) = (d[1] * d[2], d[0] * d[2], d[0] * d[1]);
    [yz, yz, xz, xz, xy, xy]
}

fn sample_surface(spec: &ShapeSpec, rng: &mut ChaCha8Rng) -> OrientedPoint {
    let d = &spec.dims;
    match spec.kind {
        ShapeKind::Sphere => {
            let n = unit_sphere(rng);
            OrientedPoint::new(n * d[0], UnitVec3::new_unchecked(n))
        }
        ShapeKind::Cylinder => {
            let (r, h) = (d[0], d[1]);
            let side = 2.0 * PI * r * h;
            let cap = PI * r * r;
            match pick_weighted(rng, &[side, cap, cap]) {
                0 => {
                    let a = rng.random::<f64>() * 2.0 * PI;
                    let z = (rng.random::<f64>() - 0.5) * h;
                    let n = Vec3::new(a.cos(), a.sin(), 0.0);
                    OrientedPoint::new(Vec3::new(r * n.x, r * n.y, z), UnitVec3::new_unchecked(n))
                }
                k => {
                    let sign = if k == 1 { 1.0 } else { -1.0 };
                    let a = rng.random::<f64>() * 2.0 * PI;
                    let rr = r * rng.random::<f64>().sqrt();
                    OrientedPoint::new(
                        Vec3::new(rr * a.cos(), rr * a.sin(), sign * 0.5 * h),
                        UnitVec3::new_unchecked(Vec3::new(0.0, 0.0, sign)),
                    )
                }
            }
        }
        ShapeKind::Box => {
            let face = pick_weighted(rng, &box_face_areas(d));
            box_face_point(rng, d, face)
        }
        ShapeKind::BoxWithBump => {
            let (center, r) = bump_geometry(d);
            let mut weights = box_face_areas(d).to_vec();
            weights[4] -= PI * r * r;
            weights.push(2.0 * PI * r * r);
            let pick = pick_weighted(rng, &weights);
            if pick == 6 {
                // upper hemisphere: flip the lower half of a uniform sphere sample
                let mut n = unit_sphere(rng);
                n.z = n.z.abs();
                return OrientedPoint::new(center + n * r, UnitVec3::new_unchecked(n));
            }
            loop {
                let p = box_face_point(rng, d, pick);
                let inside_bump = pick == 4 && (p.position.xy() - center.xy()).norm() < r;
                if !inside_bump {
                    return p;
                }
            }
        }
    }
}

/// Range of sampled ground-truth rotations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationRange {
    /// Uniform over SO(3).
    Full,
    /// Uniform random axis, angle uniform in `[0, max]` radians.
    MaxAngle(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rotation: RotationRange,
    pub translation_min: [f64; 3],
    pub translation_max: [f64; 3],
    pub noise_sigma: f64,
    pub occlusion: f64,
    pub viewpoint: [f64; 3],
    /// Output point count; `None` keeps every surviving point.
    pub resample_to: Option<usize>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            rotation: RotationRange::Full,
            translation_min: [-0.05, -0.05, 0.45],
            translation_max: [0.05, 0.05, 0.55],
            noise_sigma: 0.0,
            occlusion: 0.0,
            viewpoint: [0.0, 0.0, 0.0],
            resample_to: None,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return bad("occlusion", "must lie in [0, 1)");
        }
        if let RotationRange::MaxAngle(a) = self.rotation {
            if !(a >= 0.0 && a.is_finite()) {
                return bad("max_rotation", "must be finite and non-negative");
            }
        }
        if (0..3).any(|i| self.translation_min[i] > self.translation_max[i]) {
            return bad("translation", "min exceeds max");
        }
        if matches!(self.resample_to, Some(n) if n < 4) {
            return bad("n_points", "need at least 4 points");
        }
        Ok(())
    }
}

/// A rendered scene with the bookkeeping needed to audit it.
#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub scene: OrientedPointCloud,
    pub gt: Pose,
    /// Points facing the viewpoint.
    pub visible_count: usize,
    /// Points left after occlusion, before resampling.
    pub survivor_count: usize,
    /// Occluder center and radius, in scene coordinates, when points were
    /// removed.
    pub occluder: Option<(Vec3, f64)>,
}

pub fn sample_rotation(range: RotationRange, rng: &mut ChaCha8Rng) -> Rotation {
    match range {
        RotationRange::Full => {
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            Rotation::from_wxyz(q).unwrap_or_else(Rotation::identity)
        }
        RotationRange::MaxAngle(max) => {
            let axis = UnitVec3::new_unchecked(unit_sphere(rng));
            Rotation::from_axis_angle(&axis, rng.random::<f64>() * max)
        }
    }
}

pub fn sample_pose(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Pose {
    let rotation = sample_rotation(spec.rotation, rng);
    let t = Vec3::from_fn(|i, _| {
        let (lo, hi) = (spec.translation_min[i], spec.translation_max[i]);
        lo + (hi - lo) * rng.random::<f64>()
    });
    Pose::new(rotation, t)
}

/// Poses `model`, removes back faces and an occluded ball, adds noise and
/// resamples.
pub fn render_scene(model: &OrientedPointCloud, spec: &SceneSpec) -> Result<RenderedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gt = sample_pose(spec, &mut rng);
    let viewpoint = Vec3::from(spec.viewpoint);
    let mut visible: Vec<OrientedPoint> = model
        .points()
        .iter()
        .map(|p| gt.transform_oriented(p))
        .filter(|p| p.normal.as_vec().dot(&(viewpoint - p.position)) > 0.0)
        .collect();
    let visible_count = visible.len();
    if visible_count < 4 {
        return Err(Error::EverythingOccluded { survivors: visible_count });
    }

    let remove = (spec.occlusion * visible_count as f64).round() as usize;
    let mut occluder = None;
    if remove > 0 {
        let center = visible[rng.random_range(0..visible_count)].position;
        let mut by_dist: Vec<(f64, usize)> =
            visible.iter().enumerate().map(|(i, p)| ((p.position - center).norm(), i)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let radius = by_dist[remove - 1].0;
        let mut keep = vec![true; visible_count];
        for &(_, i) in &by_dist[..remove] {
            keep[i] = false;
        }
        let mut idx = 0;
        visible.retain(|_| {
            idx += 1;
            keep[idx - 1]
        });
        occluder = Some((center, radius));
    }
    let survivor_count = visible.len();
    if survivor_count < 4 {
        return Err(Error::EverythingOccluded { survivors: survivor_count });
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for p in &mut visible {
            for c in 0..3 {
                p.position[c] += normal.sample(&mut rng);
            }
        }
    }

    let points = match spec.resample_to {
        None => visible,
        Some(n) if survivor_count >= n => {
            let start = rng.random_range(0..survivor_count);
            let positions: Vec<Vec3> = visible.iter().map(|p| p.position).collect();
            farthest_point_sampling(&positions, n, start).into_iter().map(|i| visible[i]).collect()
        }
        Some(n) => {
            let jitter = Normal::new(0.0, DUPLICATE_JITTER).expect("positive jitter");
            let mut out = visible.clone();
            while out.len() < n {
                let mut p = visible[rng.random_range(0..survivor_count)];
                for c in 0..3 {
                    p.position[c] += jitter.sample(&mut rng);
                }
                out.push(p);
            }
            out
        }
    };
    Ok(RenderedScene {
        scene: OrientedPointCloud::new(points, Frame::Scene)?,
        gt,
        visible_count,
        survivor_count,
        occluder,
    })
}

/// Standard deviation of the offset given to duplicated points when too few
/// survive to fill the requested count.
pub const DUPLICATE_JITTER: f64 = 5e-4;

/// Indices of `k` points chosen greedily to maximize the distance to the
/// already chosen set, starting at `start`.
pub fn farthest_point_sampling(points: &[Vec3], k: usize, start: usize) -> Vec<usize> {
    let k = k.min(points.len());
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut current = start;
    for _ in 0..k {
        chosen.push(current);
        let c = points[current];
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    chosen
}

/// Deterministic per-scene seed derived from a base seed and an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(base ^ splitmix(index.wrapping_add(1)))
}

#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub id: String,
    pub scene: OrientedPointCloud,
    pub gt: Pose,
}

/// One object with its rendered scenes. Every record shares `model`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub shape: ShapeSpec,
    pub scene_spec: SceneSpec,
    pub model: OrientedPointCloud,
    pub symmetric: bool,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Splits record indices: the first `round(fraction·len)` train, the rest
    /// test.
    pub fn split(&self, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n_train = ((train_fraction.clamp(0.0, 1.0) * self.len() as f64).round() as usize).min(self.len());
        ((0..n_train).collect(), (n_train..self.len()).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Ratio of the dense render cloud to the model cloud.
pub const DENSE_FACTOR: usize = 8;

/// Builds `scenes` records of one shape. Scenes are rendered from a denser
/// sample of the surface than the model cloud and resampled to the model's
/// point count.
pub fn make_dataset(shape: &ShapeSpec, scenes: usize, scene_spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    if scenes == 0 {
        return Err(Error::InvalidConfig {
            key: "scenes".into(),
            reason: "need at least one scene".into(),
        });
    }
    let model = gen_shape(shape)?;
    let dense = gen_shape(&shape.resampled(shape.n_points * DENSE_FACTOR, derive_seed(shape.seed, u64::MAX)))?;
    let records = (0..scenes)
        .map(|i| {
            let spec = SceneSpec {
                resample_to: Some(shape.n_points),
                seed: derive_seed(seed, i as u64),
                ..*scene_spec
            };
            let rendered = render_scene(&dense, &spec)?;
            Ok(SceneRecord {
                id: format!("scene_{i:04}"),
                scene: rendered.scene,
                gt: rendered.gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        shape: *shape,
        scene_spec: *scene_spec,
        model,
        symmetric: shape.kind.is_symmetric(),
        records,
    })
}

/// The dense surface sample scenes of `shape` are rendered from.
pub fn dense_model(shape: &ShapeSpec) -> Result<OrientedPointCloud> {
    gen_shape(&shape.resampled(shape.n_points * DENSE_FACTOR, derive_seed(shape.seed, u64::MAX)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sphere_is_analytic() {
        let spec = ShapeSpec::new(ShapeKind::Sphere, [0.05, 0.0, 0.0], 1000, 3).unwrap();
        let cloud = gen_shape(&spec).unwrap();
        assert_eq!(cloud.len(), 1000);
        for p in cloud.points() {
            assert_abs_diff_eq!(p.position.norm(), 0.05, epsilon = 1e-9);
            assert!((p.position / p.position.norm() - p.normal.as_vec()).norm() < 1e-9);
        }
    }

    #[test]
    fn box_points_lie_on_faces() {
        let spec = ShapeSpec::new(ShapeKind::Box, [0.1, 0.1, 0.1], 500, 1).unwrap();
        for p in gen_shape(&spec).unwrap().points() {
            let n = p.normal.as_vec();
            let axis = n.iamax();
            assert_abs_diff_eq!(n[axis].abs(), 1.0);
            assert_abs_diff_eq!(p.position[axis], 0.05 * n[axis], epsilon = 1e-15);
            for c in 0..3 {
                assert!(p.position[c].abs() <= 0.05 + 1e-15);
            }
        }
    }

    #[test]
    fn cylinder_points_on_surface() {
        let spec = ShapeSpec::new(ShapeKind::Cylinder, [0.03, 0.1, 0.0], 500, 2).unwrap();
        for p in gen_shape(&spec).unwrap().points() {
            let n = p.normal.as_vec();
            if n.z.abs() > 0.5 {
                assert_abs_diff_eq!(p.position.z.abs(), 0.05, epsilon = 1e-15);
                assert!(p.position.xy().norm() <= 0.03 + 1e-12);
            } else {
                assert_abs_diff_eq!(p.position.xy().norm(), 0.03, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bump_surface() {
        let spec = ShapeSpec::new(ShapeKind::BoxWithBump, [0.1, 0.08, 0.06], 2000, 4).unwrap();
        let (center, r) = bump_geometry(&spec.dims);
        let mut on_bump = 0;
        for p in gen_shape(&spec).unwrap().points() {
            if p.position.z > 0.03 + 1e-12 {
                on_bump += 1;
                assert_abs_diff_eq!((p.position - center).norm(), r, epsilon = 1e-12);
            }
        }
        assert!(on_bump > 20);
    }

    #[test]
    fn same_seed_same_cloud() {
        let spec = ShapeSpec::new(ShapeKind::BoxWithBump, [0.1, 0.1, 0.1], 300, 9).unwrap();
        assert_eq!(gen_shape(&spec).unwrap(), gen_shape(&spec).unwrap());
        let other = gen_shape(&spec.resampled(300, 10)).unwrap();
        assert_ne!(gen_shape(&spec).unwrap(), other);
    }

    #[test]
    fn invalid_specs() {
        assert!(ShapeSpec::new(ShapeKind::Sphere, [0.0, 0.0, 0.0], 10, 0).is_err());
        assert!(ShapeSpec::new(ShapeKind::Box, [0.1, 0.1, 0.1], 3, 0).is_err());
        let spec = SceneSpec {
            occlusion: 1.0,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    fn far_view() -> SceneSpec {
        SceneSpec {
            viewpoint: [0.0, 0.0, -1e6],
            translation_min: [0.0; 3],
            translation_max: [0.0; 3],
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_scene_is_visible_half() {
        let spec = ShapeSpec::new(ShapeKind::Sphere, [0.05, 0.0, 0.0], 800, 5).unwrap();
        let model = gen_shape(&spec).unwrap();
        let rendered = render_scene(&model, &far_view()).unwrap();
        let posed = rendered.gt.apply_cloud(&model, Frame::Scene);
        let expected: Vec<_> = posed
            .points()
            .iter()
            .filter(|p| p.normal.as_vec().z < 0.0)
            .copied()
            .collect();
        assert_eq!(rendered.scene.points(), &expected[..]);
        assert_eq!(rendered.visible_count, expected.len());
    }

    #[test]
    fn occlusion_fraction_and_contiguity() {
        let spec = ShapeSpec::new(ShapeKind::BoxWithBump, [0.1, 0.1, 0.1], 2000, 6).unwrap();
        let model = gen_shape(&spec).unwrap();
        let scene_spec = SceneSpec {
            occlusion: 0.5,
            seed: 3,
            ..far_view()
        };
        let r = render_scene(&model, &scene_spec).unwrap();
        let expected = 0.5 * r.visible_count as f64;
        assert!((r.survivor_count as f64 - expected).abs() <= 1.0);
        let (center, radius) = r.occluder.unwrap();
        // survivors lie outside the occluder ball (ties at the radius excepted)
        for p in r.scene.points() {
            assert!((p.position - center).norm() >= radius - 1e-12);
        }
    }

    #[test]
    fn render_is_deterministic_and_resamples() {
        let spec = ShapeSpec::new(ShapeKind::BoxWithBump, [0.1, 0.1, 0.1], 1024, 7).unwrap();
        let model = gen_shape(&spec).unwrap();
        let scene_spec = SceneSpec {
            noise_sigma: 0.002,
            occlusion: 0.3,
            resample_to: Some(128),
            seed: 11,
            ..Default::default()
        };
        let a = render_scene(&model, &scene_spec).unwrap();
        let b = render_scene(&model, &scene_spec).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.scene.len(), 128);

        let too_many = SceneSpec {
            resample_to: Some(2000),
            ..scene_spec
        };
        assert_eq!(render_scene(&model, &too_many).unwrap().scene.len(), 2000);
    }

    #[test]
    fn tiny_model_everything_occluded() {
        let spec = ShapeSpec::new(ShapeKind::Sphere, [0.05, 0.0, 0.0], 6, 1).unwrap();
        let model = gen_shape(&spec).unwrap();
        let scene_spec = SceneSpec {
            occlusion: 0.9,
            ..far_view()
        };
        assert!(matches!(render_scene(&model, &scene_spec), Err(Error::EverythingOccluded { .. })));
    }

    #[test]
    fn fps_spreads_points() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let idx = farthest_point_sampling(&pts, 3, 0);
        assert_eq!(idx, vec![0, 9, 4]);
        assert_eq!(farthest_point_sampling(&pts, 20, 0).len(), 10);
    }

    #[test]
    fn dataset_split() {
        let shape = ShapeSpec::new(ShapeKind::Box, [0.1, 0.1, 0.1], 64, 0).unwrap();
        let ds = make_dataset(&shape, 10, &SceneSpec::default(), 0).unwrap();
        assert_eq!(ds.len(), 10);
        let (train, test) = ds.split(0.8);
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(ds.symmetric);
        assert!(make_dataset(&shape, 0, &SceneSpec::default(), 0).is_err());
    }

    #[test]
    fn dataset_scenes_lie_on_dense_model() {
        let shape = ShapeSpec::new(ShapeKind::BoxWithBump, [0.1, 0.1, 0.1], 64, 2).unwrap();
        let scene_spec = SceneSpec {
            occlusion: 0.3,
            ..Default::default()
        };
        let ds = make_dataset(&shape, 4, &scene_spec, 5).unwrap();
        let dense = dense_model(&shape).unwrap();
        for rec in &ds.records {
            let back = rec.gt.inverse();
            for p in rec.scene.points() {
                let q = back.transform_point(&p.position);
                let nearest = dense.positions().map(|d| (d - q).norm()).fold(f64::INFINITY, f64::min);
                assert!(nearest < 1e-9, "{nearest}");
            }
        }
    }
}
