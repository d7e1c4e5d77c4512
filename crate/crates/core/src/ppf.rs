//! Point-pair features and the dense attention supervision target.
//!
//! For a transformed scene point `i` and a model point `j` the target weight is
//!
//! ```text
//! W(i,j) = 1 / (1 + γ₁·d + γ₂·θ_d + γ₃·θ)
//! ```
//!
//! where `d` is the point distance, `θ` the angle between the normals and
//! `θ_d` the mean of the two normal-to-offset angles.

use crate::error::{Error, Result};
use crate::geom::{OrientedPoint, OrientedPointCloud, Pose, UnitVec3, Vec3};

/// Weights of the three feature terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpfGammas {
    /// Per meter of point distance.
    pub distance: f64,
    /// Per radian of the offset/normal angle.
    pub cross_angle: f64,
    /// Per radian of the normal/normal angle.
    pub normal_angle: f64,
}

impl Default for PpfGammas {
    fn default() -> Self {
        PpfGammas {
            distance: 100.0,
            cross_angle: 50.0,
            normal_angle: 50.0,
        }
    }
}

impl PpfGammas {
    pub fn new(distance: f64, cross_angle: f64, normal_angle: f64) -> Result<Self> {
        let g = PpfGammas {
            distance,
            cross_angle,
            normal_angle,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.distance, self.cross_angle, self.normal_angle];
        if all.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::InvalidConfig {
                key: "gamma".into(),
                reason: "gammas must be finite and non-negative".into(),
            });
        }
        if all.iter().all(|g| *g == 0.0) {
            return Err(Error::InvalidConfig {
                key: "gamma".into(),
                reason: "at least one gamma must be positive".into(),
            });
        }
        Ok(())
    }
}

#[inline]
pub fn ppf_distance(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm()
}

/// Angle between two vectors. Equal to `arccos` of the normalized dot
/// product, but stays accurate near 0 and π.
#[inline]
fn vector_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

#[inline]
pub fn ppf_normal_angle(na: &UnitVec3, nb: &UnitVec3) -> f64 {
    vector_angle(na.as_vec(), nb.as_vec())
}

/// Mean of `∠(na, d̂)` and `∠(nb, d̂)`; zero for coincident points.
#[inline]
pub fn ppf_cross_angle(na: &UnitVec3, nb: &UnitVec3, d: &Vec3) -> f64 {
    let len = d.norm();
    if len < 1e-12 {
        return 0.0;
    }
    0.5 * (vector_angle(na.as_vec(), d) + vector_angle(nb.as_vec(), d))
}

#[inline]
pub fn ppf_weight(distance: f64, cross_angle: f64, normal_angle: f64, gammas: &PpfGammas) -> f64 {
    1.0 / (1.0 + gammas.distance * distance + gammas.cross_angle * cross_angle + gammas.normal_angle * normal_angle)
}

/// Weight between two oriented points already expressed in the same frame.
/// The offset vector runs from `b` to `a`.
#[inline]
pub fn pair_weight(a: &OrientedPoint, b: &OrientedPoint, gammas: &PpfGammas) -> f64 {
    let d = a.position - b.position;
    ppf_weight(
        d.norm(),
        ppf_cross_angle(&a.normal, &b.normal, &d),
        ppf_normal_angle(&a.normal, &b.normal),
        gammas,
    )
}

/// Dense row-major `N×M` weight matrix; rows are scene points mapped into the
/// model frame, columns are model points.
#[derive(Clone, Debug, PartialEq)]
pub struct PpfWeightMatrix {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl PpfWeightMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    /// Column of the largest entry in row `i` (first one on ties).
    pub fn row_argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Builds the supervision target for a scene observed under `gt`
/// (model→scene). Scene points are taken into the model frame with `gt⁻¹`
/// and compared against every model point.
pub fn attention_target(
    scene: &OrientedPointCloud,
    model: &OrientedPointCloud,
    gt: &Pose,
    gammas: &PpfGammas,
) -> Result<PpfWeightMatrix> {
    if scene.len() != model.len() {
        return Err(Error::SizeMismatch {
            left: scene.len(),
            right: model.len(),
        });
    }
    let to_model = gt.inverse();
    let canonical: Vec<OrientedPoint> = scene.points().iter().map(|p| to_model.transform_oriented(p)).collect();
    let cols = model.len();
    let mut weights = Vec::with_capacity(canonical.len() * cols);
    for s in &canonical {
        weights.extend(model.points().iter().map(|m| pair_weight(s, m, gammas)));
    }
    Ok(PpfWeightMatrix {
        rows: canonical.len(),
        cols,
        weights,
    })
}
