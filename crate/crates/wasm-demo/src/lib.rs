//! Browser bindings: synthesize one scene, look at its PPF attention target
//! and recover its pose from ground-truth correspondences.

use attnpose::geom::{geodesic_angle, OrientedPointCloud, Pose};
use attnpose::io::gt_correspondences;
use attnpose::metrics::{add_metric, model_diameter};
use attnpose::ppf::{attention_target, PpfGammas};
use attnpose::solver::{average_poses, kabsch_align, poses_from_matches};
use attnpose::synth::{make_dataset, SceneRecord, SceneSpec, ShapeKind, ShapeSpec};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn flat(cloud: &OrientedPointCloud) -> Vec<f64> {
    cloud.positions().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn pose_row(p: &Pose) -> Vec<f64> {
    let q = p.rotation.wxyz();
    let t = p.translation;
    vec![q[0], q[1], q[2], q[3], t.x, t.y, t.z]
}

#[wasm_bindgen]
pub struct Scene {
    model: OrientedPointCloud,
    record: SceneRecord,
    diameter: f64,
}

#[wasm_bindgen]
impl Scene {
    /// Renders one scene of `shape` ("box", "box_with_bump", "cylinder" or
    /// "sphere") with `n_points` points.
    #[wasm_bindgen(constructor)]
    pub fn new(shape: &str, n_points: usize, noise_sigma: f64, occlusion: f64, seed: u32) -> Result<Scene, JsError> {
        Scene::build(shape, n_points, noise_sigma, occlusion, seed).map_err(js)
    }

    fn build(shape: &str, n_points: usize, noise_sigma: f64, occlusion: f64, seed: u32) -> attnpose::Result<Scene> {
        let kind = ShapeKind::parse(shape)?;
        let spec = ShapeSpec::new(kind, [0.1, 0.08, 0.06], n_points, 7)?;
        let scene_spec = SceneSpec {
            noise_sigma,
            occlusion,
            resample_to: Some(n_points),
            ..SceneSpec::default()
        };
        let mut ds = make_dataset(&spec, 1, &scene_spec, u64::from(seed))?;
        let diameter = model_diameter(&ds.model)?;
        Ok(Scene {
            record: ds.records.remove(0),
            model: ds.model,
            diameter,
        })
    }

    /// Model points, `[x0, y0, z0, x1, ...]`, in the model frame.
    pub fn model_positions(&self) -> Vec<f64> {
        flat(&self.model)
    }

    /// Scene points mapped back into the model frame with the true pose.
    pub fn scene_in_model_frame(&self) -> Vec<f64> {
        let inv = self.record.gt.inverse();
        self.record
            .scene
            .positions()
            .flat_map(|p| {
                let q = inv.transform_point(p);
                [q.x, q.y, q.z]
            })
            .collect()
    }

    /// Ground-truth pose as `[w, x, y, z, tx, ty, tz]`.
    pub fn gt_pose(&self) -> Vec<f64> {
        pose_row(&self.record.gt)
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    /// Row-major `N×N` PPF weight matrix for the given gammas.
    pub fn attention_target(&self, distance: f64, cross_angle: f64, normal_angle: f64) -> Result<Vec<f64>, JsError> {
        self.target([distance, cross_angle, normal_angle]).map_err(js)
    }

    fn target(&self, g: [f64; 3]) -> attnpose::Result<Vec<f64>> {
        let gammas = PpfGammas::new(g[0], g[1], g[2])?;
        Ok(attention_target(&self.record.scene, &self.model, &self.record.gt, &gammas)?.weights)
    }

    /// Solves the pose from the scene's ground-truth correspondences with
    /// `"kabsch"` or `"pair-align"`. Returns the pose followed by rotation
    /// error (degrees), translation error (m) and ADD as a fraction of the
    /// model diameter.
    pub fn solve(&self, solver: &str, num_pairs: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.solve_with(solver, num_pairs, seed).map_err(js)
    }

    fn solve_with(&self, solver: &str, num_pairs: usize, seed: u32) -> Result<Vec<f64>, String> {
        let set = gt_correspondences(&self.record).map_err(|e| e.to_string())?;
        let pose = match solver {
            "kabsch" => kabsch_align(&set, None),
            "pair-align" => poses_from_matches(&set, num_pairs, u64::from(seed)).and_then(|p| average_poses(&p)),
            other => return Err(format!("unknown solver '{other}'")),
        }
        .map_err(|e| e.to_string())?;
        let gt = &self.record.gt;
        let mut out = pose_row(&pose);
        out.push(geodesic_angle(&pose.rotation, &gt.rotation).to_degrees());
        out.push((pose.translation - gt.translation).norm());
        out.push(add_metric(&pose, gt, &self.model) / self.diameter);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_scene_solves_exactly() {
        let s = Scene::build("box_with_bump", 64, 0.0, 0.0, 3).unwrap();
        assert_eq!(s.model_positions().len(), 64 * 3);
        for solver in ["kabsch", "pair-align"] {
            let r = s.solve_with(solver, 50, 1).unwrap();
            assert!(r[7] < 1e-6 && r[8] < 1e-9, "{solver}: {r:?}");
        }
    }

    #[test]
    fn attention_target_is_square_and_in_range() {
        let s = Scene::build("box_with_bump", 32, 0.0, 0.0, 5).unwrap();
        let w = s.target([100.0, 50.0, 50.0]).unwrap();
        assert_eq!(w.len(), 32 * 32);
        assert!(w.iter().all(|v| *v > 0.0 && *v <= 1.0));
        assert!(s.target([0.0; 3]).is_err());
    }

    #[test]
    fn noisy_scene_reports_small_errors() {
        let s = Scene::build("box_with_bump", 64, 0.002, 0.3, 8).unwrap();
        let r = s.solve_with("kabsch", 0, 0).unwrap();
        assert!(r[9] < 0.05, "{r:?}");
        assert!(s.solve_with("icp", 0, 0).is_err());
        assert_eq!(s.gt_pose().len(), 7);
        assert_eq!(s.scene_in_model_frame().len(), 64 * 3);
    }
}
