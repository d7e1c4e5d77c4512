//! On-disk formats: ASCII PLY clouds, versioned pose / pose-set / matrix /
//! checkpoint / correspondence files, and the metrics and loss CSVs.
//!
//! Text encoders are pure (`*_to_string`, `parse_*`); the `save_*` / `load_*`
//! helpers only add file access. Floats are written in Rust's shortest
//! round-trip form, so every reader reproduces the written value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{estimate_normals, Frame, OrientedPoint, OrientedPointCloud, Pose, Rotation, UnitVec3, Vec3};
use crate::metrics::MetricsReport;
use crate::net::{EpochLoss, NetConfig, Network};
use crate::ppf::PpfWeightMatrix;
use crate::solver::{CorrespondenceSet, Direction, PoseSet, Provenance};
use crate::synth::{Dataset, SceneRecord, SceneSpec, ShapeSpec};
use crate::tensor::Tensor;

/// Neighbourhood size used when normals have to be estimated.
pub const NORMAL_NEIGHBORS: usize = 10;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- PLY

pub fn ply_to_string(cloud: &OrientedPointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        let _ = writeln!(out, "property double {name}");
    }
    out.push_str("end_header\n");
    for p in cloud.points() {
        let n = p.normal.as_vec();
        let _ = writeln!(
            out,
            "{:?} {:?} {:?} {:?} {:?} {:?}",
            p.position.x, p.position.y, p.position.z, n.x, n.y, n.z
        );
    }
    out
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// Parses an ASCII PLY vertex list.
///
/// Normals are required unless `viewpoint` is given, in which case a file
/// without them gets normals estimated from `NORMAL_NEIGHBORS` neighbours
/// and oriented toward the viewpoint.
pub fn parse_ply(text: &str, frame: Frame, viewpoint: Option<&Vec3>) -> Result<OrientedPointCloud> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::MalformedHeader("missing 'ply' magic".into()));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_seen = false;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| Error::MalformedHeader("missing end_header".into()))?
            .trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                match tok.next() {
                    Some("ascii") => {}
                    Some(f) if f.starts_with("binary") => {
                        return Err(Error::MalformedHeader(format!("{f} PLY is not supported, use ascii")))
                    }
                    other => return Err(Error::MalformedHeader(format!("unknown format {other:?}"))),
                }
                format_seen = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| Error::MalformedHeader(line.into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::MalformedHeader(format!("bad element line '{line}'")))?;
                elements.push(PlyElement {
                    name: name.into(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::MalformedHeader("property before element".into()))?;
                let rest: Vec<&str> = tok.collect();
                if rest.first() == Some(&"list") {
                    if el.name == "vertex" {
                        return Err(Error::MalformedHeader("list property on vertex".into()));
                    }
                    el.props.push(rest.last().copied().unwrap_or("").into());
                } else if rest.len() == 2 {
                    el.props.push(rest[1].into());
                } else {
                    return Err(Error::MalformedHeader(format!("bad property line '{line}'")));
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::MalformedHeader(format!("unexpected header keyword '{other}'"))),
        }
    }
    if !format_seen {
        return Err(Error::MalformedHeader("missing format line".into()));
    }
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::MalformedHeader("no vertex element".into()))?;
    let vertex = &elements[vi];
    let col = |name: &str| vertex.props.iter().position(|p| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::MalformedHeader("vertex needs x, y and z".into())),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ if viewpoint.is_some() => None,
        _ => return Err(Error::MissingNormals),
    };
    // element data appears in header order; skip rows of earlier elements
    let skip: usize = elements[..vi].iter().map(|e| e.count).sum();
    let mut body = lines.filter(|l| !l.trim().is_empty()).skip(skip);
    let mut positions = Vec::with_capacity(vertex.count);
    let mut normals = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let row = body
            .next()
            .ok_or_else(|| Error::SchemaViolation(format!("expected {} vertices, found {i}", vertex.count)))?;
        let vals = row
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::SchemaViolation(format!("vertex {i}: unparsable value")))?;
        if vals.len() != vertex.props.len() {
            return Err(Error::SchemaViolation(format!(
                "vertex {i}: {} values for {} properties",
                vals.len(),
                vertex.props.len()
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(format!("PLY vertex {i}")));
        }
        positions.push(Vec3::new(vals[x], vals[y], vals[z]));
        if let Some((a, b, c)) = normal_cols {
            normals.push(Vec3::new(vals[a], vals[b], vals[c]));
        }
    }
    match (normal_cols, viewpoint) {
        (Some(_), _) => {
            let points = positions
                .iter()
                .zip(&normals)
                .enumerate()
                .map(|(i, (p, n))| {
                    UnitVec3::new_checked(*n)
                        .or_else(|| UnitVec3::new_normalize(*n))
                        .map(|n| OrientedPoint::new(*p, n))
                        .ok_or_else(|| Error::NonFiniteInput(format!("PLY normal {i} has zero length")))
                })
                .collect::<Result<Vec<_>>>()?;
            OrientedPointCloud::new(points, frame)
        }
        (None, Some(vp)) => Ok(estimate_normals(&positions, NORMAL_NEIGHBORS, vp)?.with_frame(frame)),
        (None, None) => Err(Error::MissingNormals),
    }
}

pub fn save_ply(path: &Path, cloud: &OrientedPointCloud) -> Result<()> {
    write_text(path, &ply_to_string(cloud))
}

pub fn load_ply(path: &Path, frame: Frame, viewpoint: Option<&Vec3>) -> Result<OrientedPointCloud> {
    parse_ply(&read_text(path)?, frame, viewpoint)
}

// ---------------------------------------------------------------- poses

pub const POSE_FORMAT: &str = "pose.v1";

/// JSON form of a pose; `q` is `[w, x, y, z]` with `w ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub format: String,
    pub q: [f64; 4],
    pub t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl PoseRecord {
    pub fn new(pose: &Pose, provenance: Option<Provenance>) -> Self {
        let t = pose.translation;
        PoseRecord {
            format: POSE_FORMAT.into(),
            q: pose.rotation.wxyz(),
            t: [t.x, t.y, t.z],
            provenance,
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        if self.format != POSE_FORMAT {
            return Err(Error::SchemaViolation(format!("expected format {POSE_FORMAT}, found '{}'", self.format)));
        }
        if self.q.iter().chain(&self.t).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("pose".into()));
        }
        let rotation =
            Rotation::from_wxyz_exact(self.q).ok_or_else(|| Error::SchemaViolation("zero quaternion".into()))?;
        Ok(Pose::new(rotation, Vec3::from(self.t)))
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::SchemaViolation(e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn pose_to_json(pose: &Pose) -> String {
    to_json(&PoseRecord::new(pose, None))
}

pub fn parse_pose_json(text: &str) -> Result<Pose> {
    serde_json::from_str::<PoseRecord>(text).map_err(json_err)?.pose()
}

pub fn pose_set_to_json(set: &PoseSet) -> String {
    let recs: Vec<PoseRecord> = set.poses.iter().map(|(p, prov)| PoseRecord::new(p, Some(*prov))).collect();
    to_json(&recs)
}

pub fn parse_pose_set_json(text: &str) -> Result<PoseSet> {
    let recs: Vec<PoseRecord> = serde_json::from_str(text).map_err(json_err)?;
    let mut set = PoseSet::default();
    for (i, r) in recs.iter().enumerate() {
        let prov = r
            .provenance
            .ok_or_else(|| Error::SchemaViolation(format!("pose {i} lacks provenance")))?;
        set.push(r.pose()?, prov);
    }
    Ok(set)
}

pub fn save_pose(path: &Path, pose: &Pose) -> Result<()> {
    write_text(path, &pose_to_json(pose))
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    parse_pose_json(&read_text(path)?)
}

// ---------------------------------------------------------------- matrices

pub const MATRIX_FORMAT: &str = "matrix.v1";

/// `# matrix.v1`, then `rows cols`, then one whitespace-separated row per
/// line.
pub fn matrix_to_string(m: &Tensor) -> String {
    let mut out = String::with_capacity(m.len() * 20 + 32);
    let _ = writeln!(out, "# {MATRIX_FORMAT}");
    let _ = writeln!(out, "{} {}", m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Reads a matrix file. `#` lines are comments; a tag naming another format
/// is rejected.
pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let mut tokens = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if let Some(tag) = t.strip_prefix('#') {
            let tag = tag.trim();
            if tag.starts_with("matrix.") && tag != MATRIX_FORMAT {
                return Err(Error::SchemaViolation(format!("unsupported matrix format '{tag}'")));
            }
            continue;
        }
        tokens.extend(t.split_whitespace());
    }
    if tokens.len() < 2 {
        return Err(Error::SchemaViolation("missing 'rows cols' header".into()));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::SchemaViolation(format!("bad dimension '{s}'")));
    let (rows, cols) = (dim(tokens[0])?, dim(tokens[1])?);
    let values = tokens[2..]
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| Error::SchemaViolation(format!("bad value '{s}'"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != rows * cols {
        return Err(Error::SchemaViolation(format!(
            "{} values for a {rows}x{cols} matrix",
            values.len()
        )));
    }
    Tensor::new(rows, cols, values)
}

pub fn weight_matrix_tensor(w: &PpfWeightMatrix) -> Tensor {
    Tensor {
        rows: w.rows,
        cols: w.cols,
        data: w.weights.clone(),
    }
}

// ---------------------------------------------------------------- checkpoints

pub const CHECKPOINT_FORMAT: &str = "checkpoint.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: NetConfig,
    pub tensors: Vec<NamedTensor>,
}

pub fn checkpoint_to_string(net: &Network) -> String {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        config: net.config().clone(),
        tensors: net
            .named()
            .map(|(name, t)| NamedTensor {
                name: name.into(),
                rows: t.rows,
                cols: t.cols,
                values: t.data.clone(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string(&ck).expect("serializable");
    s.push('\n');
    s
}

/// Loads a checkpoint. With `expected`, the stored tensors are checked
/// against that configuration instead of the embedded one.
pub fn parse_checkpoint(text: &str, expected: Option<&NetConfig>) -> Result<Network> {
    let ck: Checkpoint = serde_json::from_str(text).map_err(json_err)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::SchemaViolation(format!(
            "expected format {CHECKPOINT_FORMAT}, found '{}'",
            ck.format
        )));
    }
    let config = expected.cloned().unwrap_or(ck.config);
    let tensors = ck
        .tensors
        .into_iter()
        .map(|t| {
            let shape = (t.rows, t.cols);
            Tensor::new(t.rows, t.cols, t.values)
                .map(|v| (t.name.clone(), v))
                .map_err(|_| Error::SchemaViolation(format!("tensor '{}': values do not fill {shape:?}", t.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    Network::from_named(config, tensors)
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    write_text(path, &checkpoint_to_string(net))
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>) -> Result<Network> {
    parse_checkpoint(&read_text(path)?, expected)
}

// ---------------------------------------------------------------- correspondences

pub const CORRESPONDENCE_FORMAT: &str = "correspondences.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    /// `[x, y, z, nx, ny, nz]`.
    pub source: [f64; 6],
    pub target: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceFile {
    pub format: String,
    pub direction: Direction,
    pub pairs: Vec<PairRecord>,
}

fn point_array(p: &OrientedPoint) -> [f64; 6] {
    let n = p.normal.as_vec();
    [p.position.x, p.position.y, p.position.z, n.x, n.y, n.z]
}

fn array_point(a: &[f64; 6], what: &str) -> Result<OrientedPoint> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(what.into()));
    }
    let n = Vec3::new(a[3], a[4], a[5]);
    let normal = UnitVec3::new_checked(n)
        .or_else(|| UnitVec3::new_normalize(n))
        .ok_or_else(|| Error::SchemaViolation(format!("{what}: zero normal")))?;
    Ok(OrientedPoint::new(Vec3::new(a[0], a[1], a[2]), normal))
}

pub fn correspondences_to_json(c: &CorrespondenceSet) -> String {
    to_json(&CorrespondenceFile {
        format: CORRESPONDENCE_FORMAT.into(),
        direction: c.direction,
        pairs: c
            .pairs
            .iter()
            .map(|(s, t)| PairRecord {
                source: point_array(s),
                target: point_array(t),
            })
            .collect(),
    })
}

pub fn parse_correspondences(text: &str) -> Result<CorrespondenceSet> {
    let f: CorrespondenceFile = serde_json::from_str(text).map_err(json_err)?;
    if f.format != CORRESPONDENCE_FORMAT {
        return Err(Error::SchemaViolation(format!(
            "expected format {CORRESPONDENCE_FORMAT}, found '{}'",
            f.format
        )));
    }
    let pairs = f
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| Ok((array_point(&p.source, &format!("pair {i} source"))?, array_point(&p.target, &format!("pair {i} target"))?)))
        .collect::<Result<Vec<_>>>()?;
    CorrespondenceSet::new(pairs, f.direction)
}

// ---------------------------------------------------------------- datasets

pub const DATASET_FORMAT: &str = "dataset.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: String,
    /// Cloud path relative to the dataset directory.
    pub cloud: String,
    pub correspondences: String,
    pub gt: PoseRecord,
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub shape: ShapeSpec,
    pub scene_spec: SceneSpec,
    pub symmetric: bool,
    pub train_fraction: f64,
    pub model: String,
    pub scenes: Vec<ManifestScene>,
}

/// Ground-truth scene→model correspondences of one record: every observed
/// point paired with its pre-image under `gt`.
pub fn gt_correspondences(record: &SceneRecord) -> Result<CorrespondenceSet> {
    let inv = record.gt.inverse();
    let pairs = record
        .scene
        .points()
        .iter()
        .map(|p| (*p, inv.transform_oriented(p)))
        .collect();
    CorrespondenceSet::new(pairs, Direction::SceneToModel)
}

/// Writes `model.ply`, `scenes/<id>.ply`, `correspondences/<id>.json` and
/// `manifest.json` under `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset, seed: u64, train_fraction: f64) -> Result<Manifest> {
    save_ply(&dir.join("model.ply"), &dataset.model)?;
    let mut scenes = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let cloud = format!("scenes/{}.ply", r.id);
        let correspondences = format!("correspondences/{}.json", r.id);
        save_ply(&dir.join(&cloud), &r.scene)?;
        write_text(&dir.join(&correspondences), &correspondences_to_json(&gt_correspondences(r)?))?;
        scenes.push(ManifestScene {
            id: r.id.clone(),
            cloud,
            correspondences,
            gt: PoseRecord::new(&r.gt, None),
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        seed,
        shape: dataset.shape,
        scene_spec: dataset.scene_spec,
        symmetric: dataset.symmetric,
        train_fraction,
        model: "model.ply".into(),
        scenes,
    };
    write_text(&dir.join("manifest.json"), &to_json(&manifest))?;
    Ok(manifest)
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text).map_err(json_err)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::SchemaViolation(format!("expected format {DATASET_FORMAT}, found '{}'", m.format)));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = parse_manifest(&read_text(&dir.join("manifest.json"))?)?;
    let model = load_ply(&dir.join(&manifest.model), Frame::Model, None)?;
    let records = manifest
        .scenes
        .iter()
        .map(|s| {
            Ok(SceneRecord {
                id: s.id.clone(),
                scene: load_ply(&dir.join(&s.cloud), Frame::Scene, None)?,
                gt: s.gt.pose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::SchemaViolation("manifest lists no scenes".into()));
    }
    let dataset = Dataset {
        shape: manifest.shape,
        scene_spec: manifest.scene_spec,
        model,
        symmetric: manifest.symmetric,
        records,
    };
    Ok((dataset, manifest))
}

// ---------------------------------------------------------------- reports

pub const METRICS_HEADER: &str = "object,add_auc,adds_auc,acc_0p1d,acc_2cm,n";
pub const LOSS_HEADER: &str = "epoch,L_d,L_s,L_m,L_attention,total";

pub fn metrics_row(r: &MetricsReport) -> String {
    format!(
        "{},{:?},{:?},{:?},{:?},{}",
        r.object, r.add_auc, r.adds_auc, r.acc_0p1d, r.acc_2cm, r.n
    )
}

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in reports {
        out.push_str(&metrics_row(r));
        out.push('\n');
    }
    out
}

pub fn metrics_json(reports: &[MetricsReport]) -> String {
    to_json(&reports)
}

pub fn loss_csv(log: &[EpochLoss]) -> String {
    let mut out = format!("{LOSS_HEADER}\n");
    for e in log {
        let l = &e.losses;
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            e.epoch, l.l_d, l.l_s, l.l_m, l.l_attention, l.total
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud3() -> OrientedPointCloud {
        OrientedPointCloud::new(
            vec![
                OrientedPoint::new(Vec3::new(0.1, -0.2, 0.3), UnitVec3::z()),
                OrientedPoint::new(Vec3::new(1e-17, 5.0, -0.0), UnitVec3::new_normalize(Vec3::new(1.0, 2.0, 3.0)).unwrap()),
                OrientedPoint::new(Vec3::new(-1.5e8, 0.25, 1.0 / 3.0), UnitVec3::x()),
            ],
            Frame::Scene,
        )
        .unwrap()
    }

    #[test]
    fn ply_round_trip_three_points() {
        let c = cloud3();
        let back = parse_ply(&ply_to_string(&c), Frame::Scene, None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn ply_missing_normal_component() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty float ny\nend_header\n0 0 0 0 0\n";
        assert!(matches!(parse_ply(text, Frame::Scene, None), Err(Error::MissingNormals)));
    }

    #[test]
    fn ply_rejects_nan_and_binary() {
        let text = ply_to_string(&cloud3()).replace("0.1 ", "NaN ");
        assert!(matches!(parse_ply(&text, Frame::Scene, None), Err(Error::NonFiniteInput(_))));
        let bin = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(parse_ply(bin, Frame::Scene, None), Err(Error::MalformedHeader(_))));
        assert!(matches!(parse_ply("plx\n", Frame::Scene, None), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn ply_skips_foreign_elements_and_properties() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement camera 1\nproperty float f\n\
                    element vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\n\
                    property float nx\nproperty float ny\nproperty float nz\nelement face 0\n\
                    property list uchar int vertex_indices\nend_header\n7\n1 2 3 255 0 0 1\n4 5 6 0 0 1 0\n";
        let c = parse_ply(text, Frame::Model, None).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points()[1].position, Vec3::new(4.0, 5.0, 6.0));
        assert_eq!(*c.points()[1].normal.as_vec(), Vec3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn ply_estimates_normals_with_viewpoint() {
        let mut text = String::from("ply\nformat ascii 1.0\nelement vertex 25\nproperty double x\nproperty double y\nproperty double z\nend_header\n");
        for i in 0..5 {
            for j in 0..5 {
                text.push_str(&format!("{} {} 0\n", i as f64 * 0.01, j as f64 * 0.01));
            }
        }
        assert!(matches!(parse_ply(&text, Frame::Scene, None), Err(Error::MissingNormals)));
        let c = parse_ply(&text, Frame::Scene, Some(&Vec3::new(0.0, 0.0, 1.0))).unwrap();
        for p in c.points() {
            assert!((p.normal.as_vec().z - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_pose_round_trip() {
        let back = parse_pose_json(&pose_to_json(&Pose::identity())).unwrap();
        assert_eq!(back, Pose::identity());
        let text = pose_to_json(&Pose::identity());
        assert!(text.contains("\"format\": \"pose.v1\""));
    }

    #[test]
    fn pose_schema_violations() {
        assert!(matches!(
            parse_pose_json(r#"{"format":"pose.v2","q":[1,0,0,0],"t":[0,0,0]}"#),
            Err(Error::SchemaViolation(_))
        ));
        assert!(matches!(parse_pose_json(r#"{"format":"pose.v1","q":[1,0,0],"t":[0,0,0]}"#), Err(Error::SchemaViolation(_))));
        assert!(parse_pose_json(r#"{"format":"pose.v1","q":[0,0,0,0],"t":[0,0,0]}"#).is_err());
    }

    #[test]
    fn pose_set_keeps_provenance() {
        let mut set = PoseSet::default();
        set.push(Pose::identity(), Provenance::Direct);
        set.push(Pose::from_translation(Vec3::new(0.0, 0.1, 0.0)), Provenance::ModelBranch);
        let text = pose_set_to_json(&set);
        assert!(text.contains("model-branch"));
        assert_eq!(parse_pose_set_json(&text).unwrap(), set);
    }

    #[test]
    fn matrix_round_trip_two_by_two() {
        let m = Tensor::new(2, 2, vec![0.1, -2.5e-300, 1.0 / 3.0, 7.0]).unwrap();
        let text = matrix_to_string(&m);
        assert!(text.starts_with("# matrix.v1\n2 2\n"));
        assert_eq!(parse_matrix(&text).unwrap(), m);
        assert_eq!(parse_matrix("1 2\n3 4\n").unwrap(), Tensor::new(1, 2, vec![3.0, 4.0]).unwrap());
        assert!(matches!(parse_matrix("2 2\n1 2 3\n"), Err(Error::SchemaViolation(_))));
        assert!(matches!(parse_matrix("# matrix.v9\n1 1\n0\n"), Err(Error::SchemaViolation(_))));
    }

    #[test]
    fn csv_headers() {
        assert_eq!(metrics_csv(&[]), "object,add_auc,adds_auc,acc_0p1d,acc_2cm,n\n");
        assert_eq!(loss_csv(&[]), "epoch,L_d,L_s,L_m,L_attention,total\n");
    }
}
