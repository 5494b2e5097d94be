//! File formats: versioned JSON records and OBJ wireframes.
//!
//! Every JSON document carries a `format_version` string `"<major>.<minor>"`.
//! Readers accept any minor version of [`FORMAT_MAJOR`] and reject other
//! majors before looking at the rest of the document. Writes go to a
//! temporary sibling first and are renamed into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyBreakdown;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, QuatPose, Vec2, Vec3};
use crate::mesh::{Face, Plane, QuadMesh};
use crate::pose::KeypointObservation;
use crate::prior::{AnnotatedInstance, AnnotationSet, DimPriors, KeypointLayout, ShapePrior};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_VERSION: &str = "1.0";

/// Accepts `"1"` or `"1.<minor>"`.
pub fn check_version(found: &str) -> Result<()> {
    let major = found.split('.').next().and_then(|m| m.parse::<u32>().ok());
    match major {
        Some(FORMAT_MAJOR) => Ok(()),
        _ => Err(Error::UnsupportedVersion {
            found: found.to_string(),
            supported: FORMAT_MAJOR,
        }),
    }
}

#[derive(Deserialize)]
struct Header {
    format_version: Option<String>,
}

/// Parses a versioned JSON document. `origin` names the source in errors.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let parse_err = |source| Error::Parse {
        path: origin.to_string(),
        source,
    };
    let header: Header = serde_json::from_str(text).map_err(parse_err)?;
    match header.format_version {
        Some(v) => check_version(&v)?,
        None => return Err(Error::Schema(format!("{origin}: missing format_version"))),
    }
    serde_json::from_str(text).map_err(parse_err)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_context(path, e))?;
    parse_json(&text, &path.display().to_string())
}

/// Pretty-printed JSON with a trailing newline. Floats use the shortest
/// decimal that round-trips exactly.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it over
/// `path`. Parent directories are created as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_context(path, e));
    }
    Ok(())
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub(crate) fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn v3(p: &Vec3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

fn v2(p: &Vec2) -> [f64; 2] {
    [p.x, p.y]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneRecord {
    pub n: [f64; 3],
    pub d: f64,
}

impl From<&Plane> for PlaneRecord {
    fn from(p: &Plane) -> Self {
        Self { n: v3(&p.n), d: p.d }
    }
}

impl From<&PlaneRecord> for Plane {
    fn from(p: &PlaneRecord) -> Self {
        Plane::new(Vec3::from(p.n), p.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub vertices: [usize; 4],
    #[serde(default)]
    pub rectangular: bool,
    #[serde(default)]
    pub ground_parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimRecord {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

/// Learned shape prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub format_version: String,
    pub keypoint_names: Vec<String>,
    pub mean: Vec<[f64; 3]>,
    /// Basis columns, each `3K` long in `x0, y0, z0, x1, …` order.
    pub basis: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub sigma2: f64,
    pub faces: Vec<FaceRecord>,
    /// `[right, left]` keypoint index pairs.
    pub symmetry_pairs: Vec<[usize; 2]>,
    pub on_plane: Vec<usize>,
    pub front: Vec<usize>,
    pub medial_plane: PlaneRecord,
    pub dim_priors: DimRecord,
}

impl PriorFile {
    pub fn from_prior(p: &ShapePrior) -> Self {
        let l = &p.layout;
        Self {
            format_version: FORMAT_VERSION.into(),
            keypoint_names: l.names.clone(),
            mean: p.mean.iter().map(v3).collect(),
            basis: p.basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
            eigenvalues: p.eigenvalues.clone(),
            sigma2: p.sigma2,
            faces: l
                .topology
                .faces()
                .iter()
                .map(|f| FaceRecord {
                    vertices: f.vertices,
                    rectangular: f.rectangular,
                    ground_parallel: f.ground_parallel,
                })
                .collect(),
            symmetry_pairs: l.symmetry_pairs.iter().map(|&(r, l)| [r, l]).collect(),
            on_plane: l.on_plane.clone(),
            front: l.front.clone(),
            medial_plane: (&p.medial_plane).into(),
            dim_priors: DimRecord {
                length: p.dim_priors.length,
                width: p.dim_priors.width,
                height: p.dim_priors.height,
            },
        }
    }

    pub fn into_prior(self) -> Result<ShapePrior> {
        check_version(&self.format_version)?;
        let k = self.mean.len();
        if let Some(j) = self.basis.iter().position(|c| c.len() != 3 * k) {
            return Err(Error::Schema(format!(
                "basis column {j} has {} entries, expected {}",
                self.basis[j].len(),
                3 * k
            )));
        }
        let faces = self
            .faces
            .iter()
            .map(|f| Face {
                vertices: f.vertices,
                rectangular: f.rectangular,
                ground_parallel: f.ground_parallel,
            })
            .collect();
        let topology = QuadMesh::new(self.keypoint_names.len(), faces)?;
        let layout = KeypointLayout {
            names: self.keypoint_names,
            topology,
            symmetry_pairs: self.symmetry_pairs.iter().map(|p| (p[0], p[1])).collect(),
            on_plane: self.on_plane,
            front: self.front,
        };
        let basis = DMatrix::from_iterator(3 * k, self.basis.len(), self.basis.into_iter().flatten());
        let prior = ShapePrior {
            layout,
            mean: self.mean.iter().map(|p| Vec3::from(*p)).collect(),
            basis,
            eigenvalues: self.eigenvalues,
            sigma2: self.sigma2,
            medial_plane: (&self.medial_plane).into(),
            dim_priors: DimPriors {
                length: self.dim_priors.length,
                width: self.dim_priors.width,
                height: self.dim_priors.height,
            },
        };
        prior.validate()?;
        Ok(prior)
    }
}

pub fn read_prior(path: &Path) -> Result<ShapePrior> {
    read_json::<PriorFile>(path)?.into_prior()
}

pub fn write_prior(path: &Path, prior: &ShapePrior) -> Result<()> {
    write_json(path, &PriorFile::from_prior(prior))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPoint {
    pub u: f64,
    pub v: f64,
    #[serde(default = "yes")]
    pub visible: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    /// Keypoint name to image position. Absent or invisible keypoints are missing.
    pub keypoints: BTreeMap<String, AnnotatedPoint>,
}

/// 2D keypoint annotations for prior learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub format_version: String,
    pub keypoint_names: Vec<String>,
    pub instances: Vec<AnnotationRecord>,
}

impl AnnotationFile {
    pub fn from_set(set: &AnnotationSet) -> Self {
        let instances = set
            .instances
            .iter()
            .map(|inst| AnnotationRecord {
                id: inst.id.clone(),
                keypoints: inst
                    .points
                    .iter()
                    .zip(&set.keypoint_names)
                    .filter_map(|(p, name)| {
                        p.map(|p| {
                            (
                                name.clone(),
                                AnnotatedPoint {
                                    u: p.x,
                                    v: p.y,
                                    visible: true,
                                },
                            )
                        })
                    })
                    .collect(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION.into(),
            keypoint_names: set.keypoint_names.clone(),
            instances,
        }
    }

    /// Annotation set in the order of `names`. Every name used by an
    /// instance must appear in `names`.
    pub fn to_set(&self, names: &[String]) -> Result<AnnotationSet> {
        check_version(&self.format_version)?;
        let mut instances = Vec::with_capacity(self.instances.len());
        for rec in &self.instances {
            let mut points = vec![None; names.len()];
            for (name, p) in &rec.keypoints {
                let i = index_of(names, name, &rec.id)?;
                if p.visible {
                    points[i] = Some(Vec2::new(p.u, p.v));
                }
            }
            instances.push(AnnotatedInstance {
                id: rec.id.clone(),
                points,
            });
        }
        let set = AnnotationSet {
            keypoint_names: names.to_vec(),
            instances,
        };
        set.validate()?;
        Ok(set)
    }
}

fn index_of(names: &[String], name: &str, id: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Schema(format!("instance {id}: unknown keypoint name '{name}'")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedPoint {
    pub u: f64,
    pub v: f64,
    /// Detector confidence in `[0, 1]`.
    #[serde(default = "one")]
    pub confidence: f64,
    #[serde(default = "yes")]
    pub visible: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub keypoints: BTreeMap<String, DetectedPoint>,
    /// Optional starting pose for the pose solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_pose: Option<PoseRecord>,
}

impl DetectionRecord {
    /// Observations ordered by keypoint index in `names`.
    pub fn observations(&self, names: &[String]) -> Result<Vec<KeypointObservation>> {
        let mut obs = Vec::with_capacity(self.keypoints.len());
        for (name, p) in &self.keypoints {
            let i = index_of(names, name, &self.id)?;
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::Schema(format!(
                    "instance {}: keypoint '{name}' confidence {} outside [0, 1]",
                    self.id, p.confidence
                )));
            }
            obs.push(KeypointObservation::new(i, Vec2::new(p.u, p.v), p.confidence, p.visible));
        }
        obs.sort_by_key(|o| o.index);
        Ok(obs)
    }
}

/// Keypoint detections, the input of pose estimation and shape adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointsFile {
    pub format_version: String,
    pub instances: Vec<DetectionRecord>,
}

impl KeypointsFile {
    pub fn from_observations(names: &[String], instances: &[(String, Vec<KeypointObservation>)]) -> Self {
        let instances = instances
            .iter()
            .map(|(id, obs)| DetectionRecord {
                id: id.clone(),
                keypoints: obs
                    .iter()
                    .map(|o| {
                        (
                            names[o.index].clone(),
                            DetectedPoint {
                                u: o.uv.x,
                                v: o.uv.y,
                                confidence: o.w_cnn,
                                visible: o.visible,
                            },
                        )
                    })
                    .collect(),
                init_pose: None,
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION.into(),
            instances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsFile {
    pub format_version: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl IntrinsicsFile {
    pub fn from_intrinsics(k: &Intrinsics) -> Self {
        Self {
            format_version: FORMAT_VERSION.into(),
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            skew: k.skew,
        }
    }

    pub fn to_intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::with_skew(self.fx, self.fy, self.cx, self.cy, self.skew)
    }
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    read_json::<IntrinsicsFile>(path)?.to_intrinsics()
}

/// Object-to-camera pose, quaternion scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&QuatPose> for PoseRecord {
    fn from(p: &QuatPose) -> Self {
        Self {
            quaternion: [p.q[0], p.q[1], p.q[2], p.q[3]],
            translation: v3(&p.t),
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> Result<QuatPose> {
        QuatPose::new(Vector4::from(self.quaternion), Vec3::from(self.translation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

/// Pose estimate for one instance, or the reason there is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInstance {
    pub id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth_deg: Option<f64>,
    /// Final IRLS weight per keypoint.
    #[serde(default)]
    pub weights: Vec<f64>,
    /// Reprojection error per keypoint in pixels; null when the keypoint is
    /// behind the camera.
    #[serde(default)]
    pub residuals: Vec<Option<f64>>,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_cost: Option<f64>,
    /// Model keypoints projected at the estimated pose.
    #[serde(default)]
    pub projected: Vec<Option<[f64; 2]>>,
}

impl PoseInstance {
    pub fn failed(id: &str, reason: impl Into<String>) -> Self {
        Self {
            id: id.to_string(),
            status: Status::Failed,
            reason: Some(reason.into()),
            pose: None,
            azimuth_deg: None,
            weights: Vec::new(),
            residuals: Vec::new(),
            iterations: 0,
            final_cost: None,
            projected: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub format_version: String,
    pub instances: Vec<PoseInstance>,
}

/// Shape adjustment result for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRecord {
    pub id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub planes: Vec<PlaneRecord>,
    /// Keypoints in the object frame.
    #[serde(default)]
    pub keypoints3d: Vec<[f64; 3]>,
    #[serde(default)]
    pub kp_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_before: Option<EnergyBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_after: Option<EnergyBreakdown>,
    #[serde(default)]
    pub diverged: bool,
    #[serde(default)]
    pub diagnostics: Vec<String>,
    /// Adjusted keypoints projected at the pose.
    #[serde(default)]
    pub projected: Vec<Option<[f64; 2]>>,
    /// Wireframe file name, relative to this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obj: Option<String>,
}

impl ReconstructionRecord {
    pub fn failed(id: &str, reason: impl Into<String>) -> Self {
        Self {
            id: id.to_string(),
            status: Status::Failed,
            reason: Some(reason.into()),
            pose: None,
            lambda: Vec::new(),
            planes: Vec::new(),
            keypoints3d: Vec::new(),
            kp_weights: Vec::new(),
            energy_before: None,
            energy_after: None,
            diverged: false,
            diagnostics: Vec::new(),
            projected: Vec::new(),
            obj: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionFile {
    pub format_version: String,
    pub instances: Vec<ReconstructionRecord>,
}

/// Ground truth of one synthetic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub id: String,
    pub pose: PoseRecord,
    pub azimuth_deg: f64,
    pub lambda: Vec<f64>,
    pub keypoints3d: Vec<[f64; 3]>,
    /// Exact (noise-free) projections of `keypoints3d`.
    pub projected: Vec<[f64; 2]>,
    /// Indices of keypoints carrying a gross error.
    pub outliers: Vec<usize>,
    /// Indices of keypoints marked invisible.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub format_version: String,
    pub keypoint_names: Vec<String>,
    pub instances: Vec<GroundTruthRecord>,
}

pub(crate) fn points3(v: &[Vec3]) -> Vec<[f64; 3]> {
    v.iter().map(v3).collect()
}

pub(crate) fn points2(v: &[Vec2]) -> Vec<[f64; 2]> {
    v.iter().map(v2).collect()
}

/// OBJ wireframe: one `v` line per keypoint, one `l` line per mesh edge.
pub fn obj_string(points: &[Vec3], edges: &[(usize, usize)]) -> String {
    let mut s = String::from("# monoshape wireframe\n");
    for p in points {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    for &(a, b) in edges {
        let _ = writeln!(s, "l {} {}", a + 1, b + 1);
    }
    s
}

pub fn write_obj(path: &Path, points: &[Vec3], edges: &[(usize, usize)]) -> Result<()> {
    write_atomic(path, obj_string(points, edges).as_bytes())
}

/// Vertices and zero-based edges of an OBJ file. Polyline `l` records with
/// more than two vertices become consecutive edges; other records are ignored.
pub fn parse_obj(text: &str) -> Result<(Vec<Vec3>, Vec<(usize, usize)>)> {
    let mut verts = Vec::new();
    let mut edges = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let bad = |what: &str| Error::Schema(format!("obj line {}: {what}", ln + 1));
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad coordinate")))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("l") => {
                let ids: Vec<usize> = it
                    .map(|t| {
                        // `v/vt` references keep only the vertex part
                        let v = t.split('/').next().unwrap_or(t);
                        v.parse::<usize>().ok().filter(|&i| i >= 1).ok_or_else(|| bad("bad vertex index"))
                    })
                    .collect::<Result<_>>()?;
                if ids.len() < 2 {
                    return Err(bad("line needs two vertices"));
                }
                edges.extend(ids.windows(2).map(|w| (w[0] - 1, w[1] - 1)));
            }
            _ => {}
        }
    }
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= verts.len() || b >= verts.len()) {
        return Err(Error::Schema(format!("obj edge ({}, {}) references a missing vertex", a + 1, b + 1)));
    }
    Ok((verts, edges))
}

pub fn read_obj(path: &Path) -> Result<(Vec<Vec3>, Vec<(usize, usize)>)> {
    parse_obj(&fs::read_to_string(path).map_err(|e| io_context(path, e))?)
}

/// `dir/name`, or `name` alone when `dir` is empty.
pub fn join(dir: &Path, name: &str) -> PathBuf {
    if dir.as_os_str().is_empty() {
        PathBuf::from(name)
    } else {
        dir.join(name)
    }
}
