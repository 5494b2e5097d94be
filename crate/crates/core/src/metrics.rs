//! Evaluation metrics: orientation precision, keypoint precision,
//! Hausdorff distance and azimuth error.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};

/// Axis-aligned image box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    /// Tight box around `points`; `None` if empty.
    pub fn around(points: impl IntoIterator<Item = Vec2>) -> Option<Self> {
        let mut it = points.into_iter();
        let p = it.next()?;
        let mut b = Self::new(p.x, p.y, p.x, p.y);
        for p in it {
            b.x_min = b.x_min.min(p.x);
            b.y_min = b.y_min.min(p.y);
            b.x_max = b.x_max.max(p.x);
            b.y_max = b.y_max.max(p.y);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Intersection over union; 0 when both boxes are degenerate.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = BBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .area();
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Box and azimuth of one instance, as predicted or annotated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub bbox: BBox,
    pub azimuth_deg: f64,
}

/// Absolute azimuth difference wrapped to `[0, 180]` degrees.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn check_matched(n_pred: usize, n_gt: usize) -> Result<()> {
    if n_pred != n_gt {
        return Err(Error::DegenerateInput(format!("{n_pred} predictions for {n_gt} ground-truth entries")));
    }
    if n_gt == 0 {
        return Err(Error::UndefinedMetric("no instances to evaluate".into()));
    }
    Ok(())
}

/// Fraction of instances whose boxes overlap by IoU `> iou_threshold` and
/// whose azimuth error is `≤ angle_threshold_deg`.
pub fn aop(pred: &[Viewpoint], gt: &[Viewpoint], angle_threshold_deg: f64, iou_threshold: f64) -> Result<f64> {
    check_matched(pred.len(), gt.len())?;
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| {
            p.bbox.iou(&g.bbox) > iou_threshold && angle_diff_deg(p.azimuth_deg, g.azimuth_deg) <= angle_threshold_deg
        })
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Whether each keypoint lies within `α·max(h, w)` of its ground truth
/// (closed inequality).
pub fn apk_instance(pred: &[Vec2], gt: &[Vec2], bbox: &BBox, alpha: f64) -> Result<Vec<bool>> {
    if pred.len() != gt.len() {
        return Err(Error::DegenerateInput("keypoint counts differ".into()));
    }
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::DegenerateInput("bounding box must have positive size".into()));
    }
    let tol = alpha * bbox.width().max(bbox.height());
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm() <= tol).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApkReport {
    /// Precision per keypoint; `None` where no instance annotates it.
    pub per_keypoint: Vec<Option<f64>>,
    /// Mean over the defined per-keypoint precisions.
    pub mean: f64,
}

/// Keypoint precision over a matched set. Keypoints without ground truth
/// are skipped; a missing prediction for an annotated keypoint counts as a
/// miss.
pub fn apk(pred: &[Vec<Option<Vec2>>], gt: &[Vec<Option<Vec2>>], boxes: &[BBox], alpha: f64) -> Result<ApkReport> {
    check_matched(pred.len(), gt.len())?;
    if boxes.len() != gt.len() {
        return Err(Error::DegenerateInput("one box per instance required".into()));
    }
    let k = gt[0].len();
    let mut hit = vec![0usize; k];
    let mut total = vec![0usize; k];
    for ((p, g), b) in pred.iter().zip(gt).zip(boxes) {
        if p.len() != k || g.len() != k {
            return Err(Error::DegenerateInput("keypoint counts differ".into()));
        }
        if !(b.width() > 0.0 && b.height() > 0.0) {
            return Err(Error::DegenerateInput("bounding box must have positive size".into()));
        }
        let tol = alpha * b.width().max(b.height());
        for i in 0..k {
            if let Some(gi) = g[i] {
                total[i] += 1;
                if p[i].is_some_and(|pi| (pi - gi).norm() <= tol) {
                    hit[i] += 1;
                }
            }
        }
    }
    let per_keypoint: Vec<Option<f64>> = hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let defined: Vec<f64> = per_keypoint.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no annotated keypoints".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(ApkReport { per_keypoint, mean })
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("Hausdorff distance of an empty set".into()));
    }
    let directed = |p: &[Vec3], q: &[Vec3]| {
        p.iter()
            .map(|x| q.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)))
}

/// Mean wrapped absolute azimuth difference, degrees.
pub fn mean_abs_angle_error(pred_deg: &[f64], gt_deg: &[f64]) -> Result<f64> {
    check_matched(pred_deg.len(), gt_deg.len())?;
    Ok(pred_deg.iter().zip(gt_deg).map(|(p, g)| angle_diff_deg(*p, *g)).sum::<f64>() / gt_deg.len() as f64)
}

pub const DEFAULT_AOP_THRESHOLDS: [f64; 3] = [5.0, 15.0, 30.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub instances: usize,
    /// `(threshold in degrees, precision)` pairs.
    pub aop: Vec<(f64, f64)>,
    pub mean_abs_angle_error: f64,
    /// Mean full-rotation geodesic error in degrees, when rotations are known.
    pub mean_rotation_error: Option<f64>,
    pub apk: Option<ApkReport>,
    /// Mean Hausdorff distance between predicted and true shapes, meters.
    pub hausdorff: Option<f64>,
    /// Instance ids present on only one side.
    pub unmatched: Vec<String>,
}

impl MetricReport {
    /// Plain-text table with one column per AOP threshold.
    pub fn table(&self, keypoint_names: &[String]) -> String {
        let mut s = String::new();
        let heads: Vec<String> = self.aop.iter().map(|(t, _)| format!("<={t}°")).collect();
        let _ = writeln!(s, "instances: {}", self.instances);
        let _ = write!(s, "{:<10}", "metric");
        for h in &heads {
            let _ = write!(s, "{h:>10}");
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<10}", "AOP");
        for (_, v) in &self.aop {
            let _ = write!(s, "{v:>10.4}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "mean azimuth error (deg): {:.4}", self.mean_abs_angle_error);
        if let Some(e) = self.mean_rotation_error {
            let _ = writeln!(s, "mean rotation error (deg): {e:.4}");
        }
        if let Some(a) = &self.apk {
            let _ = writeln!(s, "APK mean: {:.4}", a.mean);
            for (i, p) in a.per_keypoint.iter().enumerate() {
                let name = keypoint_names.get(i).map(String::as_str).unwrap_or("?");
                match p {
                    Some(p) => {
                        let _ = writeln!(s, "  {name:<20}{p:>8.4}");
                    }
                    None => {
                        let _ = writeln!(s, "  {name:<20}{:>8}", "n/a");
                    }
                }
            }
        }
        if let Some(h) = self.hausdorff {
            let _ = writeln!(s, "mean Hausdorff (m): {h:.6}");
        }
        if !self.unmatched.is_empty() {
            let _ = writeln!(s, "unmatched ids: {}", self.unmatched.join(", "));
        }
        s
    }
}
