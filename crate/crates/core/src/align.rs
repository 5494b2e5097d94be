//! Similarity (Umeyama) alignment of corresponding 3D point sets.

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x * self.scale + self.translation
    }
}

/// Least-squares similarity mapping `src` onto `dst`.
///
/// With `allow_reflection` the orthogonal part may have determinant −1.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], allow_reflection: bool) -> Result<Similarity> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "alignment needs ≥3 matched points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let da = a - ms;
        cov += (b - md) * da.transpose();
        var_s += da.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s <= 0.0 {
        return Err(Error::DegenerateInput("source points are coincident".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut s = Mat3::identity();
    if !allow_reflection && (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let sv = svd.singular_values;
    // singular values come sorted, but the sign flip applies to the smallest
    let smallest = (0..3).min_by(|&i, &j| sv[i].total_cmp(&sv[j])).unwrap();
    let mut trace = 0.0;
    for i in 0..3 {
        let sign = if s[(2, 2)] < 0.0 && i == smallest { -1.0 } else { 1.0 };
        trace += sign * sv[i];
    }
    let scale = trace / var_s;
    let translation = md - rotation * ms * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// RMS distance after mapping `src` onto `dst` with the best similarity.
pub fn aligned_rmse(src: &[Vec3], dst: &[Vec3], allow_reflection: bool) -> Result<f64> {
    let sim = umeyama(src, dst, allow_reflection)?;
    let sum: f64 = src.iter().zip(dst).map(|(a, b)| (sim.apply(a) - b).norm_squared()).sum();
    Ok((sum / src.len() as f64).sqrt())
}

/// Largest pairwise distance within a point set.
pub fn diameter(points: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm());
        }
    }
    best
}
