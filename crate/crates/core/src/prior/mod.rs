//! Shape priors: a mean keypoint shape plus a linear deformation basis.

mod nrsfm;
mod template;

pub use nrsfm::{nrsfm_fit, EmConfig, FitReport, InstanceFit, NrsfmFit};
pub use template::{car_layout, car_prior, car_template_shape, CarParams, CAR_KEYPOINT_NAMES};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};
use crate::mesh::{Plane, QuadMesh};

/// Category structure shared by every instance: names, faces, symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointLayout {
    pub names: Vec<String>,
    pub topology: QuadMesh,
    /// `(right, left)` index pairs mirrored across the medial plane.
    pub symmetry_pairs: Vec<(usize, usize)>,
    /// Keypoints lying on the medial plane.
    pub on_plane: Vec<usize>,
    /// Keypoints at the front of the object, used to orient the canonical frame.
    pub front: Vec<usize>,
}

impl KeypointLayout {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.names.len();
        if self.topology.vertex_count() != k {
            return Err(Error::Schema(format!(
                "topology has {} vertices but {} keypoint names",
                self.topology.vertex_count(),
                k
            )));
        }
        let mut count = vec![0usize; k];
        for &(r, l) in &self.symmetry_pairs {
            if r >= k || l >= k || r == l {
                return Err(Error::Schema(format!("invalid symmetry pair ({r}, {l})")));
            }
            count[r] += 1;
            count[l] += 1;
        }
        for &i in &self.on_plane {
            if i >= k {
                return Err(Error::Schema(format!("on-plane index {i} out of range")));
            }
            count[i] += 1;
        }
        if let Some(i) = count.iter().position(|&c| c != 1) {
            return Err(Error::Schema(format!(
                "symmetry pairs and on-plane list must cover each keypoint exactly once (keypoint {i} appears {} times)",
                count[i]
            )));
        }
        if let Some(&i) = self.front.iter().find(|&&i| i >= k) {
            return Err(Error::Schema(format!("front index {i} out of range")));
        }
        let mut sorted = self.names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != k {
            return Err(Error::Schema("keypoint names must be unique".into()));
        }
        Ok(())
    }
}

/// Prior length, width and height in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimPriors {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

/// Extents `(length, width, height)` along the canonical `(z, x, y)` axes.
pub fn extents(shape: &[Vec3]) -> (f64, f64, f64) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in shape {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let e = hi - lo;
    (e.z, e.x, e.y)
}

/// Basis weights for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCoeffs(pub DVector<f64>);

impl LatentCoeffs {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self(DVector::from_column_slice(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Learned category model.
///
/// The basis columns are unit-norm, mutually orthogonal directions in the
/// flattened `3K` shape space (`x0, y0, z0, x1, …`). `eigenvalues[j]` is the
/// population variance of the coefficient on column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrior {
    pub layout: KeypointLayout,
    pub mean: Vec<Vec3>,
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Observation noise variance, pixels².
    pub sigma2: f64,
    /// Medial plane, same `nᵀX + d = 0` form as face planes.
    pub medial_plane: Plane,
    pub dim_priors: DimPriors,
}

impl ShapePrior {
    pub fn num_keypoints(&self) -> usize {
        self.mean.len()
    }

    pub fn basis_size(&self) -> usize {
        self.basis.ncols()
    }

    pub fn topology(&self) -> &QuadMesh {
        &self.layout.topology
    }

    /// Basis vector `j` as per-keypoint displacements.
    pub fn basis_vector(&self, j: usize) -> Vec<Vec3> {
        let col = self.basis.column(j);
        (0..self.mean.len())
            .map(|i| Vec3::new(col[3 * i], col[3 * i + 1], col[3 * i + 2]))
            .collect()
    }

    pub fn mean_flat(&self) -> DVector<f64> {
        flatten(&self.mean)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let k = self.mean.len();
        if k != self.layout.len() {
            return Err(Error::Schema(format!("mean has {k} keypoints, layout has {}", self.layout.len())));
        }
        if self.basis.nrows() != 3 * k {
            return Err(Error::Schema(format!("basis has {} rows, expected {}", self.basis.nrows(), 3 * k)));
        }
        if self.eigenvalues.len() != self.basis.ncols() {
            return Err(Error::Schema("eigenvalue count differs from basis size".into()));
        }
        let gram = self.basis.tr_mul(&self.basis);
        let n = gram.nrows();
        let err = (gram - DMatrix::<f64>::identity(n, n)).abs().max();
        if n > 0 && err > 1e-8 {
            return Err(Error::Schema(format!("basis is not orthonormal (error {err:.3e})")));
        }
        if self.eigenvalues.windows(2).any(|w| w[1] > w[0]) || self.eigenvalues.iter().any(|&e| e < 0.0) {
            return Err(Error::Schema("eigenvalues must be nonnegative and nonincreasing".into()));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::Schema("sigma2 must be nonnegative".into()));
        }
        let d = self.dim_priors;
        if !(d.length > 0.0 && d.width > 0.0 && d.height > 0.0) {
            return Err(Error::Schema("dimension priors must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn flatten(points: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(points.len() * 3, points.iter().flat_map(|p| [p.x, p.y, p.z]))
}

pub(crate) fn unflatten(v: &DVector<f64>) -> Vec<Vec3> {
    (0..v.len() / 3)
        .map(|i| Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]))
        .collect()
}

/// `S̄ + Σ_j λ_j V_j`.
pub fn instantiate(prior: &ShapePrior, coeffs: &LatentCoeffs) -> Result<Vec<Vec3>> {
    if coeffs.len() != prior.basis_size() {
        return Err(Error::DegenerateInput(format!(
            "expected {} coefficients, got {}",
            prior.basis_size(),
            coeffs.len()
        )));
    }
    Ok(unflatten(&(prior.mean_flat() + &prior.basis * &coeffs.0)))
}

/// Fraction of total shape variance captured by the first `n` basis vectors.
pub fn variance_explained(prior: &ShapePrior, n: usize) -> Result<f64> {
    let total_n = prior.eigenvalues.len();
    if n < 1 || n > total_n {
        return Err(Error::InvalidConfig(format!("n must be in 1..={total_n}, got {n}")));
    }
    let total: f64 = prior.eigenvalues.iter().sum();
    if total <= 0.0 {
        // no variation at all: every prefix explains everything there is
        return Ok(1.0);
    }
    let head: f64 = prior.eigenvalues[..n].iter().sum();
    Ok((head / total).clamp(0.0, 1.0))
}

/// 2D keypoint annotations for prior learning.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub keypoint_names: Vec<String>,
    pub instances: Vec<AnnotatedInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    pub id: String,
    /// One slot per keypoint; `None` when not visible.
    pub points: Vec<Option<Vec2>>,
}

impl AnnotatedInstance {
    pub fn visible_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        let k = self.keypoint_names.len();
        for inst in &self.instances {
            if inst.points.len() != k {
                return Err(Error::Schema(format!(
                    "instance {} has {} keypoint slots, expected {k}",
                    inst.id,
                    inst.points.len()
                )));
            }
            if inst.points.iter().flatten().any(|p| !p.iter().all(|v| v.is_finite())) {
                return Err(Error::Schema(format!("instance {} has non-finite coordinates", inst.id)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn instantiate_examples() {
        let prior = car_prior(&CarParams::default(), 5).unwrap();
        let zero = instantiate(&prior, &LatentCoeffs::zeros(5)).unwrap();
        assert_eq!(zero, prior.mean);

        let e1 = instantiate(&prior, &LatentCoeffs::from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        let v1 = prior.basis_vector(0);
        for i in 0..prior.num_keypoints() {
            assert!((e1[i] - (prior.mean[i] + v1[i])).norm() < 1e-15);
        }

        let both = instantiate(&prior, &LatentCoeffs::from_slice(&[1.0, 1.0, 0.0, 0.0, 0.0])).unwrap();
        let v2 = prior.basis_vector(1);
        for i in 0..prior.num_keypoints() {
            assert!((both[i] - (prior.mean[i] + v1[i] + v2[i])).norm() < 1e-14);
        }

        assert!(instantiate(&prior, &LatentCoeffs::zeros(3)).is_err());
    }

    #[test]
    fn variance_explained_bounds() {
        let prior = car_prior(&CarParams::default(), 5).unwrap();
        assert_eq!(variance_explained(&prior, 5).unwrap(), 1.0);
        assert!(variance_explained(&prior, 0).is_err());
        assert!(variance_explained(&prior, 6).is_err());
        let v: Vec<f64> = (1..=5).map(|n| variance_explained(&prior, n).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn layout_validation() {
        let mut layout = car_layout();
        layout.validate().unwrap();
        layout.symmetry_pairs.pop();
        assert!(layout.validate().is_err());
    }

    proptest! {
        #[test]
        fn instantiate_is_affine(a in prop::array::uniform5(-3.0f64..3.0), b in prop::array::uniform5(-3.0f64..3.0)) {
            let prior = car_prior(&CarParams::default(), 5).unwrap();
            let la = LatentCoeffs::from_slice(&a);
            let lb = LatentCoeffs::from_slice(&b);
            let sum = LatentCoeffs(&la.0 + &lb.0);
            let sa = instantiate(&prior, &la).unwrap();
            let sb = instantiate(&prior, &lb).unwrap();
            let ss = instantiate(&prior, &sum).unwrap();
            for i in 0..prior.num_keypoints() {
                prop_assert!((ss[i] - (sa[i] + sb[i] - prior.mean[i])).norm() < 1e-12);
            }
        }
    }
}
