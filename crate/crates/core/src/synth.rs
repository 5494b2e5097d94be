//! Synthetic data: perspective keypoint datasets drawn from a shape prior,
//! and low-rank orthographic annotation sets for prior learning.

use nalgebra::{DMatrix, DVector, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_rotation, viewpoint_rotation, Intrinsics, QuatPose, Vec2, Vec3};
use crate::mesh::vertex_occluded;
use crate::pose::KeypointObservation;
use crate::prior::{flatten, instantiate, unflatten, AnnotatedInstance, AnnotationSet, LatentCoeffs, ShapePrior};

/// Settings of the perspective dataset generator. Angles are in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub instance_count: usize,
    pub pixel_noise_sigma: f64,
    /// Fraction of keypoints per instance displaced by `outlier_magnitude`.
    pub outlier_fraction: f64,
    pub outlier_magnitude: f64,
    /// Fraction of keypoints per instance marked invisible; every hidden
    /// keypoint must be occluded by the shape itself.
    pub occlusion_fraction: f64,
    pub seed: u64,
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub depth_range: [f64; 2],
    /// Camera for every instance: `[fx, fy, cx, cy]`.
    pub intrinsics: [f64; 4],
    pub image_size: [f64; 2],
    /// Detector confidence reported for visible keypoints.
    pub visible_confidence: f64,
    /// Detector confidence reported for hidden keypoints.
    pub hidden_confidence: f64,
    /// Draws per instance before generation fails.
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            instance_count: 200,
            pixel_noise_sigma: 2.0,
            outlier_fraction: 0.2,
            outlier_magnitude: 80.0,
            occlusion_fraction: 0.0,
            seed: 0,
            azimuth_deg: [-180.0, 180.0],
            elevation_deg: [0.0, 15.0],
            depth_range: [8.0, 25.0],
            intrinsics: [721.5, 721.5, 609.6, 172.9],
            image_size: [1242.0, 375.0],
            visible_confidence: 1.0,
            hidden_confidence: 0.5,
            max_retries: 100,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.outlier_fraction) && unit(self.occlusion_fraction)) {
            return Err(Error::InvalidConfig("outlier and occlusion fractions must lie in [0, 1]".into()));
        }
        if !(unit(self.visible_confidence) && unit(self.hidden_confidence)) {
            return Err(Error::InvalidConfig("confidences must lie in [0, 1]".into()));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.outlier_magnitude >= 0.0) {
            return Err(Error::InvalidConfig("noise sigma and outlier magnitude must be nonnegative".into()));
        }
        for (name, r) in [
            ("azimuth_deg", self.azimuth_deg),
            ("elevation_deg", self.elevation_deg),
            ("depth_range", self.depth_range),
        ] {
            if !(r[0] <= r[1] && r[0].is_finite() && r[1].is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be an ordered finite range")));
            }
        }
        if !(self.depth_range[0] > 0.0) {
            return Err(Error::InvalidConfig("depths must be positive".into()));
        }
        if self.max_retries == 0 {
            return Err(Error::InvalidConfig("max_retries must be positive".into()));
        }
        self.camera()?;
        Ok(())
    }

    pub fn camera(&self) -> Result<Intrinsics> {
        let [fx, fy, cx, cy] = self.intrinsics;
        Intrinsics::new(fx, fy, cx, cy)
    }
}

/// One generated instance with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub id: String,
    pub pose: QuatPose,
    pub lambda: LatentCoeffs,
    pub shape: Vec<Vec3>,
    pub observations: Vec<KeypointObservation>,
    /// Keypoints displaced by a gross error.
    pub outliers: Vec<usize>,
    /// Keypoints marked invisible.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub intrinsics: Intrinsics,
    pub image_size: [f64; 2],
    pub instances: Vec<SynthInstance>,
}

impl SynthDataset {
    /// Weak-perspective annotations of the ground-truth shapes (rotation of
    /// the instance pose, scale `fx / depth`), hidden keypoints missing.
    pub fn annotations(&self, keypoint_names: &[String]) -> AnnotationSet {
        let instances = self
            .instances
            .iter()
            .map(|inst| {
                let r = inst.pose.rotation().expect("generated poses are valid");
                let s = self.intrinsics.fx / inst.pose.t.z;
                let c = Vec2::new(self.intrinsics.cx, self.intrinsics.cy) + inst.pose.t.xy() * s;
                let points = inst
                    .shape
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (!inst.hidden.contains(&i)).then(|| c + (r * x).xy() * s))
                    .collect();
                AnnotatedInstance {
                    id: inst.id.clone(),
                    points,
                }
            })
            .collect();
        AnnotationSet {
            keypoint_names: keypoint_names.to_vec(),
            instances,
        }
    }
}

/// `⌊f·K⌋`, robust to representation error in `f`.
pub fn fraction_count(f: f64, k: usize) -> usize {
    ((f * k as f64) + 1e-9).floor() as usize
}

/// Draws a dataset from `prior`. Coefficients are `λ_j = √eigenvalue_j · z`
/// with `z ~ N(0, 1)`, so shapes follow the prior's learned spread.
pub fn synth_generate(prior: &ShapePrior, config: &SynthConfig) -> Result<SynthDataset> {
    prior.validate()?;
    config.validate()?;
    let k_cam = config.camera()?;
    let k = prior.num_keypoints();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.pixel_noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n_hide = fraction_count(config.occlusion_fraction, k);
    let n_out = fraction_count(config.outlier_fraction, k);
    let mut instances = Vec::with_capacity(config.instance_count);
    for m in 0..config.instance_count {
        let mut made = None;
        for _ in 0..config.max_retries {
            let lambda = LatentCoeffs(DVector::from_iterator(
                prior.basis_size(),
                prior.eigenvalues.iter().map(|e| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    e.sqrt() * z
                }),
            ));
            let shape = instantiate(prior, &lambda)?;
            let az = rng.random_range(config.azimuth_deg[0]..=config.azimuth_deg[1]).to_radians();
            let el = rng.random_range(config.elevation_deg[0]..=config.elevation_deg[1]).to_radians();
            let depth = rng.random_range(config.depth_range[0]..=config.depth_range[1]);
            let [w, h] = config.image_size;
            let u = rng.random_range(0.25 * w..=0.75 * w);
            let v = rng.random_range(0.4 * h..=0.7 * h);
            let t = Vec3::new((u - k_cam.cx) / k_cam.fx, (v - k_cam.cy) / k_cam.fy, 1.0) * depth;
            let pose = QuatPose::from_rotation(&viewpoint_rotation(az, el), t);
            let r = pose.rotation()?;
            if shape.iter().any(|x| (r * x + t).z <= 1e-3) {
                continue;
            }

            let eye = pose.camera_center()?;
            let mut occluded: Vec<usize> =
                (0..k).filter(|&i| vertex_occluded(&eye, &shape, prior.topology(), i)).collect();
            if occluded.len() < n_hide || k - n_hide < 4 {
                continue;
            }
            occluded.shuffle(&mut rng);
            let mut hidden: Vec<usize> = occluded[..n_hide].to_vec();
            hidden.sort_unstable();

            let mut observations = Vec::with_capacity(k);
            for (i, x) in shape.iter().enumerate() {
                let clean = k_cam.project_camera(&(r * x + t))?;
                let uv = clean + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                let hid = hidden.contains(&i);
                let conf = if hid { config.hidden_confidence } else { config.visible_confidence };
                observations.push(KeypointObservation::new(i, uv, conf, !hid));
            }
            let mut visible: Vec<usize> = (0..k).filter(|i| !hidden.contains(i)).collect();
            visible.shuffle(&mut rng);
            let mut outliers: Vec<usize> = visible[..n_out.min(visible.len())].to_vec();
            outliers.sort_unstable();
            for &i in &outliers {
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                observations[i].uv += Vec2::new(th.cos(), th.sin()) * config.outlier_magnitude;
            }
            made = Some(SynthInstance {
                id: format!("{m:05}"),
                pose: pose.canonical(),
                lambda,
                shape,
                observations,
                outliers,
                hidden,
            });
            break;
        }
        match made {
            Some(inst) => instances.push(inst),
            None => {
                return Err(Error::Generation(format!(
                    "instance {m}: no draw satisfied the occlusion constraints in {} attempts",
                    config.max_retries
                )))
            }
        }
    }
    Ok(SynthDataset {
        intrinsics: k_cam,
        image_size: config.image_size,
        instances,
    })
}

/// Settings of the low-rank orthographic annotation generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankConfig {
    pub instance_count: usize,
    /// Number of deformation modes of the generator.
    pub rank: usize,
    /// Probability that a keypoint is missing.
    pub missing_fraction: f64,
    pub seed: u64,
}

/// Random orthographic views of shapes `S̄ + B λ` with `λ ~ N(0, I)`, where
/// `S̄` is `mean` and `B` a random orthonormal translation-free basis of
/// `rank` columns. Views use uniformly random rotations and scales in
/// `[40, 60)` px/m. Returns the annotations and the true 3D shapes.
pub fn low_rank_annotations(
    mean: &[Vec3],
    keypoint_names: &[String],
    config: &LowRankConfig,
) -> Result<(AnnotationSet, Vec<Vec<Vec3>>)> {
    let k = mean.len();
    if keypoint_names.len() != k {
        return Err(Error::DegenerateInput("one name per keypoint required".into()));
    }
    if config.rank >= 3 * k - 3 || !(0.0..1.0).contains(&config.missing_fraction) {
        return Err(Error::InvalidConfig("rank must be below 3K − 3 and missing_fraction in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut basis = DMatrix::<f64>::from_fn(3 * k, config.rank, |_, _| StandardNormal.sample(&mut rng));
    for j in 0..config.rank {
        for c in 0..3 {
            let mu: f64 = (0..k).map(|i| basis[(3 * i + c, j)]).sum::<f64>() / k as f64;
            for i in 0..k {
                basis[(3 * i + c, j)] -= mu;
            }
        }
    }
    let basis = basis.qr().q();
    let mean_flat = flatten(mean);
    let mut shapes = Vec::with_capacity(config.instance_count);
    let mut instances = Vec::with_capacity(config.instance_count);
    for mi in 0..config.instance_count {
        let lam = DVector::<f64>::from_fn(config.rank, |_, _| StandardNormal.sample(&mut rng));
        let s = unflatten(&(&mean_flat + &basis * lam));
        let q: Vector4<f64> = Vector4::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let r = quat_to_rotation(&q)?;
        let c = rng.random_range(40.0..60.0);
        let points = s
            .iter()
            .map(|x| {
                let p = r * x * c;
                (rng.random::<f64>() >= config.missing_fraction).then(|| Vec2::new(p.x + 300.0, p.y + 200.0))
            })
            .collect();
        instances.push(AnnotatedInstance {
            id: format!("{mi}"),
            points,
        });
        shapes.push(s);
    }
    let data = AnnotationSet {
        keypoint_names: keypoint_names.to_vec(),
        instances,
    };
    Ok((data, shapes))
}
