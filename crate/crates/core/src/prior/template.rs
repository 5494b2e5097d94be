//! Built-in 14-keypoint car layout and a parametric car template.
//!
//! Canonical object frame: `x` to the vehicle's right, `y` down, `z` forward.
//! The medial plane is `x = 0`; left keypoints have negative `x`.

use nalgebra::{DMatrix, DVector};

use super::{extents, flatten, unflatten, DimPriors, KeypointLayout, ShapePrior};
use crate::error::Result;
use crate::geometry::Vec3;
use crate::mesh::{Face, Plane, QuadMesh};

pub const CAR_KEYPOINT_NAMES: [&str; 14] = [
    "L_F_WheelCenter",
    "R_F_WheelCenter",
    "L_B_WheelCenter",
    "R_B_WheelCenter",
    "L_HeadLight",
    "R_HeadLight",
    "L_TailLight",
    "R_TailLight",
    "L_SideViewMirror",
    "R_SideViewMirror",
    "L_F_RoofTop",
    "R_F_RoofTop",
    "L_B_RoofTop",
    "R_B_RoofTop",
];

/// Wheels, headlights, taillights, mirrors, roof corners; eight quad faces.
pub fn car_layout() -> KeypointLayout {
    let faces = vec![
        Face::new([0, 1, 3, 2]).rectangular().ground_parallel(),
        Face::new([10, 11, 13, 12]).rectangular(),
        Face::new([4, 5, 11, 10]),
        Face::new([6, 7, 13, 12]),
        Face::new([4, 0, 2, 6]),
        Face::new([5, 1, 3, 7]),
        Face::new([0, 4, 10, 8]),
        Face::new([1, 5, 11, 9]),
    ];
    KeypointLayout {
        names: CAR_KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        topology: QuadMesh::new(14, faces).expect("static car topology is valid"),
        symmetry_pairs: vec![(1, 0), (3, 2), (5, 4), (7, 6), (9, 8), (11, 10), (13, 12)],
        on_plane: vec![],
        front: vec![4, 5],
    }
}

/// Geometric parameters of the car template, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarParams {
    pub half_width: f64,
    pub wheel_front_z: f64,
    pub wheel_back_z: f64,
    pub wheel_y: f64,
    pub light_front_z: f64,
    pub light_back_z: f64,
    pub headlight_y: f64,
    pub taillight_y: f64,
    pub roof_half_width: f64,
    pub roof_y: f64,
    pub roof_front_z: f64,
    pub roof_back_z: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            half_width: 0.8,
            wheel_front_z: 1.3,
            wheel_back_z: -1.3,
            wheel_y: 0.45,
            light_front_z: 1.95,
            light_back_z: -1.95,
            headlight_y: 0.1,
            taillight_y: 0.0,
            roof_half_width: 0.7,
            roof_y: -0.75,
            roof_front_z: 0.3,
            roof_back_z: -0.9,
        }
    }
}

impl CarParams {
    const COUNT: usize = 12;

    fn to_array(self) -> [f64; Self::COUNT] {
        [
            self.half_width,
            self.wheel_front_z,
            self.wheel_back_z,
            self.wheel_y,
            self.light_front_z,
            self.light_back_z,
            self.headlight_y,
            self.taillight_y,
            self.roof_half_width,
            self.roof_y,
            self.roof_front_z,
            self.roof_back_z,
        ]
    }

    fn from_array(a: [f64; Self::COUNT]) -> Self {
        Self {
            half_width: a[0],
            wheel_front_z: a[1],
            wheel_back_z: a[2],
            wheel_y: a[3],
            light_front_z: a[4],
            light_back_z: a[5],
            headlight_y: a[6],
            taillight_y: a[7],
            roof_half_width: a[8],
            roof_y: a[9],
            roof_front_z: a[10],
            roof_back_z: a[11],
        }
    }

    /// Population standard deviation of each parameter.
    const SPREAD: [f64; Self::COUNT] = [0.05, 0.12, 0.12, 0.03, 0.15, 0.15, 0.05, 0.05, 0.05, 0.10, 0.18, 0.18];
}

/// Keypoints of the template. Every face is planar for any parameter value,
/// and the shape is linear in the parameters.
pub fn car_template_shape(p: &CarParams) -> Vec<Vec3> {
    let w = p.half_width;
    let rw = p.roof_half_width;
    let mut s = vec![
        Vec3::new(-w, p.wheel_y, p.wheel_front_z),
        Vec3::new(w, p.wheel_y, p.wheel_front_z),
        Vec3::new(-w, p.wheel_y, p.wheel_back_z),
        Vec3::new(w, p.wheel_y, p.wheel_back_z),
        Vec3::new(-w, p.headlight_y, p.light_front_z),
        Vec3::new(w, p.headlight_y, p.light_front_z),
        Vec3::new(-w, p.taillight_y, p.light_back_z),
        Vec3::new(w, p.taillight_y, p.light_back_z),
        Vec3::zeros(),
        Vec3::zeros(),
        Vec3::new(-rw, p.roof_y, p.roof_front_z),
        Vec3::new(rw, p.roof_y, p.roof_front_z),
        Vec3::new(-rw, p.roof_y, p.roof_back_z),
        Vec3::new(rw, p.roof_y, p.roof_back_z),
    ];
    // mirrors sit in the plane of wheel, headlight and front roof corner
    s[8] = s[10] + (s[0] - s[10]) * 0.8 - (s[4] - s[10]) * 0.36;
    s[9] = s[11] + (s[1] - s[11]) * 0.8 - (s[5] - s[11]) * 0.36;
    s
}

/// Synthetic car prior: mean of the template at `params`, and the top `n`
/// principal directions of the template's parameter spread.
pub fn car_prior(params: &CarParams, n: usize) -> Result<ShapePrior> {
    let layout = car_layout();
    let base = params.to_array();
    let mean_raw = car_template_shape(params);
    let centroid = mean_raw.iter().sum::<Vec3>() / mean_raw.len() as f64;
    let mean: Vec<Vec3> = mean_raw.iter().map(|p| p - centroid).collect();

    let k = mean.len();
    let mut cov = DMatrix::<f64>::zeros(3 * k, 3 * k);
    for j in 0..CarParams::COUNT {
        let mut a = base;
        a[j] += 1.0;
        let moved = flatten(&car_template_shape(&CarParams::from_array(a)));
        let mut mode: DVector<f64> = moved - flatten(&mean_raw);
        // drop the rigid-translation component
        let shift = unflatten(&mode).iter().sum::<Vec3>() / k as f64;
        for i in 0..k {
            for c in 0..3 {
                mode[3 * i + c] -= shift[c];
            }
        }
        let sd = CarParams::SPREAD[j];
        cov += &mode * mode.transpose() * (sd * sd);
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..3 * k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let n = n.min(3 * k);
    let mut basis = DMatrix::zeros(3 * k, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (j, &idx) in order.iter().take(n).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        if v[v.iamax()] < 0.0 {
            v = -v;
        }
        basis.set_column(j, &v);
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
    }
    let (length, width, height) = extents(&mean);
    let prior = ShapePrior {
        layout,
        mean,
        basis,
        eigenvalues,
        sigma2: 4.0,
        medial_plane: Plane::new(Vec3::x(), 0.0),
        dim_priors: DimPriors { length, width, height },
    };
    prior.validate()?;
    Ok(prior)
}
