//! Robust pose of the mean car shape from noisy keypoints with gross outliers.
//!
//! `cargo run --example estimate_pose`

use monoshape::geometry::{azimuth, rotation_angle_between};
use monoshape::metrics::angle_diff_deg;
use monoshape::pose::{irls_pose, IrlsConfig};
use monoshape::prior::{car_prior, CarParams};
use monoshape::synth::{synth_generate, SynthConfig};

fn main() -> monoshape::Result<()> {
    let prior = car_prior(&CarParams::default(), 5)?;
    let data = synth_generate(
        &prior,
        &SynthConfig {
            instance_count: 8,
            pixel_noise_sigma: 2.0,
            outlier_fraction: 0.2,
            seed: 3,
            ..Default::default()
        },
    )?;
    let cfg = IrlsConfig::default();
    println!("{:<8} {:>9} {:>9} {:>8} {:>11}", "id", "az true", "az est", "err", "rot err");
    for inst in &data.instances {
        let p = irls_pose(&prior, &inst.observations, &data.intrinsics, &cfg, None)?;
        let (r_est, r_true) = (p.pose.rotation()?, inst.pose.rotation()?);
        let (a_est, a_true) = (azimuth(&r_est).to_degrees(), azimuth(&r_true).to_degrees());
        println!(
            "{:<8} {a_true:>9.2} {a_est:>9.2} {:>8.2} {:>11.2}",
            inst.id,
            angle_diff_deg(a_est, a_true),
            rotation_angle_between(&r_est, &r_true).to_degrees()
        );
        let outlier_w: Vec<String> = inst.outliers.iter().map(|&i| format!("{:.2}", p.weights[i])).collect();
        println!("         outlier weights [{}]", outlier_w.join(", "));
    }
    Ok(())
}
