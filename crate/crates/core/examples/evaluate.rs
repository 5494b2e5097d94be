//! Scores pose estimates against ground truth with viewpoint precision,
//! keypoint precision and angle error.
//!
//! `cargo run --example evaluate`

use monoshape::geometry::{azimuth, project};
use monoshape::metrics::{aop, apk, mean_abs_angle_error, BBox, Viewpoint};
use monoshape::pose::{irls_pose, IrlsConfig};
use monoshape::prior::{car_prior, CarParams};
use monoshape::synth::{synth_generate, SynthConfig};

fn main() -> monoshape::Result<()> {
    let prior = car_prior(&CarParams::default(), 5)?;
    let data = synth_generate(
        &prior,
        &SynthConfig {
            instance_count: 30,
            seed: 9,
            ..Default::default()
        },
    )?;
    let k = &data.intrinsics;
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    let (mut pred_kp, mut gt_kp, mut boxes) = (Vec::new(), Vec::new(), Vec::new());
    for inst in &data.instances {
        let p = irls_pose(&prior, &inst.observations, k, &IrlsConfig::default(), None)?;
        let proj = |shape: &[_], pose| shape.iter().map(|x| project(x, pose, k)).collect::<monoshape::Result<Vec<_>>>();
        let (pp, gp) = (proj(&prior.mean, &p.pose)?, proj(&inst.shape, &inst.pose)?);
        let gt_box = BBox::around(gp.iter().copied()).expect("non-empty shape");
        pred.push(Viewpoint {
            bbox: BBox::around(pp.iter().copied()).expect("non-empty shape"),
            azimuth_deg: azimuth(&p.pose.rotation()?).to_degrees(),
        });
        gt.push(Viewpoint {
            bbox: gt_box,
            azimuth_deg: azimuth(&inst.pose.rotation()?).to_degrees(),
        });
        pred_kp.push(pp.into_iter().map(Some).collect());
        gt_kp.push(gp.into_iter().map(Some).collect());
        boxes.push(gt_box);
    }
    for t in [5.0, 15.0, 30.0] {
        println!("AOP @ {t:>4}°: {:.3}", aop(&pred, &gt, t, 0.7)?);
    }
    let az = |v: &[Viewpoint]| v.iter().map(|v| v.azimuth_deg).collect::<Vec<_>>();
    println!("mean |azimuth error|: {:.2}°", mean_abs_angle_error(&az(&pred), &az(&gt))?);
    println!("APK (alpha 0.1): {:.3}", apk(&pred_kp, &gt_kp, &boxes, 0.1)?.mean);
    Ok(())
}
