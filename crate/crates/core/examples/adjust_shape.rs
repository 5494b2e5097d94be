//! Fits basis coefficients and face planes at the estimated pose and compares
//! the adjusted shape with the mean shape.
//!
//! `cargo run --example adjust_shape`

use monoshape::adjust::shape_adjust_from;
use monoshape::align::umeyama;
use monoshape::energy::EnergyConfig;
use monoshape::metrics::hausdorff;
use monoshape::pose::{irls_pose, IrlsConfig};
use monoshape::prior::{car_prior, CarParams};
use monoshape::synth::{synth_generate, SynthConfig};

fn main() -> monoshape::Result<()> {
    let prior = car_prior(&CarParams::default(), 5)?;
    let data = synth_generate(
        &prior,
        &SynthConfig {
            instance_count: 5,
            seed: 21,
            ..Default::default()
        },
    )?;
    let energy = EnergyConfig::default();
    for inst in &data.instances {
        let p = irls_pose(&prior, &inst.observations, &data.intrinsics, &IrlsConfig::default(), None)?;
        let rec = shape_adjust_from(&prior, &inst.observations, &p.pose, &data.intrinsics, &energy, Some(&p.weights))?;

        // compare shapes up to similarity, so pose error does not count
        let aligned = |s: &[_]| -> monoshape::Result<f64> {
            let sim = umeyama(s, &inst.shape, false)?;
            hausdorff(&s.iter().map(|x| sim.apply(x)).collect::<Vec<_>>(), &inst.shape)
        };
        let (b, a) = (&rec.initial_energy, &rec.energy_breakdown);
        println!("{}: lambda {:?}", inst.id, rec.lambda.0.iter().map(|l| (l * 1e3).round() / 1e3).collect::<Vec<_>>());
        println!("  energy {:.2} -> {:.2} (reproj {:.2} -> {:.2})", b.total, a.total, b.reproj, a.reproj);
        println!(
            "  Hausdorff to truth: mean shape {:.3} m, adjusted {:.3} m",
            aligned(&prior.mean)?,
            aligned(&rec.keypoints3d)?
        );
    }
    Ok(())
}
