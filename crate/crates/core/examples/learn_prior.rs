//! Learns a shape prior from synthetic 2D annotations and prints how much
//! variance the leading modes explain.
//!
//! `cargo run --example learn_prior`

use monoshape::prior::{car_layout, car_prior, nrsfm_fit, variance_explained, CarParams, EmConfig};
use monoshape::synth::{synth_generate, SynthConfig};

fn main() -> monoshape::Result<()> {
    let generator = car_prior(&CarParams::default(), 5)?;
    let data = synth_generate(
        &generator,
        &SynthConfig {
            instance_count: 40,
            seed: 7,
            ..Default::default()
        },
    )?;
    let layout = car_layout();
    let annotations = data.annotations(&layout.names);

    let fit = nrsfm_fit(&annotations, &layout, 5, &EmConfig::default())?;
    let r = &fit.report;
    println!(
        "EM: {} iterations, converged {}, log-likelihood {:.3} -> {:.3}",
        r.iterations,
        r.converged,
        r.log_likelihood.first().copied().unwrap_or(f64::NAN),
        r.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(rms) = r.refined_rms {
        println!("reprojection RMS after polish: {rms:.4} px");
    }
    for n in 1..=fit.prior.basis_size() {
        println!("{n} modes: {:.4} of variance", variance_explained(&fit.prior, n)?);
    }
    let (l, w, h) = (fit.prior.dim_priors.length, fit.prior.dim_priors.width, fit.prior.dim_priors.height);
    println!("mean extents: length {l:.2} m, width {w:.2} m, height {h:.2} m");
    Ok(())
}
