//! Generates a seeded synthetic dataset and writes it in the pipeline's file
//! formats to a directory (default `synth_out`).
//!
//! `cargo run --example synth_data -- [out_dir]`

use std::path::PathBuf;

use monoshape::io::{self, AnnotationFile, IntrinsicsFile, KeypointsFile};
use monoshape::prior::{car_prior, CarParams};
use monoshape::synth::{synth_generate, SynthConfig};

fn main() -> monoshape::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_out".into()));
    std::fs::create_dir_all(&out)?;
    let prior = car_prior(&CarParams::default(), 5)?;
    let cfg = SynthConfig {
        instance_count: 10,
        seed: 1,
        ..Default::default()
    };
    let data = synth_generate(&prior, &cfg)?;
    let names = &prior.layout.names;

    let obs: Vec<_> = data.instances.iter().map(|i| (i.id.clone(), i.observations.clone())).collect();
    io::write_json(&out.join("keypoints.json"), &KeypointsFile::from_observations(names, &obs))?;
    io::write_json(&out.join("annotations.json"), &AnnotationFile::from_set(&data.annotations(names)))?;
    io::write_json(&out.join("intrinsics.json"), &IntrinsicsFile::from_intrinsics(&data.intrinsics))?;
    io::write_obj(&out.join("mean.obj"), &prior.mean, &prior.topology().edges())?;

    for inst in &data.instances {
        println!(
            "{}: depth {:.1} m, {} hidden, outliers at {:?}",
            inst.id,
            inst.pose.t.z,
            inst.hidden.len(),
            inst.outliers
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
