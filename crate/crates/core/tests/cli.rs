//! The `monoshape` binary against its documented behavior.

use std::path::Path;
use std::process::{Command, Output};

use monoshape::io::{
    self, read_json, read_obj, AnnotationFile, GroundTruthFile, KeypointsFile, PoseFile, PoseInstance, PoseRecord,
    ReconstructionFile, Status, FORMAT_VERSION,
};
use monoshape::prior::{car_prior, variance_explained, CarParams};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monoshape"))
        .args(args)
        .current_dir(dir)
        .env_remove("MONOSHAPE_CONFIG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, count: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--seed", "5", "--out", "data", "--count", count];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn synth_with_no_instances_writes_valid_headers() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "0", &[]);
    let d = tmp.path().join("data");
    let a: AnnotationFile = read_json(&d.join("annotations.json")).unwrap();
    let k: KeypointsFile = read_json(&d.join("keypoints.json")).unwrap();
    let g: GroundTruthFile = read_json(&d.join("ground_truth.json")).unwrap();
    io::read_intrinsics(&d.join("intrinsics.json")).unwrap();
    assert!(a.instances.is_empty() && k.instances.is_empty() && g.instances.is_empty());
    assert_eq!(a.keypoint_names.len(), 14);
    assert_eq!(g.format_version, FORMAT_VERSION);
}

#[test]
fn synth_reports_exhausted_occlusion_retries() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(tmp.path(), &["synth", "--count", "2", "--occlusion-fraction", "1", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data generation failed"), "{err}");
}

#[test]
fn learn_prior_rejects_zero_basis_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "15", &[]);
    let out = bin(tmp.path(), &["learn-prior", "--annotations", "data/annotations.json", "--basis-size", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let table = ok(tmp.path(), &["learn-prior", "--annotations", "data/annotations.json", "--basis-size", "5", "--out", "p1"]);
    ok(tmp.path(), &["learn-prior", "--annotations", "data/annotations.json", "--basis-size", "5", "--out", "p2"]);
    let a = std::fs::read(tmp.path().join("p1/prior.json")).unwrap();
    let b = std::fs::read(tmp.path().join("p2/prior.json")).unwrap();
    assert_eq!(a, b);
    // the generator has five modes, so five basis vectors explain everything
    let prior = io::read_prior(&tmp.path().join("p1/prior.json")).unwrap();
    assert!(variance_explained(&prior, 5).unwrap() >= 0.9999);
    assert!(table.contains("variance explained"), "{table}");
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 5);
}

#[test]
fn too_few_keypoints_fail_per_instance() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "2", &["--noise", "0", "--outlier-fraction", "0"]);
    let d = tmp.path().join("data");
    let mut kp: KeypointsFile = read_json(&d.join("keypoints.json")).unwrap();
    let keep: Vec<String> = kp.instances[0].keypoints.keys().take(3).cloned().collect();
    kp.instances[0].keypoints.retain(|k, _| keep.contains(k));
    io::write_json(&d.join("mixed.json"), &kp).unwrap();
    kp.instances.truncate(1);
    io::write_json(&d.join("starved.json"), &kp).unwrap();

    let stdout = ok(tmp.path(), &["estimate-pose", "--keypoints", "data/mixed.json", "--out", "mixed"]);
    assert!(stdout.contains("1 estimated, 1 failed"), "{stdout}");
    let poses: PoseFile = read_json(&tmp.path().join("mixed/poses.json")).unwrap();
    assert_eq!(poses.instances[0].status, Status::Failed);
    assert_eq!(poses.instances[0].reason.as_deref(), Some("insufficient keypoints"));
    assert_eq!(poses.instances[1].status, Status::Ok);

    let out = bin(tmp.path(), &["estimate-pose", "--keypoints", "data/starved.json", "--out", "starved"]);
    assert_eq!(out.status.code(), Some(1));
    let poses: PoseFile = read_json(&tmp.path().join("starved/poses.json")).unwrap();
    assert_eq!(poses.instances[0].reason.as_deref(), Some("insufficient keypoints"));
}

#[test]
fn unknown_keypoint_name_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "1", &[]);
    let d = tmp.path().join("data");
    let mut kp: KeypointsFile = read_json(&d.join("keypoints.json")).unwrap();
    let p = *kp.instances[0].keypoints.values().next().unwrap();
    kp.instances[0].keypoints.insert("Spoiler".into(), p);
    io::write_json(&d.join("bad.json"), &kp).unwrap();
    let out = bin(tmp.path(), &["estimate-pose", "--keypoints", "data/bad.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown keypoint name 'Spoiler'"));
}

#[test]
fn pose_summary_and_noiseless_shape_fit() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "6", &["--noise", "0", "--outlier-fraction", "0"]);
    let stdout = ok(
        tmp.path(),
        &["estimate-pose", "--keypoints", "data/keypoints.json", "--gt", "data/ground_truth.json", "--max-iters", "5", "--out", "poses"],
    );
    assert!(stdout.contains("6/6 within 5 deg"), "{stdout}");
    let poses: PoseFile = read_json(&tmp.path().join("poses/poses.json")).unwrap();
    assert!(poses.instances.iter().all(|p| p.iterations == 5));

    // at the true poses the reprojection energy of an exact fit vanishes
    let gt: GroundTruthFile = read_json(&tmp.path().join("data/ground_truth.json")).unwrap();
    let exact = PoseFile {
        format_version: FORMAT_VERSION.into(),
        instances: gt
            .instances
            .iter()
            .map(|g| PoseInstance {
                pose: Some(g.pose),
                status: Status::Ok,
                ..PoseInstance::failed(&g.id, "")
            })
            .map(|p| PoseInstance { reason: None, ..p })
            .collect(),
    };
    io::write_json(&tmp.path().join("true_poses.json"), &exact).unwrap();
    let stdout = ok(
        tmp.path(),
        &[
            "adjust-shape",
            "--keypoints",
            "data/keypoints.json",
            "--poses",
            "true_poses.json",
            "--eta-planar",
            "0.001",
            "--eta-sym",
            "0.001",
            "--eta-dim",
            "0.001",
            "--eta-lap",
            "0.001",
            "--out",
            "exact",
        ],
    );
    assert!(stdout.contains("before") && stdout.contains("after"), "{stdout}");
    let rec: ReconstructionFile = read_json(&tmp.path().join("exact/reconstructions.json")).unwrap();
    for r in &rec.instances {
        let e = r.energy_after.unwrap();
        assert!(e.reproj < 1e-6, "{}: E_reproj {}", r.id, e.reproj);
    }
}

#[test]
fn zero_energy_weights_keep_the_mean_and_obj_matches_topology() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "3", &[]);
    ok(tmp.path(), &["estimate-pose", "--keypoints", "data/keypoints.json", "--out", "poses"]);
    let mut args = vec!["adjust-shape", "--keypoints", "data/keypoints.json", "--poses", "poses/poses.json", "--out", "shapes"];
    for flag in ["--eta-reproj", "--eta-planar", "--eta-sym", "--eta-dim", "--eta-lap"] {
        args.extend([flag, "0"]);
    }
    ok(tmp.path(), &args);
    let prior = car_prior(&CarParams::default(), 5).unwrap();
    let rec: ReconstructionFile = read_json(&tmp.path().join("shapes/reconstructions.json")).unwrap();
    for r in &rec.instances {
        assert!(r.lambda.iter().all(|&l| l == 0.0), "{:?}", r.lambda);
        let mean: Vec<[f64; 3]> = prior.mean.iter().map(|p| [p.x, p.y, p.z]).collect();
        assert_eq!(r.keypoints3d, mean);
        let (v, e) = read_obj(&tmp.path().join("shapes").join(r.obj.as_ref().unwrap())).unwrap();
        assert_eq!(v.len(), 14);
        assert_eq!(e, prior.topology().edges());
    }
}

fn perfect_predictions(dir: &Path, gt: &GroundTruthFile) {
    let instances = gt
        .instances
        .iter()
        .map(|g| PoseInstance {
            id: g.id.clone(),
            status: Status::Ok,
            reason: None,
            pose: Some(PoseRecord { ..g.pose }),
            projected: g.projected.iter().map(|p| Some(*p)).collect(),
            ..PoseInstance::failed("", "")
        })
        .collect();
    io::write_json(
        &dir.join("poses.json"),
        &PoseFile {
            format_version: FORMAT_VERSION.into(),
            instances,
        },
    )
    .unwrap();
}

#[test]
fn eval_scores_ground_truth_as_perfect_and_lists_unmatched() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "8", &[]);
    let mut gt: GroundTruthFile = read_json(&tmp.path().join("data/ground_truth.json")).unwrap();
    perfect_predictions(&tmp.path().join("pred"), &gt);
    let table = ok(tmp.path(), &["eval", "--pred", "pred", "--gt", "data", "--out", "eval"]);
    assert!(table.contains("AOP           1.0000    1.0000    1.0000"), "{table}");
    let report: monoshape::cli::EvalFile = read_json(&tmp.path().join("eval/metrics.json")).unwrap();
    assert!(report.report.aop.iter().all(|&(_, p)| p == 1.0));
    assert_eq!(report.report.apk.unwrap().mean, 1.0);

    // drop one prediction and rename another
    gt.instances.remove(0);
    gt.instances[0].id = "stray".into();
    perfect_predictions(&tmp.path().join("partial"), &gt);
    let table = ok(tmp.path(), &["eval", "--pred", "partial", "--gt", "data", "--out", "eval2"]);
    assert!(table.contains("instances: 6"), "{table}");
    assert!(table.contains("unmatched ids: 00000, 00001, stray"), "{table}");

    // nothing in common
    for g in &mut gt.instances {
        g.id = format!("x{}", g.id);
    }
    perfect_predictions(&tmp.path().join("disjoint"), &gt);
    let out = bin(tmp.path(), &["eval", "--pred", "disjoint", "--gt", "data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("undefined metric"));
}

#[test]
fn config_file_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("cfg.json"),
        r#"{"format_version": "1.0", "synth": {"instance_count": 3, "seed": 11}, "paths": {"out": "from_cfg"}}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_monoshape"))
        .arg("synth")
        .current_dir(tmp.path())
        .env("MONOSHAPE_CONFIG", tmp.path().join("cfg.json"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g: GroundTruthFile = read_json(&tmp.path().join("from_cfg/ground_truth.json")).unwrap();
    assert_eq!(g.instances.len(), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed 11"));
}
