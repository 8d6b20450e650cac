//! End-to-end checks of the command-line binary: every subcommand, the
//! artifact layout, error exit codes, and run-to-run determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use partstyle::fixtures;
use partstyle::mesh::{identity_style, load_mesh, part_specs, write_obj, write_parts_sidecar};
use partstyle::render::{render, uniform_viewpoints};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partstyle"))
}

/// Dumbbell OBJ + sidecar under `dir`, named so the sidecar default applies.
fn write_fixture(dir: &Path) -> PathBuf {
    let mesh = fixtures::dumbbell(6, 10);
    let obj = dir.join("dumbbell.obj");
    write_obj(&mesh, &obj).unwrap();
    write_parts_sidecar(&dir.join("dumbbell.parts.toml"), &part_specs(&mesh)).unwrap();
    obj
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary launches");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

/// The path printed on the stdout line starting with `label`.
fn printed_path(out: &Output, label: &str) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .find(|l| l.starts_with(label))
        .unwrap_or_else(|| panic!("no '{label}' line in: {stdout}"));
    PathBuf::from(line[label.len()..].trim())
}

#[test]
fn stylize_smoke_writes_the_full_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_fixture(dir.path());
    let out = run_ok(bin().args([
        "stylize",
        "--mesh",
        obj.to_str().unwrap(),
        "--prompt",
        "red body, blue handle",
        "--backend",
        "toy",
        "--iters",
        "50",
        "--image-size",
        "64",
        "--out",
        dir.path().join("runs").to_str().unwrap(),
    ]));

    let run_dir = printed_path(&out, "run directory:");
    assert!(run_dir.join("final_mesh.ply").is_file());
    assert!(run_dir.join("config.toml").is_file());
    assert!(run_dir.join("meta.json").is_file());
    assert!(run_dir.join("checkpoints/ckpt_00050.json").is_file());
    for k in 0..8 {
        assert!(run_dir.join(format!("renders/turntable_{k:02}.png")).is_file());
    }
    let log = fs::read_to_string(run_dir.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("iteration,loss_kind,value,camera"));
    assert!(log.lines().count() > 50, "one header plus rows for 50 iterations");
}

#[test]
fn missing_mesh_fails_and_names_the_path() {
    let out = bin()
        .args(["stylize", "--mesh", "/no/such/mesh.obj", "--prompt", "red body"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/no/such/mesh.obj"), "stderr: {stderr}");
}

#[test]
fn identical_seeds_produce_identical_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_fixture(dir.path());
    let run = |out: &str| {
        let output = run_ok(bin().args([
            "stylize",
            "--mesh",
            obj.to_str().unwrap(),
            "--prompt",
            "red body, blue handle",
            "--backend",
            "toy",
            "--iters",
            "12",
            "--seed",
            "7",
            "--image-size",
            "64",
            "--out",
            dir.path().join(out).to_str().unwrap(),
        ]));
        printed_path(&output, "run directory:")
    };
    let first = run("a");
    let second = run("b");
    assert_eq!(
        fs::read(first.join("final_mesh.ply")).unwrap(),
        fs::read(second.join("final_mesh.ply")).unwrap(),
        "same seed must reproduce the final mesh byte for byte",
    );
    assert_eq!(
        fs::read(first.join("loss_log.csv")).unwrap(),
        fs::read(second.join("loss_log.csv")).unwrap(),
    );
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_fixture(dir.path());
    let config_path = dir.path().join("run.toml");
    fs::write(
        &config_path,
        format!(
            "mesh = {:?}\nprompt = \"red body, blue handle\"\nout_dir = {:?}\n\
             [train]\niterations = 1\nimage_size = 64\nsnapshot_every = 500\n",
            obj.to_str().unwrap(),
            dir.path().join("runs").to_str().unwrap(),
        ),
    )
    .unwrap();
    let out =
        run_ok(bin().args(["stylize", "--config", config_path.to_str().unwrap(), "--iters", "2"]));
    let run_dir = printed_path(&out, "run directory:");
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["iterations_completed"], 2, "--iters must override the config file");
}

#[test]
fn finetune_writes_offsets_and_ap_report() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_fixture(dir.path());
    let out_dir = dir.path().join("ft");
    let out = run_ok(bin().args([
        "finetune",
        "--mesh",
        obj.to_str().unwrap(),
        "--backend",
        "toy",
        "--out",
        out_dir.to_str().unwrap(),
        "--azimuths",
        "4",
        "--elevations",
        "0",
        "--image-size",
        "64",
        "--epochs",
        "3",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("AP before tuning:"), "stdout: {stdout}");
    assert!(stdout.contains("AP after tuning:"), "stdout: {stdout}");
    assert!(out_dir.join("offsets.bin").is_file());
    assert!(out_dir.join("dataset/annotations.json").is_file());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("ap_report.json")).unwrap()).unwrap();
    assert!(report["ap_before"].is_number());
    assert_eq!(report["epochs"], 3);
}

#[test]
fn convert_parts_output_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let obj = dir.path().join("grouped.obj");
    fs::write(
        &obj,
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n\
         g head\nf 1 2 3\nf 1 3 4\ng tail\nf 2 3 4\n",
    )
    .unwrap();
    let sidecar = dir.path().join("grouped.parts.toml");
    run_ok(bin().args([
        "convert-parts",
        "--mesh",
        obj.to_str().unwrap(),
        "--out",
        sidecar.to_str().unwrap(),
    ]));
    let mesh = load_mesh(&obj, &sidecar).unwrap();
    assert_eq!(mesh.part_names(), ["head", "tail"]);
}

#[test]
fn metrics_reports_the_identity_fixed_points() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = Arc::new(fixtures::dumbbell(4, 8));
    let camera = uniform_viewpoints(1, &[0.0], 2.5, 1.0, 64).unwrap()[0];
    let image = render(&identity_style(&mesh), &camera, [1.0, 1.0, 1.0]);
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    image.save_png(&a).unwrap();
    image.save_png(&b).unwrap();
    let out = run_ok(bin().args(["metrics", a.to_str().unwrap(), b.to_str().unwrap()]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mse:  0.00000000"), "stdout: {stdout}");
    assert!(stdout.contains("psnr: 100.0000"), "stdout: {stdout}");
    assert!(stdout.contains("ssim: 1.000000"), "stdout: {stdout}");
    assert!(stdout.contains("perceptual: unavailable"), "stdout: {stdout}");
}

#[test]
fn study_runs_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let obj = write_fixture(dir.path());
    let config_path = dir.path().join("study.toml");
    fs::write(
        &config_path,
        format!(
            "mesh = {:?}\nprompt = \"red body, blue handle\"\nout_dir = {:?}\n\
             [train]\niterations = 2\nimage_size = 32\nsnapshot_every = 500\n\
             [train.field]\nhidden_width = 8\nnum_frequencies = 1\ndepth = 1\n",
            obj.to_str().unwrap(),
            dir.path().join("study").to_str().unwrap(),
        ),
    )
    .unwrap();
    let out =
        run_ok(bin().args(["study", "--config", config_path.to_str().unwrap(), "--seeds", "5,6"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pairs"), "stdout: {stdout}");
    let study_dir = printed_path(&out, "study directory:");
    assert!(study_dir.join("consistency_report.json").is_file());
}
