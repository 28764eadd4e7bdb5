use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qwd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qwd")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--steps",
    "2",
    "--patch-size",
    "16",
    "--set",
    "data.phantoms=2",
    "--set",
    "data.eval_phantoms=2",
    "--set",
    "data.phantom_size=32",
];

fn train_tiny(out: &Path) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--log-every", "0"];
    args.extend_from_slice(TINY);
    qwd(&args)
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&qwd(&["--help"])), 0);
    assert_eq!(code(&qwd(&[])), 1);
    assert_eq!(code(&qwd(&["frobnicate"])), 1);
    assert_eq!(code(&qwd(&["train", "--out", "x", "--steps", "many"])), 1);
    let o = qwd(&["train", "--out", "x", "--set", "train.nonsense=1"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = qwd(&["train", "--out", "x", "--set", "ablation.fsff_off=true", "--set", "ablation.naive_fusion=true"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = qwd(&["simulate", "--out", dir.path().to_str().unwrap(), "--manifest", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = qwd(&["denoise", "--checkpoint", missing.to_str().unwrap(), "--input", ".", "--out", "o"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_writes_one_png_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("list.txt");
    fs::write(
        &manifest,
        "phantom:blobs:32:1 gaussian:0.1 split=eval id=a\nphantom:edges:24:2 poisson:30 frames=4 id=b\n",
    )
    .unwrap();
    let out = dir.path().join("noisy");
    let o = qwd(&[
        "simulate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--targets",
        "--depth",
        "8",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["a.png", "a_target.png", "b.png", "b_target.png"]);
}

#[test]
fn train_denoise_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_tiny(&run);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("step,g_loss,d_loss,"));
    let ckpt = run.join("model.qwdg");

    // same config, same bytes
    let again = dir.path().join("again");
    assert_eq!(code(&train_tiny(&again)), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("model.qwdg")).unwrap());

    let noisy = dir.path().join("noisy");
    let mut args = vec!["simulate", "--out", noisy.to_str().unwrap(), "--split", "eval"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&qwd(&args)), 0);
    let den = dir.path().join("den");
    let o = qwd(&[
        "denoise",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        noisy.to_str().unwrap(),
        "--out",
        den.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(&den).unwrap().count(), 2);

    let ev = dir.path().join("eval");
    let o = qwd(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", ev.to_str().unwrap(), "--svg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "image_id,method,noise_level,psnr_db,ssim,hfrr,wavelet_mae");
    // 2 eval images x (noisy, blur, model)
    assert_eq!(lines.count(), 6);
    assert!(fs::read_to_string(ev.join("spectrum.svg")).unwrap().contains("<polyline"));
    assert!(fs::read_to_string(ev.join("summary.csv")).unwrap().contains("\nmodel,2,"));

    let spec = dir.path().join("spec.csv");
    let img = den.read_dir().unwrap().next().unwrap().unwrap().path();
    let o = qwd(&["spectrum", img.to_str().unwrap(), "--out", spec.to_str().unwrap(), "--bins", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&spec).unwrap().lines().count(), 10);

    // resume extends the run to 3 steps
    let o = qwd(&[
        "train",
        "--resume",
        ckpt.to_str().unwrap(),
        "--steps",
        "3",
        "--out",
        run.to_str().unwrap(),
        "--log-every",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 2);
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&train_tiny(&run)), 0);
    let ckpt = run.join("model.qwdg");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    let o = qwd(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "[train]\nsteps = 5\npatch_size = 16\n[data]\nphantoms = 2\neval_phantoms = 1\nphantom_size = 32\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = qwd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "1",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 2);
    let written = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("steps = 1"));
}

#[test]
fn divergence_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", dir.path().to_str().unwrap(), "--learning-rate", "1e300"];
    args.extend_from_slice(TINY);
    let o = qwd(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn ablate_writes_a_comparison_table_with_the_full_model_first() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate",
        "--variants",
        "wavelet_loss_off,full",
        "--seeds",
        "0,1",
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(TINY);
    let o = qwd(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "wavelet_loss_off", "full", "wavelet_loss_off"]);
    assert!(csv.starts_with("variant,label,table,seed,steps,completed,"));
}
