use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;

fn glagan(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_glagan"))
        .args(args)
        .env_remove("GLAGAN_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(args: &[&str]) {
    let (code, err) = glagan(args);
    assert_eq!(code, 0, "glagan {args:?} failed: {err}");
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMOKE: &str = r#"{
  "schema_version": 1,
  "data": {"n_subjects": 16, "test_fraction": 0.25, "val_fraction": 0.125, "phantom": {"shape": [32, 32, 32], "r": 16}},
  "model": {"resolution": [32, 32, 32], "k_patches": 4, "gen_width": 4, "disc_width": 4},
  "train": {"epochs": 2, "learning_rate": 0.002, "beta1": 0.5}
}"#;

#[test]
fn train_then_evaluate_on_sixteen_pairs_within_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t, "smoke.json", SMOKE);
    let data = t.join("data");
    let start = Instant::now();
    ok(&["make-phantoms", "--config", &cfg, "--out", s(&data)]);
    let run = t.join("run");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&run)]);
    let eval = t.join("eval");
    ok(&["evaluate", "--config", &cfg, "--checkpoint", s(&run), "--data", s(&data), "--out", s(&eval)]);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(15 * 60), "took {elapsed:?}");

    for f in ["final.safetensors", "best.safetensors", "loss_log.csv", "split.json", "run_manifest.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let split = read_json(&run.join("split.json"));
    assert_eq!(split["test"].as_array().unwrap().len(), 4);
    assert_eq!(split["train"].as_array().unwrap().len(), 10);
    let manifest = read_json(&run.join("run_manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["train"]["epochs"], 2);

    let report = read_json(&eval.join("report.json"));
    assert_eq!(report["test_ids"], split["test"]);
    let model = &report["models"][0][1];
    for m in ["ssim", "ms_ssim", "psnr", "mae", "roi_loss"] {
        assert!(model[m]["mean"].as_f64().unwrap().is_finite(), "{m}");
    }
    assert!(eval.join("metrics_model.csv").is_file());
    assert!(eval.join("run_manifest.json").is_file());

    // Same seed, same bytes.
    let again = t.join("again");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&again)]);
    assert_eq!(std::fs::read(run.join("final.safetensors")).unwrap(), std::fs::read(again.join("final.safetensors")).unwrap());
    assert_eq!(std::fs::read(run.join("loss_log.csv")).unwrap(), std::fs::read(again.join("loss_log.csv")).unwrap());
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let out = t.join("o");
    let bad_key = write_config(t, "bad.json", r#"{"schema_version": 1, "train": {"epochz": 3}}"#);
    assert_eq!(glagan(&["make-phantoms", "--config", &bad_key, "--out", s(&out)]).0, 2);
    let no_version = write_config(t, "nov.json", r#"{"train": {"epochs": 3}}"#);
    assert_eq!(glagan(&["make-phantoms", "--config", &no_version, "--out", s(&out)]).0, 2);
    assert_eq!(glagan(&["make-phantoms"]).0, 2);
    assert_eq!(glagan(&["train", "--data", s(&t.join("nowhere")), "--out", s(&out)]).0, 3);
    assert_eq!(glagan(&["make-phantoms", "--config", s(&t.join("absent.json")), "--out", s(&out)]).0, 3);

    let small = write_config(
        t,
        "small.json",
        r#"{"schema_version": 1, "data": {"n_subjects": 4, "phantom": {"shape": [16, 16, 16], "r": 6}}}"#,
    );
    let data = t.join("data");
    ok(&["make-phantoms", "--config", &small, "--out", s(&data)]);
    // The model section keeps its 32³ default.
    let (code, err) = glagan(&["train", "--config", &small, "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code, 4, "{err}");
    let manifest = read_json(&out.join("run_manifest.json"));
    assert!(manifest["status"].as_str().unwrap().starts_with("error"));
}

#[test]
fn identical_volumes_render_an_all_zero_error_map() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(
        t,
        "c.json",
        r#"{"schema_version": 1, "data": {"n_subjects": 2, "phantom": {"shape": [16, 16, 16], "r": 6}}}"#,
    );
    let data = t.join("data");
    ok(&["make-phantoms", "--config", &cfg, "--out", s(&data)]);
    let pet = data.join("sub-0000/pet.nii.gz");
    let out = t.join("png");
    ok(&["render-slices", s(&pet), s(&pet), "--plane", "coronal", "--scale", "2", "--out", s(&out)]);
    let err = image::open(out.join("v1_pet_error_coronal.png")).unwrap().to_rgb8();
    assert_eq!(err.dimensions(), (32, 32));
    assert!(err.pixels().all(|p| p.0 == [255, 255, 255]));
    let gray = image::open(out.join("v0_pet_coronal.png")).unwrap().to_luma8();
    assert!(gray.pixels().any(|p| p.0[0] > 0));
    assert!(!out.join("v0_pet_error_coronal.png").exists());

    let mri = data.join("sub-0000/mri.nii.gz");
    let out2 = t.join("png2");
    ok(&["render-slices", s(&mri), "--reference", s(&pet), "--out", s(&out2)]);
    for plane in ["axial", "coronal", "sagittal"] {
        let e = image::open(out2.join(format!("v0_mri_error_{plane}.png"))).unwrap().to_rgb8();
        assert!(e.pixels().any(|p| p.0 != [255, 255, 255]));
    }
}

const SMALL: &str = r#"{
  "schema_version": 1,
  "data": {"n_subjects": 30, "n_mri_only": 6, "phantom": {"shape": [16, 16, 16], "r": 8}},
  "model": {"resolution": [16, 16, 16], "k_patches": 2, "gen_width": 2, "disc_width": 2},
  "train": {"epochs": 1, "batch_size": 2},
  "eval": {"interpolation_steps": 5}
}"#;

#[test]
fn classification_interpolation_and_unit_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(t, "small.json", SMALL);
    let data = t.join("data");
    ok(&["make-phantoms", "--config", &cfg, "--out", s(&data)]);

    let cls = t.join("cls");
    ok(&["classify", "--config", &cfg, "--data", s(&data), "--mode", "paired-cv", "--folds", "5", "--out", s(&cls)]);
    for k in 1..=5 {
        assert!(cls.join(format!("fold_{k}/report.json")).is_file());
    }
    let table = std::fs::read_to_string(cls.join("report.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("mean±std")).count(), 1);
    let report = read_json(&cls.join("report.json"));
    assert_eq!(report["n_subjects"], 24);
    let accs: Vec<f64> = report["folds"].as_array().unwrap().iter().map(|f| f["report"]["acc"].as_f64().unwrap()).collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    assert!((report["aggregate"]["acc"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);

    let complete = t.join("complete");
    ok(&["classify", "--config", &cfg, "--data", s(&data), "--mode", "complete", "--folds", "3", "--out", s(&complete)]);
    let report = read_json(&complete.join("report.json"));
    assert_eq!(report["n_subjects"], 30);
    assert!(complete.join("fold_1/generator/final.safetensors").is_file());

    let run = t.join("run");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&run)]);
    let ckpt = run.join("final.safetensors");
    let interp = t.join("interp");
    ok(&[
        "interpolate",
        "--config",
        &cfg,
        "--checkpoint",
        s(&ckpt),
        "--classifier",
        s(&cls.join("classifier.json")),
        "--data",
        s(&data),
        "--out",
        s(&interp),
    ]);
    let csv = std::fs::read_to_string(interp.join("probabilities.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(interp.join("step_04_pet.nii.gz").is_file());

    let units = t.join("units");
    let mri = data.join("sub-0001/mri.nii.gz");
    ok(&["inspect-units", "--checkpoint", s(&ckpt), "--volume", s(&mri), "--layer", "conv2", "--out", s(&units)]);
    assert!(units.join("conv2/channel_000.nii.gz").is_file());
    assert_eq!(glagan(&["inspect-units", "--checkpoint", s(&ckpt), "--volume", s(&mri), "--layer", "conv9", "--out", s(&units)]).0, 1);

    let synth = t.join("synth");
    ok(&["synthesize", "--checkpoint", s(&ckpt), "--input", s(&data), "--complete", "--out", s(&synth)]);
    let done = read_json(&synth.join("complete/manifest.json"));
    assert!(done["subjects"].as_array().unwrap().iter().all(|e| e["has_pet"] == true));
    assert_eq!(done["source"]["synthesized_pet"].as_array().unwrap().len(), 6);
    let pred_eval = t.join("pred_eval");
    ok(&["evaluate", "--config", &cfg, "--predictions", s(&synth), "--data", s(&data), "--out", s(&pred_eval)]);
    let direct_eval = t.join("direct_eval");
    ok(&["evaluate", "--config", &cfg, "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&direct_eval)]);
    let a = read_json(&pred_eval.join("report.json"));
    let b = read_json(&direct_eval.join("report.json"));
    assert_eq!(a["models"][0][1]["mae"], b["models"][0][1]["mae"]);
}

#[test]
fn sweep_lists_train_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let cfg = write_config(
        t,
        "sweep.json",
        r#"{
          "schema_version": 1,
          "data": {"n_subjects": 6, "phantom": {"shape": [16, 16, 16], "r": 8}},
          "model": {"resolution": [16, 16, 16], "gen_width": 2, "disc_width": 2},
          "train": {"epochs": 1},
          "eval": {"ablations": ["l1", "l1-ms-ssim-roi"], "k_patches": [2, 8]}
        }"#,
    );
    let data = t.join("data");
    ok(&["make-phantoms", "--config", &cfg, "--out", s(&data)]);
    let run = t.join("run");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&run)]);
    for v in ["l1_k2", "l1_k8", "l1-ms-ssim-roi_k2", "l1-ms-ssim-roi_k8"] {
        assert!(run.join(v).join("final.safetensors").is_file(), "{v}");
    }
    let eval = t.join("eval");
    ok(&["evaluate", "--config", &cfg, "--checkpoint", s(&run), "--data", s(&data), "--out", s(&eval)]);
    assert_eq!(read_json(&eval.join("report.json"))["models"].as_array().unwrap().len(), 4);
}

#[test]
fn default_config_prints_a_loadable_document() {
    let out = Command::new(env!("CARGO_BIN_EXE_glagan")).arg("default-config").output().unwrap();
    assert!(out.status.success());
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("d.json");
    std::fs::write(&p, &out.stdout).unwrap();
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    ok(&["default-config", "--config", s(&p), "--out", s(&tmp.path().join("o"))]);
}
