use std::path::Path;
use std::process::{Command, Output};

fn urn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small 32×32 setup with one splice per approach.
fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "dataset_roots": [dir.join("data")],
        "out_dir": dir.join("run"),
        "data": {"per_approach": 1, "size": [32, 32]},
        "network": {"input_size": [32, 32], "channels": [4, 8, 12, 16], "n_s": 2},
        "train": {"lr": 1e-3, "batch_size": 4, "epochs_stage1": 1, "epochs_stage2": 1},
    });
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let c = write_config(dir);

    let o = urn(dir, &["--config", &c, "gen-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for name in ["vertical", "horizontal", "free", "vertical-removal", "horizontal-removal"] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{out}");
    }
    assert!(dir.join("data/manifest.json").exists());

    let o = urn(dir, &["--config", &c, "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["network.json", "train_log.json", "stage1_best.safetensors", "stage2_last.json"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }

    let o = urn(dir, &["--config", &c, "eval", "--dump-graph", dir.join("graphs").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("run/eval/test-none/report.csv").exists());
    let graphs = std::fs::read_dir(dir.join("graphs")).unwrap().count();
    assert!(graphs > 0);

    let o = urn(dir, &["--config", &c, "attack", "--spec", "blur-k5", "--spec", "inpaint-ns-r3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("data/attacks/blur-k5/manifest.json").exists());

    let o = urn(dir, &["--config", &c, "sweep", "--family", "jpeg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = dir.join("run/sweep/jpeg");
    let rows = urn_core::metrics::read_csv(&sweep.join("report.csv")).unwrap();
    assert!(rows.len() > 1);
    assert!(sweep.join("plots/jpeg.png").exists());

    let report = sweep.join("report.json");
    let o = urn(dir, &["--config", &c, "plot", "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("run/plots/jpeg.png").exists());

    // Stage 2 alone, reusing the stage-1 checkpoint.
    let o = urn(dir, &["--config", &c, "train", "--stage", "2", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn stage_two_needs_a_stage_one_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let c = write_config(dir);
    assert!(urn(dir, &["--config", &c, "gen-data"]).status.success());
    let o = urn(dir, &["--config", &c, "train", "--stage", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage-1 checkpoint"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let c = write_config(dir);

    let o = urn(dir, &["--config", &c, "sweep", "--family", "sepia"]);
    assert!(!o.status.success());

    let o = urn(dir, &["--config", &c, "attack", "--spec", "blur-k4"]);
    assert!(!o.status.success());

    let o = urn(dir, &["--config", &c, "eval"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));

    let o = urn(dir, &["--config", dir.join("absent.json").to_str().unwrap(), "gen-data"]);
    assert!(!o.status.success());

    let src = dir.join("src");
    std::fs::create_dir(&src).unwrap();
    for i in 0..3 {
        image::RgbImage::from_pixel(40, 40, image::Rgb([i * 50, 90, 10])).save(src.join(format!("{i}.png"))).unwrap();
    }
    let o = urn(dir, &["--config", &c, "gen-data", "--sources", src.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("insufficient sources"), "{}", stderr(&o));
}
