use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[model]
encoder_hidden = 4
embed_size = 4
conv_filters = 2
decoder_hidden = 4
[train]
epochs = 1
[synth]
episodes = 2
frames_per_episode = 120
[eval]
passes = 2
plot_count = 1
";

fn mfrbp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfrbp")).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = mfrbp(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], dir: &Path) -> String {
    let out = mfrbp(args, dir);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn first_scene(dir: &Path) -> std::path::PathBuf {
    let mut scenes: Vec<_> = std::fs::read_dir(dir.join("data/scenes")).unwrap().map(|e| e.unwrap().path()).collect();
    scenes.sort();
    scenes.remove(0)
}

#[test]
fn synth_train_predict_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), SMALL).unwrap();

    let summary = ok(&["synth", "--config", "run.toml", "--seed", "4", "--out", "data"], d);
    assert!(summary.contains("train"), "{summary}");
    for f in ["train.json", "test.json", "split.json", "synth_config.toml"] {
        assert!(d.join("data").join(f).is_file(), "{f}");
    }

    ok(&["train", "--data", "data", "--config", "run.toml", "--seed", "1", "--ckpt-out", "m.ckpt"], d);
    assert!(d.join("m.ckpt").is_file());

    let scene = first_scene(d);
    let scene = scene.to_str().unwrap();
    for strategy in ["l1rbp", "l1mfrbp", "planning"] {
        let out = format!("pred-{strategy}");
        ok(&["predict", "--ckpt", "m.ckpt", "--scene", scene, "--strategy", strategy, "--out", &out], d);
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(&out).join("prediction.json")).unwrap()).unwrap();
        assert_eq!(json["strategy"], strategy);
        assert!(json["predictions"].as_object().is_some_and(|m| !m.is_empty()));
        let svg = std::fs::read_to_string(d.join(&out).join("prediction.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
    }

    // the config stored in the checkpoint is used when none is given
    let table = ok(&["eval", "--experiment", "1", "--data", "data", "--ckpt", "m.ckpt", "--out", "ev"], d);
    assert!(table.contains("horizon"), "{table}");
    for f in ["rmse.tsv", "manifest.json", "segments.tsv"] {
        assert!(d.join("ev").join(f).is_file(), "{f}");
    }
    let report = ok(&["report", "--results", "ev", "--reference", "l1rbp"], d);
    assert!(!report.is_empty());
    assert!(d.join("ev/report_l1rbp.txt").is_file());

    // experiment 2 on an l1rbp checkpoint runs but warns
    let out = mfrbp(&["eval", "--experiment", "2", "--data", "data", "--ckpt", "m.ckpt", "--out", "ev2"], d);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn predict_without_ego_is_rejected_for_sensor_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), SMALL).unwrap();
    ok(&["synth", "--config", "run.toml", "--out", "data"], d);
    ok(&["train", "--data", "data", "--config", "run.toml", "--ckpt-out", "m.ckpt"], d);

    let mut scene: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(first_scene(d)).unwrap()).unwrap();
    scene["ego"] = serde_json::Value::Null;
    std::fs::write(d.join("noego.json"), scene.to_string()).unwrap();
    let err = fails(&["predict", "--ckpt", "m.ckpt", "--scene", "noego.json", "--strategy", "l1mfrbp", "--out", "p"], d);
    assert!(err.contains("ego"), "{err}");
    ok(&["predict", "--ckpt", "m.ckpt", "--scene", "noego.json", "--strategy", "l1rbp", "--out", "p"], d);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    let err = fails(&["synth", "--config", "typo.toml", "--out", "data"], d);
    assert!(err.starts_with("error:"), "{err}");

    fails(&["eval", "--experiment", "4", "--data", "x", "--ckpt", "y"], d);
    fails(&["report", "--results", "missing", "--reference", "l1rbp"], d);
    fails(&["train", "--data", "missing", "--ckpt-out", "m.ckpt"], d);
}

#[test]
fn ingest_splits_the_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let fixture = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/ngsim_sample.txt"));
    let a = d.join("a.txt");
    std::fs::copy(fixture, &a).unwrap();
    ok(&["ingest", "--ngsim", a.to_str().unwrap(), "--out", "data"], d);
    let split: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("data/split.json")).unwrap()).unwrap();
    assert!(split.is_object() || split.is_array());

    // two files with the same stem collide
    std::fs::create_dir(d.join("other")).unwrap();
    let b = d.join("other/a.txt");
    std::fs::copy(fixture, &b).unwrap();
    let err = fails(&["ingest", "--ngsim", a.to_str().unwrap(), b.to_str().unwrap(), "--out", "data2"], d);
    assert!(err.contains("share"), "{err}");
}
