use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lanecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanecast"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lanecast")
}

fn ok(args: &[&str]) {
    let out = lanecast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(root: &Path) -> std::path::PathBuf {
    let spec = root.join("spec.json");
    fs::write(
        &spec,
        r#"{"n_tracks": 80, "tracks_per_recording": 40, "recording_duration_s": 30.0, "seed": 3}"#,
    )
    .unwrap();
    let data = root.join("data");
    ok(&["generate", "--spec", s(&spec), "--out", s(&data)]);
    data
}

#[test]
fn prepare_train_evaluate_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = small_corpus(root);
    assert!(data.join("01_tracks.csv").exists());

    let prepared = root.join("prepared");
    ok(&[
        "prepare", "--data", s(&data), "--obs-window", "2", "--max-pred-time", "3", "--seed", "1", "--out",
        s(&prepared),
    ]);
    assert!(prepared.join("manifest.csv").exists());
    assert!(prepared.join("samples/000000.bin").exists());
    assert!(prepared.join("samples/000000.json").exists());

    let tc = root.join("train.json");
    fs::write(&tc, r#"{"max_epochs": 2, "batch_size": 16, "seed": 4}"#).unwrap();
    let ckpt = root.join("ckpt/lstm3.json");
    ok(&["train", "--arch", "lstm3", "--prepared", s(&prepared), "--train-config", s(&tc), "--out", s(&ckpt)]);
    assert!(ckpt.with_extension("bin").exists());
    assert!(root.join("ckpt/lstm3.history.json").exists());

    let results = root.join("results");
    fs::create_dir_all(&results).unwrap();
    let metrics = results.join("lstm3.json");
    ok(&["evaluate", "--ckpt", s(&ckpt), "--prepared", s(&prepared), "--out", s(&metrics)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(report["config"], "lstm3");
    assert_eq!(report["epochs_run"], 2);

    let charts = root.join("charts");
    ok(&["report", "--results", s(&results), "--out", s(&charts)]);
    let csv = fs::read_to_string(charts.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let svgs: Vec<_> = fs::read_dir(&charts)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "svg"))
        .collect();
    assert_eq!(svgs.len(), 1);
    let svg = fs::read_to_string(svgs[0].path()).unwrap();
    assert!(svg.contains(r#"viewBox="0 0 800 500""#));

    ok(&["report", "--results", s(&results), "--out", s(&charts), "--histograms"]);
    assert!(charts.join("hist_lstm3_o2_p3.svg").exists());
    assert!(charts.join("hist_lstm3_o2_p3.csv").exists());
}

#[test]
fn sweep_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = small_corpus(root);
    let tc = root.join("train.json");
    fs::write(&tc, r#"{"max_epochs": 2}"#).unwrap();
    let run = |name: &str| {
        let out = root.join(name);
        ok(&[
            "sweep", "--archs", "lstm3,cnn3", "--grid", "1x2,3", "--data", s(&data), "--seed", "5",
            "--train-config", s(&tc), "--out", s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".json")).count(), 4);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let code = |args: &[&str]| lanecast(args).status.code();
    assert_eq!(code(&["train", "--arch", "lstm9", "--prepared", "x", "--out", "y"]), Some(2));
    assert_eq!(
        code(&["sweep", "--archs", "tn2", "--grid", "1,2", "--data", "x", "--out", "y"]),
        Some(2)
    );
    assert_eq!(code(&["prepare", "--data", "x"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(
        code(&[
            "prepare", "--data", s(&missing), "--obs-window", "2", "--max-pred-time", "3", "--out",
            s(&dir.path().join("p")),
        ]),
        Some(1)
    );
    assert_eq!(code(&["--help"]), Some(0));
}
