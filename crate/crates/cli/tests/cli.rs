use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
input_dim = 16
feature_dim = 32
bins = 4
bin_features = 8
grids = 4
encoder_hidden = [32]
batch = 16
samples = 120
lr = 1e-3
"#;

fn neuroloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuroloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gridspec_unit_cube_single_cell() {
    let o = neuroloc(&["gridspec", "--min", "0,0,0", "--max", "1,1,1", "--n", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("cells 1x1x1"), "{text}");
    assert!(text.contains("center (0.5, 0.5, 0.5)"), "{text}");
}

#[test]
fn gridspec_counts_centers() {
    let o = neuroloc(&["gridspec", "--min", "-1,-1,0", "--max", "1,1,2", "--n", "8"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("cells 2x2x2"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("center")).count(), 8);
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = neuroloc(&["--config", "/definitely/not/here.toml", "generate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(neuroloc(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_succeeds() {
    let o = neuroloc(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gridspec"));
}

#[test]
fn unreadable_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = neuroloc(&["eval", "--checkpoint", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_train_eval_infer_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");
    let run = root.join("run");

    let o = neuroloc(&["--config", path(&cfg), "--out", path(&data), "generate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.csv", "test.csv", "config.toml"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    let o = neuroloc(&[
        "--config",
        path(&cfg),
        "--out",
        path(&run),
        "train",
        "--data",
        path(&data),
        "--steps",
        "12",
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = run.join("checkpoint");
    assert!(ck.join("manifest.json").is_file() && ck.join("params.bin").is_file());
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("epoch,"));

    let o = neuroloc(&[
        "--out",
        path(&run),
        "eval",
        "--checkpoint",
        path(&ck),
        "--data",
        path(&data),
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let splits = metrics["splits"].as_array().unwrap();
    assert_eq!(splits.len(), 2);
    for s in splits {
        assert!(s["median_position"].as_f64().unwrap().is_finite());
        assert!(s["median_orientation_deg"].as_f64().unwrap().is_finite());
    }
    assert!(metrics["runtime_seconds"].is_null());
    let first = fs::read(run.join("metrics.json")).unwrap();
    neuroloc(&[
        "--out",
        path(&run),
        "eval",
        "--checkpoint",
        path(&ck),
        "--data",
        path(&data),
    ]);
    assert_eq!(first, fs::read(run.join("metrics.json")).unwrap());

    let test_csv = data.join("test.csv");
    let o = neuroloc(&[
        "infer",
        "--checkpoint",
        path(&ck),
        "--csv",
        path(&test_csv),
        "--row",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let q: Vec<f64> = pred["orientation"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((q.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(pred["position"].as_array().unwrap().len(), 3);

    let o = neuroloc(&[
        "--out",
        path(&run),
        "saliency",
        "--checkpoint",
        path(&ck),
        "--csv",
        path(&test_csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sal = fs::read_to_string(run.join("saliency.csv")).unwrap();
    let mut lines = sal.lines();
    assert_eq!(lines.next(), Some("dim,saliency"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 16);
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(values.contains(&1.0));

    let o = neuroloc(&["infer", "--checkpoint", path(&ck), "--features", "1,2,3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn import_poses_inverts_world_to_camera() {
    let dir = tempfile::tempdir().unwrap();
    let poses = dir.path().join("seq");
    fs::create_dir(&poses).unwrap();
    // camera at (1, 2, 3), identity rotation, stored world-to-camera
    fs::write(
        poses.join("frame-000000.pose.txt"),
        "1 0 0 -1\n0 1 0 -2\n0 0 1 -3\n0 0 0 1\n",
    )
    .unwrap();
    fs::write(
        poses.join("frame-000001.pose.txt"),
        "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = neuroloc(&[
        "--out",
        path(&out),
        "import-poses",
        "--dir",
        path(&poses),
        "--world-to-camera",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("poses.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "timestamp,x,y,z,qw,qx,qy,qz");
    assert!(rows[1].starts_with("0,1,2,3,1,"), "{}", rows[1]);
    assert_eq!(rows.len(), 3);
}
