use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvcs::net::{save_checkpoint, ModelConfig, ModelParams};

fn cvcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvcs"))
        .args(args)
        .env("CVCS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = cvcs(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path to contents for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const SMALL: &[&str] = &[
    "--scenes", "2", "--views", "6", "--frames", "3", "--img", "32x24", "--grid", "16",
];

fn gen(dir: &Path, seed: &str, extra: &[&str]) {
    let mut args = vec!["gen", "--seed", seed, "--out", s(dir)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        extractor: vec![2, 2, 3, 3],
        decoder: vec![4, 2, 1],
        selection: vec![2, 2, 1],
        ..ModelConfig::default()
    }
}

#[test]
fn gen_twice_gives_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&[
        "gen",
        "--scenes",
        "2",
        "--views",
        "6",
        "--frames",
        "3",
        "--seed",
        "1",
        "--out",
        s(&a),
    ]);
    ok(&[
        "gen",
        "--scenes",
        "2",
        "--views",
        "6",
        "--frames",
        "3",
        "--seed",
        "1",
        "--out",
        s(&b),
    ]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 2 * 3 * 6);
    assert_eq!(ta, tb);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("a.run.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen");
    assert_eq!(m["seed"], 1);
}

#[test]
fn worker_count_does_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "4", &[]);
    let mut args = vec!["gen", "--seed", "4", "--out", s(&b)];
    args.extend_from_slice(SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_cvcs"))
        .args(&args)
        .env("CVCS_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn zero_model_has_unit_nae() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "2", &[]);
    let cfg = tiny_model();
    let model = tmp.path().join("zero.ckpt");
    save_checkpoint(&model, &cfg, &ModelParams::zeros(&cfg).unwrap()).unwrap();
    let csv = tmp.path().join("m.csv");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--k",
        "3",
        "--csv",
        s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("config,seed,mae,nae,frames"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "zero");
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[4], "6");
    assert!(tmp.path().join("m.csv.run.json").exists());
}

#[test]
fn train_and_eval_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "3", &[]);
    let config = tmp.path().join("cfg.json");
    let rc = serde_json::json!({
        "model": tiny_model(),
        "train": { "epochs": 1, "resamples": 1, "patch": [8, 8], "k": 3 },
    });
    fs::write(&config, rc.to_string()).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let ckpt = tmp.path().join(format!("{run}.ckpt"));
        ok(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&config),
            "--seed",
            "5",
            "--out",
            s(&ckpt),
        ]);
        let csv = tmp.path().join(format!("{run}.csv"));
        ok(&[
            "eval",
            "--data",
            s(&data),
            "--model",
            s(&ckpt),
            "--k",
            "3",
            "--seed",
            "2",
            "--csv",
            s(&csv),
        ]);
        let loss = fs::read_to_string(tmp.path().join(format!("{run}.ckpt.loss.csv"))).unwrap();
        assert!(loss.starts_with("epoch,mean_loss\n0,"));
        let metrics = fs::read_to_string(&csv).unwrap();
        // the config column is the checkpoint stem, which differs by design
        let rows: Vec<String> = metrics
            .lines()
            .map(|l| l.split_once(',').map_or(l, |(_, rest)| rest).to_string())
            .collect();
        outputs.push((fs::read(&ckpt).unwrap(), loss, rows));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn weight_maps_peak_at_the_nearest_camera() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "6", &[]);
    let cfg = tiny_model();
    let model = tmp.path().join("m.ckpt");
    save_checkpoint(&model, &cfg, &ModelParams::init(&cfg, 0).unwrap()).unwrap();
    let out = tmp.path().join("viz");
    ok(&[
        "viz",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--frame",
        "1/2",
        "--out",
        s(&out),
    ]);

    let scene = cvcs::sim::read_dataset(&data).unwrap().scenes.remove(1);
    let grid = &scene.meta.grid;
    let header = format!("P5\n{} {}\n255\n", grid.ws, grid.hs);
    let maps: Vec<Vec<u8>> = (0..6)
        .map(|v| {
            let b = fs::read(out.join(format!("weight_{v:02}.pgm"))).unwrap();
            assert!(b.starts_with(header.as_bytes()));
            b[header.len()..].to_vec()
        })
        .collect();
    let mut checked = 0;
    for i in 0..grid.hs {
        for j in 0..grid.ws {
            let x = grid.cell_world(i, j);
            // cameras that may see the cell, by straight-line distance, and
            // whether the cell is well inside their feature map
            let mut seen: Vec<(f64, usize, bool)> = scene
                .meta
                .cameras
                .iter()
                .enumerate()
                .filter_map(|(k, c)| {
                    let p = c.world_to_image(x)?;
                    let (fu, fv) = (p.u / 4.0, p.v / 4.0);
                    let (wf, hf) = ((c.width / 4) as f64, (c.height / 4) as f64);
                    let near = fu > -1.0 && fv > -1.0 && fu < wf && fv < hf;
                    let inside = fu > 0.5 && fv > 0.5 && fu < wf - 1.5 && fv < hf - 1.5;
                    let ctr = c.center();
                    let d = ((x[0] - ctr[0]).powi(2)
                        + (x[1] - ctr[1]).powi(2)
                        + (x[2] - ctr[2]).powi(2))
                    .sqrt();
                    near.then_some((d, k, inside))
                })
                .collect();
            seen.sort_by(|a, b| a.0.total_cmp(&b.0));
            if seen.len() >= 2 && seen[0].2 && seen[1].0 > 1.2 * seen[0].0 {
                assert_eq!(maps[seen[0].1][i * grid.ws + j], 255, "cell ({i}, {j})");
                checked += 1;
            }
        }
    }
    assert!(
        checked > 20,
        "only {checked} cells had a clear nearest camera"
    );
    for name in ["view_00.pgm", "distance_05.pgm", "pred.pgm", "gt.pgm"] {
        assert!(fs::read(out.join(name)).unwrap().starts_with(b"P5\n"));
    }
}

#[test]
fn bad_invocations_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cvcs(&["gen", "--bogus", "1", "--out", s(tmp.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--bogus"));

    let missing = tmp.path().join("nope");
    let o = cvcs(&[
        "eval",
        "--data",
        s(&missing),
        "--model",
        s(&missing),
        "--csv",
        s(&tmp.path().join("x.csv")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));

    let data = tmp.path().join("data");
    gen(&data, "1", &[]);
    let config = tmp.path().join("bad.json");
    fs::write(&config, r#"{"train": {"epochs": "many"}}"#).unwrap();
    let o = cvcs(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&config),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed config"));

    let o = cvcs(&[
        "ablate",
        "--suite",
        "everything",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("a.csv")),
    ]);
    assert!(!o.status.success());
}

fn tiny_run_config(dir: &Path) -> PathBuf {
    let config = dir.join("cfg.json");
    let rc = serde_json::json!({
        "model": tiny_model(),
        "train": { "epochs": 1, "resamples": 1, "patch": [8, 8], "k": 3 },
        "adapt": { "disc_steps": 5, "accuracy_samples": 4 },
    });
    fs::write(&config, rc.to_string()).unwrap();
    config
}

#[test]
fn ablate_writes_rows_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "8", &[]);
    let config = tiny_run_config(tmp.path());
    let out = tmp.path().join("combine.csv");
    ok(&[
        "ablate",
        "--suite",
        "combine",
        "--data",
        s(&data),
        "--config",
        s(&config),
        "--seeds",
        "1,2",
        "--out",
        s(&out),
    ]);
    let rows = fs::read_to_string(&out).unwrap();
    assert_eq!(rows.lines().next(), Some("config,seed,mae,nae,frames"));
    assert_eq!(rows.lines().count(), 1 + 4 * 2);
    let summary = fs::read_to_string(tmp.path().join("combine.csv.summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    assert!(tmp.path().join("combine.csv.run.json").exists());
}

#[test]
fn uda_reports_accuracy_and_never_opens_target_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let (source, target) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&source, "1", &[]);
    gen(&target, "2", &["--style", "b"]);
    let config = tiny_run_config(tmp.path());
    let model = tmp.path().join("m.ckpt");
    ok(&[
        "train",
        "--data",
        s(&source),
        "--config",
        s(&config),
        "--seed",
        "1",
        "--out",
        s(&model),
    ]);
    let adapted = tmp.path().join("adapted.ckpt");
    let stdout = ok(&[
        "uda",
        "--model",
        s(&model),
        "--source",
        s(&source),
        "--target",
        s(&target),
        "--config",
        s(&config),
        "--lambda",
        "0.1",
        "--epochs",
        "1",
        "--out",
        s(&adapted),
    ]);
    assert!(stdout.contains("discriminator accuracy"));
    assert!(adapted.exists());
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("adapted.ckpt.run.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "uda");
    assert!(manifest["config"]["target_files_read"].as_u64().unwrap() > 0);
    for key in ["disc_accuracy_before", "disc_accuracy_after"] {
        let a = manifest["config"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a), "{key} = {a}");
    }
}

#[test]
fn shipped_desk_config_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "3", &[]);
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let ckpt = tmp.path().join("desk.ckpt");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&config),
        "--k",
        "3",
        "--epochs",
        "1",
        "--out",
        s(&ckpt),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("desk.ckpt.run.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["train"]["momentum"], 0.9);
}
