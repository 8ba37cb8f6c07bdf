use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lgs")
}

fn ok(args: &[&str]) {
    let out = lgs(args);
    assert!(
        out.status.success(),
        "lgs {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn scene_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

/// Relative path to contents for every file below `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

const STAGES: [&str; 6] = [
    "extract-masklets",
    "build-bank",
    "train-codec",
    "build-gt",
    "train-lang",
    "eval",
];

#[test]
fn seven_stage_chain_writes_an_eval_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scene_arg(tmp.path());
    ok(&["synth", "--scene", &s, "--resolution", "48"]);
    for stage in STAGES {
        ok(&[stage, "--scene", &s]);
    }
    let csv = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("query,frame,iou,macc_hit,loc_hit"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.len() == 5));
    let queries: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(queries.len(), 8);
    let mean: f64 = rows.iter().map(|r| r[2].parse::<f64>().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!(mean > 0.5, "mean 2D IoU {mean}");

    let three_d = fs::read_to_string(tmp.path().join("eval_3d.csv")).unwrap();
    assert_eq!(three_d.lines().count(), 9);

    let idx = tmp.path().join("mug.txt");
    let masks = tmp.path().join("mug_masks");
    ok(&[
        "query",
        "--scene",
        &s,
        "--text",
        "mug",
        "--out",
        idx.to_str().unwrap(),
        "--mask-dir",
        masks.to_str().unwrap(),
    ]);
    let selected: Vec<usize> = fs::read_to_string(&idx)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert!(!selected.is_empty());
    assert!(selected.windows(2).all(|w| w[0] < w[1]));
    let pgm = fs::read(masks.join("t_0001.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));

    ok(&["ablate", "--scene", &s]);
    let ablation = fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    assert!(ablation.starts_with("method,threshold,query,iou\n"));
    assert!(ablation.contains("\nloc_with_dbscan,"));
}

#[test]
fn query_without_trained_bundle_is_a_clear_error() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scene_arg(tmp.path());
    ok(&["synth", "--scene", &s, "--resolution", "32", "--frames", "3"]);
    let out = lgs(&["query", "--scene", &s, "--text", "mug"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no trained bundle") && err.contains("train-lang"), "{err}");
}

#[test]
fn stages_name_their_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scene_arg(tmp.path());
    let out = lgs(&["build-bank", "--scene", &s]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no scene"));

    ok(&["synth", "--scene", &s, "--resolution", "32", "--frames", "3"]);
    let out = lgs(&["build-bank", "--scene", &s]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("extract-masklets"));
}

#[test]
fn text_and_vector_queries_are_exclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scene_arg(tmp.path());
    let out = lgs(&["query", "--scene", &s, "--text", "mug", "--vector", "v.txt"]);
    assert!(!out.status.success());
}

#[test]
fn same_seed_gives_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let s = scene_arg(dir);
        ok(&[
            "synth",
            "--scene",
            &s,
            "--resolution",
            "32",
            "--frames",
            "6",
            "--seed",
            "7",
            "--skew",
        ]);
        for stage in STAGES {
            let mut args = vec![stage, "--scene", &s];
            if stage == "train-lang" {
                args.extend(["--steps", "200"]);
            }
            ok(&args);
        }
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs", k.display());
    }

    let c = tempfile::tempdir().unwrap();
    ok(&[
        "synth",
        "--scene",
        &scene_arg(c.path()),
        "--resolution",
        "32",
        "--frames",
        "6",
        "--seed",
        "8",
        "--skew",
    ]);
    assert_ne!(
        fs::read(a.path().join("gaussians.bin")).unwrap(),
        fs::read(c.path().join("gaussians.bin")).unwrap()
    );
}
