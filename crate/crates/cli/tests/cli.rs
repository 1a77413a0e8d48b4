use std::path::Path;
use std::process::{Command, Output};

use mdd_core::{Checkpoint, Dataset};

fn mdd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdd"))
        .args(args)
        .current_dir(dir)
        .env("MDD_OUT_ROOT", dir.join("root"))
        .output()
        .expect("running mdd")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mdd(dir, args);
    assert!(
        out.status.success(),
        "mdd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_VECTOR: [&str; 10] = [
    "--set", "width=8", "--set", "groups=2", "--set", "time_dim=4", "--set", "attention_chunk=8", "--set", "lr=1e-3",
];

fn vector_dataset(dir: &Path, name: &str, sup: &str) {
    ok(dir, &["dataset", "--mode", "vector", "--n", "60", "--sup", sup, "--pairs", "equal", "--seed", "3", "--out", name]);
}

#[test]
fn dataset_is_deterministic_and_writes_manifest_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.mdds", "b.mdds"] {
        ok(d, &["dataset", "--n", "40", "--size", "16", "--sup", "0.4", "--pairs", "equal", "--seed", "7", "--out", name]);
    }
    let (a, b) = (std::fs::read(d.join("a.mdds")).unwrap(), std::fs::read(d.join("b.mdds")).unwrap());
    assert_eq!(a, b);
    let data = Dataset::from_bytes(&a).unwrap();
    assert_eq!((data.len(), data.counts.full), (40, 16));
    let manifest = std::fs::read_to_string(d.join("a.mdds.manifest")).unwrap();
    assert!(manifest.contains("pair_policy=equal"));
    let config = std::fs::read_to_string(d.join("a.mdds.config")).unwrap();
    assert!(config.contains("sup=0.4") && config.contains("out=a.mdds"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = mdd(d, &["dataset", "--sup", "1.5", "--out", "x.mdds"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[0, 1]"), "{}", stderr(&o));
    assert!(!d.join("x.mdds").exists());

    std::fs::write(d.join("bad.cfg"), "n=10\ncolour=red\n").unwrap();
    let o = mdd(d, &["dataset", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));

    assert_eq!(mdd(d, &["train", "--data", "d.mdds", "--set", "nonsense=1"]).status.code(), Some(2));
    assert_eq!(mdd(d, &["train", "--data", "d.mdds", "--scheme", "mdd", "--fill", "minus_one"]).status.code(), Some(2));
    assert_eq!(mdd(d, &["sample", "--ck", "x.mddc", "--cond", "ABC"]).status.code(), Some(2));
    assert_eq!(mdd(d, &["eval", "--protocol", "nope"]).status.code(), Some(2));
    assert_eq!(mdd(d, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdd(dir.path(), &["train", "--data", "missing.mdds", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "mode=vector\nn=30\nseed=5\n").unwrap();
    ok(d, &["dataset", "--config", "run.cfg", "--n", "20", "--out", "d.mdds"]);
    let data = Dataset::load(d.join("d.mdds")).unwrap();
    assert_eq!((data.len(), data.spec.seed), (20, 5));
}

#[test]
fn default_output_goes_under_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["dataset", "--mode", "vector", "--n", "10"]);
    assert!(dir.path().join("root/dataset.mdds").exists());
}

#[test]
fn train_writes_checkpoints_that_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    vector_dataset(d, "d.mdds", "0.4");
    let mut args = vec!["train", "--data", "d.mdds", "--scheme", "mdd", "--steps", "6", "--seed", "1", "--out", "ck"];
    args.extend(TINY_VECTOR);
    ok(d, &args);
    for f in ["best.mddc", "last.mddc", "loss.csv", "config.txt"] {
        assert!(d.join("ck").join(f).exists(), "{f}");
    }
    let bytes = std::fs::read(d.join("ck/best.mddc")).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let model = ck.to_model().unwrap();
    assert_eq!(Checkpoint::from_model(&model, &ck.metadata).to_bytes(), bytes);
    for key in ["schedule.steps", "data.sha256", "train.steps_done"] {
        assert!(ck.metadata.contains(key), "{key}");
    }
    let loss = std::fs::read_to_string(d.join("ck/loss.csv")).unwrap();
    assert!(loss.starts_with("step,epoch,scheme,split,loss,lr"));
    let config = std::fs::read_to_string(d.join("ck/config.txt")).unwrap();
    assert!(config.contains("width=8") && config.contains("fill=pure_noise") && config.contains("loss_scope=all_domains"));
}

#[test]
fn fill_flag_selects_the_minus_one_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    vector_dataset(d, "d.mdds", "0.4");
    let mut args = vec!["train", "--data", "d.mdds", "--scheme", "ummcsgm", "--fill", "minus_one", "--steps", "2", "--out", "ck"];
    args.extend(TINY_VECTOR);
    ok(d, &args);
    let ck = Checkpoint::load(d.join("ck/last.mddc")).unwrap();
    assert_eq!(ck.metadata.get("scheme"), Some("ummcsgm"));
    assert_eq!(ck.metadata.get("fill"), Some("minus_one"));
    assert_eq!(ck.metadata.get("loss_scope"), Some("supervised_only"));
    assert_eq!(ck.metadata.get("model.condition_code"), Some("true"));
}

#[test]
fn sample_writes_generations_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    vector_dataset(d, "d.mdds", "1.0");
    let mut args = vec!["train", "--data", "d.mdds", "--steps", "2", "--out", "ck"];
    args.extend(TINY_VECTOR);
    ok(d, &args);
    ok(
        d,
        &["sample", "--ck", "ck/best.mddc", "--cond", "A", "--phi", "constant", "--c", "0", "--sampler", "ddim", "--steps", "10", "--n", "5", "--out", "s"],
    );
    let meta = std::fs::read_to_string(d.join("s/metadata.txt")).unwrap();
    assert!(meta.contains("gen.cond_mask=100") && meta.contains("checkpoint.sha256="));
    let generated = std::fs::read_to_string(d.join("s/generated.csv")).unwrap();
    assert_eq!(generated.lines().count(), 1 + 3 * 5);
    let mae = std::fs::read_to_string(d.join("s/mae.csv")).unwrap();
    assert_eq!(mae.lines().map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["target", "B", "C"]);
}

#[test]
fn image_sample_writes_a_pixmap_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["dataset", "--n", "12", "--size", "16", "--out", "d.mdds"]);
    ok(
        d,
        &[
            "train", "--data", "d.mdds", "--steps", "1", "--batch", "4", "--out", "ck", "--set", "width=4", "--set", "channel_mult=1",
            "--set", "res_blocks=1", "--set", "groups=1", "--set", "time_dim=4",
        ],
    );
    ok(d, &["sample", "--ck", "ck/best.mddc", "--cond", "AB", "--steps", "3", "--n", "2", "--out", "s"]);
    let ppm = std::fs::read(d.join("s/grid.ppm")).unwrap();
    // 2 rows x 6 tiles of 16 px with 1 px separators
    let header = b"P6\n103 35\n255\n";
    assert!(ppm.starts_with(header));
    assert_eq!(ppm.len(), header.len() + 103 * 35 * 3);
}

#[test]
fn eval_reports_missing_cells_and_sweep_trains_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = [
        "--set", "n_grid=1.0", "--set", "test_points=6", "--set", "ddim_steps=4", "--set", "n_points=40", "--set",
        "train_steps=3", "--set", "width=8", "--set", "groups=2", "--set", "time_dim=4",
    ];
    let mut sweep = vec!["sweep", "--protocol", "supervision", "--schemes", "mdd", "--seeds", "0", "--ck-root", "cells", "--out", "sw"];
    sweep.extend(small);
    ok(d, &sweep);
    assert!(d.join("cells/mdd/n1.0/equal/seed0/best.mddc").exists());
    let results = std::fs::read_to_string(d.join("sw/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2);

    let mut eval = vec!["eval", "--protocol", "supervision", "--schemes", "mdd,ummcsgm-n", "--seeds", "0", "--ck-root", "cells", "--out", "ev"];
    eval.extend(small);
    ok(d, &eval);
    let results = std::fs::read_to_string(d.join("ev/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2);
    let missing = std::fs::read_to_string(d.join("ev/missing.txt")).unwrap();
    assert_eq!(missing.trim(), "ummcsgm-n/N=1.0/equal/seed=0");
    // the checkpoint evaluated is the one the sweep trained
    let row = |f: &str| std::fs::read_to_string(d.join(f)).unwrap().lines().nth(1).unwrap().rsplit(',').next().unwrap().to_string();
    assert_eq!(row("sw/results.csv"), row("ev/results.csv"));
}

#[test]
fn phi_sweep_emits_long_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "sweep", "--protocol", "phi", "--seeds", "0", "--out", "phi", "--set", "phi_c_grid=0,1", "--set", "test_points=4",
            "--set", "ddim_steps=3", "--set", "n_points=40", "--set", "train_steps=2", "--set", "width=8", "--set", "groups=2",
            "--set", "time_dim=4",
        ],
    );
    let results = std::fs::read_to_string(d.join("phi/results.csv")).unwrap();
    // (vanilla + 3 families x 2 values) x 2 targets
    assert_eq!(results.lines().count(), 1 + 7 * 2);
    let svg = std::fs::read_to_string(d.join("phi/phi_sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    assert!(d.join("root/cells/mdd/n0.0/bridge/seed0/best.mddc").exists());
    let config = std::fs::read_to_string(d.join("phi/config.txt")).unwrap();
    assert!(config.contains("protocol=phi"));
}

#[test]
fn bridge_protocol_writes_snapshot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "sweep", "--protocol", "bridge", "--seeds", "0", "--out", "br", "--set", "test_points=4", "--set", "ddim_steps=12",
            "--set", "n_points=40", "--set", "train_steps=2", "--set", "width=8", "--set", "groups=2", "--set", "time_dim=4",
        ],
    );
    let steps = std::fs::read_to_string(d.join("br/bridge_steps.csv")).unwrap();
    // 10 snapshots x targets B and C
    assert_eq!(steps.lines().count(), 1 + 10 * 2);
}
