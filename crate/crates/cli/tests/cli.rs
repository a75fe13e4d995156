use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use partwise::distill::{ModelConfig, StudentTeacher};
use partwise::encoder::EncoderConfig;

const SMALL: [&str; 18] = [
    "--train-per-class", "6",
    "--eval-per-class", "4",
    "--image-size", "16",
    "--model-dim", "16",
    "--heads", "2",
    "--parts", "4",
    "--fg-parts", "2",
    "--head-hidden", "16",
    "--out-dim", "8",
];

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 16,
            image_width: 16,
            model_dim: 16,
            heads: 2,
            parts: 4,
            fg_parts: 2,
            ..EncoderConfig::default()
        },
        head_hidden: 16,
        out_dim: 8,
        classes: 0,
    }
}

fn partwise(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partwise"))
        .args(args)
        .args(SMALL)
        .current_dir(dir)
        .env_remove("PARTWISE_SEED")
        .output()
        .unwrap()
}

#[track_caller]
fn ok(dir: &Path, args: &[&str]) -> String {
    let out = partwise(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[track_caller]
fn fails_with(dir: &Path, args: &[&str], code: i32) -> String {
    let out = partwise(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no {key} line in {stdout}"))
}

/// Column `name` of every row of a metrics file.
fn column(tsv: &str, name: &str) -> Vec<f64> {
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split('\t').nth(i).unwrap().parse().unwrap()).collect()
}

#[test]
fn gen_data_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gen-data", "--rho", "1.0"]);
    assert_eq!(value(&out, "train"), "24");
    assert_eq!(value(&out, "with-masks"), "24");
    assert_eq!(value(&out, "class-texture-agreement"), "1.0000");
    for split in ["original", "m_same", "m_rand"] {
        assert_eq!(value(&out, split), "16", "{split}");
    }
    assert!(tmp.path().join("data/gen-data.toml").is_file());
}

#[test]
fn gen_data_needs_force_for_a_non_empty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    let err = fails_with(tmp.path(), &["gen-data"], 2);
    assert!(err.contains("--force"), "{err}");
    ok(tmp.path(), &["gen-data", "--force", "--seed", "1"]);
    assert!(fs::read_to_string(tmp.path().join("data/gen-data.toml")).unwrap().contains("seed = 1"));
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn seed_env_var_overrides_the_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data", "--seed", "7", "--data-dir", "flag"]);
    let out = Command::new(env!("CARGO_BIN_EXE_partwise"))
        .args(["gen-data", "--data-dir", "env"])
        .args(SMALL)
        .current_dir(tmp.path())
        .env("PARTWISE_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<_> { v.into_iter().filter(|(n, _)| n != "gen-data.toml").collect() };
    assert_eq!(strip(snapshot(&tmp.path().join("flag"))), strip(snapshot(&tmp.path().join("env"))));
    let cfg = fs::read_to_string(tmp.path().join("env/gen-data.toml")).unwrap();
    assert!(cfg.contains("seed = 7"), "{cfg}");
}

#[test]
fn zero_steps_saves_the_initial_pair() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    ok(tmp.path(), &["pretrain", "--steps", "0"]);
    let pair = StudentTeacher::load(&tmp.path().join("run/pretrain.pwt"), small_model()).unwrap();
    assert_eq!(pair.student, pair.teacher);
    assert!(pair.center.data().iter().all(|&v| v == 0.0));
    let tsv = fs::read_to_string(tmp.path().join("run/pretrain.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1);
}

#[test]
fn disabled_terms_report_zero_and_quality_terms_shrink_the_bank() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    let off = ["--lambda-mix", "0", "--lambda-s", "0", "--lambda-o", "0", "--out-dir", "off"];
    ok(tmp.path(), &[&["pretrain", "--steps", "5"], &off[..]].concat());
    let tsv = fs::read_to_string(tmp.path().join("off/pretrain.tsv")).unwrap();
    for name in ["mix", "sparsity", "ortho", "cls_inv", "p_inv", "sup"] {
        assert!(column(&tsv, name).iter().all(|&v| v == 0.0), "{name}");
    }
    assert!(column(&tsv, "cls").iter().all(|&v| v > 0.0));

    let stdout = ok(tmp.path(), &["pretrain", "--steps", "200", "--lambda-s", "0.5", "--lambda-o", "0.5"]);
    let tsv = fs::read_to_string(tmp.path().join("run/pretrain.tsv")).unwrap();
    assert_eq!(stdout, tsv);
    for name in ["p_l1", "gram_l1"] {
        let c = column(&tsv, name);
        assert!(c[199] < 0.9 * c[0], "{name}: {} -> {}", c[0], c[199]);
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    ok(tmp.path(), &["pretrain", "--steps", "3", "--lr-start", "0.002"]);
    ok(tmp.path(), &["pretrain", "--config", "run/pretrain.toml", "--out-dir", "again"]);
    let a = fs::read(tmp.path().join("run/pretrain.pwt")).unwrap();
    let b = fs::read(tmp.path().join("again/pretrain.pwt")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(tmp.path().join("run/pretrain.tsv")).unwrap(),
        fs::read(tmp.path().join("again/pretrain.tsv")).unwrap()
    );
}

#[test]
fn finetune_and_evaluations_run_from_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    ok(tmp.path(), &["pretrain", "--steps", "2"]);
    ok(tmp.path(), &["finetune", "--steps", "2", "--checkpoint", "run/pretrain.pwt"]);
    assert!(tmp.path().join("run/finetune.pwt").is_file());

    let ck = ["--checkpoint", "run/finetune.pwt"];
    let few = ok(tmp.path(), &[&["eval-fewshot", "--episodes", "20", "--queries", "2"], &ck[..]].concat());
    assert!(few.starts_with("4-way 1-shot on original: "), "{few}");
    let record = fs::read_to_string(tmp.path().join("run/eval-fewshot.tsv")).unwrap();
    assert!(record.contains("finetune.pwt@"), "{record}");

    let splits = ok(tmp.path(), &[&["eval-splits"], &ck[..]].concat());
    let acc = |k| value(&splits, k).parse::<f64>().unwrap();
    assert!((acc("bg_gap") - (acc("m_same") - acc("m_rand"))).abs() < 1e-3);
    assert!((0.0..=1.0).contains(&acc("fg_iou")));
    assert_eq!(splits, fs::read_to_string(tmp.path().join("run/eval-splits.tsv")).unwrap());
}

#[test]
fn inspect_writes_one_pgm_per_map() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    ok(tmp.path(), &["pretrain", "--steps", "0"]);
    let out = ok(tmp.path(), &["inspect", "--checkpoint", "run/pretrain.pwt", "--sample-index", "3"]);
    let paths: Vec<&str> = out.lines().collect();
    // fg, bg, then MSA and MCA per head, then one map per part.
    assert_eq!(paths.len(), 2 + 2 * 2 + 4);
    for p in &paths {
        let bytes = fs::read(tmp.path().join(p)).unwrap();
        let (w, h) = if p.ends_with("_fg.pgm") || p.ends_with("_bg.pgm") { (16, 16) } else { (2, 2) };
        let header = format!("P5\n{w} {h}\n255\n");
        assert!(bytes.starts_with(header.as_bytes()), "{p}");
        assert_eq!(bytes.len(), header.len() + w * h, "{p}");
    }
    assert!(paths[0].ends_with("inspect/original_00003_fg.pgm"), "{}", paths[0]);
    fails_with(tmp.path(), &["inspect", "--checkpoint", "run/pretrain.pwt", "--sample-index", "99"], 2);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    let err = fails_with(tmp.path(), &["eval-splits", "--checkpoint", "missing.pwt"], 4);
    assert!(err.starts_with("error: ") && err.contains("missing.pwt"), "{err}");
    fails_with(tmp.path(), &["finetune", "--steps", "1"], 2);
    fails_with(tmp.path(), &["pretrain", "--metric", "manhattan"], 2);
    fails_with(tmp.path(), &["pretrain", "--fg-parts", "9"], 2);

    fs::write(tmp.path().join("bad.toml"), "stepz = 3\n").unwrap();
    let err = fails_with(tmp.path(), &["pretrain", "--config", "bad.toml"], 2);
    assert!(err.contains("stepz"), "{err}");

    fails_with(tmp.path(), &["pretrain", "--data-dir", "nowhere"], 4);
    fs::write(tmp.path().join("run.pwt"), b"not a checkpoint").unwrap();
    fails_with(tmp.path(), &["eval-splits", "--checkpoint", "run.pwt"], 4);
}

#[test]
fn diverging_training_exits_with_the_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-data"]);
    let err = fails_with(tmp.path(), &["pretrain", "--steps", "20", "--lr-start", "1e30", "--clip-grad", "0"], 3);
    assert!(err.contains("loss term") || err.contains("non-finite"), "{err}");
}
