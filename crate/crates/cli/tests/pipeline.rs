use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const CONFIG: &str = "\
seed = 5
corpus_dir = corpus
output_dir = out
max_segment = 10
synth.utterances = 30
synth.train = 16
synth.dev = 6
synth.sharpness = 3.2
synth.transition_strength = 4
epochs.1 = 3
epochs.2 = 2
step_sizes = 0.1, 1
lambda.1 = 0.7
templates.2 = second
lm.2 = estimate
";

fn run(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_segcascade"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    run(dir.path(), &["synth", "--config", "run.cfg"]);
    run(dir.path(), &["train", "--config", "run.cfg", "--level", "1"]);
    dir
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn full_pipeline(dir: &Path) {
    let c = ["--config", "run.cfg"];
    run(dir, &[&["decode"][..], &c, &["--split", "test"]].concat());
    run(dir, &[&["prune"][..], &c].concat());
    run(dir, &[&["train"][..], &c, &["--level", "2"]].concat());
    run(dir, &[&["decode"][..], &c, &["--level", "2", "--split", "test"]].concat());
    run(dir, &[&["hitrate"][..], &c, &["--width", "3", "--split", "dev"]].concat());
}

#[test]
fn pipeline_produces_artifacts() {
    let dir = setup();
    full_pipeline(dir.path());
    let out = dir.path().join("out");
    for f in [
        "level1/train/model.txt",
        "level1/train/train_log.jsonl",
        "level1/lattices/prune_report.jsonl",
        "level1/lattices/utt0000.lat",
        "level2/train/lm.txt",
        "level2/decode-test-exact/hyp.txt",
        "level2/decode-test-exact/report.json",
        "level1/hitrate-dev-beam3/report.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
        assert!(out.join(f).with_file_name("manifest.json").is_file(), "no manifest beside {f}");
    }
    assert!(!files(&out).iter().any(|(p, _)| p.to_string_lossy().contains(".partial")));

    let report = json(&fs::read_to_string(out.join("level2/decode-test-exact/report.json")).unwrap());
    let per = report["per"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&per));
    let lines = fs::read_to_string(out.join("level1/lattices/prune_report.jsonl")).unwrap();
    let first = json(lines.lines().next().unwrap());
    assert_eq!(first["id"], "utt0000");
    assert!(first["kept_edges"].as_u64().unwrap() <= first["total_edges"].as_u64().unwrap());

    // eval over decode outputs agrees with the decode report
    let d = out.join("level2/decode-test-exact");
    let eval = json(&run(
        dir.path(),
        &["eval", "--hyp", d.join("hyp.txt").to_str().unwrap(), "--ref", d.join("ref.txt").to_str().unwrap()],
    ));
    assert_eq!(eval, report);
}

#[test]
fn lambda_one_lattice_keeps_the_exact_decode() {
    let dir = setup();
    let d = dir.path();
    run(d, &["decode", "--config", "run.cfg", "--split", "dev"]);
    let exact = fs::read_to_string(d.join("out/level1/decode-dev-exact/hyp.txt")).unwrap();
    run(d, &["prune", "--config", "run.cfg", "--lambda", "1", "--split", "dev"]);
    run(
        d,
        &["decode", "--config", "run.cfg", "--split", "dev", "--lattice-dir", "out/level1/lattices"],
    );
    let pruned = fs::read_to_string(d.join("out/level1/decode-dev-exact/hyp.txt")).unwrap();
    assert_eq!(exact, pruned);
}

#[test]
fn wide_beam_always_hits() {
    let dir = setup();
    let r = json(&run(dir.path(), &["hitrate", "--config", "run.cfg", "--width", "100000", "--split", "dev"]));
    assert_eq!(r["hit_rate"].as_f64(), Some(1.0));
    assert_eq!(r["beam_per"], r["exact_per"]);
    let saved = json(&fs::read_to_string(dir.path().join("out/level1/hitrate-dev-beam100000/report.json")).unwrap());
    assert_eq!(saved["level"], 1);
}

#[test]
fn reruns_are_byte_identical() {
    let a = setup();
    full_pipeline(a.path());
    let b = setup();
    full_pipeline(b.path());
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((pa, ca), (pb, cb)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert!(ca == cb, "{} differs between runs", pa.display());
    }
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    for args in [
        &["synth", "--config", "bad.cfg"][..],
        &["train", "--config", "missing.cfg"],
        &["eval", "--hyp", "nope.txt", "--ref", "nope.txt"],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_segcascade"))
            .current_dir(dir.path())
            .args(args)
            .output()
            .unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
}
