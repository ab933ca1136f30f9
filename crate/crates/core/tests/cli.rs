use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset]
n_scenes = 120
n_token = 12
n_sentence = 12
n_reference = 12

[eval]
seeds = 2
rs_grid = [0.0, 0.5]
bench_tokens = 256
"#;

fn ltsfs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltsfs"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("LTSFS_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = ltsfs(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), format!("{SMALL}{extra}")).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join("out").join(name)).unwrap()
}

#[test]
fn pipeline_is_reproducible_and_tracks_staleness() {
    let a = setup("");
    let p = a.path();
    let o = ltsfs(p, &["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model"));

    ok(p, &["build-model"]);
    ok(p, &["gen-data", "--seed", "4"]);
    let first = (
        read(p, "model.ltsw"),
        read(p, "samples.jsonl"),
        read(p, "manifest.json"),
    );
    ok(p, &["build-model"]);
    ok(p, &["gen-data", "--seed", "4"]);
    assert_eq!(
        first,
        (
            read(p, "model.ltsw"),
            read(p, "samples.jsonl"),
            read(p, "manifest.json")
        )
    );

    ok(p, &["attribute"]);
    ok(p, &["plan"]);
    let plan = read(p, "plan.json");
    ok(p, &["plan"]);
    assert_eq!(plan, read(p, "plan.json"));
    ok(p, &["steer-eval"]);
    assert!(p.join("out/tradeoff.txt").exists() && p.join("out/tradeoff.csv").exists());

    // regenerating the data leaves the scores behind
    ok(p, &["gen-data", "--seed", "5"]);
    let o = ltsfs(p, &["plan"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scores"));
    ok(p, &["plan", "--force"]);
    ok(p, &["attribute"]);
    ok(p, &["plan", "--r-s", "0.7", "--backend", "null-space"]);
    let o = ltsfs(p, &["report"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sweep") && err.contains("bench"), "{err}");
    ok(p, &["steer-eval"]);
    ok(p, &["sweep-rs"]);
    ok(p, &["bench", "--tokens", "256"]);
    assert!(p.join("out/sweep.csv").exists());
    ok(p, &["report"]);
    assert!(!read(p, "report.txt").is_empty());
}

#[test]
fn evaluates_on_another_runs_samples() {
    let a = setup("");
    let b = setup("");
    for d in [a.path(), b.path()] {
        ok(d, &["build-model"]);
    }
    ok(a.path(), &["gen-data", "--seed", "1"]);
    ok(a.path(), &["attribute"]);
    ok(a.path(), &["plan"]);
    ok(b.path(), &["gen-data", "--seed", "2"]);
    let other = b.path().join("out");
    ok(a.path(), &["steer-eval", "--eval-dir", other.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&read(a.path(), "tradeoff.json")).unwrap();
    assert_eq!(report["seeds"][0], 2);

    let c = setup("[planted]\nseed = 7\n");
    ok(c.path(), &["build-model"]);
    ok(c.path(), &["gen-data"]);
    let o = ltsfs(
        a.path(),
        &["steer-eval", "--eval-dir", c.path().join("out").to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different model"));
}

#[test]
fn rejects_bad_configuration() {
    let d = setup("[policy]\nbogus = 1\n");
    let o = ltsfs(d.path(), &["build-model"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let d = setup("");
    fs::write(
        d.path().join("run.toml"),
        "[dataset]\nn_scenes = 10\ncalib_fraction = 0.99\n",
    )
    .unwrap();
    ok(d.path(), &["build-model"]);
    let o = ltsfs(d.path(), &["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("calib_fraction"));
}
