use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sda"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("run sda")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"
seed = 3
batch_size = 4
run_dir = "run"
[corpus]
input = "data/corpus.jsonl"
[encoder]
hidden = 4
embed_dim = 4
[generator]
hidden = 6
embed_dim = 4
[gqd]
hidden = 4
[rd]
hidden = 4
[vae]
hidden = 4
z_dim = 3
[trainer]
max_steps = 18
pretrain_steps = 6
window = 3
[augmenter]
multiplier = 3
[dialog]
hidden = 6
embed_dim = 4
epochs = 1
[metrics]
embeddings_path = "data/embeddings.txt"
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&sda(dir.path(), &["synth", "--out", "data", "--hard", "30", "--copy", "20", "--dim", "6"]));
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn pipeline_writes_every_stage_and_is_repeatable() {
    let dir = setup();
    let d = dir.path();
    let stdout = ok(&sda(d, &["pipeline", "--config", "tiny.toml"]));
    // 40 training pairs, 24 selected at fraction 0.6, three variants each
    assert!(stdout.contains("augmented corpus 112 pairs"), "{stdout}");
    for f in [
        "run/corpus/train.jsonl",
        "run/corpus/vocab.txt",
        "run/selector/manifest.json",
        "run/selector/quality.csv",
        "run/scores/scores.jsonl",
        "run/scores/diagnostics.csv",
        "run/augmented/augmented.jsonl",
        "run/dialog/manifest.json",
        "run/eval/report.json",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(d.join("run/eval/report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);

    ok(&sda(d, &["pipeline", "--config", "tiny.toml", "--force"]));
    assert_eq!(report, fs::read_to_string(d.join("run/eval/report.json")).unwrap());
}

#[test]
fn stage_commands_chain() {
    let dir = setup();
    let d = dir.path();
    let out = ok(&sda(d, &["prepare", "--input", "data/corpus.jsonl", "--out", "c", "--max-len", "20", "--seed", "3"]));
    assert!(out.starts_with("train 40 valid 5 test 5"), "{out}");
    ok(&sda(d, &["train", "--corpus", "c", "--config", "tiny.toml", "--out", "sel"]));
    let again = ok(&sda(d, &["train", "--corpus", "c", "--config", "tiny.toml", "--out", "sel"]));
    assert!(again.contains("up to date"), "{again}");
    ok(&sda(d, &["score", "--run", "sel", "--out", "scores.jsonl", "--diagnostics", "diag.csv"]));
    assert_eq!(fs::read_to_string(d.join("scores.jsonl")).unwrap().lines().count(), 40);
    let out = ok(&sda(
        d,
        &[
            "augment", "--scores", "scores.jsonl", "--corpus", "c", "--fraction", "0.5", "--multiplier", "2", "--augmenter", "mock", "--out",
            "aug.jsonl",
        ],
    ));
    assert!(out.contains("= 80 pairs"), "{out}");
    ok(&sda(d, &["train-dialog", "--corpus", "aug.jsonl", "--out", "dlg", "--config", "tiny.toml"]));
    let out = ok(&sda(
        d,
        &["evaluate", "--run", "dlg", "--test", "c/test.jsonl", "--embeddings", "data/embeddings.txt", "--report", "r.json"],
    ));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["n_samples"], 5);
}

#[test]
fn sweep_emits_one_row_per_fraction() {
    let dir = setup();
    let d = dir.path();
    let out = ok(&sda(d, &["sweep", "--config", "tiny.toml", "--fractions", "0.2,0.6,1.0"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4, "{out}");
    assert!(lines[0].starts_with("fraction,selection,"));
    let r1 = ok(&sda(d, &["sweep", "--config", "tiny.toml", "--fractions", "0.6", "--random", "--force"]));
    let r2 = ok(&sda(d, &["sweep", "--config", "tiny.toml", "--fractions", "0.6", "--random", "--force"]));
    assert_eq!(r1, r2);
    assert!(r1.lines().nth(1).unwrap().starts_with("0.6,random,"));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(sda(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(sda(d, &["prepare", "--input", "x.jsonl"]).status.code(), Some(1));
    assert_eq!(sda(d, &["--help"]).status.code(), Some(0));

    let missing = sda(d, &["prepare", "--input", "nope.jsonl", "--out", "c"]);
    assert_eq!(missing.status.code(), Some(2));

    fs::write(d.join("bad.toml"), "[trainer]\nmystery = 1\n").unwrap();
    assert_eq!(sda(d, &["pipeline", "--config", "bad.toml"]).status.code(), Some(1));

    fs::write(d.join("broken.jsonl"), "{\"id\": \"a\", \"query\": \"hi\"\n").unwrap();
    fs::write(d.join("broken.toml"), TINY.replace("data/corpus.jsonl", "broken.jsonl")).unwrap();
    let out = sda(d, &["pipeline", "--config", "broken.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage prepare failed"), "{stderr}");

    // nothing listens on this port; retries are kept short
    let bt = TINY.to_string()
        + "endpoint = \"http://127.0.0.1:9/translate\"\nretries = 0\nbackoff_ms = 1\ntimeout_ms = 200\n";
    let bt = bt.replace("[augmenter]\nmultiplier = 3\n", "");
    fs::write(d.join("bt.toml"), bt.replace("endpoint =", "[augmenter]\nkind = \"backtranslate\"\nmultiplier = 1\nendpoint =")).unwrap();
    let out = sda(d, &["pipeline", "--config", "bt.toml"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage augment failed"));
    assert!(d.join("run/selector/manifest.json").exists(), "partial artifacts are kept");
}
