use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 0
output_dir = "run"

[corpus]
n_total = 120
test_fraction = 0.5

[gan]
steps = 6
log_every = 2

[downstream]
epochs = 1

[attack]
epochs = 1

[audit]
min_group_count = 5
embedding_sample = 40
"#;

fn synthaudit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthaudit"))
        .args(args)
        .env("SYNTHAUDIT_OUTPUT_ROOT", dir)
        .env("RUST_LOG", "info")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn override_lands_in_the_log_header_and_reruns_skip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = synthaudit(dir.path(), &["train-gan", "--config", &cfg, "--gan.gamma=0", "--deterministic"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let log = fs::read_to_string(dir.path().join("run/gan/train_log.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["config"]["gamma"], 0.0);

    let again = synthaudit(dir.path(), &["train-gan", "--config", &cfg, "--gan.gamma=0", "--deterministic"]);
    assert!(again.status.success());
    assert!(stderr(&again).contains("skipping completed stage"), "{}", stderr(&again));
    assert_eq!(fs::read_to_string(dir.path().join("run/gan/train_log.jsonl")).unwrap(), log);

    // a changed setting invalidates the stage
    let changed = synthaudit(dir.path(), &["train-gan", "--config", &cfg, "--gan.gamma=1", "--deterministic"]);
    assert!(changed.status.success());
    let log = fs::read_to_string(dir.path().join("run/gan/train_log.jsonl")).unwrap();
    assert!(log.starts_with("{\"header\""));
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["config"]["gamma"], 1.0);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for args in [
        vec!["gen-corpus", "--config", cfg.as_str(), "--gan.gamma=-1"],
        vec!["gen-corpus", "--config", cfg.as_str(), "--gan.no_such_key=1"],
        vec!["gen-corpus", "--config", cfg.as_str(), "--corpus.test_fraction=2"],
    ] {
        let o = synthaudit(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = \"zero\"\n").unwrap();
    let o = synthaudit(dir.path(), &["gen-corpus", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pipeline_report_compares_with_itself_and_rejects_other_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let o = synthaudit(dir.path(), &["pipeline", "--config", &cfg, "--deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let digest = String::from_utf8(o.stdout).unwrap();
    assert_eq!(digest.trim().len(), 64);
    let report = dir.path().join("run/audit/report.json");
    for csv in ["roc.csv", "scatter.csv", "attack_scores.csv", "spd_cells.csv"] {
        assert!(dir.path().join("run/audit").join(csv).exists(), "{csv}");
    }

    let r = report.to_str().unwrap();
    let same = synthaudit(dir.path(), &["compare", r, r, "--json"]);
    assert!(same.status.success(), "{}", stderr(&same));
    let c: serde_json::Value = serde_json::from_slice(&same.stdout).unwrap();
    let rows = c["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|row| row["delta"] == 0.0));

    let text = fs::read_to_string(&report).unwrap();
    let other = dir.path().join("other.json");
    fs::write(&other, text.replacen("synthaudit.report/1", "synthaudit.report/2", 1)).unwrap();
    let o = synthaudit(dir.path(), &["compare", r, other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
