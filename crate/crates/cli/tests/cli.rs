use std::process::{Command, Output};

fn higen(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_higen")).current_dir(dir).args(args).output().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(higen(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(higen(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(higen(dir.path(), &["gen-data", "--set", "train.nope=1"]).status.code(), Some(1));
    assert_eq!(higen(dir.path(), &["gen-data", "--set", "train.lr=fast"]).status.code(), Some(1));
    // No checkpoint to evaluate is a runtime failure.
    assert_eq!(higen(dir.path(), &["eval", "--out", "empty"]).status.code(), Some(2));
}

#[test]
fn gen_data_honours_overrides_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.cfg"), "# smaller corpus\ndata.docs_per_leaf = 10\n").unwrap();
    let out = higen(dir.path(), &["gen-data", "--config", "small.cfg", "--set", "data.pretrain_per_leaf=2", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["taxonomy.tsv", "vocab.tsv", "train.jsonl", "val.jsonl", "test.jsonl", "pretrain.jsonl", "data.json", "config.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("data.json")).unwrap()).unwrap();
    let n = |k: &str| summary[k].as_u64().unwrap();
    assert_eq!(n("train") + n("val") + n("test"), 120);
    assert_eq!(n("pretrain"), 24);
    assert_eq!(n("leaves"), 12);
    let config = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("data.docs_per_leaf = 10"));
    assert!(config.contains("data.pretrain_per_leaf = 2"));
}
