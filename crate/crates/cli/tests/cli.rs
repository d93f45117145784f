use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic_64.tsv")
}

fn armi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_armi"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

const SMALL: &str = "epochs = 1\n[encoder]\nnum_layers = 2\nmodel_dim = 16\nnum_heads = 2\nffn_dim = 32\nmax_len = 32\n";

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let fx = fixture();
    let fx = fx.to_str().unwrap();
    fs::write(d.join("small.toml"), SMALL).unwrap();

    assert_eq!(armi(d, &["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(armi(d, &["train", "--epochs", "0", "--train", fx, "--out", "o"]).status.code(), Some(1));
    assert_eq!(armi(d, &["train", "--arch", "MT_NOPE"]).status.code(), Some(1));
    assert_eq!(armi(d, &["train", "--config", "small.toml", "--train", "missing.tsv", "--out", "o"]).status.code(), Some(2));
    let out = armi(d, &["train", "--config", "small.toml", "--lr", "1e300", "--train", fx, "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 1"));
    assert_eq!(armi(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn train_eval_predict_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let fx = fixture();
    let fx = fx.to_str().unwrap();
    fs::write(d.join("small.toml"), SMALL).unwrap();

    let out = armi(d, &["train", "--config", "small.toml", "--seed", "5", "--train", fx, "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("MT_ATT seed 5"));
    for f in ["model.ckpt", "run_report.json", "run_report.txt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let out = armi(d, &["eval", "--checkpoint", "run/model.ckpt", "--data", fx, "--out", "m"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Threat of violence") && text.contains("macro avg"));
    assert_eq!(fs::read_to_string(d.join("m/metrics.txt")).unwrap(), text);

    let report = armi(d, &["report", "m/metrics.json"]);
    assert_eq!(String::from_utf8_lossy(&report.stdout), text);
    let run = armi(d, &["report", "run/run_report.json"]);
    assert_eq!(
        String::from_utf8_lossy(&run.stdout),
        fs::read_to_string(d.join("run/run_report.txt")).unwrap()
    );
    assert_eq!(armi(d, &["report", "small.toml"]).status.code(), Some(2));

    assert!(armi(d, &["predict", "--checkpoint", "run/model.ckpt", "--input", fx, "--out", "a.tsv"]).status.success());
    let mut other = fs::read_to_string(d.join("a.tsv")).unwrap();
    other = other.replacen("syn-0003", "syn-9999", 1);
    fs::write(d.join("b.tsv"), other).unwrap();
    let out = armi(d, &["ensemble", "--out", "e.tsv", "a.tsv", "b.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("syn-9999"));
}

#[test]
fn gradcheck_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = armi(dir.path(), &["gradcheck", "--arch", "ST_ATT", "--json"]);
    assert!(out.status.success());
    let json = String::from_utf8_lossy(&out.stdout);
    assert!(json.contains("\"ST_ATT\"") && json.contains("\"passed\": true"), "{json}");
}
