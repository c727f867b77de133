//! Black-box tests of the `debias-dg` binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_debias-dg"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    let toml = format!(
        r#"
out_dir = "{}"
seeds = [1]
strategies = ["erm", "e2e-ce"]
lodo = ["ext"]

[data]
kind = "confounded"
seed = 3
n_internal = 2
d_common = 4
d_bias = 2
n_classes = 2
mu = 1.0
rho = [1.0, 1.0]
rho_external = 0.0
sigma = 0.8
samples_per_domain = 80

[train]
steps = 25
batch_size = 8
hidden_dims = [6, 4]

[c2st]
probe_seeds = 1
steps = 50
"#,
        dir.join("out").display()
    );
    std::fs::write(&path, toml).unwrap();
    path
}

#[test]
fn full_cli_flow_gen_train_eval_report_c2st() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    // gen-data
    let data_dir = dir.path().join("data");
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data_dir.join("dom0/manifest.json").is_file());
    assert!(data_dir.join("ext/features.bin").is_file());

    // train
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("2 cells executed"), "{stdout}");

    // train again: everything skipped
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 cells executed"));

    // eval a cell
    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--strategy", "e2e-ce", "--holdout", "ext", "--seed", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("match within 1e-10"));

    // report
    let out = bin().args(["report", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("summary.csv"), "{stdout}");

    // c2st on raw features of two generated domains
    let out = bin()
        .args(["c2st", "--a"])
        .arg(data_dir.join("dom0"))
        .arg("--b")
        .arg(data_dir.join("dom1"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));

    // c2st on saved embeddings
    let emb = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .unwrap()
        .join("erm/ext/seed1/embeddings.csv");
    let out = bin().args(["c2st", "--embeddings"]).arg(&emb).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_inputs_fail_with_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();

    // unknown flag
    let out = bin().args(["train", "--nope"]).output().unwrap();
    assert!(!out.status.success());

    // missing config file
    let out = bin()
        .args(["train", "--config"])
        .arg(dir.path().join("missing.toml"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");

    // invalid config content
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = []\nstrategies = [\"erm\"]\n[data]\nkind = \"paths\"\ndirs = []\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));

    // unknown strategy override
    let cfg = write_config(dir.path());
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--strategy", "magic"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown strategy"));
}

#[test]
fn env_var_sets_default_out_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    // config without out_dir
    let toml = r#"
seeds = [1]
strategies = ["erm"]
lodo = ["ext"]

[data]
kind = "confounded"
seed = 3
n_internal = 2
d_common = 3
d_bias = 2
n_classes = 2
mu = 1.0
rho = [1.0, 1.0]
rho_external = 0.0
sigma = 0.8
samples_per_domain = 60

[train]
steps = 10
batch_size = 8
hidden_dims = [4]

[c2st]
probe_seeds = 1
steps = 30
"#;
    std::fs::write(&cfg_path, toml).unwrap();
    let env_out = dir.path().join("env-out");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .env("DEBIAS_DG_OUT", &env_out)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_out.is_dir(), "env-var out root was not used");
}
