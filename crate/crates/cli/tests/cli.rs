use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[world]
preset = "subspace-2of8"
n_train = 200
n_test = 100

[model]
hidden = [8]
activation = "softplus"

[[objective]]
kind = "grad-norm"
values = [0, 0.1]

[schedule]
epochs = 3
batch_size = 50
lr = 0.05

[grid]
seeds = [1, 2]

[metrics]
n_points = 10
n_samples = 5
"#;

fn mrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn sweep_then_report_and_measure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let o = mrlab(&["sweep", "--config", &cfg, "--out", out, "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "objective,param,seed,test_acc,s_on,s_off,rho1,rho2,oracle_cos,regime"
    );
    assert_eq!(lines.count(), 4);

    let o = mrlab(&["report", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // Re-measuring cached models reproduces the report exactly.
    let o = mrlab(&["measure", "--config", &cfg, "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(dir.path().join("out/report.csv")).unwrap(),
        csv
    );
}

#[test]
fn seed_flag_replaces_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = mrlab(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout.lines().all(|l| l.contains("seed   7")));
}

#[test]
fn measure_without_models_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = mrlab(&[
        "measure",
        "--config",
        &cfg,
        "--out",
        dir.path().join("empty").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), &TINY.replace("[grid]", "[grid]\nbogus = 1"));
    assert_eq!(mrlab(&["train", "--config", &bad]).status.code(), Some(1));
    let empty = write_config(
        dir.path(),
        &TINY.replace("values = [0, 0.1]", "values = []"),
    );
    assert_eq!(mrlab(&["train", "--config", &empty]).status.code(), Some(1));
    assert_eq!(mrlab(&["sweep", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(mrlab(&["sweep"]).status.code(), Some(1));
    assert_eq!(mrlab(&["verify", "nope"]).status.code(), Some(1));
}

#[test]
fn verify_suites_succeed() {
    for suite in ["prop2", "denoiser", "linear"] {
        let o = mrlab(&["verify", suite]);
        assert!(
            o.status.success(),
            "{suite}: {}",
            String::from_utf8_lossy(&o.stdout)
        );
        assert!(String::from_utf8_lossy(&o.stdout)
            .lines()
            .all(|l| l.starts_with("PASS")));
    }
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("data");
    let o = mrlab(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(out.join("train.csv"))
            .unwrap()
            .lines()
            .count(),
        201
    );
    assert_eq!(
        fs::read_to_string(out.join("test.csv"))
            .unwrap()
            .lines()
            .count(),
        101
    );
}
