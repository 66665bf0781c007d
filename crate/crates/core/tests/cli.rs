use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1

[data.synthetic]
counts = [9, 9, 9, 9]
image_size = 16

[optim]
epochs = 1
"#;

fn icfd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icfd")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();

    let o = icfd(&["gen-data", "--config", "tiny.toml", "--out", "data"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("data/manifest.csv").exists());

    let o = icfd(&["train", "--config", "tiny.toml", "--out", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,l_c,l_s,l_at,total,acc_0,eps_0,beta_0,"));
    assert_eq!(metrics.lines().count(), 2);

    let o = icfd(&["eval", "--checkpoint", "run/checkpoint.safetensors", "--out", "rep"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("rep/report.csv")).unwrap();
    assert!(csv.starts_with("Method,class0%,class1%,class2%,class3%,Best-Worst%,Average%(micro),Macro%"));
    assert!(d.join("rep/report.txt").exists());

    let o = icfd(&["report", "--out", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("l_at"));
}

#[test]
fn ablate_with_several_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let o = icfd(&["ablate", "--config", "tiny.toml", "--seeds", "2", "--backbone", "linear-probe", "--out", "abl"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("abl/report.csv")).unwrap();
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods.len(), 9);
    assert_eq!(methods[..3], ["seed1/linear-probe", "seed1/linear-probe+ICFDNet", "seed1/linear-probe+ICFDNet+AT"]);
    assert_eq!(methods[6..], ["mean/linear-probe", "mean/linear-probe+ICFDNet", "mean/linear-probe+ICFDNet+AT"]);
    assert!(d.join("abl/report.txt").exists());
}

#[test]
fn failures_are_one_line_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = icfd(&["eval", "--checkpoint", "missing/ck.safetensors"], d);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("missing/ck.safetensors"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    fs::write(d.join("bad.toml"), "[optim]\nepochs = 1\nlearning_rat = 0.1\n").unwrap();
    let o = icfd(&["train", "--config", "bad.toml"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let o = icfd(&["train", "--config", "tiny.toml", "--backbone", "vgg"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("small-resnet"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let d = std::env::temp_dir();
    assert_eq!(icfd(&["frobnicate"], &d).status.code(), Some(2));
    assert_eq!(icfd(&["train"], &d).status.code(), Some(2));
    assert_eq!(icfd(&["--help"], &d).status.code(), Some(0));
}
