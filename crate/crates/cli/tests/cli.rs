use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--dims", "4x16x16", "--stem", "2", "--widths", "2,4", "--blocks", "1,1", "--d", "12", "--heads", "2", "--layers", "1",
    "--mlp-hidden", "24", "--head-hidden", "8", "--batch-size", "8", "--views-per-epoch", "1",
];

fn prosenet(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prosenet"));
    c.args(args);
    // keep the caller's environment from leaking into the configuration
    for (k, _) in std::env::vars() {
        if k.starts_with("PSN_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(c: &mut Command) -> Output {
    let out = c.output().expect("binary runs");
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).or_else(|| l.strip_prefix(&format!("{key}: "))))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .to_string()
}

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    let out = run(&mut prosenet(&["synth", "--out", data.to_str().unwrap(), "--patients", "30", "--seed", "3", "--dims", "4x16x16"]));
    assert_eq!(value(&stdout(&out), "patients"), "30");
    data.to_str().unwrap().to_string()
}

fn train(data: &str, ckpt: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", data, "--checkpoint", ckpt.to_str().unwrap()];
    args.extend_from_slice(extra);
    stdout(&run(&mut prosenet(&args)))
}

#[test]
fn flags_beat_environment_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "omega = 0.1\nlambda = 0.02\nepochs = 7\n").unwrap();
    let out = run(prosenet(&["config", "--config", file.to_str().unwrap(), "--omega", "0.3"])
        .env("PSN_OMEGA", "0.2")
        .env("PSN_LAMBDA", "0.005"));
    let text = stdout(&out);
    assert_eq!(value(&text, "omega"), "0.3");
    assert_eq!(value(&text, "lambda"), "0.005");
    assert_eq!(value(&text, "epochs"), "7");
    assert_eq!(value(&text, "se_mode"), "joint");
}

#[test]
fn invalid_configuration_exits_with_usage_status() {
    let out = prosenet(&["config", "--frame-diff", "sideways"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame_diff"));
    let out = prosenet(&["config", "--fold", "5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = prosenet(&["train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let results = dir.path().join("results.csv");
    let r = results.to_str().unwrap();

    let straight = dir.path().join("straight.psnc");
    let mut args = TINY.to_vec();
    args.extend(["--epochs", "2", "--seed", "4", "--results", r]);
    let text = train(&data, &straight, &args);
    assert!(text.contains("epoch: 1 "));
    let hash = value(&text, "config_hash");

    let first = dir.path().join("first.psnc");
    let mut args = TINY.to_vec();
    args.extend(["--epochs", "1", "--seed", "4"]);
    train(&data, &first, &args);
    let resumed = dir.path().join("resumed.psnc");
    train(&data, &resumed, &["--resume", first.to_str().unwrap(), "--epochs", "2"]);
    assert_eq!(fs::read(&straight).unwrap(), fs::read(&resumed).unwrap());

    let refused = prosenet(&["train", "--data", &data, "--checkpoint", "x", "--resume", first.to_str().unwrap(), "--omega", "0.5"])
        .output()
        .unwrap();
    assert_eq!(refused.status.code(), Some(2));

    let a = stdout(&run(&mut prosenet(&["eval", "--data", &data, "--checkpoint", straight.to_str().unwrap(), "--results", r])));
    let b = stdout(&run(&mut prosenet(&["eval", "--data", &data, "--checkpoint", straight.to_str().unwrap()])));
    assert_eq!(a, b);
    assert_eq!(value(&a, "split"), "test");
    assert_eq!(value(&a, "samples"), "48");
    let c: f64 = value(&a, "c_index").parse().unwrap();
    assert!((0.0..=1.0).contains(&c));

    let table = fs::read_to_string(&results).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "config_hash,fold,epoch,split,c_index,mae,wall_seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with(&format!("{hash},0,2,val,")));
    assert!(lines[2].starts_with(&format!("{hash},0,2,test,")));
}

#[test]
fn ablation_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let results = dir.path().join("ablation.csv");
    let mut args = vec!["ablate", "--data", &data, "--grid", "towers", "--results", results.to_str().unwrap(), "--epochs", "1"];
    args.extend_from_slice(TINY);
    let text = stdout(&run(&mut prosenet(&args)));
    assert_eq!(text.lines().filter(|l| l.starts_with("variant: ")).count(), 3);
    assert_eq!(fs::read_to_string(&results).unwrap().lines().count(), 4);
}

#[test]
fn operation_gradients_pass() {
    let text = stdout(&run(&mut prosenet(&["gradcheck", "--ops-only", "--seed", "2"])));
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() >= 20);
    assert!(lines.iter().all(|l| l.starts_with("PASS op: ")), "{text}");
}
