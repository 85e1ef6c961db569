//! `prosenet` command-line driver.
//!
//! Configuration is resolved as defaults, then a `--config` file of
//! `key = value` lines, then `PSN_<KEY>` environment variables, then flags.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::parser::ValueSource;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use prosenet::data::{self, Split, SurvivalDataset, SynthConfig};
use prosenet::gradcheck;
use prosenet::train::config::KEYS;
use prosenet::train::results::ResultRow;
use prosenet::train::{self, append_results, Checkpoint, Grid, TrainConfig, Trainer};
use prosenet::{Error, Result};

/// `--se-mode` for key `se_mode`. Clap wants `'static` names; the key list
/// is fixed, so leaking them once is fine.
fn flag_name(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn env_name(key: &str) -> &'static str {
    Box::leak(format!("PSN_{}", key.to_uppercase()).into_boxed_str())
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("key = value configuration file")];
    for &key in KEYS {
        args.push(
            Arg::new(key)
                .long(flag_name(key))
                .env(env_name(key))
                .value_name("VALUE")
                .help_heading("Configuration"),
        );
    }
    args
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn results_arg() -> Arg {
    Arg::new("results")
        .long("results")
        .value_name("CSV")
        .value_parser(value_parser!(PathBuf))
        .help("append result rows to this file")
}

fn cli() -> Command {
    Command::new("prosenet")
        .about("Two-tower multimodal survival model: synthetic data, training, evaluation and ablations")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth")
                .about("Generate a seeded synthetic cohort and save it as a dataset directory")
                .arg(path_arg("out", "output dataset directory"))
                .arg(Arg::new("patients").long("patients").default_value("422").value_parser(value_parser!(usize)))
                .arg(Arg::new("seed").long("seed").default_value("1").value_parser(value_parser!(u64)))
                .arg(Arg::new("dims").long("dims").default_value("8x96x96").help("normalized FxHxW"))
                .arg(Arg::new("censor").long("censor").value_parser(value_parser!(f64)).help("censored fraction"))
                .arg(Arg::new("noise").long("noise").value_parser(value_parser!(f64)).help("latent noise, score units")),
        )
        .subcommand(
            Command::new("train")
                .about("Train on one fold and write a checkpoint")
                .arg(path_arg("data", "dataset directory"))
                .arg(path_arg("checkpoint", "checkpoint to write"))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .help("continue from this checkpoint; only --epochs may change"),
                )
                .arg(results_arg())
                .args(config_args()),
        )
        .subcommand(
            Command::new("eval")
                .about("Score a checkpoint on one split")
                .arg(path_arg("data", "dataset directory"))
                .arg(path_arg("checkpoint", "checkpoint to evaluate"))
                .arg(Arg::new("split").long("split").default_value("test").value_parser(["train", "val", "test"]))
                .arg(results_arg()),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and test every variant of an ablation grid")
                .arg(path_arg("data", "dataset directory"))
                .arg(
                    Arg::new("grid")
                        .long("grid")
                        .required(true)
                        .value_parser(["towers", "encoder", "se", "frame-diff", "omega", "lambda", "all"]),
                )
                .arg(results_arg())
                .args(config_args()),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every operation and the end-to-end model")
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(value_parser!(u64)))
                .arg(Arg::new("step").long("step").default_value("1e-4").value_parser(value_parser!(f64)))
                .arg(Arg::new("tolerance").long("tolerance").default_value("1e-4").value_parser(value_parser!(f64)))
                .arg(Arg::new("ops-only").long("ops-only").action(ArgAction::SetTrue).help("skip the model check")),
        )
        .subcommand(
            Command::new("config")
                .about("Print the resolved configuration")
                .args(config_args()),
        )
}

fn resolve_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        config.apply_text(&text)?;
    }
    for &key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            config.set(key, v)?;
        }
    }
    Ok(config)
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| Error::Usage(format!("bad dims {s:?}, expected FxHxW"))))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| Error::Usage(format!("bad dims {s:?}, expected FxHxW")))
}

fn print_report(report: &train::EvalReport) {
    let opt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.6}"));
    println!("split: {}", report.split.name());
    println!("samples: {}", report.samples);
    println!("c_index: {}", opt(report.c_index));
    println!("mae: {}", opt(report.mae));
}

fn synth(m: &ArgMatches) -> Result<()> {
    let out = m.get_one::<PathBuf>("out").expect("required");
    let mut cfg = SynthConfig::default();
    if let Some(&c) = m.get_one::<f64>("censor") {
        cfg.censor_fraction = c;
    }
    if let Some(&n) = m.get_one::<f64>("noise") {
        cfg.noise = n;
    }
    let dims = parse_dims(m.get_one::<String>("dims").expect("default"))?;
    let n = *m.get_one::<usize>("patients").expect("default");
    let ds = data::generate_synthetic(*m.get_one::<u64>("seed").expect("default"), n, &cfg, dims)?;
    data::save_dataset(&ds, out)?;
    println!("patients: {n}");
    println!("censored: {}", ds.patients().iter().filter(|p| !p.record.event).count());
    println!("dims: {}x{}x{}", dims[0], dims[1], dims[2]);
    println!("out: {}", out.display());
    Ok(())
}

fn load(m: &ArgMatches) -> Result<SurvivalDataset> {
    data::load_dataset(m.get_one::<PathBuf>("data").expect("required"))
}

fn explicit(m: &ArgMatches, key: &str) -> bool {
    m.value_source(key) == Some(ValueSource::CommandLine)
}

fn train_cmd(m: &ArgMatches) -> Result<()> {
    let mut ds = load(m)?;
    let out = m.get_one::<PathBuf>("checkpoint").expect("required");
    let start = Instant::now();
    let mut trainer = match m.get_one::<PathBuf>("resume") {
        Some(path) => {
            if let Some(key) = KEYS.iter().chain(&["config"]).find(|k| **k != "epochs" && explicit(m, k)) {
                return Err(Error::Usage(format!(
                    "--{} cannot be combined with --resume; the checkpoint fixes the configuration",
                    flag_name(key)
                )));
            }
            let ckpt = Checkpoint::load(path)?;
            let epochs = match m.get_one::<String>("epochs").filter(|_| explicit(m, "epochs")) {
                Some(e) => e.parse().map_err(|_| Error::Usage(format!("bad --epochs {e:?}")))?,
                None => ckpt.config.epochs,
            };
            train::assign_fold(&ckpt.config, &mut ds)?;
            let mut t = Trainer::resume(ckpt, &ds)?;
            t.config.epochs = epochs;
            t
        }
        None => {
            let config = resolve_config(m)?;
            train::assign_fold(&config, &mut ds)?;
            Trainer::new(config, &ds)?
        }
    };
    println!("config_hash: {}", trainer.config.hash());
    let until = trainer.config.epochs;
    trainer.run_until(&ds, until, |r| {
        println!(
            "epoch: {} lr: {:e} train_loss: {:.6} train_mse: {:.6} val_mse: {:.6} val_c_index: {:.4}",
            r.epoch, r.lr, r.train_loss, r.train_mse, r.val_mse, r.val_c_index
        );
    })?;
    let ckpt = trainer.checkpoint();
    ckpt.save(out)?;
    if let Some(b) = &ckpt.best {
        println!("best_epoch: {}", b.epoch);
    }
    let report = train::evaluate(&ckpt, &ds, Split::Val)?;
    print_report(&report);
    write_row(m, &ckpt, &report, start)?;
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn write_row(m: &ArgMatches, ckpt: &Checkpoint, report: &train::EvalReport, start: Instant) -> Result<()> {
    if let Some(path) = m.get_one::<PathBuf>("results") {
        append_results(
            path,
            &[ResultRow {
                config_hash: ckpt.config.hash(),
                fold: ckpt.config.fold,
                epoch: ckpt.epoch,
                split: report.split,
                c_index: report.c_index,
                mae: report.mae,
                wall_seconds: start.elapsed().as_secs_f64(),
            }],
        )?;
    }
    Ok(())
}

fn eval_cmd(m: &ArgMatches) -> Result<()> {
    let start = Instant::now();
    let mut ds = load(m)?;
    let ckpt = Checkpoint::load(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    train::assign_fold(&ckpt.config, &mut ds)?;
    let split = Split::parse(m.get_one::<String>("split").expect("default"))?;
    let report = train::evaluate(&ckpt, &ds, split)?;
    print_report(&report);
    write_row(m, &ckpt, &report, start)
}

fn ablate_cmd(m: &ArgMatches) -> Result<()> {
    let mut ds = load(m)?;
    let base = resolve_config(m)?;
    let variants = train::grid(&base, Grid::parse(m.get_one::<String>("grid").expect("required"))?)?;
    let results = m.get_one::<PathBuf>("results");
    let mut failed = None;
    train::ablate(&variants, &mut ds, |row| {
        let opt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        println!(
            "variant: {} config_hash: {} c_index: {} mae: {}",
            row.variant,
            row.row.config_hash,
            opt(row.report.c_index),
            opt(row.report.mae)
        );
        if let (Some(path), None) = (results, &failed) {
            if let Err(e) = append_results(path, std::slice::from_ref(&row.row)) {
                failed = Some(e);
            }
        }
    })?;
    failed.map_or(Ok(()), Err)
}

fn gradcheck_cmd(m: &ArgMatches) -> Result<bool> {
    let seed = *m.get_one::<u64>("seed").expect("default");
    let step = *m.get_one::<f64>("step").expect("default");
    let tol = *m.get_one::<f64>("tolerance").expect("default");
    let mut ok = true;
    for c in gradcheck::check_ops(seed, step)? {
        let pass = c.report.max_rel_error <= tol;
        ok &= pass;
        println!(
            "{} op: {} checked: {} max_rel_error: {:.3e}",
            if pass { "PASS" } else { "FAIL" },
            c.op,
            c.report.checked,
            c.report.max_rel_error
        );
    }
    if !m.get_flag("ops-only") {
        let r = gradcheck::check_model(&gradcheck::tiny_model_config(), prosenet::fusion::DEFAULT_LAMBDA, seed, step)?;
        let pass = r.max_rel_error <= tol;
        ok &= pass;
        println!(
            "{} model checked: {} kink_rechecks: {} max_rel_error: {:.3e} worst: {:?}",
            if pass { "PASS" } else { "FAIL" },
            r.checked,
            r.kink_rechecks,
            r.max_rel_error,
            r.worst
        );
    }
    Ok(ok)
}

fn run(m: &ArgMatches) -> Result<bool> {
    match m.subcommand() {
        Some(("synth", m)) => synth(m).map(|_| true),
        Some(("train", m)) => train_cmd(m).map(|_| true),
        Some(("eval", m)) => eval_cmd(m).map(|_| true),
        Some(("ablate", m)) => ablate_cmd(m).map(|_| true),
        Some(("gradcheck", m)) => gradcheck_cmd(m),
        Some(("config", m)) => {
            let c = resolve_config(m)?;
            c.validate()?;
            print!("{}", c.to_text());
            Ok(true)
        }
        _ => unreachable!("subcommand required"),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
