//! The `termgen` binary. Every subcommand accepts `--config FILE` plus
//! one flag per configuration key (`--schedule.m 2`), overriding the
//! file value; the merged configuration is validated before any work.
//! Reports print to standard output, progress to standard error, and
//! exit codes distinguish config (2), I/O (3), data integrity (4), and
//! numeric (5) failures.

use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use termgen::config::RunConfig;
use termgen::error::{Error, Result};
use termgen_cli::commands::{self, SampleSelector};

fn config_args(mut cmd: Command) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("TOML configuration file; the key flags below override its values")
            .action(ArgAction::Set),
    );
    for (key, default) in RunConfig::default().leaves() {
        let mut arg = Arg::new(key.clone())
            .long(key.clone())
            .value_name("VALUE")
            .action(ArgAction::Set)
            .help(format!("config override (default {default})"));
        if key == "out_dir" {
            arg = arg.alias("out-dir");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn corpus_arg(default: &'static str) -> Arg {
    Arg::new("corpus")
        .long("corpus")
        .value_name("NAME")
        .default_value(default)
        .help("corpus to use: alpha or beta")
}

fn split_arg() -> Arg {
    Arg::new("split")
        .long("split")
        .value_name("SPLIT")
        .default_value("test")
        .help("one of textbook, train, val, test")
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint")
        .long("checkpoint")
        .value_name("FILE")
        .help("checkpoint to load (default <out_dir>/runs/train/best.agck)")
}

fn cli() -> Command {
    let sub =
        |name: &'static str, about: &'static str| config_args(Command::new(name).about(about));
    Command::new("termgen")
        .about("Terminology-grounded report generation on a desk-scale synthetic corpus pair")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub(
            "gen-data",
            "Generate both corpora, their shared vocabulary, and text dumps",
        ))
        .subcommand(
            sub(
                "train",
                "Train a model; two-stage when flags.transfer_learning is on",
            )
            .arg(corpus_arg("alpha"))
            .arg(
                Arg::new("resume")
                    .long("resume")
                    .value_name("CHECKPOINT")
                    .help("continue from this checkpoint (schedule.epochs is the total budget)"),
            ),
        )
        .subcommand(
            sub(
                "evaluate",
                "Score a checkpoint on a split and dump candidate/reference pairs",
            )
            .arg(corpus_arg("alpha"))
            .arg(split_arg())
            .arg(checkpoint_arg()),
        )
        .subcommand(
            sub("score", "Re-score a pair dump written by evaluate").arg(
                Arg::new("pairs")
                    .long("pairs")
                    .value_name("FILE")
                    .required(true)
                    .help("candidate/reference dump to score"),
            ),
        )
        .subcommand(
            sub(
                "compare-schedules",
                "Train each schedule with each seed and tabulate test metrics",
            )
            .arg(corpus_arg("alpha"))
            .arg(
                Arg::new("schedules")
                    .long("schedules")
                    .value_name("LIST")
                    .default_value("1,1;1,3;1,4;1,5")
                    .help("semicolon-separated m,n pairs"),
            )
            .arg(
                Arg::new("seeds")
                    .long("seeds")
                    .value_name("LIST")
                    .default_value("0,1,2")
                    .help("comma-separated seeds"),
            ),
        )
        .subcommand(
            sub(
                "compare-ablations",
                "Train all eight study-toggle combinations and tabulate test metrics",
            )
            .arg(corpus_arg("beta")),
        )
        .subcommand(
            sub(
                "export-attention",
                "Write encoder attention maps and a top-k text summary for one sample",
            )
            .arg(corpus_arg("alpha"))
            .arg(split_arg())
            .arg(checkpoint_arg())
            .arg(
                Arg::new("id")
                    .long("id")
                    .value_name("SAMPLE")
                    .help("sample id to export"),
            )
            .arg(
                Arg::new("index")
                    .long("index")
                    .value_name("N")
                    .default_value("0")
                    .help("sample position in the split when --id is not given"),
            )
            .arg(
                Arg::new("top-k")
                    .long("top-k")
                    .value_name("K")
                    .default_value("3")
                    .help("attention targets listed per terminology"),
            ),
        )
        .subcommand(sub(
            "print-config",
            "Print the fully-resolved configuration as TOML",
        ))
}

/// File config (if any) overlaid with every key flag present, then
/// validated.
fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::default(),
    };
    for (key, _) in RunConfig::default().leaves() {
        if let Some(raw) = m.get_one::<String>(key.as_str()) {
            cfg.apply_override(&key, raw)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_count(m: &ArgMatches, name: &str) -> Result<usize> {
    let raw = m.get_one::<String>(name).expect("flag has a default");
    raw.parse().map_err(|_| {
        Error::config(format!("--{name} expects a non-negative integer, got '{raw}'"))
    })
}

fn run() -> Result<()> {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let cfg = resolve_config(sub)?;
    let checkpoint_of = |sub: &ArgMatches| -> PathBuf {
        sub.get_one::<String>("checkpoint")
            .map(PathBuf::from)
            .unwrap_or_else(|| commands::default_checkpoint(&cfg))
    };
    let corpus_of = |sub: &ArgMatches| -> String {
        sub.get_one::<String>("corpus").expect("has default").clone()
    };
    match name {
        "gen-data" => println!("{}", commands::gen_data(&cfg)?),
        "train" => {
            let resume = sub.get_one::<String>("resume").map(PathBuf::from);
            println!(
                "{}",
                commands::train_cmd(&cfg, &corpus_of(sub), resume.as_deref())?
            );
        }
        "evaluate" => {
            let split = sub.get_one::<String>("split").expect("has default");
            println!(
                "{}",
                commands::evaluate_cmd(&cfg, &corpus_of(sub), split, &checkpoint_of(sub))?
            );
        }
        "score" => {
            let pairs = sub.get_one::<String>("pairs").expect("flag is required");
            println!("{}", commands::score(Path::new(pairs))?);
        }
        "compare-schedules" => {
            let schedules =
                commands::parse_schedules(sub.get_one::<String>("schedules").expect("has default"))?;
            let seeds = commands::parse_seeds(sub.get_one::<String>("seeds").expect("has default"))?;
            println!(
                "{}",
                commands::compare_schedules(&cfg, &corpus_of(sub), &schedules, &seeds)?
            );
        }
        "compare-ablations" => {
            println!("{}", commands::compare_ablations(&cfg, &corpus_of(sub))?);
        }
        "export-attention" => {
            let split = sub.get_one::<String>("split").expect("has default");
            let selector = match sub.get_one::<String>("id") {
                Some(id) => SampleSelector::Id(id.clone()),
                None => SampleSelector::Index(parse_count(sub, "index")?),
            };
            println!(
                "{}",
                commands::export_attention(
                    &cfg,
                    &corpus_of(sub),
                    split,
                    &selector,
                    &checkpoint_of(sub),
                    parse_count(sub, "top-k")?,
                )?
            );
        }
        "print-config" => print!("{}", cfg.to_toml()?),
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
