//! `dctau`: generate data, train, evaluate, sweep and self-check.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dctau::config::TrainConfig;
use dctau::experiment::{self, SweepKey};
use dctau::metrics::write_curve_csv;
use dctau::model::checkpoint;
use dctau::model::train::{write_history_csv, TrainState};
use dctau::{verify, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dctau", version, about = "Open-set recognition with dual contrastive learning")]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,

    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the blob dataset split as CSV plus a manifest.
    Generate,
    /// Run both training steps and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or train one first) and write the report.
    Eval(EvalArgs),
    /// Sweep one setting over values and seeds.
    Ablate(AblateArgs),
    /// Run the numeric self-checks.
    Verify,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs_contrastive: Option<usize>,
    #[arg(long)]
    epochs_classifier: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Split directory written by `generate`; generated on the fly if absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// lambda, gamma, scheme or percentile.
    #[arg(long)]
    sweep: String,
    /// Comma-separated values; a built-in grid when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Comma-separated seeds; the config seed when omitted.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

/// Keys `eval` may change on top of a checkpoint's own config.
const EVAL_KEYS: [&str; 3] = ["percentile", "threshold_mode", "threshold_rows"];

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    cfg.apply_overrides(&overrides)?;
    Ok(cfg)
}

fn echo(cli: &Cli, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    let text = cfg.to_toml_string();
    std::fs::write(cli.out.join("config.toml"), &text)?;
    if !cli.quiet {
        eprintln!("# effective config\n{text}");
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => {
            let cfg = load_config(&cli)?;
            echo(&cli, &cfg)?;
            let split = experiment::build_split(&cfg)?;
            let m = experiment::write_split(&split, cfg.seed, &cli.out)?;
            if !cli.quiet {
                println!(
                    "train {} rows, test_known {} rows, test_unknown {} rows -> {}",
                    m.train_rows,
                    m.test_known_rows,
                    m.test_unknown_rows,
                    cli.out.display()
                );
            }
            Ok(())
        }
        Command::Train(args) => train(&cli, args),
        Command::Eval(args) => eval(&cli, args),
        Command::Ablate(args) => ablate(&cli, args),
        Command::Verify => {
            let report = verify::run_all();
            if !cli.quiet {
                print!("{}", report.render());
            }
            report.into_result().map(|_| ())
        }
    }
}

fn split_for(data: Option<&PathBuf>, cfg: &TrainConfig) -> Result<dctau::data::OpenSplit> {
    let split = match data {
        Some(dir) => experiment::read_split(dir)?,
        None => experiment::build_split(cfg)?,
    };
    if split.train.dim() != cfg.dim || split.known_classes() != cfg.known_classes {
        return Err(Error::Config(format!(
            "data has {} dims and {} known classes, config expects {} and {}",
            split.train.dim(),
            split.known_classes(),
            cfg.dim,
            cfg.known_classes
        )));
    }
    Ok(split)
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(e) = args.epochs_contrastive {
        cfg.epochs_contrastive = e;
    }
    if let Some(e) = args.epochs_classifier {
        cfg.epochs_classifier = e;
    }
    cfg.validate()?;
    let mut state = match &args.resume {
        Some(path) => {
            let (state, saved) = checkpoint::load(path)?;
            let comparable = |c: &TrainConfig| TrainConfig {
                epochs_contrastive: 0,
                epochs_classifier: 0,
                ..c.clone()
            };
            if comparable(&saved) != comparable(&cfg) {
                return Err(Error::Config(
                    "resumed run must use the checkpoint's config (only epoch counts may change)".into(),
                ));
            }
            state
        }
        None => TrainState::new(&cfg)?,
    };
    echo(cli, &cfg)?;
    let split = split_for(args.data.as_ref(), &cfg)?;
    state.run(&split, &cfg)?;

    let ckpt = cli.out.join("model.ckpt");
    checkpoint::save(&ckpt, &state, &cfg)?;
    write_history_csv(&state.history, create(&cli.out.join("history.csv"))?)?;
    if !cli.quiet {
        if let Some(last) = state.history.last() {
            println!("final {} loss {}", last.stage.as_str(), last.loss);
        }
        println!("checkpoint -> {}", ckpt.display());
    }
    Ok(())
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (params, cfg) = match &args.checkpoint {
        Some(path) => {
            if cli.config.is_some() {
                return Err(Error::Config("--config cannot be combined with --checkpoint".into()));
            }
            let (state, mut cfg) = checkpoint::load(path)?;
            for o in &cli.overrides {
                let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k.trim());
                if !EVAL_KEYS.contains(&key) {
                    return Err(Error::Config(format!(
                        "`{key}` is fixed by the checkpoint; eval may only set {}",
                        EVAL_KEYS.join(", ")
                    )));
                }
            }
            cfg.apply_overrides(&cli.overrides)?;
            if let Some(seed) = cli.seed {
                if seed != cfg.seed {
                    return Err(Error::Config("--seed differs from the checkpoint's seed".into()));
                }
            }
            (state.params, cfg)
        }
        None => {
            let cfg = load_config(cli)?;
            let split = split_for(args.data.as_ref(), &cfg)?;
            (experiment::train(&split, &cfg)?.params, cfg)
        }
    };
    echo(cli, &cfg)?;
    let split = split_for(args.data.as_ref(), &cfg)?;
    let eval = experiment::evaluate(&params, &split, &cfg)?;

    std::fs::write(cli.out.join("report.json"), eval.report.to_json() + "\n")?;
    write_curve_csv(&eval.curve, create(&cli.out.join("oscr_curve.csv"))?)?;
    eval.report.thresholds.write_csv(create(&cli.out.join("thresholds.csv"))?)?;
    if !cli.quiet {
        println!("{}", eval.report.to_json());
    }
    Ok(())
}

fn ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let key: SweepKey = args.sweep.parse()?;
    let values = if args.values.is_empty() {
        key.default_values()
    } else {
        args.values.clone()
    };
    let seeds = if args.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        args.seeds.clone()
    };
    echo(cli, &cfg)?;
    let rows = experiment::ablate(&cfg, key, &values, &seeds)?;
    let summary = experiment::summarize(&rows);
    experiment::write_sweep_csv(&rows, create(&cli.out.join("sweep.csv"))?)?;
    experiment::write_summary_csv(&summary, create(&cli.out.join("sweep_summary.csv"))?)?;
    if !cli.quiet {
        println!("{:>12} {:>5} {:>8} {:>8} {:>8} {:>8}", key.as_str(), "runs", "auroc", "oscr", "macro_f1", "closed");
        for s in &summary {
            println!(
                "{:>12} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                s.value, s.runs, s.auroc, s.oscr, s.macro_f1, s.closed_accuracy
            );
        }
    }
    Ok(())
}
