use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recem_core::data::SynDataset;
use recem_core::harness::experiments::{self, Datasets};
use recem_core::harness::{evaluate, run_and_emit, Checkpoint, Experiment, RunConfig};
use recem_core::{Error, Result};

/// Train and evaluate concept embedding models on synthetic confounded data.
///
/// Every subcommand accepts `--config FILE` followed by any number of
/// `--key value` overrides, where `key` is a config key (`lr`, `rho`,
/// `variant`, `seeds`, ...). Set `RECEM_THREADS` to cap seed parallelism.
#[derive(Parser, Debug)]
#[command(name = "recem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines (`#` starts a comment).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` or `--key=value`, after any other options.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train/val/test splits into `<out_dir>/data`.
    GenData(Common),
    /// Train the configured model once per seed; writes checkpoints and epoch logs.
    Train(Common),
    /// Evaluate a checkpoint on the test split under each configured shift.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file to evaluate on instead of the regenerated test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also compute the oracle impurity score (slower).
        #[arg(long)]
        ois: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Intervention curves for every variant.
    Intervene(Common),
    /// Task and concept accuracy under background shifts.
    ShiftEval(Common),
    /// Loss-term ablation grid.
    Ablate(Common),
    /// Sweep the mixup annealing coefficient.
    SweepBeta(Common),
    /// One-factor-at-a-time sweep of the loss weights.
    SweepWeights(Common),
    /// Concept leakage scores.
    Leakage(Common),
    /// Embedding consistency under shifts and within concepts.
    Consistency(Common),
    /// All variants on the default task.
    Baselines(Common),
    /// Run the experiment named by the `experiment` key, or every experiment.
    Run(Common),
    /// Rebuild charts from the CSVs under `<out_dir>` and write an index.
    Report(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&load_config(&c)?),
        Command::Train(c) => train(&load_config(&c)?),
        Command::Eval {
            checkpoint,
            data,
            ois,
            common,
        } => eval(&checkpoint, data.as_deref(), ois, &common),
        Command::Intervene(c) => experiment(Experiment::Intervention, &c),
        Command::ShiftEval(c) => experiment(Experiment::Shift, &c),
        Command::Ablate(c) => experiment(Experiment::Ablation, &c),
        Command::SweepBeta(c) => experiment(Experiment::BetaSweep, &c),
        Command::SweepWeights(c) => experiment(Experiment::WeightSweep, &c),
        Command::Leakage(c) => experiment(Experiment::Leakage, &c),
        Command::Consistency(c) => experiment(Experiment::Consistency, &c),
        Command::Baselines(c) => experiment(Experiment::Baselines, &c),
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let names = cfg.experiment.map_or_else(|| Experiment::ALL.to_vec(), |e| vec![e]);
            for name in names {
                emit(name, &cfg)?;
            }
            Ok(())
        }
        Command::Report(c) => report(&load_config(&c)?.out_dir),
    }
}

/// Splits `--key value` / `--key=value` arguments into pairs. A key followed
/// by another key or by nothing is a boolean switch.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--key value`, found `{arg}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        match it.peek() {
            Some(v) if !v.starts_with("--") => out.push((key.to_string(), it.next().cloned().unwrap_or_default())),
            _ => out.push((key.to_string(), "true".to_string())),
        }
    }
    Ok(out)
}

fn apply_overrides(cfg: &mut RunConfig, args: &[String]) -> Result<()> {
    for (k, v) in parse_overrides(args)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &common.overrides)?;
    Ok(cfg)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let data = Datasets::generate(&cfg.data)?;
    let dir = cfg.out_dir.join("data");
    write_config(&dir, cfg)?;
    for (name, ds) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let path = dir.join(format!("{name}.bin"));
        ds.save(&path)?;
        println!("{name}\t{}\t{}\t{}", ds.len(), ds.hash(), path.display());
    }
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let runner = experiments::runner_for(cfg, None)?;
    let label = cfg.model.variant.to_string();
    let runs = runner.run(&experiments::jobs(&label, &label, &cfg.model_config(), &cfg.seeds))?;
    let root = cfg.out_dir.join("train");
    write_config(&root, cfg)?;
    let comments = vec![cfg.header()];
    for run in runs {
        let dir = root.join(format!("seed{}", run.job.seed));
        let ck = Checkpoint {
            config: cfg.clone(),
            seed: run.job.seed,
            best_epoch: run.log.best_epoch,
            model: run.model.clone(),
        };
        ck.save(&dir.join("checkpoint.ckpt"))?;
        experiments::epoch_table(&run.log).write(&dir.join("log.csv"), &comments)?;
        let best = run.log.best_epoch.map(|e| &run.log.epochs[e]);
        println!(
            "seed {}\tbest_epoch {}\tval_task {}\tval_concept {}\t{:.1}s",
            run.job.seed,
            best.map_or_else(|| "none".to_string(), |e| e.epoch.to_string()),
            best.map_or_else(|| "-".to_string(), |e| format!("{:.2}", e.val_task_accuracy)),
            best.map_or_else(|| "-".to_string(), |e| format!("{:.2}", e.val_concept_accuracy)),
            run.log.wall_seconds
        );
    }
    Ok(())
}

fn eval(path: &Path, data: Option<&Path>, ois: bool, common: &Common) -> Result<()> {
    // The checkpoint's own config is the base; overrides must still match its parameters.
    let ck = Checkpoint::load(path)?;
    let mut cfg = ck.config;
    if let Some(file) = &common.config {
        cfg.apply_text(&std::fs::read_to_string(file)?)?;
    }
    apply_overrides(&mut cfg, &common.overrides)?;
    let model = Checkpoint::load_with(path, &cfg.model_config()).map_err(|e| match e {
        Error::Format(msg) => Error::Config(format!("checkpoint does not fit the config: {msg}")),
        other => other,
    })?;
    let test = match data {
        Some(p) => SynDataset::load(p)?,
        None => Datasets::generate(&cfg.data)?.test,
    };
    let rows = evaluate(&model, &test, &cfg.shifts, cfg.eval_seed, ois)?;
    let table = experiments::evaluation_table(&rows);
    let comments = vec![format!("checkpoint={}", path.display()), cfg.header()];
    let out = cfg.out_dir.join("eval").join("evaluation.csv");
    table.write(&out, &comments)?;
    print!("{}", table.to_csv(&[])?);
    Ok(())
}

fn emit(name: Experiment, cfg: &RunConfig) -> Result<()> {
    write_config(&cfg.out_dir.join(name.as_str()), cfg)?;
    let (_, files) = run_and_emit(name, cfg)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn experiment(name: Experiment, common: &Common) -> Result<()> {
    emit(name, &load_config(common)?)
}

fn report(out_dir: &Path) -> Result<()> {
    let mut index = String::from("# Results\n");
    let mut found = false;
    for name in Experiment::ALL {
        let dir = out_dir.join(name.as_str());
        if !dir.is_dir() {
            continue;
        }
        found = true;
        experiments::render_charts(&dir)?;
        let mut files: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|f| f.ends_with(".csv") || f.ends_with(".svg"))
            .collect();
        files.sort();
        index.push_str(&format!("\n## {}\n\n", name.as_str()));
        for f in files {
            index.push_str(&format!("- [{f}]({}/{f})\n", name.as_str()));
        }
    }
    if !found {
        return Err(Error::Config(format!("no experiment results under {}", out_dir.display())));
    }
    let path = out_dir.join("index.md");
    std::fs::write(&path, index)?;
    println!("{}", path.display());
    Ok(())
}
