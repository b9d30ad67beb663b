//! `bnnp` command-line driver.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bnnp::datagen::{generate_many, load_tasks, save_tasks, split, GeneratorKind, GeneratorSpec};
use bnnp::eval::{evaluate_tasks, write_metrics, Metric};
use bnnp::experiments::{run_klgap, KlGapConfig, KLGAP_CSV_HEADER};
use bnnp::model::{Bnnp, NetworkConfig};
use bnnp::rng::derive_seed;
use bnnp::trainer::{load_checkpoint, sample_meta_batch, save_checkpoint, train_step, TrainConfig, TrainState};
use bnnp::BnnpError;

#[derive(Parser, Debug)]
#[command(name = "bnnp", version, about = "Bayesian neural network processes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Root seed; overrides the seed stored in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Validate inputs and configuration, then exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a meta-dataset.
    Gen(GenArgs),
    /// Meta-train a BNNP.
    Train(TrainArgs),
    /// Evaluate a trained BNNP on a meta-dataset.
    Eval(EvalArgs),
    /// Run the KL-gap study.
    Klgap(KlGapArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Generator spec (JSON). Defaults to the preset of --kind.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset generator used when --config is absent.
    #[arg(long, default_value = "sawtooth")]
    kind: GeneratorKind,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Split every task with this context proportion.
    #[arg(long)]
    split: Option<f64>,
    /// Store arrays as JSON numbers instead of base64.
    #[arg(long)]
    plain: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON with `network` and `train` sections.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path; the loss trace goes next to it as `<stem>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint at --out.
    #[arg(long)]
    resume: bool,
    /// Stop (and checkpoint) once this many steps are done.
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated list from: lppd, mae, elbo.
    #[arg(long, default_value = "lppd,mae")]
    metrics: String,
    /// Posterior samples per task.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KlGapArgs {
    /// Study settings (JSON); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output rows; CSV when the extension is `.csv`, JSON otherwise.
    #[arg(long)]
    out: PathBuf,
}

/// Training configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    network: NetworkConfig,
    train: TrainConfig,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(BnnpError),
}

impl From<BnnpError> for CliError {
    fn from(e: BnnpError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} '{}': {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid {what} '{}': {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} '{}' does not exist", path.display())))
    }
}

fn loss_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.loss.csv"))
}

fn cmd_gen(g: &Global, a: &GenArgs) -> CliResult<()> {
    let spec: GeneratorSpec = match &a.config {
        Some(p) => read_json(p, "generator spec")?,
        None => GeneratorSpec::for_kind(a.kind),
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(p) = a.split {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::Usage(format!("--split {p} outside [0, 1]")));
        }
    }
    if g.dry_run {
        println!("generator spec ok");
        return Ok(());
    }
    let seed = g.seed.unwrap_or(0);
    let mut tasks = generate_many(&spec, a.count, seed)?;
    if let Some(p) = a.split {
        tasks = tasks.iter().enumerate().map(|(i, t)| split(t, p, derive_seed(seed, &[u64::MAX, i as u64]))).collect::<bnnp::Result<_>>()?;
    }
    save_tasks(&a.out, &tasks, a.plain)?;
    log::info!("wrote {} tasks to {}", tasks.len(), a.out.display());
    Ok(())
}

fn cmd_train(g: &Global, a: &TrainArgs) -> CliResult<()> {
    let mut file: TrainFile = read_json(&a.config, "training config")?;
    if let Some(s) = g.seed {
        file.train.seed = s;
    }
    file.network.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    file.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if g.dry_run {
        let model = Bnnp::new(file.network.clone(), file.train.seed)?;
        let count: usize = bnnp::params::Parameterised::params(&model).iter().map(|p| p.value.len()).sum();
        println!("config ok: {} layers, {count} parameters, {} steps", model.num_layers(), file.train.steps);
        return Ok(());
    }
    let data = a.data.as_ref().ok_or_else(|| CliError::Usage("--data is required".into()))?;
    require_file(data, "data file")?;
    let tasks = load_tasks(data)?;
    let losses = loss_path(&a.out);
    let mut state = if a.resume {
        require_file(&a.out, "checkpoint")?;
        let (state, _) = load_checkpoint(&a.out, Some((&file.network, &file.train)))?;
        state
    } else {
        TrainState::new(Bnnp::new(file.network.clone(), file.train.seed)?)
    };
    let kept = if a.resume && losses.is_file() {
        fs::read_to_string(&losses)?
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < state.step))
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    } else {
        String::new()
    };
    let mut log_file = std::io::BufWriter::new(fs::File::create(&losses)?);
    write!(log_file, "step,lr,loss\n{kept}")?;
    let full = file.train.clone();
    let stop = a.stop_at.unwrap_or(full.steps).min(full.steps);
    let result = (|| -> bnnp::Result<()> {
        while state.step < stop {
            let batch = sample_meta_batch(&tasks, &full, state.step)?;
            let r = train_step(&mut state, &batch, &full)?;
            writeln!(log_file, "{},{:?},{:?}", r.step, r.lr, r.loss())?;
            if full.checkpoint_every > 0 && state.step % full.checkpoint_every == 0 {
                save_checkpoint(&a.out, &state, &full)?;
            }
        }
        Ok(())
    })();
    log_file.flush()?;
    result?;
    save_checkpoint(&a.out, &state, &full)?;
    log::info!("trained to step {} ({} skipped)", state.step, state.skipped_steps);
    Ok(())
}

fn parse_metrics(list: &str) -> CliResult<Vec<Metric>> {
    let metrics: Vec<Metric> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e: BnnpError| CliError::Usage(e.to_string())))
        .collect::<CliResult<_>>()?;
    if metrics.is_empty() {
        return Err(CliError::Usage("--metrics must name at least one metric".into()));
    }
    Ok(metrics)
}

fn cmd_eval(g: &Global, a: &EvalArgs) -> CliResult<()> {
    let metrics = parse_metrics(&a.metrics)?;
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.data, "data file")?;
    if g.dry_run {
        println!("eval inputs ok");
        return Ok(());
    }
    let (state, _) = load_checkpoint(&a.checkpoint, None)?;
    let tasks = load_tasks(&a.data)?;
    let summaries = evaluate_tasks(&state.model, &tasks, &metrics, a.samples, g.seed.unwrap_or(0))?;
    write_metrics(&a.out, &summaries)?;
    for s in &summaries {
        println!("{}: {:.6} ± {:.6} over {} tasks", s.metric, s.mean, s.stderr, s.per_task.len());
    }
    Ok(())
}

fn cmd_klgap(g: &Global, a: &KlGapArgs) -> CliResult<()> {
    let mut cfg: KlGapConfig = match &a.config {
        Some(p) => read_json(p, "klgap config")?,
        None => KlGapConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.task_seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if g.dry_run {
        println!("klgap config ok: {} rows", cfg.sigma_grid.len() * cfg.methods.len() * cfg.seeds.len());
        return Ok(());
    }
    let rows = run_klgap(&cfg, |r| log::info!("{} sigma_y={} seed={} elbo={:.4} lml={:.4}", r.method.name(), r.sigma_y, r.seed, r.elbo, r.lml))?;
    let text = if a.out.extension().is_some_and(|e| e == "csv") {
        std::iter::once(KLGAP_CSV_HEADER.to_string()).chain(rows.iter().map(|r| r.to_csv())).collect::<Vec<_>>().join("\n") + "\n"
    } else {
        serde_json::to_string_pretty(&rows).map_err(BnnpError::from)? + "\n"
    };
    fs::write(&a.out, text)?;
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if cli.global.threads == 0 {
        return Err(CliError::Usage("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(&cli.global, a),
        Command::Train(a) => cmd_train(&cli.global, a),
        Command::Eval(a) => cmd_eval(&cli.global, a),
        Command::Klgap(a) => cmd_klgap(&cli.global, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
