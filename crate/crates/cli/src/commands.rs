use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use toot_core::nn::ArchConfig;
use toot_core::scenario::{generate_scenario, load_scenario, save_scenario, GenParams, Scenario};
use toot_core::trainer::{session_for_run, SessionConfig, Strategy, StrategyConfig};
use toot_station::{bind, serve, ScenarioSource, Station, StationConfig};

use crate::experiment::{default_grid, run_experiment, ExperimentSpec, StrategySpec};

#[derive(Debug, Parser)]
#[command(
    name = "toot",
    version,
    about = "Time-ordered online training experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario directory.
    Gen(GenArgs),
    /// Run training strategies over a scenario and write traces and summaries.
    Run(RunArgs),
    /// Serve a scenario to an operator console over WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// JSON file with generator parameters; flags override it.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub test_frames: Option<usize>,
    #[arg(long)]
    pub frame_side: Option<usize>,
    #[arg(long)]
    pub sprite_min: Option<usize>,
    #[arg(long)]
    pub sprite_max: Option<usize>,
    #[arg(long)]
    pub max_step: Option<f64>,
    #[arg(long)]
    pub segment_min: Option<usize>,
    #[arg(long)]
    pub segment_max: Option<usize>,
    #[arg(long)]
    pub backgrounds: Option<usize>,
    #[arg(long)]
    pub jitter: Option<usize>,
    #[arg(long)]
    pub no_distractor: bool,
}

/// Where the frames come from: a scenario directory, or a scenario generated
/// with default parameters.
#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Seed for the generated scenario when `--scenario` is absent.
    #[arg(long, default_value_t = 1)]
    pub scenario_seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: ScenarioArgs,
    /// `name` or `name:b`; repeat for several. Defaults to the full grid.
    #[arg(long = "strategy")]
    pub strategies: Vec<String>,
    /// Batch size for strategies given without one.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Parallel runs; defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Write each run's training events as JSON lines next to its trace.
    #[arg(long)]
    pub audit: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub source: ScenarioArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    #[arg(long, default_value_t = 5.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on clicks only; do not track the clicked target.
    #[arg(long)]
    pub no_optical_flow: bool,
    /// Wait for a start or step control before streaming.
    #[arg(long)]
    pub paused: bool,
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    #[arg(long, default_value_t = 224)]
    pub display_side: usize,
    #[arg(long)]
    pub audit_log: Option<PathBuf>,
}

type CmdResult = Result<(), String>;

fn gen_params(args: &GenArgs) -> Result<GenParams, String> {
    let mut p = match &args.params {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => GenParams::default(),
    };
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => {
            $(if let Some(v) = args.$arg { p.$field = v; })*
        };
    }
    set!(train_frames <- frames, test_frames <- test_frames, frame_side <- frame_side,
        sprite_min <- sprite_min, sprite_max <- sprite_max, max_step <- max_step,
        segment_min <- segment_min, segment_max <- segment_max, backgrounds <- backgrounds,
        jitter <- jitter);
    if args.no_distractor {
        p.distractor = false;
    }
    Ok(p)
}

pub fn cmd_gen(args: &GenArgs) -> CmdResult {
    let params = gen_params(args)?;
    let scenario = generate_scenario(&params, args.seed).map_err(|e| e.to_string())?;
    save_scenario(&scenario, &args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let (pos, neg) = scenario.test_counts();
    eprintln!(
        "wrote {} ({} training frames, {} test frames: {pos} positive, {neg} negative)",
        args.out.display(),
        scenario.train.len(),
        scenario.test.len()
    );
    Ok(())
}

fn load_source(args: &ScenarioArgs) -> Result<Scenario, String> {
    match &args.scenario {
        Some(dir) => {
            load_scenario(dir).map_err(|e| format!("cannot load scenario {}: {e}", dir.display()))
        }
        None => {
            eprintln!(
                "generating default scenario with seed {}",
                args.scenario_seed
            );
            generate_scenario(&GenParams::default(), args.scenario_seed).map_err(|e| e.to_string())
        }
    }
}

pub fn cmd_run(args: &RunArgs) -> CmdResult {
    let strategies = if args.strategies.is_empty() {
        default_grid()
    } else {
        args.strategies
            .iter()
            .map(|s| StrategySpec::parse(s, args.batch_size))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?
    };
    let mut spec = ExperimentSpec::new(&args.out);
    spec.strategies = strategies;
    spec.runs = args.runs;
    spec.seed = args.seed;
    spec.eval_every = args.eval_every;
    spec.audit = args.audit;
    spec.jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    spec.validate().map_err(|e| e.to_string())?;
    let scenario = load_source(&args.source)?;
    let progress = |line: &str| eprintln!("{line}");
    let report = run_experiment(&scenario, &spec, &progress).map_err(|e| e.to_string())?;
    eprint!(
        "\n{}",
        crate::experiment::comparison_table(report.a_f, &report.summaries)
    );
    if !report.failures.is_empty() {
        return Err(format!(
            "{} run(s) did not complete:\n  {}",
            report.failures.len(),
            report.failures.join("\n  ")
        ));
    }
    Ok(())
}

pub fn cmd_serve(args: &ServeArgs, shutdown: Arc<AtomicBool>) -> CmdResult {
    let scenario = load_source(&args.source)?;
    let arch = ArchConfig::default();
    let strategy = if args.no_optical_flow {
        Strategy::Localized
    } else {
        Strategy::OfLocalized
    };
    let mut config = StrategyConfig::new(strategy, args.batch_size);
    config.seed = args.seed;
    config.validate().map_err(|e| e.to_string())?;
    let (session, run_seed) = session_for_run(&config, &arch, 0).map_err(|e| e.to_string())?;
    let mut station_config =
        StationConfig::new(SessionConfig::new(args.batch_size, !args.no_optical_flow));
    station_config.fps = args.fps;
    station_config.autostart = !args.paused;
    station_config.window = args.window;
    station_config.display_side = args.display_side;
    station_config.audit_log = args.audit_log.clone();
    station_config.trace_strategy = "operator".into();
    station_config.run_seed = run_seed;
    let test_set = scenario
        .test_set(arch.input_side)
        .map_err(|e| e.to_string())?;
    let station = Station::new(
        session,
        station_config,
        Box::new(ScenarioSource::new(&scenario)),
        Some(test_set),
    )
    .map_err(|e| e.to_string())?;
    let listener = bind((args.host.as_str(), args.port)).map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    println!("listening on ws://{addr}");
    std::io::stdout().flush().ok();
    let outcome = serve(listener, station, shutdown.clone()).map_err(|e| e.to_string())?;
    let accuracy = outcome
        .trace
        .as_ref()
        .and_then(|t| t.accuracy.last().copied());
    eprintln!(
        "served {} frames, {} training events, model version {}{}",
        outcome.frames,
        outcome.records.len(),
        outcome.model.version(),
        accuracy.map_or_else(String::new, |a| format!(", test accuracy {a:.3}"))
    );
    if shutdown.load(Ordering::SeqCst) {
        eprintln!("interrupted");
    }
    Ok(())
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Serve(a) => {
            let shutdown = Arc::new(AtomicBool::new(false));
            let flag = shutdown.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| format!("cannot install interrupt handler: {e}"))?;
            cmd_serve(&a, shutdown)
        }
    }
}
