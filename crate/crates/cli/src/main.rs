//! `locoman`: command-line front end for demonstration generation, skill
//! learning, via-point adaptation, closed-loop simulation and evaluation.

mod svg;

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use locoman::demo::{load_csv, save_csv, DemoError};
use locoman::kmp::{KmpError, KmpModel, ViaPoint};
use locoman::pipeline::{self, PipelineConfig, PipelineError};
use locoman::sim::{PlantMode, SimError, SimLog};

#[derive(Parser, Debug)]
#[command(
    name = "locoman",
    version,
    about = "Learn and execute whole-body loco-manipulation skills"
)]
struct Cli {
    /// Pipeline configuration (JSON). Built-in defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for demonstration generation and mixture initialisation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// KMP regularisation factor.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// KMP kernel bandwidth.
    #[arg(long, global = true)]
    bandwidth: Option<f64>,
    /// Plant driven by the controller output.
    #[arg(long, global = true, value_enum)]
    plant: Option<PlantArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlantArg {
    Ideal,
    Impedance,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Built-in defaults, no via-points.
    Replica,
    /// Defaults plus the new start state and the grasp anchor as via-points.
    Generalization,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic demonstrations and write them as CSV.
    GenDemos {
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Align demonstrations, fit the mixture, regress and train the KMP.
    Learn {
        /// Demonstration CSV; defaults to the configured path.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Adapt a trained model to via-points given as a JSON list.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        via: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the closed loop on one or more models and write the logs.
    ///
    /// Via-points from the configured scenario are applied before running.
    Simulate {
        /// Model file; repeat to run several scenarios.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Log file. With several models, `_<index>` is appended to the stem.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Worker threads for independent runs.
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Summarise a log as JSON: RMSE blocks, grasp event, solve times.
    Eval {
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also write the summary to this file.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as JSON.
    ShowConfig {
        #[arg(long, value_enum, default_value_t = Preset::Replica)]
        preset: Preset,
    },
    /// Plot a log as four stacked SVG panels.
    Export {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const NUMERICAL: u8 = 4;

impl Failure {
    fn new(code: u8, message: impl Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

fn kmp_code(e: &KmpError) -> u8 {
    match e {
        KmpError::InvalidParams(_) => CONFIG,
        KmpError::FactorizationFailure { .. } => NUMERICAL,
        _ => DATA,
    }
}

fn sim_code(e: &SimError) -> u8 {
    match e {
        SimError::InvalidScenario(_) | SimError::InvalidPlant(_) => CONFIG,
        SimError::Io(_) | SimError::Csv(_) | SimError::MalformedLog(_) => DATA,
        SimError::Controller { .. } | SimError::Kinematics(_) => NUMERICAL,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) => CONFIG,
            PipelineError::Demo(
                DemoError::InvalidConfig(_) | DemoError::InvalidAnchorTimes { .. },
            ) => CONFIG,
            PipelineError::Demo(_) => DATA,
            PipelineError::Gmm(_) => NUMERICAL,
            PipelineError::Kmp(k) => kmp_code(k),
            PipelineError::Sim(s) => sim_code(s),
        };
        Self::new(code, e)
    }
}

impl From<KmpError> for Failure {
    fn from(e: KmpError) -> Self {
        Self::new(kmp_code(&e), format!("kmp: {e}"))
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Self::new(sim_code(&e), e)
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (
            None,
            Command::ShowConfig {
                preset: Preset::Generalization,
            },
        ) => PipelineConfig::generalization(),
        (None, _) => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.demos.seed = seed;
        cfg.gmm.seed = seed;
    }
    if let Some(l) = cli.lambda {
        cfg.kmp.lambda = l;
    }
    if let Some(h) = cli.bandwidth {
        cfg.kmp.bandwidth = h;
    }
    if let Some(p) = cli.plant {
        cfg.plant.mode = match p {
            PlantArg::Ideal => PlantMode::IdealVelocity,
            PlantArg::Impedance => PlantMode::Impedance,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<KmpModel, Failure> {
    KmpModel::from_json(&read_text(path)?)
        .map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))
}

fn load_log(path: &Path) -> Result<SimLog, Failure> {
    SimLog::load_csv(path).map_err(|e| Failure::new(DATA, format!("{}: {e}", path.display())))
}

fn gen_demos(cfg: &PipelineConfig, out: &Path) -> Result<(), Failure> {
    let set = pipeline::generate_demos(cfg)?;
    save_csv(&set, out).map_err(|e| Failure::new(DATA, format!("{}: {e}", out.display())))?;
    info!(
        "wrote {} demos ({} rows) to {}",
        set.demos().len(),
        set.total_samples(),
        out.display()
    );
    Ok(())
}

fn learn(cfg: &PipelineConfig, demos: &Path, out: &Path) -> Result<(), Failure> {
    let set =
        load_csv(demos).map_err(|e| Failure::new(DATA, format!("{}: {e}", demos.display())))?;
    let learned = pipeline::learn(&set, cfg)?;
    write_text(out, &learned.model.to_json())?;
    info!("wrote model to {}", out.display());
    Ok(())
}

fn adapt(model: &Path, via: &Path, out: &Path) -> Result<(), Failure> {
    let m = load_model(model)?;
    let points: Vec<ViaPoint> = serde_json::from_str(&read_text(via)?)
        .map_err(|e| Failure::new(DATA, format!("{}: {e}", via.display())))?;
    let adapted = m.adapt(&points)?;
    write_text(out, &adapted.to_json())?;
    info!(
        "adapted to {} via-points, wrote {}",
        points.len(),
        out.display()
    );
    Ok(())
}

fn indexed(path: &Path, i: usize) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{i}"),
    };
    path.with_file_name(name)
}

fn run_one(
    cfg: &PipelineConfig,
    model: &Path,
    log_out: &Path,
) -> Result<serde_json::Value, Failure> {
    let m = pipeline::adapt(&load_model(model)?, cfg)?;
    let out = pipeline::simulate(&m, cfg)?;
    out.log.save_csv(log_out)?;
    Ok(serde_json::json!({
        "model": model.display().to_string(),
        "log": log_out.display().to_string(),
        "steps": out.log.len(),
        "grasp_event": out.grasp,
    }))
}

fn simulate(
    cfg: &PipelineConfig,
    models: &[PathBuf],
    out: &Path,
    batch: usize,
) -> Result<(), Failure> {
    if batch == 0 {
        return Err(Failure::new(CONFIG, "--batch must be at least 1"));
    }
    let jobs: Vec<(PathBuf, PathBuf)> = match models {
        [] => vec![(cfg.paths.model.clone(), out.to_path_buf())],
        [one] => vec![(one.clone(), out.to_path_buf())],
        many => many
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), indexed(out, i)))
            .collect(),
    };
    let workers = batch.min(jobs.len());
    let mut results: Vec<Option<Result<serde_json::Value, Failure>>> =
        (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                scope.spawn(move || {
                    (w..jobs.len())
                        .step_by(workers)
                        .map(|i| (i, run_one(cfg, &jobs[i].0, &jobs[i].1)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("simulation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut first_err = None;
    for r in results.into_iter().flatten() {
        match r {
            Ok(v) => print_line(&v.to_string()),
            Err(e) => {
                eprintln!("error: {}", e.message);
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn eval(cfg: &PipelineConfig, log: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let l = load_log(log)?;
    if l.is_empty() {
        return Err(Failure::new(
            DATA,
            format!("{}: log has no records", log.display()),
        ));
    }
    let summary = l.summary(&cfg.robot, Some(cfg.scenario.grasp_time))?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    print_line(&text);
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    Ok(())
}

fn export(log: &Path, out: &Path) -> Result<(), Failure> {
    let l = load_log(log)?;
    if l.is_empty() {
        return Err(Failure::new(
            DATA,
            format!("{}: log has no records", log.display()),
        ));
    }
    write_text(out, &svg::render(&l))
}

/// Print to stdout, ignoring a closed pipe.
fn print_line(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    let paths = &cfg.paths;
    match &cli.command {
        Command::GenDemos { out } => gen_demos(&cfg, out.as_deref().unwrap_or(&paths.demos)),
        Command::Learn { demos, out } => learn(
            &cfg,
            demos.as_deref().unwrap_or(&paths.demos),
            out.as_deref().unwrap_or(&paths.model),
        ),
        Command::Adapt { model, via, out } => adapt(model, via, out),
        Command::Simulate { models, out, batch } => {
            simulate(&cfg, models, out.as_deref().unwrap_or(&paths.log), *batch)
        }
        Command::Eval { log, out } => {
            eval(&cfg, log.as_deref().unwrap_or(&paths.log), out.as_deref())
        }
        Command::ShowConfig { .. } => {
            print_line(&serde_json::to_string_pretty(&cfg).expect("config serialises"));
            Ok(())
        }
        Command::Export { log, out } => export(log.as_deref().unwrap_or(&paths.log), out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOCOMAN_LOG_LEVEL", "warn"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
