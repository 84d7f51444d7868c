//! Command-line front end: config loading, subcommand dispatch, artifact
//! output and the exit-code contract (0 ok, 1 failed check, 2 config,
//! 3 numerics).

pub mod commands;
pub mod config;
pub mod manifest;
pub mod selftest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::mixing::CorrelationSeries;
use crate::operators::Fault;
use commands::{Artifact, Model};
use config::{ExperimentConfig, LoadedConfig};
use manifest::Manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "infmix",
    version,
    about = "Mixing experiments for intermittent maps with infinite invariant measure"
)]
pub struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to INFMIX_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; artifacts go to stdout when omitted (except `run`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline: tails, tower, operators, mixing, rate.
    Run { config: PathBuf },
    /// Renewal sequence `u_n` and `a_n u_n`.
    Renewal { config: PathBuf },
    /// Return-time tail and its exponent; optionally an orbit.
    Tails { config: PathBuf },
    Tower {
        #[command(subcommand)]
        command: TowerCommand,
    },
    Operators {
        #[command(subcommand)]
        command: OperatorsCommand,
    },
    Mixing {
        #[command(subcommand)]
        command: MixingCommand,
    },
    /// Reduced-scale invariant suite.
    Selftest {
        #[cfg(feature = "fault-injection")]
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
    },
    /// Recompute the hashes listed in a manifest.
    Verify { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum TowerCommand {
    /// Columns, heights and masses of the truncated tower.
    Inspect { config: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum OperatorsCommand {
    /// Invariant-density and normalisation diagnostics.
    Spectrum { config: PathBuf },
    /// Convolution identity and the level-mass inequality.
    Convcheck { config: PathBuf },
    /// Error terms against their envelopes.
    Eterms { config: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum MixingCommand {
    /// Correlation series.
    Run { config: PathBuf },
    /// Rate model fitted to a series CSV.
    Rate {
        config: PathBuf,
        #[arg(long)]
        series: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    PerturbAj,
    PerturbAn,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::PerturbAj => Fault::PerturbAj,
            FaultArg::PerturbAn => Fault::PerturbAn,
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("INFMIX_THREADS") {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("INFMIX_THREADS = {s:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    match threads {
        Some(0) => Err(Error::Config("thread count must be positive".into())),
        Some(n) => {
            crate::par::set_threads(n);
            Ok(())
        }
        None => Ok(()),
    }
}

struct Session {
    loaded: LoadedConfig,
    started: Instant,
}

impl Session {
    fn open(path: &Path, seed: Option<u64>) -> Result<Self> {
        let mut loaded = ExperimentConfig::load(path)?;
        if let Some(s) = seed {
            loaded.config.seed = s;
        }
        Ok(Session {
            loaded,
            started: Instant::now(),
        })
    }

    fn cfg(&self) -> &ExperimentConfig {
        &self.loaded.config
    }

    fn emit(&self, command: &str, out: Option<&Path>, artifacts: &[Artifact]) -> Result<()> {
        emit(
            command,
            out,
            artifacts,
            Some(self.loaded.sha256.clone()),
            self.cfg().seed,
            self.started,
        )
    }
}

fn emit(
    command: &str,
    out: Option<&Path>,
    artifacts: &[Artifact],
    config_sha256: Option<String>,
    seed: u64,
    started: Instant,
) -> Result<()> {
    match out {
        Some(dir) => {
            let mut m = Manifest::new(command, config_sha256, seed);
            m.wall_time_s = started.elapsed().as_secs_f64();
            manifest::write_dir(dir, artifacts, m)
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for a in artifacts {
                stdout.write_all(&a.bytes)?;
            }
            Ok(())
        }
    }
}

fn read_series(path: &Path) -> Result<CorrelationSeries> {
    let f = std::fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    CorrelationSeries::read_csv(std::io::BufReader::new(f))
}

/// Full pipeline into one directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<Artifact>> {
    let model = Model::build(cfg)?;
    let mut arts = Vec::new();
    arts.extend(commands::tails(cfg, &model, Format::Json)?);
    arts.extend(commands::tower_inspect(cfg, &model)?);
    if model.bundle.is_some() {
        arts.extend(commands::spectrum(&model)?);
    }
    arts.extend(commands::convcheck(cfg, &model, Format::Csv, Fault::None)?);
    let (series, mix) = commands::mixing_run(cfg, &model, Format::Csv)?;
    arts.extend(mix);
    if model.law.is_some() {
        if !cfg.operators.eterm_k.is_empty() {
            arts.extend(commands::eterms(cfg, &model, Format::Csv)?);
        }
        arts.extend(commands::mixing_rate(cfg, &model, &series)?);
    }
    Ok(arts)
}

fn dispatch(cli: Cli) -> Result<i32> {
    configure_threads(cli.threads)?;
    let out = cli.out.as_deref();
    let fmt = |default: Format| cli.format.unwrap_or(default);
    match cli.command {
        Command::Run { config } => {
            let s = Session::open(&config, cli.seed)?;
            let arts = run_pipeline(s.cfg())?;
            let dir = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(&s.cfg().outputs.dir));
            s.emit("run", Some(&dir), &arts)?;
            eprintln!("wrote {} artifacts to {}", arts.len(), dir.display());
        }
        Command::Renewal { config } => {
            let s = Session::open(&config, cli.seed)?;
            let model = Model::build(s.cfg())?;
            s.emit(
                "renewal",
                out,
                &commands::renewal(s.cfg(), &model, fmt(Format::Csv), Fault::None)?,
            )?;
        }
        Command::Tails { config } => {
            let s = Session::open(&config, cli.seed)?;
            let model = Model::build(s.cfg())?;
            s.emit("tails", out, &commands::tails(s.cfg(), &model, fmt(Format::Json))?)?;
        }
        Command::Tower {
            command: TowerCommand::Inspect { config },
        } => {
            let s = Session::open(&config, cli.seed)?;
            let model = Model::build(s.cfg())?;
            s.emit("tower inspect", out, &commands::tower_inspect(s.cfg(), &model)?)?;
        }
        Command::Operators { command } => {
            let (name, config) = match &command {
                OperatorsCommand::Spectrum { config } => ("operators spectrum", config),
                OperatorsCommand::Convcheck { config } => ("operators convcheck", config),
                OperatorsCommand::Eterms { config } => ("operators eterms", config),
            };
            let s = Session::open(config, cli.seed)?;
            let model = Model::build(s.cfg())?;
            let arts = match command {
                OperatorsCommand::Spectrum { .. } => commands::spectrum(&model)?,
                OperatorsCommand::Convcheck { .. } => {
                    commands::convcheck(s.cfg(), &model, fmt(Format::Csv), Fault::None)?
                }
                OperatorsCommand::Eterms { .. } => commands::eterms(s.cfg(), &model, fmt(Format::Csv))?,
            };
            s.emit(name, out, &arts)?;
        }
        Command::Mixing {
            command: MixingCommand::Run { config },
        } => {
            let s = Session::open(&config, cli.seed)?;
            let model = Model::build(s.cfg())?;
            let (_, arts) = commands::mixing_run(s.cfg(), &model, fmt(Format::Csv))?;
            s.emit("mixing run", out, &arts)?;
        }
        Command::Mixing {
            command: MixingCommand::Rate { config, series },
        } => {
            let s = Session::open(&config, cli.seed)?;
            let model = Model::build(s.cfg())?;
            let series = read_series(&series)?;
            s.emit("mixing rate", out, &commands::mixing_rate(s.cfg(), &model, &series)?)?;
        }
        #[cfg(feature = "fault-injection")]
        Command::Selftest { fault } => return Ok(selftest_cmd(fault.map_or(Fault::None, Fault::from), cli.seed, out)?),
        #[cfg(not(feature = "fault-injection"))]
        Command::Selftest {} => return selftest_cmd(Fault::None, cli.seed, out),
        Command::Verify { dir } => {
            let bad = manifest::verify_dir(&dir)?;
            for b in &bad {
                eprintln!("MISMATCH {b}");
            }
            if !bad.is_empty() {
                return Ok(EXIT_CHECK);
            }
            eprintln!("manifest verified");
        }
    }
    Ok(EXIT_OK)
}

fn selftest_cmd(fault: Fault, seed: Option<u64>, out: Option<&Path>) -> Result<i32> {
    let started = Instant::now();
    let seed = seed.unwrap_or(1);
    let checks = selftest::run(fault, seed);
    for c in &checks {
        eprintln!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(dir) = out {
        let mut bytes = serde_json::to_vec_pretty(&checks).map_err(|e| Error::Io(e.to_string()))?;
        bytes.push(b'\n');
        emit(
            "selftest",
            Some(dir),
            &[Artifact {
                name: "selftest.json".into(),
                bytes,
            }],
            None,
            seed,
            started,
        )?;
    }
    Ok(if checks.iter().all(|c| c.pass) {
        EXIT_OK
    } else {
        EXIT_CHECK
    })
}

/// Parses `args`, runs, and maps errors onto exit codes.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_NUMERIC
            }
        }
    }
}
