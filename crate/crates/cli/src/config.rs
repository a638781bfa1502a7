//! Run configuration: TOML file, then command-line flags on top.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gkp_mbqc::devices::{LossConfig, QndConfig};
use gkp_mbqc::gkp::{HrmConfig, SqueezingDb, SQRT_PI};
use gkp_mbqc::topo::{Method, NoiseMode, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const WORKERS_ENV: &str = "GKP_MBQC_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "gkp-mbqc",
    version,
    about = "GKP-qubit MBQC fault-tolerance calculator and simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    LeadingOrder,
    Simulate,
    Threshold,
    Sweep,
    Selftest,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form threshold at the configured loss.
    LeadingOrder(Flags),
    /// Failure rates at one sigma for every distance.
    Simulate(Flags),
    /// Bisection sweep and d-crossing threshold estimate.
    Threshold(Flags),
    /// Failure rates over a list of sigmas.
    Sweep(Flags),
    /// Quick oracle checks.
    Selftest(Flags),
}

impl Command {
    pub fn split(self) -> (CommandKind, Flags) {
        match self {
            Command::LeadingOrder(f) => (CommandKind::LeadingOrder, f),
            Command::Simulate(f) => (CommandKind::Simulate, f),
            Command::Threshold(f) => (CommandKind::Threshold, f),
            Command::Sweep(f) => (CommandKind::Sweep, f),
            Command::Selftest(f) => (CommandKind::Selftest, f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Proposed,
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Ledger,
    Faithful,
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub squeezing_db: Option<f64>,
    /// Transmission loss l of every homodyne measurement.
    #[arg(long)]
    pub loss: Option<f64>,
    #[arg(long)]
    pub sv_squeezing_db: Option<f64>,
    /// Beam-splitter reflectivity R of the QND gate.
    #[arg(long)]
    pub reflectivity: Option<f64>,
    #[arg(long)]
    pub v_up: Option<f64>,
    /// Encoded leaves L per fusion.
    #[arg(long)]
    pub leaves: Option<usize>,
    /// Ancillae m per encoded leaf (odd).
    #[arg(long)]
    pub ancillae: Option<usize>,
    #[arg(long)]
    pub me_sqec_iters: Option<usize>,
    #[arg(long)]
    pub ancilla_loss: Option<bool>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Code distances, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub d: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub analog: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core. Defaults to $GKP_MBQC_WORKERS, then 0.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Sigmas for `sweep`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Sigma bracket for `threshold`, as lo,hi.
    #[arg(long, value_delimiter = ',')]
    pub bracket: Option<Vec<f64>>,
    /// Number of bisection points for `threshold`.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

/// On-disk layout. Every field is optional and unknown keys are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub physics: FilePhysics,
    #[serde(default)]
    pub sim: FileSim,
    #[serde(default)]
    pub out: FileOut,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePhysics {
    pub sigma: Option<f64>,
    pub squeezing_db: Option<f64>,
    pub loss: Option<f64>,
    pub sv_squeezing_db: Option<f64>,
    pub reflectivity: Option<f64>,
    pub v_up: Option<f64>,
    pub leaves: Option<usize>,
    pub ancillae: Option<usize>,
    pub me_sqec_iters: Option<usize>,
    pub ancilla_loss: Option<bool>,
    pub method: Option<MethodArg>,
    pub target: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSim {
    pub d: Option<Vec<usize>>,
    pub trials: Option<u64>,
    pub mode: Option<ModeArg>,
    pub analog: Option<bool>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub sigmas: Option<Vec<f64>>,
    pub bracket: Option<Vec<f64>>,
    pub points: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileOut {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Physics {
    /// Standard deviation of fresh GKP qubits; `None` when no point is set.
    pub sigma: Option<f64>,
    pub squeezing_db: Option<f64>,
    pub loss: f64,
    pub sv_squeezing_db: f64,
    pub reflectivity: f64,
    pub v_up: f64,
    pub leaves: usize,
    pub ancillae: usize,
    pub me_sqec_iters: usize,
    pub ancilla_loss: bool,
    pub method: MethodArg,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sim {
    pub d: Vec<usize>,
    pub trials: u64,
    pub mode: ModeArg,
    pub analog: bool,
    pub seed: u64,
    pub workers: usize,
    pub sigmas: Vec<f64>,
    pub bracket: (f64, f64),
    pub points: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Out {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

/// Fully resolved and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub physics: Physics,
    pub sim: Sim,
    pub out: Out,
}

pub fn load_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e.to_string()))?;
    parse_file(&text)
}

pub fn parse_file(text: &str) -> Result<FileConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
}

fn invalid(key: &str, reason: impl Into<String>) -> CliError {
    CliError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn in_range(key: &str, v: f64, lo: f64, hi: f64) -> Result<f64, CliError> {
    if v.is_finite() && v > lo && v < hi {
        Ok(v)
    } else {
        Err(invalid(key, format!("{v} is outside ({lo}, {hi})")))
    }
}

/// Flags first, then the file, then the built-in defaults.
pub fn resolve(command: CommandKind, flags: &Flags, file: &FileConfig, env_workers: Option<&str>) -> Result<RunConfig, CliError> {
    let p = &file.physics;
    let s = &file.sim;
    let sigma = flags.sigma.or(p.sigma);
    let db = flags.squeezing_db.or(p.squeezing_db);
    // a flag for one form replaces the file's value of the other
    let (sigma, db) = match (flags.sigma, flags.squeezing_db) {
        (Some(x), None) => (Some(x), None),
        (None, Some(x)) => (None, Some(x)),
        _ => (sigma, db),
    };
    if sigma.is_some() && db.is_some() {
        return Err(invalid("sigma", "give either sigma or squeezing_db, not both"));
    }
    let sigma = match (sigma, db) {
        (Some(x), _) => Some(in_range("sigma", x, 0.0, 1.0)?),
        (None, Some(x)) => Some(SqueezingDb(in_range("squeezing_db", x, -10.0, 60.0)?).to_variance().sqrt()),
        (None, None) => None,
    };

    let loss = flags.loss.or(p.loss).unwrap_or(0.0);
    if !(0.0..1.0).contains(&loss) {
        return Err(invalid("loss", format!("{loss} is outside [0, 1)")));
    }
    let ancillae = flags.ancillae.or(p.ancillae).unwrap_or(3);
    if ancillae.is_multiple_of(2) {
        return Err(invalid("ancillae", "m must be odd"));
    }
    let leaves = flags.leaves.or(p.leaves).unwrap_or(4);
    if leaves == 0 {
        return Err(invalid("leaves", "L must be at least 1"));
    }
    let v_up = in_range(
        "v_up",
        flags.v_up.or(p.v_up).unwrap_or(2.0 * SQRT_PI / 5.0),
        0.0,
        SQRT_PI / 2.0,
    )?;
    let physics = Physics {
        sigma,
        squeezing_db: sigma.map(|s| SqueezingDb::from_sigma(s).db()),
        loss,
        sv_squeezing_db: in_range(
            "sv_squeezing_db",
            flags.sv_squeezing_db.or(p.sv_squeezing_db).unwrap_or(15.0),
            -10.0,
            60.0,
        )?,
        reflectivity: in_range(
            "reflectivity",
            flags.reflectivity.or(p.reflectivity).unwrap_or((3.0 - 5f64.sqrt()) / 2.0),
            0.0,
            1.0,
        )?,
        v_up,
        leaves,
        ancillae,
        me_sqec_iters: flags.me_sqec_iters.or(p.me_sqec_iters).unwrap_or(3),
        ancilla_loss: flags.ancilla_loss.or(p.ancilla_loss).unwrap_or(false),
        method: flags.method.or(p.method).unwrap_or(MethodArg::Proposed),
        target: in_range("target", flags.target.or(p.target).unwrap_or(0.03), 0.0, 1.0)?,
    };

    let mut d = flags.d.clone().or_else(|| s.d.clone()).unwrap_or_else(|| vec![5, 7]);
    d.sort_unstable();
    d.dedup();
    if d.is_empty() || d.iter().any(|&x| x < 3 || x % 2 == 0) {
        return Err(invalid("d", "distances must be odd and at least 3"));
    }
    let trials = flags.trials.or(s.trials).unwrap_or(2000);
    if trials == 0 {
        return Err(invalid("trials", "at least one trial is required"));
    }
    let workers = match flags.workers.or(s.workers) {
        Some(w) => w,
        None => match env_workers {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|_| invalid(WORKERS_ENV, format!("`{v}` is not a count")))?,
            None => 0,
        },
    };
    let sigmas = flags.sigmas.clone().or_else(|| s.sigmas.clone()).unwrap_or_default();
    for &x in &sigmas {
        in_range("sigmas", x, 0.0, 1.0)?;
    }
    let bracket = flags
        .bracket
        .clone()
        .or_else(|| s.bracket.clone())
        .unwrap_or_else(|| vec![0.08, 0.36]);
    if bracket.len() != 2 || !(bracket[0] > 0.0 && bracket[0] < bracket[1] && bracket[1] < 1.0) {
        return Err(invalid("bracket", "expected lo,hi with 0 < lo < hi < 1"));
    }
    let points = flags.points.or(s.points).unwrap_or(6);
    if points < 4 {
        return Err(invalid("points", "at least 4 sigma points are needed for a crossing"));
    }
    let sim = Sim {
        d,
        trials,
        mode: flags.mode.or(s.mode).unwrap_or(ModeArg::Ledger),
        analog: flags.analog.or(s.analog).unwrap_or(true),
        seed: flags.seed.or(s.seed).unwrap_or(1),
        workers,
        sigmas,
        bracket: (bracket[0], bracket[1]),
        points,
    };
    let out = Out {
        csv: flags.csv.clone().or_else(|| file.out.csv.clone()),
        json: flags.json.clone().or_else(|| file.out.json.clone()),
        svg: flags.svg.clone().or_else(|| file.out.svg.clone()),
    };

    match command {
        CommandKind::Simulate if physics.sigma.is_none() => return Err(invalid("sigma", "simulate needs sigma or squeezing_db")),
        CommandKind::Sweep if sim.sigmas.is_empty() => return Err(invalid("sigmas", "sweep needs a list of sigmas")),
        CommandKind::Sweep | CommandKind::Simulate if out.csv.is_none() => {
            return Err(invalid("csv", "an output path is required"))
        }
        CommandKind::Threshold if out.csv.is_none() || out.json.is_none() => {
            return Err(invalid("csv/json", "threshold writes both a CSV and a JSON summary"))
        }
        CommandKind::Threshold if sim.d.len() < 2 => return Err(invalid("d", "threshold needs two distances")),
        _ => {}
    }
    Ok(RunConfig {
        command,
        physics,
        sim,
        out,
    })
}

impl RunConfig {
    pub fn qnd(&self) -> Result<QndConfig, CliError> {
        Ok(QndConfig::with_sv_squeezing(
            self.physics.reflectivity,
            SqueezingDb(self.physics.sv_squeezing_db),
        )?)
    }

    pub fn loss(&self) -> Result<LossConfig, CliError> {
        Ok(LossConfig::new(self.physics.loss)?)
    }

    pub fn hrm(&self) -> Result<HrmConfig, CliError> {
        Ok(HrmConfig::new(self.physics.v_up)?)
    }

    /// Pipeline at `sigma`.
    pub fn pipeline(&self, sigma: f64) -> Result<PipelineConfig, CliError> {
        Ok(PipelineConfig {
            qnd: self.qnd()?,
            leaves: self.physics.leaves,
            ancillae: self.physics.ancillae,
            me_sqec_iters: self.physics.me_sqec_iters,
            hrm: self.hrm()?,
            method: match self.physics.method {
                MethodArg::Proposed => Method::Proposed,
                MethodArg::Previous => Method::Previous,
            },
            mode: match self.sim.mode {
                ModeArg::Ledger => NoiseMode::Ledger,
                ModeArg::Faithful => NoiseMode::Faithful,
            },
            ancilla_loss: self.physics.ancilla_loss,
            ..PipelineConfig::new(sigma * sigma, self.loss()?)?
        })
    }
}
