//! Command-line front end for the `gkp-mbqc` library.

pub mod config;
pub mod output;
pub mod selftest;

use std::path::PathBuf;

use gkp_mbqc::analytics::{
    loss_ceiling_previous, threshold_previous, threshold_proposed, PreviousModel, ProposedConfig, Threshold,
};
use gkp_mbqc::topo::{bisection_sweep, estimate_threshold, sweep, FailureRate, SweepPoint, ThresholdEstimate};
use serde::Serialize;
use thiserror::Error;

use config::{CommandKind, MethodArg, RunConfig};
use output::{write_csv, write_json, write_svg, CsvRow};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("{0}: {1}")]
    Io(PathBuf, String),
    #[error(transparent)]
    Model(#[from] gkp_mbqc::Error),
    #[error("selftest: {failed} of {total} checks failed")]
    Selftest { failed: usize, total: usize },
}

/// Leading-order threshold, or the noise floor when there is none.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum LeadingOrderResult {
    Reached { sigma2: f64, squeezing_db: f64 },
    Unachievable { floor: f64 },
}

impl LeadingOrderResult {
    fn from(r: gkp_mbqc::Result<Threshold>) -> Result<Self, CliError> {
        match r {
            Ok(t) => Ok(LeadingOrderResult::Reached {
                sigma2: t.sigma2,
                squeezing_db: t.squeezing.db(),
            }),
            Err(gkp_mbqc::Error::Unachievable { floor, .. }) => Ok(LeadingOrderResult::Unachievable { floor }),
            Err(e) => Err(e.into()),
        }
    }

    fn line(&self) -> String {
        match self {
            LeadingOrderResult::Reached { squeezing_db, .. } => format!("{squeezing_db:.2} dB"),
            LeadingOrderResult::Unachievable { floor } => format!("unachievable (noise floor {floor:.4})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeadingOrderReport {
    pub method: MethodArg,
    pub loss: f64,
    pub target: f64,
    pub threshold: LeadingOrderResult,
    /// Previous method with `σ'²` exactly as printed, for comparison.
    pub previous_printed: Option<LeadingOrderResult>,
    pub loss_ceiling: Option<f64>,
}

pub fn leading_order(cfg: &RunConfig) -> Result<LeadingOrderReport, CliError> {
    let (qnd, loss, target) = (cfg.qnd()?, cfg.loss()?, cfg.physics.target);
    Ok(match cfg.physics.method {
        MethodArg::Previous => LeadingOrderReport {
            method: MethodArg::Previous,
            loss: cfg.physics.loss,
            target,
            threshold: LeadingOrderResult::from(threshold_previous(&loss, &qnd, target, PreviousModel::Effective))?,
            previous_printed: Some(LeadingOrderResult::from(threshold_previous(
                &loss,
                &qnd,
                target,
                PreviousModel::Printed,
            ))?),
            loss_ceiling: loss_ceiling_previous(&qnd, target, PreviousModel::Effective).ok(),
        },
        MethodArg::Proposed => {
            let pc = ProposedConfig {
                leaves: cfg.physics.leaves,
                ancillae: cfg.physics.ancillae,
                me_sqec_iters: cfg.physics.me_sqec_iters,
                hrm: cfg.hrm()?,
                ancilla_loss: cfg.physics.ancilla_loss,
                ..Default::default()
            };
            LeadingOrderReport {
                method: MethodArg::Proposed,
                loss: cfg.physics.loss,
                target,
                threshold: LeadingOrderResult::from(threshold_proposed(&loss, &qnd, &pc, target))?,
                previous_printed: None,
                loss_ceiling: None,
            }
        }
    })
}

fn rows(cfg: &RunConfig, pts: &[(SweepPoint, FailureRate)]) -> Vec<CsvRow> {
    pts.iter().map(|(p, r)| CsvRow::new(cfg, p, r)).collect()
}

fn sweep_rows(cfg: &RunConfig, sigmas: &[f64]) -> Result<Vec<CsvRow>, CliError> {
    let base = cfg.pipeline(sigmas.first().copied().unwrap_or(0.2))?;
    let pts = sweep(
        &base,
        sigmas,
        &cfg.sim.d,
        cfg.sim.trials,
        cfg.sim.analog,
        cfg.sim.seed,
        cfg.sim.workers,
    )?;
    Ok(rows(cfg, &pts))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub sigma_threshold: f64,
    pub squeezing_db: f64,
    pub ci_sigma: (f64, f64),
    pub ci_db: (f64, f64),
}

impl From<ThresholdEstimate> for ThresholdReport {
    fn from(t: ThresholdEstimate) -> Self {
        ThresholdReport {
            sigma_threshold: t.sigma,
            squeezing_db: t.squeezing_db,
            ci_sigma: t.ci_sigma,
            ci_db: t.ci_db,
        }
    }
}

/// Bisection sweep plus crossing estimate. Returns the CSV rows and the estimate.
pub fn threshold(cfg: &RunConfig) -> Result<(Vec<CsvRow>, gkp_mbqc::Result<ThresholdEstimate>), CliError> {
    let base = cfg.pipeline(cfg.sim.bracket.0)?;
    let pts = bisection_sweep(
        &base,
        cfg.sim.bracket,
        cfg.sim.points,
        &cfg.sim.d,
        cfg.sim.trials,
        cfg.sim.analog,
        cfg.sim.seed,
        cfg.sim.workers,
    )?;
    let sp: Vec<SweepPoint> = pts.iter().map(|p| p.0).collect();
    Ok((rows(cfg, &pts), estimate_threshold(&sp, 500, cfg.sim.seed)))
}

/// Executes `cfg.command`, writes artifacts and returns the text for stdout.
pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    match cfg.command {
        CommandKind::LeadingOrder => {
            let r = leading_order(cfg)?;
            let method = match r.method {
                MethodArg::Proposed => "proposed",
                MethodArg::Previous => "previous",
            };
            let mut text = format!("{method} l={}: {}", r.loss, r.threshold.line());
            if let Some(p) = &r.previous_printed {
                text += &format!("\n  with sigma'^2 as printed: {}", p.line());
            }
            if let Some(c) = r.loss_ceiling {
                text += &format!("\n  loss ceiling: {:.2}%", 100.0 * c);
            }
            if let Some(path) = &cfg.out.json {
                write_json(path, cfg, &r)?;
            }
            Ok(text)
        }
        CommandKind::Simulate | CommandKind::Sweep => {
            let sigmas = match cfg.command {
                CommandKind::Simulate => vec![cfg.physics.sigma.expect("validated")],
                _ => cfg.sim.sigmas.clone(),
            };
            let rows = sweep_rows(cfg, &sigmas)?;
            write_csv(cfg.out.csv.as_ref().expect("validated"), &rows)?;
            if let Some(path) = &cfg.out.json {
                write_json(path, cfg, &rows)?;
            }
            if let Some(path) = &cfg.out.svg {
                write_svg(path, &rows, None)?;
            }
            Ok(rows
                .iter()
                .map(|r| {
                    format!(
                        "sigma={:.4} d={} failure_rate={:.4} [{:.4}, {:.4}]",
                        r.sigma, r.d, r.failure_rate, r.ci_low, r.ci_high
                    )
                })
                .collect::<Vec<_>>()
                .join("\n"))
        }
        CommandKind::Threshold => {
            let (rows, est) = threshold(cfg)?;
            write_csv(cfg.out.csv.as_ref().expect("validated"), &rows)?;
            let est = est.map(ThresholdReport::from);
            if let Some(path) = &cfg.out.svg {
                write_svg(path, &rows, est.as_ref().ok().map(|e| e.sigma_threshold))?;
            }
            let json = cfg.out.json.as_ref().expect("validated");
            match est {
                Ok(e) => {
                    write_json(json, cfg, &e)?;
                    Ok(format!(
                        "threshold sigma={:.4} ({:.2} dB), 95% CI [{:.2}, {:.2}] dB",
                        e.sigma_threshold, e.squeezing_db, e.ci_db.0, e.ci_db.1
                    ))
                }
                Err(e) => {
                    write_json(json, cfg, e.to_string())?;
                    Err(e.into())
                }
            }
        }
        CommandKind::Selftest => {
            let report = selftest::run_all(cfg.sim.seed);
            let text = report.lines.join("\n");
            if let Some(path) = &cfg.out.json {
                write_json(path, cfg, &report)?;
            }
            if report.failed > 0 {
                eprintln!("{text}");
                return Err(CliError::Selftest {
                    failed: report.failed,
                    total: report.total,
                });
            }
            Ok(format!(
                "{text}\n{} of {} checks passed",
                report.total - report.failed,
                report.total
            ))
        }
    }
}
