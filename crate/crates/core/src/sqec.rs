//! Single-qubit-level error correction (SQEC) and its maximum-likelihood
//! variant (ME-SQEC).
//!
//! One round couples the data qubit to a fresh GKP ancilla, reads the ancilla
//! out by homodyne detection and displaces the data by an estimate built from
//! the measured residual. Plain SQEC displaces by the full residual; ME-SQEC
//! uses the linear minimum-variance (Gauss–Markov) estimate, which for ideal
//! gates is the familiar `σ²_D / (σ²_D + σ²_A)` shrinkage.
//!
//! Orientation: a p-quadrature round uses an ancilla in `|0̃⟩` as CNOT control
//! with the data as target and measures the ancilla in p. A q-quadrature round
//! uses an ancilla in `|+̃⟩` as target with the data as control and measures
//! the ancilla in q.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::devices::{lossy_homodyne, GateModel, LossConfig};
use crate::error::{check_variance, Result};
use crate::gkp::{decide_bit, lattice_parity, GkpQubitState, HrmConfig, MeasurementOutcome, Quadrature};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SqecConfig {
    pub gate: GateModel,
    pub hrm: Option<HrmConfig>,
    pub loss: LossConfig,
    /// Apply the measurement loss to ancilla readouts as well as final ones.
    pub ancilla_loss: bool,
}

impl SqecConfig {
    pub fn ideal() -> Self {
        SqecConfig {
            gate: GateModel::Ideal,
            hrm: None,
            loss: LossConfig::lossless(),
            ancilla_loss: false,
        }
    }

    fn readout_noise(&self) -> f64 {
        if self.ancilla_loss {
            self.loss.added_variance()
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    /// Displace by the full measured residual.
    Plain,
    /// Displace by the Gauss–Markov estimate of the data deviation.
    MaxLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqecResult {
    pub data: GkpQubitState,
    pub ancilla_outcome: MeasurementOutcome,
    pub displacement_applied: f64,
    pub induced_logical_flip: bool,
    /// False when the HRM rejected the ancilla readout; `data` is then the input state.
    pub accepted: bool,
}

/// Posterior of a zero-mean Gaussian deviation with variance `prior_var`
/// observed through additive independent noise of variance `obs_var`.
/// Returns `(mean, variance)`.
pub fn gauss_markov_posterior(prior_var: f64, obs_var: f64, measured: f64) -> Result<(f64, f64)> {
    check_variance(prior_var)?;
    check_variance(obs_var)?;
    let total = prior_var + obs_var;
    Ok((prior_var / total * measured, prior_var * obs_var / total))
}

/// Second moments of one round, before the correction is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMoments {
    /// Variance of the data deviation after the entangling gate.
    pub data_var: f64,
    /// Variance of the measured combination (including readout noise).
    pub meas_var: f64,
    /// Covariance between the two.
    pub cov: f64,
    /// Coefficient of the data deviation inside the measured combination.
    pub data_coeff: f64,
}

impl RoundMoments {
    pub fn new(data_var: f64, ancilla_var: f64, quad: Quadrature, cfg: &SqecConfig) -> Self {
        let m = cfg.gate.cnot_moments();
        let g = m.coupling;
        let (data_coeff, cross) = match quad {
            Quadrature::P => (-g, m.cross_cov),
            Quadrature::Q => (g, -m.cross_cov),
        };
        RoundMoments {
            data_var: data_var + m.long_var,
            meas_var: ancilla_var + g * g * data_var + m.short_var + cfg.readout_noise(),
            cov: data_coeff * data_var + cross,
            data_coeff,
        }
    }

    /// Gain `k` of the correction `x -> x - k·residual`.
    pub fn gain(&self, estimator: Estimator) -> f64 {
        match estimator {
            Estimator::Plain => 1.0 / self.data_coeff,
            Estimator::MaxLikelihood => self.cov / self.meas_var,
        }
    }

    pub fn corrected_var(&self, estimator: Estimator) -> f64 {
        let k = self.gain(estimator);
        self.data_var - 2.0 * k * self.cov + k * k * self.meas_var
    }
}

/// Variance ledger after a round: `(var_q, var_p)` of the data.
pub fn round_variances(
    data_var_q: f64,
    data_var_p: f64,
    ancilla_var: f64,
    quad: Quadrature,
    estimator: Estimator,
    cfg: &SqecConfig,
) -> (f64, f64) {
    let m = cfg.gate.cnot_moments();
    let g2 = m.coupling * m.coupling;
    match quad {
        Quadrature::P => {
            let corrected = RoundMoments::new(data_var_p, ancilla_var, quad, cfg).corrected_var(estimator);
            (data_var_q + g2 * ancilla_var + m.short_var, corrected)
        }
        Quadrature::Q => {
            let corrected = RoundMoments::new(data_var_q, ancilla_var, quad, cfg).corrected_var(estimator);
            (corrected, data_var_p + g2 * ancilla_var + m.short_var)
        }
    }
}

/// One correction round against an explicitly supplied ancilla.
pub fn correct_with_ancilla<R: Rng + ?Sized>(
    data: GkpQubitState,
    ancilla: GkpQubitState,
    quad: Quadrature,
    estimator: Estimator,
    cfg: &SqecConfig,
    rng: &mut R,
) -> SqecResult {
    let ancilla_var = ancilla.var(quad);
    let moments = RoundMoments::new(data.var(quad), ancilla_var, quad, cfg);
    let (var_q, var_p) = round_variances(data.var_q, data.var_p, ancilla_var, quad, estimator, cfg);

    let (data_after, ancilla_after) = match quad {
        Quadrature::P => {
            let (a, d) = cfg.gate.cnot(ancilla, data, rng);
            (d, a)
        }
        Quadrature::Q => cfg.gate.cnot(data, ancilla, rng),
    };
    let outcome = if cfg.ancilla_loss {
        lossy_homodyne(&ancilla_after, quad, &cfg.loss, rng)
    } else {
        decide_bit(ancilla_after.dev(quad))
    };
    let outcome = match cfg.hrm {
        Some(h) => MeasurementOutcome {
            accepted: outcome.dev_m.abs() < h.v_up,
            ..outcome
        },
        None => outcome,
    };
    if !outcome.accepted {
        return SqecResult {
            data,
            ancilla_outcome: outcome,
            displacement_applied: 0.0,
            induced_logical_flip: false,
            accepted: false,
        };
    }

    let displacement = -moments.gain(estimator) * outcome.dev_m;
    let mut out = data_after;
    *out.dev_mut(quad) += displacement;
    out.var_q = var_q;
    out.var_p = var_p;
    SqecResult {
        data: out,
        ancilla_outcome: outcome,
        displacement_applied: displacement,
        induced_logical_flip: lattice_parity(out.dev(quad)) != lattice_parity(data.dev(quad)),
        accepted: true,
    }
}

pub fn sqec_p<R: Rng + ?Sized>(data: GkpQubitState, ancilla_var: f64, cfg: &SqecConfig, rng: &mut R) -> SqecResult {
    let ancilla = GkpQubitState::sample(ancilla_var, rng);
    correct_with_ancilla(data, ancilla, Quadrature::P, Estimator::Plain, cfg, rng)
}

pub fn sqec_q<R: Rng + ?Sized>(data: GkpQubitState, ancilla_var: f64, cfg: &SqecConfig, rng: &mut R) -> SqecResult {
    let ancilla = GkpQubitState::sample(ancilla_var, rng);
    correct_with_ancilla(data, ancilla, Quadrature::Q, Estimator::Plain, cfg, rng)
}

pub fn me_sqec<R: Rng + ?Sized>(
    data: GkpQubitState,
    quad: Quadrature,
    ancilla_var: f64,
    cfg: &SqecConfig,
    rng: &mut R,
) -> SqecResult {
    let ancilla = GkpQubitState::sample(ancilla_var, rng);
    correct_with_ancilla(data, ancilla, quad, Estimator::MaxLikelihood, cfg, rng)
}
