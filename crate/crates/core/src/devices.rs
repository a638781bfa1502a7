//! Noisy two-qubit gates and lossy homodyne detection in the deviation picture.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_variance, Error, Result};
use crate::gkp::{decide_bit, squeezing_to_variance, GkpQubitState, MeasurementOutcome, Quadrature, SqueezingDb};

/// Beam-splitter QND gate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QndConfig {
    /// Beam-splitter reflectivity `R`.
    pub reflectivity: f64,
    /// Variance of each ancillary squeezed vacuum (`e^{-2r}/2`).
    pub sv_variance: f64,
}

impl Default for QndConfig {
    fn default() -> Self {
        QndConfig {
            reflectivity: (3.0 - 5f64.sqrt()) / 2.0,
            sv_variance: squeezing_to_variance(SqueezingDb(15.0)),
        }
    }
}

impl QndConfig {
    pub fn new(reflectivity: f64, sv_variance: f64) -> Result<Self> {
        if !(reflectivity > 0.0 && reflectivity < 1.0) {
            return Err(Error::InvalidParameter {
                name: "reflectivity",
                value: reflectivity,
                reason: "must lie in (0, 1)",
            });
        }
        if !(sv_variance.is_finite() && sv_variance >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "sv_variance",
                value: sv_variance,
                reason: "must be finite and nonnegative",
            });
        }
        Ok(QndConfig {
            reflectivity,
            sv_variance,
        })
    }

    pub fn with_sv_squeezing(reflectivity: f64, sv: SqueezingDb) -> Result<Self> {
        Self::new(reflectivity, squeezing_to_variance(sv))
    }

    /// Control-to-target coupling `(1-R)/√R`.
    pub fn coupling(&self) -> f64 {
        let r = self.reflectivity;
        (1.0 - r) / r.sqrt()
    }

    /// `√((1-R)/(1+R))`: weight of the squeezed-vacuum noise on control q and target p.
    pub fn noise_long(&self) -> f64 {
        let r = self.reflectivity;
        ((1.0 - r) / (1.0 + r)).sqrt()
    }

    /// `√(R(1-R)/(1+R))`: weight of the squeezed-vacuum noise on control p and target q.
    pub fn noise_short(&self) -> f64 {
        let r = self.reflectivity;
        (r * (1.0 - r) / (1.0 + r)).sqrt()
    }
}

/// Transmission loss in front of the homodyne detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossConfig {
    pub loss: f64,
}

impl LossConfig {
    pub fn new(loss: f64) -> Result<Self> {
        if loss.is_finite() && (0.0..1.0).contains(&loss) {
            Ok(LossConfig { loss })
        } else {
            Err(Error::InvalidParameter {
                name: "loss",
                value: loss,
                reason: "must lie in [0, 1)",
            })
        }
    }

    pub fn lossless() -> Self {
        LossConfig { loss: 0.0 }
    }

    pub fn eta(&self) -> f64 {
        1.0 - self.loss
    }

    /// Extra variance `(1-η)/(2η)` seen after rescaling the outcome by `1/√η`.
    pub fn added_variance(&self) -> f64 {
        let eta = self.eta();
        (1.0 - eta) / (2.0 * eta)
    }
}

/// Closed-form variance map of the QND gate. Returns
/// `(control_q, control_p, target_q, target_p)`.
pub fn qnd_variance_update(var_cq: f64, var_cp: f64, var_tq: f64, var_tp: f64, cfg: &QndConfig) -> Result<(f64, f64, f64, f64)> {
    for v in [var_cq, var_cp, var_tq, var_tp] {
        check_variance(v)?;
    }
    Ok(qnd_variance_map(var_cq, var_cp, var_tq, var_tp, cfg))
}

fn qnd_variance_map(var_cq: f64, var_cp: f64, var_tq: f64, var_tp: f64, cfg: &QndConfig) -> (f64, f64, f64, f64) {
    let r = cfg.reflectivity;
    let g2 = (1.0 - r) * (1.0 - r) / r;
    let long = (1.0 - r) / (1.0 + r) * cfg.sv_variance;
    let short = r * (1.0 - r) / (1.0 + r) * cfg.sv_variance;
    (
        var_cq + long,
        var_cp + g2 * var_tp + short,
        var_tq + g2 * var_cq + short,
        var_tp + long,
    )
}

fn gaussian<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> f64 {
    if variance <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, variance.sqrt()).expect("finite variance").sample(rng)
}

/// Noisy CNOT realised by the beam-splitter QND gate.
pub fn qnd_gate<R: Rng + ?Sized>(
    control: GkpQubitState,
    target: GkpQubitState,
    cfg: &QndConfig,
    rng: &mut R,
) -> (GkpQubitState, GkpQubitState) {
    let a = gaussian(cfg.sv_variance, rng);
    let b = gaussian(cfg.sv_variance, rng);
    let g = cfg.coupling();
    let (long, short) = (cfg.noise_long(), cfg.noise_short());
    let (cq, cp, tq, tp) = qnd_variance_map(control.var_q, control.var_p, target.var_q, target.var_p, cfg);
    let c = GkpQubitState {
        dev_q: control.dev_q - long * a,
        dev_p: control.dev_p - g * target.dev_p + short * b,
        var_q: cq,
        var_p: cp,
    };
    let t = GkpQubitState {
        dev_q: g * control.dev_q + target.dev_q + short * a,
        dev_p: target.dev_p + long * b,
        var_q: tq,
        var_p: tp,
    };
    (c, t)
}

/// Ideal CNOT `exp(-i q_c p_t)`: `p_c -= p_t`, `q_t += q_c`.
pub fn cnot_ideal(control: GkpQubitState, target: GkpQubitState) -> (GkpQubitState, GkpQubitState) {
    let c = GkpQubitState {
        dev_p: control.dev_p - target.dev_p,
        var_p: control.var_p + target.var_p,
        ..control
    };
    let t = GkpQubitState {
        dev_q: target.dev_q + control.dev_q,
        var_q: target.var_q + control.var_q,
        ..target
    };
    (c, t)
}

/// Ideal CZ `exp(i q_a q_b)`: each p picks up the partner's q.
pub fn cz_ideal(a: GkpQubitState, b: GkpQubitState) -> (GkpQubitState, GkpQubitState) {
    let a2 = GkpQubitState {
        dev_p: a.dev_p + b.dev_q,
        var_p: a.var_p + b.var_q,
        ..a
    };
    let b2 = GkpQubitState {
        dev_p: b.dev_p + a.dev_q,
        var_p: b.var_p + a.var_q,
        ..b
    };
    (a2, b2)
}

/// Quarter-turn phase-space rotation `(q, p) -> (p, -q)`.
pub fn fourier(s: GkpQubitState) -> GkpQubitState {
    GkpQubitState {
        dev_q: s.dev_p,
        dev_p: -s.dev_q,
        var_q: s.var_p,
        var_p: s.var_q,
    }
}

/// Inverse of [`fourier`].
pub fn fourier_inv(s: GkpQubitState) -> GkpQubitState {
    GkpQubitState {
        dev_q: -s.dev_p,
        dev_p: s.dev_q,
        var_q: s.var_p,
        var_p: s.var_q,
    }
}

/// Noisy CZ: the QND gate conjugated by a local Fourier transform on `b`.
pub fn qnd_cz<R: Rng + ?Sized>(
    a: GkpQubitState,
    b: GkpQubitState,
    cfg: &QndConfig,
    rng: &mut R,
) -> (GkpQubitState, GkpQubitState) {
    let (a2, b2) = qnd_gate(a, fourier(b), cfg, rng);
    (a2, fourier_inv(b2))
}

/// Which two-qubit gate implementation a pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateModel {
    Ideal,
    Qnd(QndConfig),
}

impl Default for GateModel {
    fn default() -> Self {
        GateModel::Qnd(QndConfig::default())
    }
}

impl GateModel {
    pub fn cnot<R: Rng + ?Sized>(
        &self,
        control: GkpQubitState,
        target: GkpQubitState,
        rng: &mut R,
    ) -> (GkpQubitState, GkpQubitState) {
        match self {
            GateModel::Ideal => cnot_ideal(control, target),
            GateModel::Qnd(cfg) => qnd_gate(control, target, cfg, rng),
        }
    }

    pub fn cz<R: Rng + ?Sized>(&self, a: GkpQubitState, b: GkpQubitState, rng: &mut R) -> (GkpQubitState, GkpQubitState) {
        match self {
            GateModel::Ideal => cz_ideal(a, b),
            GateModel::Qnd(cfg) => qnd_cz(a, b, cfg, rng),
        }
    }

    /// Variance map of [`GateModel::cnot`] on `(var_q, var_p)` pairs.
    pub fn cnot_variances(&self, control: (f64, f64), target: (f64, f64)) -> ((f64, f64), (f64, f64)) {
        match self {
            GateModel::Ideal => ((control.0, control.1 + target.1), (target.0 + control.0, target.1)),
            GateModel::Qnd(cfg) => {
                let (cq, cp, tq, tp) = qnd_variance_map(control.0, control.1, target.0, target.1, cfg);
                ((cq, cp), (tq, tp))
            }
        }
    }

    /// Variance map of [`GateModel::cz`] on `(var_q, var_p)` pairs.
    pub fn cz_variances(&self, a: (f64, f64), b: (f64, f64)) -> ((f64, f64), (f64, f64)) {
        let (a2, (bq, bp)) = self.cnot_variances(a, (b.1, b.0));
        (a2, (bp, bq))
    }

    /// Linear coefficients of the CNOT as seen by one quadrature pair, used for
    /// second-moment bookkeeping: `(coupling, noise_long², noise_short², cross)`
    /// where `cross = long·short·σ²_sv` is the covariance the shared
    /// squeezed-vacuum sample induces between its two destinations.
    pub fn cnot_moments(&self) -> CnotMoments {
        match self {
            GateModel::Ideal => CnotMoments {
                coupling: 1.0,
                long_var: 0.0,
                short_var: 0.0,
                cross_cov: 0.0,
            },
            GateModel::Qnd(cfg) => CnotMoments {
                coupling: cfg.coupling(),
                long_var: cfg.noise_long().powi(2) * cfg.sv_variance,
                short_var: cfg.noise_short().powi(2) * cfg.sv_variance,
                cross_cov: cfg.noise_long() * cfg.noise_short() * cfg.sv_variance,
            },
        }
    }
}

/// Second-moment summary of a CNOT. With control `C` and target `T`:
/// `q_C += -long·a`, `p_C += -g·p_T + short·b`, `q_T += g·q_C + short·a`,
/// `p_T += long·b`, where `a, b ~ N(0, σ²_sv)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnotMoments {
    pub coupling: f64,
    pub long_var: f64,
    pub short_var: f64,
    pub cross_cov: f64,
}

/// Homodyne readout of one quadrature through a lossy channel, rescaled by
/// `1/√η` so the lattice stays at multiples of `√π`.
pub fn lossy_homodyne<R: Rng + ?Sized>(
    state: &GkpQubitState,
    quad: Quadrature,
    cfg: &LossConfig,
    rng: &mut R,
) -> MeasurementOutcome {
    let noise = if cfg.loss > 0.0 {
        gaussian(cfg.added_variance(), rng)
    } else {
        0.0
    };
    decide_bit(state.dev(quad) + noise)
}
