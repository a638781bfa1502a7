//! Deviation algebra of the square GKP code.
//!
//! A GKP codeword is a comb of Gaussian peaks spaced `√π` apart in each
//! quadrature. In the deviation picture a qubit is fully described by how far
//! its true quadrature values sit from the ideal codeword, together with the
//! variance of those deviations. Logical information lives in which lattice
//! peak a value rounds to: even multiples of `√π` decode to bit 0, odd
//! multiples to bit 1.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::error::{check_variance, Error, Result};

/// `√π`, the lattice spacing of the square GKP code.
pub const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Half the lattice spacing; the largest residual a bit decision can return.
pub const HALF_SQRT_PI: f64 = SQRT_PI / 2.0;

/// Default number of lattice terms kept on each side in the HRM sums.
pub const LATTICE_TERMS: usize = 20;

/// Lattice-sum terms below this magnitude are dropped.
pub const LATTICE_TAIL: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrature {
    Q,
    P,
}

impl Quadrature {
    pub fn conjugate(self) -> Self {
        match self {
            Quadrature::Q => Quadrature::P,
            Quadrature::P => Quadrature::Q,
        }
    }
}

/// Squeezing level in decibels, `s = -10 log10(2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SqueezingDb(pub f64);

impl SqueezingDb {
    pub fn to_variance(self) -> f64 {
        squeezing_to_variance(self)
    }

    pub fn from_variance(variance: f64) -> Self {
        variance_to_squeezing(variance)
    }

    pub fn from_sigma(sigma: f64) -> Self {
        variance_to_squeezing(sigma * sigma)
    }

    pub fn db(self) -> f64 {
        self.0
    }
}

pub fn squeezing_to_variance(s: SqueezingDb) -> f64 {
    10f64.powf(-s.0 / 10.0) / 2.0
}

pub fn variance_to_squeezing(variance: f64) -> SqueezingDb {
    SqueezingDb(-10.0 * (2.0 * variance).log10())
}

/// Deviation-picture state of one GKP qubit.
///
/// `dev_q` / `dev_p` are the true (hidden) displacements from the ideal
/// codeword. They are unbounded: a value near an odd multiple of `√π` means
/// the qubit carries a logical flip in that quadrature. `var_q` / `var_p` are
/// the analytic variances the construction pipeline attributes to those
/// deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GkpQubitState {
    pub dev_q: f64,
    pub dev_p: f64,
    pub var_q: f64,
    pub var_p: f64,
}

impl GkpQubitState {
    /// A qubit sitting exactly on its codeword with the given variance.
    pub fn ideal(variance: f64) -> Self {
        GkpQubitState {
            dev_q: 0.0,
            dev_p: 0.0,
            var_q: variance,
            var_p: variance,
        }
    }

    /// Fresh qubit with independent `N(0, variance)` deviations in both quadratures.
    pub fn sample<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, variance.max(0.0).sqrt()).expect("finite variance");
        GkpQubitState {
            dev_q: normal.sample(rng),
            dev_p: normal.sample(rng),
            var_q: variance,
            var_p: variance,
        }
    }

    pub fn dev(&self, quad: Quadrature) -> f64 {
        match quad {
            Quadrature::Q => self.dev_q,
            Quadrature::P => self.dev_p,
        }
    }

    pub fn dev_mut(&mut self, quad: Quadrature) -> &mut f64 {
        match quad {
            Quadrature::Q => &mut self.dev_q,
            Quadrature::P => &mut self.dev_p,
        }
    }

    pub fn var(&self, quad: Quadrature) -> f64 {
        match quad {
            Quadrature::Q => self.var_q,
            Quadrature::P => self.var_p,
        }
    }

    pub fn var_mut(&mut self, quad: Quadrature) -> &mut f64 {
        match quad {
            Quadrature::Q => &mut self.var_q,
            Quadrature::P => &mut self.var_p,
        }
    }

    /// Parity of the lattice peak the q deviation currently rounds to.
    pub fn logical_bit_q(&self) -> u8 {
        lattice_parity(self.dev_q)
    }

    pub fn logical_bit_p(&self) -> u8 {
        lattice_parity(self.dev_p)
    }

    pub fn logical_bit(&self, quad: Quadrature) -> u8 {
        lattice_parity(self.dev(quad))
    }
}

/// Result of a homodyne bit decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementOutcome {
    pub raw_value: f64,
    pub bit: u8,
    /// Signed residual from the nearest peak, `|dev_m| <= √π/2`.
    pub dev_m: f64,
    /// Always true for plain decisions; for HRM, whether the residual fell inside the window.
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrmConfig {
    pub v_up: f64,
}

impl HrmConfig {
    pub fn new(v_up: f64) -> Result<Self> {
        if v_up.is_finite() && v_up > 0.0 && v_up < HALF_SQRT_PI {
            Ok(HrmConfig { v_up })
        } else {
            Err(Error::InvalidParameter {
                name: "v_up",
                value: v_up,
                reason: "must lie in (0, √π/2)",
            })
        }
    }
}

impl Default for HrmConfig {
    fn default() -> Self {
        HrmConfig {
            v_up: 2.0 * SQRT_PI / 5.0,
        }
    }
}

/// Index of the nearest lattice peak `n√π`. Exact half-way points go to the
/// peak of smaller magnitude.
pub fn nearest_peak(x: f64) -> i64 {
    let t = x / SQRT_PI;
    let lower = t.floor();
    let frac = t - lower;
    let n = if frac > 0.5 {
        lower + 1.0
    } else if frac < 0.5 {
        lower
    } else if (lower + 1.0).abs() < lower.abs() {
        lower + 1.0
    } else {
        lower
    };
    n as i64
}

pub fn lattice_parity(x: f64) -> u8 {
    nearest_peak(x).rem_euclid(2) as u8
}

/// Residual of `x` from its nearest lattice peak.
pub fn lattice_residual(x: f64) -> f64 {
    x - nearest_peak(x) as f64 * SQRT_PI
}

pub fn decide_bit(raw_value: f64) -> MeasurementOutcome {
    let n = nearest_peak(raw_value);
    MeasurementOutcome {
        raw_value,
        bit: n.rem_euclid(2) as u8,
        dev_m: raw_value - n as f64 * SQRT_PI,
        accepted: true,
    }
}

/// Highly reliable measurement: a bit decision that is only accepted when the
/// residual is strictly inside `v_up`.
pub fn hrm_decide(raw_value: f64, cfg: &HrmConfig) -> MeasurementOutcome {
    let mut out = decide_bit(raw_value);
    out.accepted = out.dev_m.abs() < cfg.v_up;
    out
}

pub fn gaussian_pdf(x: f64, variance: f64) -> f64 {
    (-x * x / (2.0 * variance)).exp() / (2.0 * PI * variance).sqrt()
}

pub fn gaussian_log_pdf(x: f64, variance: f64) -> f64 {
    -x * x / (2.0 * variance) - 0.5 * (2.0 * PI * variance).ln()
}

/// `P(a < X < b)` for `X ~ N(0, variance)`, evaluated through whichever of
/// erf/erfc keeps relative precision in the tails.
pub fn normal_interval_mass(a: f64, b: f64, variance: f64) -> f64 {
    debug_assert!(a <= b);
    let s = (2.0 * variance).sqrt();
    if a >= 0.0 {
        0.5 * (erfc(a / s) - erfc(b / s))
    } else if b <= 0.0 {
        0.5 * (erfc(-b / s) - erfc(-a / s))
    } else {
        0.5 * (erf(b / s) - erf(a / s))
    }
}

/// Probability that a zero-mean Gaussian deviation of the given variance lands
/// outside the central decision bin `(-√π/2, √π/2)`.
pub fn error_prob(variance: f64) -> Result<f64> {
    let v = check_variance(variance)?;
    Ok(erfc(HALF_SQRT_PI / (2.0 * v).sqrt()))
}

/// Probability that the deviation lands in a wrong-parity bin, i.e. rounds to
/// an odd multiple of `√π`. Slightly below [`error_prob`], which also counts
/// the even bins at `±2√π, ±4√π, …` as errors.
pub fn error_prob_binned(variance: f64) -> Result<f64> {
    let v = check_variance(variance)?;
    let mut total = 0.0;
    for j in 0..=LATTICE_TERMS {
        let centre = (2 * j + 1) as f64 * SQRT_PI;
        let term = normal_interval_mass(centre - HALF_SQRT_PI, centre + HALF_SQRT_PI, v);
        total += 2.0 * term;
        if term < LATTICE_TAIL {
            break;
        }
    }
    Ok(total)
}

/// Acceptance-window masses `(p_cor, p_in)` of the HRM: the probability that
/// a deviation lands within `v_up` of an even peak (correct decision) or an
/// odd peak (accepted but wrong).
pub fn hrm_probabilities(variance: f64, cfg: &HrmConfig) -> Result<(f64, f64)> {
    let v = check_variance(variance)?;
    let w = cfg.v_up;
    let mut p_cor = normal_interval_mass(-w, w, v);
    for k in 1..=LATTICE_TERMS {
        let centre = (2 * k) as f64 * SQRT_PI;
        let term = normal_interval_mass(centre - w, centre + w, v);
        p_cor += 2.0 * term;
        if term < LATTICE_TAIL {
            break;
        }
    }
    let mut p_in = 0.0;
    for k in 0..=LATTICE_TERMS {
        let centre = (2 * k + 1) as f64 * SQRT_PI;
        let term = normal_interval_mass(centre - w, centre + w, v);
        p_in += 2.0 * term;
        if term < LATTICE_TAIL {
            break;
        }
    }
    Ok((p_cor, p_in))
}

/// Error probability of an accepted HRM decision, `p_in / (p_cor + p_in)`.
pub fn hrm_conditional_error(variance: f64, cfg: &HrmConfig) -> Result<f64> {
    let (p_cor, p_in) = hrm_probabilities(variance, cfg)?;
    Ok(p_in / (p_cor + p_in))
}

/// Probability that an HRM decision is accepted at all.
pub fn hrm_acceptance(variance: f64, cfg: &HrmConfig) -> Result<f64> {
    let (p_cor, p_in) = hrm_probabilities(variance, cfg)?;
    Ok(p_cor + p_in)
}

/// Probability that a measured residual `dev_m` came from the wrong peak,
/// for Gaussian deviations of the given variance.
pub fn analog_flip_likelihood(dev_m: f64, variance: f64) -> f64 {
    let a = dev_m.abs();
    let l_right = gaussian_log_pdf(a, variance);
    let l_wrong = gaussian_log_pdf(SQRT_PI - a, variance);
    1.0 / (1.0 + (l_right - l_wrong).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squeezing_examples() {
        let v = squeezing_to_variance(SqueezingDb(8.3));
        assert!((v.sqrt() - 0.2720).abs() < 5e-4, "{}", v.sqrt());
        assert!((v - 0.07399).abs() < 1e-4);
        // the reported pairing 8.3 dB <-> σ = 0.273 holds to rounding
        assert!((SqueezingDb::from_sigma(0.273).db() - 8.3).abs() < 0.05);
        assert_eq!(squeezing_to_variance(SqueezingDb(0.0)), 0.5);
        assert!((squeezing_to_variance(SqueezingDb(15.0)) - 0.0158114).abs() < 1e-7);
    }

    #[test]
    fn error_prob_examples() {
        assert!(error_prob(1e-6).unwrap() < 1e-300);
        // quadrature of the central bin gives 1.1694e-3; the quoted 1.15e-3 is a rounded figure
        let e = error_prob(0.273 * 0.273).unwrap();
        assert!((e - 1.1694e-3).abs() < 1e-7, "{e}");
        assert!((e - 1.15e-3).abs() / 1.15e-3 < 0.02);
        let e = error_prob(0.25).unwrap();
        assert!((e - 7.6319e-2).abs() < 1e-6, "{e}");
        assert!((e - 7.66e-2).abs() / 7.66e-2 < 0.01);
        assert!(error_prob(0.0).is_err());
        assert!(error_prob(-1.0).is_err());
    }

    #[test]
    fn error_prob_is_increasing() {
        let mut last = 0.0;
        for i in 1..400 {
            let v = i as f64 * 0.0025;
            let e = error_prob(v).unwrap();
            assert!(e > last || (e == 0.0 && last == 0.0));
            last = e;
        }
    }

    #[test]
    fn decide_bit_examples() {
        let o = decide_bit(0.0);
        assert_eq!((o.bit, o.dev_m), (0, 0.0));
        let o = decide_bit(SQRT_PI);
        assert_eq!(o.bit, 1);
        assert!(o.dev_m.abs() < 1e-15);
        let o = decide_bit(0.9 * SQRT_PI / 2.0);
        assert_eq!(o.bit, 0);
        assert!((o.dev_m - 0.45 * SQRT_PI).abs() < 1e-15);
        let o = decide_bit(-3.0 * SQRT_PI + 0.2);
        assert_eq!(o.bit, 1);
        assert!((o.dev_m - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_smaller_peak() {
        assert_eq!(nearest_peak(HALF_SQRT_PI), 0);
        assert_eq!(nearest_peak(-HALF_SQRT_PI), 0);
        assert_eq!(nearest_peak(1.5 * SQRT_PI), 1);
        assert_eq!(nearest_peak(-1.5 * SQRT_PI), -1);
    }

    #[test]
    fn hrm_decide_examples() {
        let cfg = HrmConfig::default();
        let o = hrm_decide(0.1, &cfg);
        assert!(o.accepted && o.bit == 0);
        let o = hrm_decide(0.8, &cfg);
        assert!(!o.accepted);
        assert_eq!(o.bit, 0);
        let o = hrm_decide(SQRT_PI + 0.05, &cfg);
        assert!(o.accepted && o.bit == 1);
        assert!((o.dev_m - 0.05).abs() < 1e-12);
    }

    #[test]
    fn hrm_config_validation() {
        assert!(HrmConfig::new(0.0).is_err());
        assert!(HrmConfig::new(HALF_SQRT_PI).is_err());
        assert!(HrmConfig::new(0.5).is_ok());
        assert!((HrmConfig::default().v_up - 0.708_981_540_362_206).abs() < 1e-12);
    }

    #[test]
    fn hrm_full_window_limit() {
        let cfg = HrmConfig {
            v_up: HALF_SQRT_PI * (1.0 - 1e-12),
        };
        for &v in &[0.02, 0.07, 0.2, 0.5] {
            let (c, i) = hrm_probabilities(v, &cfg).unwrap();
            assert!((c + i - 1.0).abs() < 1e-9);
            assert!((i - error_prob_binned(v).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn hrm_narrow_limit() {
        let (c, i) = hrm_probabilities(1e-4, &HrmConfig::default()).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        assert!(i < 1e-300);
    }

    #[test]
    fn hrm_conditional_error_beats_plain_decision() {
        let v = 0.273f64.powi(2);
        let cond = hrm_conditional_error(v, &HrmConfig::default()).unwrap();
        assert!(cond < 0.2 * error_prob(v).unwrap());
    }

    #[test]
    fn hrm_window_monotonicity() {
        // a wider acceptance window admits more wrong-parity mass
        let v = 0.08;
        let mut last_err = 0.0;
        let mut last_acc = 0.0;
        for i in 1..40 {
            let cfg = HrmConfig::new(i as f64 * HALF_SQRT_PI / 40.0).unwrap();
            let (c, w) = hrm_probabilities(v, &cfg).unwrap();
            assert!(c + w <= 1.0 + 1e-15);
            let err = w / (c + w);
            assert!(err > last_err);
            assert!(c + w > last_acc);
            last_err = err;
            last_acc = c + w;
        }
    }

    #[test]
    fn sampled_decisions_match_binned_error() {
        let v: f64 = 0.25;
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, v.sqrt()).unwrap();
        let wrong = (0..n).filter(|_| decide_bit(normal.sample(&mut rng)).bit == 1).count() as f64;
        let p = error_prob_binned(v).unwrap();
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((wrong - n as f64 * p).abs() < 3.0 * sd, "{wrong} vs {}", n as f64 * p);
    }

    proptest! {
        #[test]
        fn squeezing_round_trip(s in 0.0f64..30.0) {
            let back = variance_to_squeezing(squeezing_to_variance(SqueezingDb(s))).0;
            prop_assert!((back - s).abs() <= 1e-12 * s.max(1.0));
        }

        #[test]
        fn residual_bound(raw in -50.0f64..50.0) {
            let o = decide_bit(raw);
            prop_assert!(o.dev_m.abs() <= HALF_SQRT_PI + 1e-12);
            let n = nearest_peak(raw);
            prop_assert_eq!(n.rem_euclid(2) as u8, o.bit);
            prop_assert!((n as f64 * SQRT_PI + o.dev_m - raw).abs() < 1e-12);
        }
    }
}
