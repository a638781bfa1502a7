//! Leading-order error budgets per node qubit and the squeezing thresholds
//! they imply, for the previous (highly reliable 3D cluster) method and the
//! proposed encoded-leaf method.

use serde::{Deserialize, Serialize};

use crate::cluster::{bell_outcome_variances, tree3_ledger, BuildConfig};
use crate::devices::{GateModel, LossConfig, QndConfig};
use crate::error::{check_variance, Error, Result};
use crate::fusion::{
    leading_order_fusion_error, FusionConfig, FusionErrorBudget, FusionPort, FusionVariances, RepetitionExponent,
};
use crate::gkp::{error_prob, hrm_acceptance, hrm_conditional_error, HrmConfig, SqueezingDb, HALF_SQRT_PI};

pub const DEFAULT_TARGET: f64 = 0.03;
const SIGMA2_LO: f64 = 1e-6;
const SIGMA2_HI: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub e_node: f64,
    pub e_hrm: f64,
    pub e_det: f64,
    pub e_det_pro: f64,
    pub e_tot: f64,
    pub e_tot_pro: f64,
}

/// `3σ² + σ²_sv(1−R) + (1−η)/2η`, the leaf variance sum of the previous method.
pub fn sigma_prime_sq(sigma2: f64, qnd: &QndConfig, loss: &LossConfig) -> f64 {
    3.0 * sigma2 + qnd.sv_variance * (1.0 - qnd.reflectivity) + loss.added_variance()
}

/// How the gate and loss terms enter `σ'²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PreviousModel {
    /// Gate and loss noise counted once, as printed.
    Printed,
    /// Every contribution of a GKP qubit (its own variance, one QND gate, one
    /// lossy readout) carried by each of the three qubits summed into `σ'²`:
    /// `3(σ² + σ²_sv(1−R) + (1−η)/2η)`.
    #[default]
    Effective,
}

impl PreviousModel {
    pub fn sigma_prime_sq(self, sigma2: f64, qnd: &QndConfig, loss: &LossConfig) -> f64 {
        match self {
            PreviousModel::Printed => sigma_prime_sq(sigma2, qnd, loss),
            PreviousModel::Effective => 3.0 * (sigma2 + qnd.sv_variance * (1.0 - qnd.reflectivity) + loss.added_variance()),
        }
    }
}

/// `E_tot ≈ E_node + E_HRM + 2E(σ'²)` for the previous method, with the node
/// and HRM terms from the HRM conditional error at the node and fusion variances.
pub fn previous_budget(
    sigma2: f64,
    qnd: &QndConfig,
    loss: &LossConfig,
    model: PreviousModel,
    hrm: Option<&HrmConfig>,
) -> Result<ErrorBudget> {
    check_variance(sigma2)?;
    let sp = model.sigma_prime_sq(sigma2, qnd, loss);
    let e_det = error_prob(sp)?;
    let (e_node, e_hrm) = match hrm {
        Some(h) => small_terms(&build_config(sigma2, qnd, loss, h)?)?,
        None => (0.0, 0.0),
    };
    Ok(ErrorBudget {
        e_node,
        e_hrm,
        e_det,
        e_det_pro: e_det,
        e_tot: e_node + e_hrm + 2.0 * e_det,
        e_tot_pro: e_node + e_hrm + 2.0 * e_det,
    })
}

fn build_config(sigma2: f64, qnd: &QndConfig, loss: &LossConfig, hrm: &HrmConfig) -> Result<BuildConfig> {
    Ok(BuildConfig {
        gate: GateModel::Qnd(*qnd),
        loss: *loss,
        hrm: *hrm,
        ..BuildConfig::new(sigma2)?
    })
}

/// `(E_node, E_HRM)`: the node's p readout and the two ring fusions each node
/// takes part in, all under the HRM.
fn small_terms(cfg: &BuildConfig) -> Result<(f64, f64)> {
    let [node, _, _] = tree3_ledger(cfg);
    let e_node = hrm_conditional_error(node.1 + cfg.loss.added_variance(), &cfg.hrm)?;
    let (bell, _) = bell_outcome_variances(node, node, &cfg.gate, &cfg.loss);
    Ok((e_node, 2.0 * hrm_conditional_error(bell, &cfg.hrm)?))
}

/// How `E_ML` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MlProxy {
    /// HRM conditional error at the configured window.
    Window,
    /// HRM conditional error at the window whose acceptance gives this
    /// probability that at least one of the `L` Bell pairs is kept.
    Success(f64),
}

/// Which terms of `E_tot,pro` the threshold solver keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProposedTerms {
    /// `2E_ML + 2(L−1)E_anc,p`.
    #[default]
    Dominant,
    /// `E_node + E_HRM + 2E_det,pro`.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposedConfig {
    pub leaves: usize,
    pub ancillae: usize,
    pub me_sqec_iters: usize,
    pub hrm: HrmConfig,
    pub exponent: RepetitionExponent,
    pub ml_proxy: MlProxy,
    pub terms: ProposedTerms,
    /// Count measurement loss on the ME-SQEC ancillae when building the leaf
    /// ledger. Off by default: `σ²_pro` then carries a single loss term.
    pub ancilla_loss: bool,
}

impl Default for ProposedConfig {
    fn default() -> Self {
        ProposedConfig {
            leaves: 4,
            ancillae: 3,
            me_sqec_iters: 3,
            hrm: HrmConfig::default(),
            exponent: RepetitionExponent::Leading,
            ml_proxy: MlProxy::Success(0.999),
            terms: ProposedTerms::Dominant,
            ancilla_loss: false,
        }
    }
}

impl ProposedConfig {
    pub fn validated(self) -> Result<Self> {
        if self.ancillae.is_multiple_of(2) {
            return Err(Error::InvalidParameter {
                name: "m",
                value: self.ancillae as f64,
                reason: "m must be odd",
            });
        }
        if self.leaves == 0 {
            return Err(Error::InvalidParameter {
                name: "L",
                value: 0.0,
                reason: "L must be at least 1",
            });
        }
        if let MlProxy::Success(p) = self.ml_proxy {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidParameter {
                    name: "success",
                    value: p,
                    reason: "must lie in (0, 1)",
                });
            }
        }
        Ok(self)
    }

    fn build(&self, sigma2: f64, qnd: &QndConfig, loss: &LossConfig) -> Result<BuildConfig> {
        Ok(BuildConfig {
            me_sqec_iters: self.me_sqec_iters,
            leaves: self.leaves,
            ancillae: self.ancillae,
            ancilla_loss: self.ancilla_loss,
            ..build_config(sigma2, qnd, loss, &self.hrm)?
        })
    }
}

/// HRM window whose per-pair acceptance `a` gives `1 − (1 − a)^L = success`.
pub fn hrm_window_for_success(variance: f64, leaves: usize, success: f64) -> Result<HrmConfig> {
    let target = 1.0 - (1.0 - success).powf(1.0 / leaves as f64);
    let (mut lo, mut hi) = (0.0, HALF_SQRT_PI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hrm_acceptance(variance, &HrmConfig { v_up: mid })? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    HrmConfig::new(hi.min(HALF_SQRT_PI * (1.0 - 1e-12)))
}

/// Fusion port of a hexagonal cluster built at `sigma2`: every encoded leaf
/// and ancilla carries the 3-tree ledger of the qubit it grew from.
pub fn proposed_port(sigma2: f64, qnd: &QndConfig, loss: &LossConfig, cfg: &ProposedConfig) -> Result<FusionPort> {
    let [node, _, leaf] = tree3_ledger(&cfg.build(sigma2, qnd, loss)?);
    Ok(FusionPort {
        leaves: cfg.leaves,
        ancillae: cfg.ancillae,
        leaf_var: node,
        ancilla_var: leaf,
    })
}

/// Budget of the proposed method. `e_det` is `E(σ²_pro)`, the unselected
/// single-pair error, for comparison.
pub fn proposed_budget(
    sigma2: f64,
    qnd: &QndConfig,
    loss: &LossConfig,
    cfg: &ProposedConfig,
) -> Result<(ErrorBudget, FusionErrorBudget)> {
    check_variance(sigma2)?;
    let cfg = cfg.validated()?;
    let port = proposed_port(sigma2, qnd, loss, &cfg)?;
    let gate = GateModel::Qnd(*qnd);
    let var = FusionVariances::new(&port, &port, &FusionConfig { gate, loss: *loss });
    let window = match cfg.ml_proxy {
        MlProxy::Window => cfg.hrm,
        MlProxy::Success(p) => hrm_window_for_success(var.bell.0, cfg.leaves, p)?,
    };
    let f = leading_order_fusion_error(cfg.leaves, cfg.ancillae, &var, &window, cfg.exponent)?;
    let (e_node, e_hrm) = small_terms(&cfg.build(sigma2, qnd, loss)?)?;
    let e_det = error_prob(var.bell.0)?;
    let budget = ErrorBudget {
        e_node,
        e_hrm,
        e_det,
        e_det_pro: f.e_det_pro,
        e_tot: e_node + e_hrm + 2.0 * e_det,
        e_tot_pro: e_node + e_hrm + 2.0 * f.e_det_pro,
    };
    Ok((budget, f))
}

/// The quantity `threshold_proposed` drives to the target.
pub fn proposed_objective(sigma2: f64, qnd: &QndConfig, loss: &LossConfig, cfg: &ProposedConfig) -> Result<f64> {
    let (b, f) = proposed_budget(sigma2, qnd, loss, cfg)?;
    Ok(match cfg.terms {
        ProposedTerms::Dominant => 2.0 * f.e_ml + 2.0 * cfg.leaves.saturating_sub(1) as f64 * f.e_anc_p,
        ProposedTerms::Full => b.e_tot_pro,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub sigma2: f64,
    pub squeezing: SqueezingDb,
    /// `f(σ²) − target` at the returned root.
    pub residual: f64,
}

/// Largest `σ²` in `(1e-6, 1)` with `f(σ²) ≤ target`, for `f` increasing.
pub fn solve_threshold(target: f64, f: impl Fn(f64) -> Result<f64>) -> Result<Threshold> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidParameter {
            name: "target",
            value: target,
            reason: "must lie in (0, 1)",
        });
    }
    let floor = f(SIGMA2_LO)?;
    if floor > target {
        return Err(Error::Unachievable { target, floor });
    }
    let (mut lo, mut hi) = (SIGMA2_LO, SIGMA2_HI);
    if f(hi)? <= target {
        return Err(Error::InvalidParameter {
            name: "target",
            value: target,
            reason: "not reached for σ² < 1",
        });
    }
    while hi - lo > 1e-15 * hi {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let sigma2 = 0.5 * (lo + hi);
    Ok(Threshold {
        sigma2,
        squeezing: SqueezingDb::from_variance(sigma2),
        residual: f(sigma2)? - target,
    })
}

/// Squeezing at which `2E(σ'²)` reaches `target` (the node and HRM terms are
/// left out, as in the leading-order estimate).
pub fn threshold_previous(loss: &LossConfig, qnd: &QndConfig, target: f64, model: PreviousModel) -> Result<Threshold> {
    solve_threshold(target, |s| Ok(previous_budget(s, qnd, loss, model, None)?.e_tot))
}

/// Squeezing at which the proposed method's budget (see [`ProposedTerms`])
/// reaches `target`.
pub fn threshold_proposed(loss: &LossConfig, qnd: &QndConfig, cfg: &ProposedConfig, target: f64) -> Result<Threshold> {
    solve_threshold(target, |s| proposed_objective(s, qnd, loss, cfg))
}

/// Smallest loss at which the previous method's threshold becomes
/// unachievable, found by bisection on `l ∈ (0, 0.5)`.
pub fn loss_ceiling_previous(qnd: &QndConfig, target: f64, model: PreviousModel) -> Result<f64> {
    let reachable = |l: f64| -> Result<bool> {
        match threshold_previous(&LossConfig::new(l)?, qnd, target, model) {
            Ok(_) => Ok(true),
            Err(Error::Unachievable { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    let (mut lo, mut hi) = (0.0, 0.5);
    if !reachable(lo)? || reachable(hi)? {
        return Err(Error::InvalidParameter {
            name: "target",
            value: target,
            reason: "no loss ceiling inside (0, 0.5)",
        });
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if reachable(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_prime_examples() {
        let ideal = QndConfig::new(0.5, 0.0).unwrap();
        assert_eq!(sigma_prime_sq(0.0, &ideal, &LossConfig::lossless()), 0.0);
        let qnd = QndConfig::default();
        let v = sigma_prime_sq(0.04, &qnd, &LossConfig::lossless());
        assert!((v - (0.12 + 0.0158114 * 0.618034)).abs() < 1e-6, "{v}");
        assert!((v - 0.129772).abs() < 1e-6);
        let lossy = sigma_prime_sq(0.04, &qnd, &LossConfig::new(0.05).unwrap());
        assert!((lossy - v - 0.0263158).abs() < 1e-7);
    }

    #[test]
    fn solver_residual_is_tiny() {
        let qnd = QndConfig::default();
        for l in [0.0, 0.03, 0.05] {
            let t = threshold_previous(&LossConfig::new(l).unwrap(), &qnd, 0.03, PreviousModel::Effective).unwrap();
            assert!(t.residual.abs() / 0.03 < 1e-10);
        }
        let t = threshold_proposed(&LossConfig::lossless(), &qnd, &ProposedConfig::default(), 0.03).unwrap();
        assert!(t.residual.abs() / 0.03 < 1e-10);
    }

    #[test]
    fn loss_beyond_ceiling_is_unachievable() {
        let qnd = QndConfig::default();
        let r = threshold_previous(&LossConfig::new(0.2).unwrap(), &qnd, 0.03, PreviousModel::Effective);
        assert!(matches!(r, Err(Error::Unachievable { .. })));
    }

    #[test]
    fn bad_targets_rejected() {
        let qnd = QndConfig::default();
        let loss = LossConfig::lossless();
        for t in [0.0, 1.0, -0.1] {
            assert!(threshold_previous(&loss, &qnd, t, PreviousModel::Printed).is_err());
        }
        let even = ProposedConfig {
            ancillae: 2,
            ..Default::default()
        };
        assert!(threshold_proposed(&loss, &qnd, &even, 0.03).is_err());
    }
}
