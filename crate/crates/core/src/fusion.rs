//! Deterministic fusion of two hexagonal clusters through `L` encoded leaf
//! pairs: every pair is Bell-measured, the most likely one is kept, and the
//! encoded leaves of the others are removed by repetition-coded p readouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{bell_outcome_variances, BuildConfig, Role, TreeCluster};
use crate::devices::{lossy_homodyne, GateModel, LossConfig};
use crate::error::{check_variance, Error, Result};
use crate::gkp::{
    analog_flip_likelihood, decide_bit, error_prob, gaussian_log_pdf, hrm_conditional_error, GkpQubitState, HrmConfig,
    MeasurementOutcome, Quadrature, SQRT_PI,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellRecord {
    pub index: usize,
    pub dev_a: f64,
    pub dev_b: f64,
    pub bits: (u8, u8),
    /// Product of the two Gaussian densities at the measured residuals.
    pub likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionBlock {
    pub outcomes: Vec<MeasurementOutcome>,
    pub decoded_bit: u8,
    /// `|log L(0) − log L(1)|` of the analog decision.
    pub soft_score: f64,
}

/// Variances seen by one side of a deterministic fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionPort {
    pub leaves: usize,
    pub ancillae: usize,
    /// `(var_q, var_p)` of each encoded leaf qubit.
    pub leaf_var: (f64, f64),
    /// `(var_q, var_p)` of each ancilla.
    pub ancilla_var: (f64, f64),
}

impl FusionPort {
    /// Port of node `node` of a hexagonal cluster: `L` of its encoded leaves.
    pub fn from_hex(hex: &TreeCluster, node: usize) -> Result<Self> {
        let leaves: Vec<usize> = hex
            .neighbours(node)
            .into_iter()
            .filter(|&n| hex.nodes[n].role == Role::Leaf)
            .collect();
        if leaves.len() < 2 || !leaves.len().is_multiple_of(2) {
            return Err(Error::InvalidParameter {
                name: "node",
                value: node as f64,
                reason: "node must carry 2L encoded leaves",
            });
        }
        let leaf = &hex.nodes[leaves[0]];
        let anc: Vec<usize> = hex
            .neighbours(leaves[0])
            .into_iter()
            .filter(|&n| hex.nodes[n].role == Role::EncodedLeafAncilla)
            .collect();
        let a = &hex.nodes[*anc.first().ok_or(Error::InvalidParameter {
            name: "node",
            value: node as f64,
            reason: "encoded leaf carries no ancillae",
        })?];
        Ok(FusionPort {
            leaves: leaves.len() / 2,
            ancillae: anc.len(),
            leaf_var: (leaf.ledger.var_q, leaf.ledger.var_p),
            ancilla_var: (a.ledger.var_q, a.ledger.var_p),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub gate: GateModel,
    pub loss: LossConfig,
}

impl FusionConfig {
    pub fn from_build(cfg: &BuildConfig) -> Self {
        FusionConfig {
            gate: cfg.gate,
            loss: cfg.loss,
        }
    }
}

/// Variances entering the fusion's three kinds of readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionVariances {
    /// Bell outcomes on the A and B side.
    pub bell: (f64, f64),
    /// Ancilla q readouts of the kept pair, per side.
    pub anc_q: (f64, f64),
    /// Ancilla p readouts of the discarded leaves, per side.
    pub anc_p: (f64, f64),
}

impl FusionVariances {
    pub fn new(a: &FusionPort, b: &FusionPort, cfg: &FusionConfig) -> Self {
        let bell = bell_outcome_variances(a.leaf_var, b.leaf_var, &cfg.gate, &cfg.loss);
        let loss = cfg.loss.added_variance();
        FusionVariances {
            bell,
            anc_q: (a.ancilla_var.0 + loss, b.ancilla_var.0 + loss),
            // the removal readouts carry the same σ²_pro as the Bell outcomes
            anc_p: bell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    pub kept_index: usize,
    /// Frame flips on nodes A and B (parity).
    pub node_bit_flips: [u8; 2],
    /// Posterior probability that each node's frame is wrong given every
    /// analog outcome of the fusion.
    pub flip_likelihood: [f64; 2],
    pub records: Vec<BellRecord>,
    /// Kept pair's ancilla q readouts on each side.
    pub winner_ancillae: [Vec<MeasurementOutcome>; 2],
    /// Removal blocks of the other `L − 1` leaves on each side.
    pub loser_blocks: [Vec<RepetitionBlock>; 2],
}

/// Index of the largest likelihood, lowest index on ties.
pub fn select_most_likely(records: &[BellRecord]) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.likelihood > records[best].likelihood {
            best = i;
        }
    }
    best
}

pub fn majority(bits: &[u8]) -> u8 {
    (2 * bits.iter().filter(|&&b| b == 1).count() > bits.len()) as u8
}

/// Analog decision for a repetition block: `argmax_b Σ log L_i(b)` with
/// `L_i(b) = f(|dev_i|)` when bit `i` equals `b`, else `f(√π − |dev_i|)`.
/// Returns `(bit, |margin|)`; exact ties go to 0.
pub fn analog_repetition_decode(outcomes: &[MeasurementOutcome], variance: f64) -> Result<(u8, f64)> {
    check_variance(variance)?;
    if outcomes.len().is_multiple_of(2) {
        return Err(Error::InvalidParameter {
            name: "m",
            value: outcomes.len() as f64,
            reason: "m must be odd",
        });
    }
    let mut margin = 0.0;
    for o in outcomes {
        let a = o.dev_m.abs();
        let near = gaussian_log_pdf(a, variance);
        let far = gaussian_log_pdf(SQRT_PI - a, variance);
        // log L(0) − log L(1) contribution
        margin += if o.bit == 0 { near - far } else { far - near };
    }
    Ok(((margin < 0.0) as u8, margin.abs()))
}

impl RepetitionBlock {
    pub fn decode(outcomes: Vec<MeasurementOutcome>, variance: f64) -> Result<Self> {
        let (decoded_bit, soft_score) = analog_repetition_decode(&outcomes, variance)?;
        Ok(RepetitionBlock {
            outcomes,
            decoded_bit,
            soft_score,
        })
    }

    /// Probability that the decoded bit is wrong given the analog outcomes.
    pub fn error_likelihood(&self) -> f64 {
        1.0 / (1.0 + self.soft_score.exp())
    }
}

fn readout<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> MeasurementOutcome {
    let s = GkpQubitState::sample(variance, rng);
    decide_bit(s.dev_q)
}

/// Flip probability of the XOR of independent binary errors.
pub fn combine_flip_probabilities(ps: impl IntoIterator<Item = f64>) -> f64 {
    (1.0 - ps.into_iter().map(|p| 1.0 - 2.0 * p).product::<f64>()) / 2.0
}

/// Step-3 fusion between two hexagonal cluster ports. Always succeeds.
pub fn run_deterministic_fusion<R: Rng + ?Sized>(
    a: &FusionPort,
    b: &FusionPort,
    cfg: &FusionConfig,
    rng: &mut R,
) -> Result<FusionOutcome> {
    if a.leaves != b.leaves || a.ancillae != b.ancillae || a.leaves == 0 {
        return Err(Error::InvalidParameter {
            name: "L",
            value: a.leaves as f64,
            reason: "ports must expose the same non-zero number of encoded leaves and ancillae",
        });
    }
    if a.ancillae.is_multiple_of(2) {
        return Err(Error::InvalidParameter {
            name: "m",
            value: a.ancillae as f64,
            reason: "m must be odd",
        });
    }
    let var = FusionVariances::new(a, b, cfg);
    let records: Vec<BellRecord> = (0..a.leaves)
        .map(|index| {
            let leaf = |v: (f64, f64), rng: &mut R| {
                let mut s = GkpQubitState::sample(1.0, rng);
                s.dev_q *= v.0.sqrt();
                s.dev_p *= v.1.sqrt();
                s.var_q = v.0;
                s.var_p = v.1;
                s
            };
            let (ua, ub) = (leaf(a.leaf_var, rng), leaf(b.leaf_var, rng));
            let (su, sv) = cfg.gate.cz(ua, ub, rng);
            let ra = lossy_homodyne(&su, Quadrature::P, &cfg.loss, rng);
            let rb = lossy_homodyne(&sv, Quadrature::P, &cfg.loss, rng);
            BellRecord {
                index,
                dev_a: ra.dev_m,
                dev_b: rb.dev_m,
                bits: (ra.bit, rb.bit),
                likelihood: (gaussian_log_pdf(ra.dev_m, var.bell.0) + gaussian_log_pdf(rb.dev_m, var.bell.1)).exp(),
            }
        })
        .collect();
    let kept_index = select_most_likely(&records);
    let kept = records[kept_index];

    let mut node_bit_flips = [kept.bits.0, kept.bits.1];
    let mut likelihoods = [
        vec![analog_flip_likelihood(kept.dev_a, var.bell.0)],
        vec![analog_flip_likelihood(kept.dev_b, var.bell.1)],
    ];
    let anc_q = [var.anc_q.0, var.anc_q.1];
    let anc_p = [var.anc_p.0, var.anc_p.1];
    let mut winner_ancillae: [Vec<MeasurementOutcome>; 2] = Default::default();
    let mut loser_blocks: [Vec<RepetitionBlock>; 2] = Default::default();
    for side in 0..2 {
        for _ in 0..a.ancillae {
            let o = readout(anc_q[side], rng);
            node_bit_flips[side] ^= o.bit;
            likelihoods[side].push(analog_flip_likelihood(o.dev_m, anc_q[side]));
            winner_ancillae[side].push(o);
        }
        for _ in 1..a.leaves {
            let outcomes = (0..a.ancillae).map(|_| readout(anc_p[side], rng)).collect();
            let block = RepetitionBlock::decode(outcomes, anc_p[side])?;
            node_bit_flips[side] ^= block.decoded_bit;
            likelihoods[side].push(block.error_likelihood());
            loser_blocks[side].push(block);
        }
    }
    let flip_likelihood = [
        combine_flip_probabilities(likelihoods[0].iter().copied()),
        combine_flip_probabilities(likelihoods[1].iter().copied()),
    ];
    Ok(FusionOutcome {
        kept_index,
        node_bit_flips,
        flip_likelihood,
        records,
        winner_ancillae,
        loser_blocks,
    })
}

/// Which exponent the repetition-code failure term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RepetitionExponent {
    /// `C(m, (m+1)/2)·E^((m+1)/2)`: fewest flips that defeat a majority vote.
    #[default]
    Leading,
    /// `C(m, (m−1)/2)·E^((m−1)/2)` as printed; equal to `E` at `m = 1`.
    Printed,
}

/// Leading-order repetition failure of `m` independent readouts with error `e`.
pub fn repetition_failure(m: usize, e: f64, exponent: RepetitionExponent) -> Result<f64> {
    if m.is_multiple_of(2) {
        return Err(Error::InvalidParameter {
            name: "m",
            value: m as f64,
            reason: "m must be odd",
        });
    }
    let k = match exponent {
        RepetitionExponent::Leading => m.div_ceil(2),
        RepetitionExponent::Printed if m == 1 => return Ok(e),
        RepetitionExponent::Printed => (m - 1) / 2,
    };
    Ok(binomial(m, k) * e.powi(k as i32))
}

pub fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionErrorBudget {
    pub e_ml: f64,
    pub e_anc_q: f64,
    pub e_anc_p: f64,
    pub e_det_pro: f64,
}

/// Leading-order error of one node's side of a deterministic fusion:
/// `E_det_pro = E_ML + m·E_anc_q + (L − 1)·E_anc_p`. `E_ML` is the HRM
/// conditional error at `σ²_pro`, standing in for the kept pair after the
/// likelihood selection.
pub fn leading_order_fusion_error(
    leaves: usize,
    ancillae: usize,
    var: &FusionVariances,
    hrm: &HrmConfig,
    exponent: RepetitionExponent,
) -> Result<FusionErrorBudget> {
    let e_ml = hrm_conditional_error(var.bell.0, hrm)?;
    let e_anc_q = error_prob(var.anc_q.0)?;
    let e_anc_p = repetition_failure(ancillae, error_prob(var.anc_p.0)?, exponent)?;
    Ok(FusionErrorBudget {
        e_ml,
        e_anc_q,
        e_anc_p,
        e_det_pro: e_ml + ancillae as f64 * e_anc_q + leaves.saturating_sub(1) as f64 * e_anc_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn outcome(bit: u8, dev: f64) -> MeasurementOutcome {
        MeasurementOutcome {
            raw_value: bit as f64 * SQRT_PI + dev,
            bit,
            dev_m: dev,
            accepted: true,
        }
    }

    fn record(i: usize, a: f64, b: f64, var: f64) -> BellRecord {
        BellRecord {
            index: i,
            dev_a: a,
            dev_b: b,
            bits: (0, 0),
            likelihood: (gaussian_log_pdf(a, var) + gaussian_log_pdf(b, var)).exp(),
        }
    }

    #[test]
    fn argmax_picks_smallest_deviations() {
        let pairs = [(0.3, 0.3), (0.05, 0.02), (0.2, 0.4), (0.6, 0.1)];
        let recs: Vec<_> = pairs.iter().enumerate().map(|(i, &(a, b))| record(i, a, b, 0.1)).collect();
        assert_eq!(select_most_likely(&recs), 1);
        let zeros: Vec<_> = (0..4).map(|i| record(i, 0.0, 0.0, 0.1)).collect();
        assert_eq!(select_most_likely(&zeros), 0);
    }

    #[test]
    fn repetition_examples() {
        let b = [outcome(0, 0.1), outcome(0, 0.1), outcome(1, 0.1)];
        assert_eq!(majority(&[0, 0, 1]), 0);
        assert_eq!(analog_repetition_decode(&b, 0.07).unwrap().0, 0);
        let c = [outcome(0, 0.02), outcome(1, 0.85), outcome(1, 0.85)];
        assert_eq!(majority(&[0, 1, 1]), 1);
        assert_eq!(analog_repetition_decode(&c, 0.07).unwrap().0, 0);
        for dev in [0.0, 0.4, 0.88] {
            assert_eq!(analog_repetition_decode(&[outcome(1, dev)], 0.07).unwrap().0, 1);
        }
        assert!(analog_repetition_decode(&b, 0.0).is_err());
        assert!(analog_repetition_decode(&b[..2], 0.1).is_err());
    }

    #[test]
    fn repetition_failure_terms() {
        let e = 0.01;
        assert!((repetition_failure(3, e, RepetitionExponent::Printed).unwrap() - 3.0 * e).abs() < 1e-15);
        assert!((repetition_failure(3, e, RepetitionExponent::Leading).unwrap() - 3.0 * e * e).abs() < 1e-15);
        assert_eq!(repetition_failure(1, e, RepetitionExponent::Printed).unwrap(), e);
        assert_eq!(repetition_failure(1, e, RepetitionExponent::Leading).unwrap(), e);
        assert!((repetition_failure(5, e, RepetitionExponent::Leading).unwrap() - 10.0 * e.powi(3)).abs() < 1e-18);
        assert!(repetition_failure(4, e, RepetitionExponent::Leading).is_err());
    }

    #[test]
    fn fusion_always_returns() {
        let port = FusionPort {
            leaves: 4,
            ancillae: 3,
            leaf_var: (0.05, 0.12),
            ancilla_var: (0.05, 0.1),
        };
        let cfg = FusionConfig {
            gate: GateModel::default(),
            loss: LossConfig::new(0.05).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let o = run_deterministic_fusion(&port, &port, &cfg, &mut rng).unwrap();
            assert!(o.kept_index < 4);
            assert_eq!(o.records.len(), 4);
            assert_eq!(o.winner_ancillae[0].len(), 3);
            assert_eq!(o.loser_blocks[1].len(), 3);
            assert!(o.flip_likelihood.iter().all(|p| (0.0..=0.5).contains(p)));
        }
    }

    #[test]
    fn combined_flip_probability() {
        assert!((combine_flip_probabilities([0.1, 0.2]) - (0.1 * 0.8 + 0.9 * 0.2)).abs() < 1e-15);
        assert_eq!(combine_flip_probabilities([]), 0.0);
    }
}
