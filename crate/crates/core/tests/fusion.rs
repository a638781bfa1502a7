use gkp_mbqc::cluster::{hexagonal_ledger, BuildConfig};
use gkp_mbqc::devices::{GateModel, LossConfig};
use gkp_mbqc::fusion::*;
use gkp_mbqc::gkp::{decide_bit, gaussian_log_pdf, GkpQubitState, HrmConfig, MeasurementOutcome};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

fn record(i: usize, a: f64, b: f64, var: f64) -> BellRecord {
    BellRecord {
        index: i,
        dev_a: a,
        dev_b: b,
        bits: (0, 0),
        likelihood: (gaussian_log_pdf(a, var) + gaussian_log_pdf(b, var)).exp(),
    }
}

proptest! {
    #[test]
    fn kept_index_ignores_common_variance(
        devs in prop::collection::vec((-0.88f64..0.88, -0.88f64..0.88), 1..8),
        v1 in 0.02f64..0.5,
        v2 in 0.02f64..0.5,
    ) {
        let a: Vec<_> = devs.iter().enumerate().map(|(i, &(x, y))| record(i, x, y, v1)).collect();
        let b: Vec<_> = devs.iter().enumerate().map(|(i, &(x, y))| record(i, x, y, v2)).collect();
        let scaled: Vec<_> = a.iter().map(|r| BellRecord { likelihood: r.likelihood * 3.7, ..*r }).collect();
        let k = select_most_likely(&a);
        // near-ties can flip under rounding; compare against the squared-sum oracle instead
        let best = devs.iter().map(|(x, y)| x * x + y * y).fold(f64::INFINITY, f64::min);
        let (x, y) = devs[k];
        prop_assert!((x * x + y * y - best).abs() < 1e-12);
        let (x, y) = devs[select_most_likely(&b)];
        prop_assert!((x * x + y * y - best).abs() < 1e-12);
        prop_assert_eq!(select_most_likely(&scaled), k);
    }

    #[test]
    fn repetition_failure_increases_with_variance(v in 0.01f64..0.8, dv in 1e-4f64..0.2, m in 1usize..5) {
        let m = 2 * m + 1;
        let e1 = gkp_mbqc::gkp::error_prob(v).unwrap();
        let e2 = gkp_mbqc::gkp::error_prob(v + dv).unwrap();
        for ex in [RepetitionExponent::Leading, RepetitionExponent::Printed] {
            prop_assert!(repetition_failure(m, e2, ex).unwrap() > repetition_failure(m, e1, ex).unwrap());
        }
    }

    #[test]
    fn equal_deviations_decode_as_majority(bits in prop::collection::vec(0u8..2, 1..8), dev in 0.0f64..0.8, v in 0.02f64..0.5) {
        let bits = if bits.len() % 2 == 0 { bits[1..].to_vec() } else { bits };
        let block: Vec<_> = bits.iter().map(|&b| MeasurementOutcome { raw_value: 0.0, bit: b, dev_m: dev, accepted: true }).collect();
        prop_assert_eq!(analog_repetition_decode(&block, v).unwrap().0, majority(&bits));
    }
}

#[test]
fn analog_decoding_is_no_worse_than_majority() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for var in [0.05, 0.1, 0.2] {
        let n = 100_000;
        let (mut analog, mut plain) = (0u32, 0u32);
        for _ in 0..n {
            let block: Vec<MeasurementOutcome> = (0..3)
                .map(|_| decide_bit(GkpQubitState::sample(var, &mut rng).dev_q))
                .collect();
            let bits: Vec<u8> = block.iter().map(|o| o.bit).collect();
            analog += analog_repetition_decode(&block, var).unwrap().0 as u32;
            plain += majority(&bits) as u32;
        }
        let (a, p) = (analog as f64 / n as f64, plain as f64 / n as f64);
        let se = ((a * (1.0 - a) + p * (1.0 - p)) / n as f64).sqrt();
        assert!(a <= p + 3.0 * se, "var {var}: analog {a} majority {p}");
    }
}

#[test]
fn anc_p_term_from_defaults() {
    // σ = 0.235 with 5% loss; Bell outcome variance from the hex ledger
    let cfg = BuildConfig {
        loss: LossConfig::new(0.05).unwrap(),
        ..BuildConfig::new(0.235f64.powi(2)).unwrap()
    };
    let (hex, _) = hexagonal_ledger(&cfg).unwrap();
    let port = FusionPort::from_hex(&hex, hex.centres[0]).unwrap();
    assert_eq!((port.leaves, port.ancillae), (4, 3));
    let var = FusionVariances::new(&port, &port, &FusionConfig::from_build(&cfg));

    // oracle: CZ outcome variance of the QND gate plus readout noise
    let GateModel::Qnd(q) = cfg.gate else { unreachable!() };
    let r = q.reflectivity;
    let g2 = (1.0 - r) * (1.0 - r) / r;
    let short = r * (1.0 - r) / (1.0 + r) * q.sv_variance;
    let (lq, lp) = port.leaf_var;
    let eta = 0.95;
    let pro = lp + g2 * lq + short + (1.0 - eta) / (2.0 * eta);
    assert!((var.bell.0 - pro).abs() < 1e-12);
    let e = erfc(std::f64::consts::PI.sqrt() / 2.0 / (2.0 * pro).sqrt());
    let budget = leading_order_fusion_error(4, 3, &var, &HrmConfig::default(), RepetitionExponent::Printed).unwrap();
    assert!((budget.e_anc_p - 3.0 * e).abs() < 1e-12);
    let lead = leading_order_fusion_error(4, 3, &var, &HrmConfig::default(), RepetitionExponent::Leading).unwrap();
    assert!((lead.e_anc_p - 3.0 * e * e).abs() < 1e-12);
    assert!((lead.e_det_pro - (lead.e_ml + 3.0 * lead.e_anc_q + 3.0 * lead.e_anc_p)).abs() < 1e-15);
}

#[test]
fn all_zero_deviations_keep_first_pair_without_flips() {
    let port = FusionPort {
        leaves: 4,
        ancillae: 3,
        leaf_var: (1e-12, 1e-12),
        ancilla_var: (1e-12, 1e-12),
    };
    let cfg = FusionConfig {
        gate: GateModel::Ideal,
        loss: LossConfig::lossless(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let o = run_deterministic_fusion(&port, &port, &cfg, &mut rng).unwrap();
    assert_eq!(o.node_bit_flips, [0, 0]);
    assert!(o.flip_likelihood.iter().all(|&p| p < 1e-12));
}

#[test]
fn likelihood_selection_beats_hrm_proxy() {
    // selecting the best of L pairs is stronger than the HRM proxy used at leading order
    let port = FusionPort {
        leaves: 4,
        ancillae: 3,
        leaf_var: (0.03, 0.06),
        ancilla_var: (0.03, 0.06),
    };
    let cfg = FusionConfig {
        gate: GateModel::Ideal,
        loss: LossConfig::lossless(),
    };
    let var = FusionVariances::new(&port, &port, &cfg);
    let lo = leading_order_fusion_error(4, 3, &var, &HrmConfig::default(), RepetitionExponent::Leading).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 200_000;
    let flips: u32 = (0..n)
        .map(|_| run_deterministic_fusion(&port, &port, &cfg, &mut rng).unwrap().node_bit_flips[0] as u32)
        .sum();
    let rate = flips as f64 / n as f64;
    println!("monte carlo {rate:.3e}, leading order {:.3e}", lo.e_det_pro);
    assert!(rate < lo.e_det_pro);
}
