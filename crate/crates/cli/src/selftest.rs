//! Quick oracle checks behind `gkp-mbqc selftest`.

use gkp_mbqc::devices::QndConfig;
use gkp_mbqc::fusion::analog_repetition_decode;
use gkp_mbqc::gkp::{decide_bit, error_prob, error_prob_binned, gaussian_log_pdf, hrm_probabilities, HrmConfig, SQRT_PI};
use gkp_mbqc::topo::{decode_mwpm, dijkstra, trial_rng, RhgLattice};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub total: usize,
    pub failed: usize,
    pub lines: Vec<String>,
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn density(x: f64, var: f64) -> f64 {
    gaussian_log_pdf(x, var).exp()
}

fn check_formulas() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for var in [0.01f64, 0.05, 0.1, 0.2] {
        // integrate the tail itself; 1 minus the centre loses every digit at small variance
        let edge = SQRT_PI / 2.0;
        let tail = 2.0 * simpson(|x| density(x, var), edge, edge + 40.0 * var.sqrt(), 8000);
        let e = error_prob(var).map_err(|e| e.to_string())?;
        worst = worst.max((tail - e).abs() / e.max(1e-300));
        let mut odd = 0.0;
        for k in [1.0, 3.0, 5.0] {
            odd += 2.0 * simpson(|x| density(x, var), (k - 0.5) * SQRT_PI, (k + 0.5) * SQRT_PI, 4000);
        }
        let b = error_prob_binned(var).map_err(|e| e.to_string())?;
        worst = worst.max((odd - b).abs() / b.max(1e-300));
        let hrm = HrmConfig::default();
        let (p_cor, p_in) = hrm_probabilities(var, &hrm).map_err(|e| e.to_string())?;
        let w = hrm.v_up;
        let q_cor = simpson(|x| density(x, var), -w, w, 4000)
            + 2.0 * simpson(|x| density(x, var), 2.0 * SQRT_PI - w, 2.0 * SQRT_PI + w, 4000);
        let q_in = 2.0 * simpson(|x| density(x, var), SQRT_PI - w, SQRT_PI + w, 4000)
            + 2.0 * simpson(|x| density(x, var), 3.0 * SQRT_PI - w, 3.0 * SQRT_PI + w, 4000);
        worst = worst
            .max((p_cor - q_cor).abs() / q_cor)
            .max((p_in - q_in).abs() / q_in.max(1e-300));
    }
    if worst < 1e-7 {
        Ok(format!("worst relative error {worst:.1e}"))
    } else {
        Err(format!("worst relative error {worst:.1e}"))
    }
}

fn check_qnd_identity() -> Result<String, String> {
    let g = QndConfig::default().coupling();
    if (g - 1.0).abs() < 1e-12 {
        Ok(format!("(1-R)/sqrt(R) = {g}"))
    } else {
        Err(format!("(1-R)/sqrt(R) = {g}"))
    }
}

fn brute_pairing(dist: &[Vec<i64>], left: &mut Vec<usize>) -> i64 {
    if left.is_empty() {
        return 0;
    }
    let a = left.remove(0);
    let mut best = i64::MAX;
    for i in 0..left.len() {
        let b = left.remove(i);
        best = best.min(dist[a][b] + brute_pairing(dist, left));
        left.insert(i, b);
    }
    left.insert(0, a);
    best
}

fn check_matching(seed: u64) -> Result<String, String> {
    let lat = RhgLattice::new(5).map_err(|e| e.to_string())?;
    let mut rng = trial_rng(seed, 1);
    for inst in 0..40 {
        let weights: Vec<i64> = (0..lat.num_qubits()).map(|_| rng.gen_range(1..20)).collect();
        let mut errors = vec![false; lat.num_qubits()];
        for _ in 0..rng.gen_range(1..5) {
            errors[rng.gen_range(0..lat.num_qubits())] ^= true;
        }
        let syndrome = lat.syndrome(&errors);
        let defects: Vec<usize> = (0..syndrome.len()).filter(|&c| syndrome[c]).collect();
        if defects.len() > 8 {
            continue;
        }
        let dist: Vec<Vec<i64>> = defects
            .iter()
            .map(|&s| {
                let (d, _) = dijkstra(&lat, &weights, s);
                defects.iter().map(|&t| d[t]).collect()
            })
            .collect();
        let brute = brute_pairing(&dist, &mut (0..defects.len()).collect());
        let got = decode_mwpm(&lat, &weights, &syndrome).map_err(|e| e.to_string())?.weight;
        if got != brute {
            return Err(format!("instance {inst}: matching weight {got}, brute force {brute}"));
        }
    }
    Ok("40 instances agree with exhaustive pairing".into())
}

fn check_repetition(seed: u64) -> Result<String, String> {
    let mut rng = trial_rng(seed, 2);
    let var: f64 = 0.1;
    for _ in 0..2000 {
        let outcomes: Vec<_> = (0..3)
            .map(|_| decide_bit(var.sqrt() * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let (bit, _) = analog_repetition_decode(&outcomes, var).map_err(|e| e.to_string())?;
        let log_l = |b: u8| -> f64 {
            outcomes
                .iter()
                .map(|o| {
                    let a = o.dev_m.abs();
                    gaussian_log_pdf(if o.bit == b { a } else { SQRT_PI - a }, var)
                })
                .sum()
        };
        let expected = (log_l(1) > log_l(0)) as u8;
        if bit != expected {
            return Err(format!("decoded {bit}, exhaustive gives {expected}"));
        }
    }
    Ok("2000 blocks agree with the two-hypothesis evaluation".into())
}

pub fn run_all(seed: u64) -> SelftestReport {
    let checks: [(&str, Result<String, String>); 4] = [
        ("formulas vs quadrature", check_formulas()),
        ("QND coupling identity", check_qnd_identity()),
        ("MWPM vs brute force", check_matching(seed)),
        ("analog repetition decode", check_repetition(seed)),
    ];
    let mut lines = Vec::new();
    let mut failed = 0;
    for (name, r) in checks {
        match r {
            Ok(msg) => lines.push(format!("PASS {name}: {msg}")),
            Err(msg) => {
                failed += 1;
                lines.push(format!("FAIL {name}: {msg}"));
            }
        }
    }
    SelftestReport {
        total: lines.len(),
        failed,
        lines,
    }
}
