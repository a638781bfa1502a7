//! Monte Carlo simulation of topological error correction on the 3D cluster.
//!
//! The primal lattice is periodic in all three directions. Parity checks live
//! on the `d³` unit cells and every face qubit is shared by the two cells it
//! separates, so the matching graph is the cubic graph on cells with one edge
//! per face. A logical failure is an odd winding of `error ⊕ correction`
//! through the sheet between `x = d−1` and `x = 0`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustworkx_core::max_weight_matching::max_weight_matching;
use rustworkx_core::petgraph::graph::UnGraph;
use serde::{Deserialize, Serialize};

use crate::analytics::PreviousModel;
use crate::cluster::{build_3tree, tree3_ledger, BuildConfig};
use crate::devices::{lossy_homodyne, GateModel, LossConfig, QndConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    combine_flip_probabilities, leading_order_fusion_error, run_deterministic_fusion, FusionConfig, FusionPort, FusionVariances,
    RepetitionExponent,
};
pub use crate::gkp::analog_flip_likelihood;
use crate::gkp::{lattice_parity, lattice_residual, HrmConfig, Quadrature};

/// Scale applied to `ln((1−p)/p)` before rounding to integer matching weights.
pub const WEIGHT_SCALE: f64 = 1e6;

/// Floor on flip likelihoods, keeps weights finite.
pub const MIN_LIKELIHOOD: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhgLattice {
    d: usize,
}

impl RhgLattice {
    pub fn new(d: usize) -> Result<Self> {
        if d < 3 || d.is_multiple_of(2) {
            return Err(Error::InvalidParameter {
                name: "d",
                value: d as f64,
                reason: "code distance must be odd and at least 3",
            });
        }
        Ok(RhgLattice { d })
    }

    pub fn distance(&self) -> usize {
        self.d
    }

    pub fn num_checks(&self) -> usize {
        self.d * self.d * self.d
    }

    pub fn num_qubits(&self) -> usize {
        3 * self.num_checks()
    }

    pub fn cell(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.d * (y + self.d * z)
    }

    pub fn coords(&self, c: usize) -> [usize; 3] {
        [c % self.d, (c / self.d) % self.d, c / (self.d * self.d)]
    }

    /// Cell reached from `c` by one step along `dir` (forward or backward).
    pub fn step(&self, c: usize, dir: usize, forward: bool) -> usize {
        let mut x = self.coords(c);
        x[dir] = if forward {
            (x[dir] + 1) % self.d
        } else {
            (x[dir] + self.d - 1) % self.d
        };
        self.cell(x[0], x[1], x[2])
    }

    /// Face qubit between `c` and its forward neighbour along `dir`.
    pub fn qubit(&self, c: usize, dir: usize) -> usize {
        3 * c + dir
    }

    pub fn qubit_checks(&self, q: usize) -> [usize; 2] {
        let c = q / 3;
        [c, self.step(c, q % 3, true)]
    }

    pub fn syndrome(&self, errors: &[bool]) -> Vec<bool> {
        let mut s = vec![false; self.num_checks()];
        for (q, &e) in errors.iter().enumerate() {
            if e {
                for c in self.qubit_checks(q) {
                    s[c] ^= true;
                }
            }
        }
        s
    }

    pub fn crosses_sheet(&self, q: usize) -> bool {
        q.is_multiple_of(3) && self.coords(q / 3)[0] == self.d - 1
    }

    /// Winding parity of a closed chain through the tested sheet.
    pub fn logical_parity(&self, chain: &[bool]) -> bool {
        chain.iter().enumerate().filter(|&(q, &e)| e && self.crosses_sheet(q)).count() % 2 == 1
    }

    /// The four faces around a primal edge: an elementary trivial cycle.
    pub fn plaquette(&self, c: usize, a: usize, b: usize) -> [usize; 4] {
        [
            self.qubit(c, a),
            self.qubit(self.step(c, a, true), b),
            self.qubit(self.step(c, b, true), a),
            self.qubit(c, b),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipSource {
    GaussianDeviation,
    FusionResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitNoiseRecord {
    pub true_flip: bool,
    pub dev_m: f64,
    /// Decoder's probability that the hard decision is wrong.
    pub flip_likelihood: f64,
    pub source: FlipSource,
}

/// Anything that can produce independent per-qubit noise records.
pub trait NoiseSource: Sync {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QubitNoiseRecord;
}

/// Gaussian deviations plus discrete flips that carry no analog information.
///
/// The decoder sees the analog likelihood of the Gaussian part combined with
/// the prior flip rate, so the location of a discrete flip is never revealed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFlipNoise {
    /// Variance of the deviation entering the final measurement, readout noise included.
    pub variance: f64,
    pub discrete_flip: f64,
}

impl GaussianFlipNoise {
    pub fn likelihood(&self, dev_m: f64) -> f64 {
        let p = analog_flip_likelihood(dev_m, self.variance);
        let q = self.discrete_flip;
        q + (1.0 - 2.0 * q) * p
    }
}

impl NoiseSource for GaussianFlipNoise {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QubitNoiseRecord {
        let x = self.variance.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let discrete = self.discrete_flip > 0.0 && rng.gen::<f64>() < self.discrete_flip;
        let dev_m = lattice_residual(x);
        QubitNoiseRecord {
            true_flip: (lattice_parity(x) == 1) ^ discrete,
            dev_m,
            flip_likelihood: self.likelihood(dev_m),
            source: if discrete {
                FlipSource::FusionResidual
            } else {
                FlipSource::GaussianDeviation
            },
        }
    }
}

/// Integer edge weights and the hard-decision errors the decoder must explain.
/// Qubits whose likelihood exceeds 1/2 are pre-flipped.
pub fn prepare_weights(records: &[QubitNoiseRecord], analog: bool) -> (Vec<i64>, Vec<bool>) {
    records
        .iter()
        .map(|r| {
            let mut p = r.flip_likelihood.clamp(MIN_LIKELIHOOD, 1.0 - MIN_LIKELIHOOD);
            let mut err = r.true_flip;
            if p > 0.5 {
                p = 1.0 - p;
                err = !err;
            }
            let w = if analog {
                ((1.0 - p) / p).ln() * WEIGHT_SCALE
            } else {
                WEIGHT_SCALE
            };
            (w.round() as i64, err)
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Correction {
    pub qubits: Vec<bool>,
    pub matched_pairs: Vec<(usize, usize)>,
    pub weight: i64,
}

/// Single-source shortest paths over the cell graph. Returns `(dist, pred_qubit)`.
pub fn dijkstra(lat: &RhgLattice, weights: &[i64], source: usize) -> (Vec<i64>, Vec<usize>) {
    let n = lat.num_checks();
    let mut dist = vec![i64::MAX; n];
    let mut pred = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0;
    heap.push(Reverse((0i64, source)));
    while let Some(Reverse((dc, c))) = heap.pop() {
        if dc > dist[c] {
            continue;
        }
        for dir in 0..3 {
            for forward in [true, false] {
                let nb = lat.step(c, dir, forward);
                let q = if forward { lat.qubit(c, dir) } else { lat.qubit(nb, dir) };
                let nd = dc + weights[q];
                if nd < dist[nb] {
                    dist[nb] = nd;
                    pred[nb] = q;
                    heap.push(Reverse((nd, nb)));
                }
            }
        }
    }
    (dist, pred)
}

/// Minimum-weight perfect matching of the syndrome defects.
pub fn decode_mwpm(lat: &RhgLattice, weights: &[i64], syndrome: &[bool]) -> Result<Correction> {
    let defects: Vec<usize> = syndrome.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect();
    if defects.len() % 2 == 1 {
        return Err(Error::OddDefectCount(defects.len()));
    }
    let mut qubits = vec![false; lat.num_qubits()];
    if defects.is_empty() {
        return Ok(Correction {
            qubits,
            ..Default::default()
        });
    }
    let paths: Vec<_> = defects.iter().map(|&s| dijkstra(lat, weights, s)).collect();
    let k = defects.len();
    let mut dist = vec![vec![0i64; k]; k];
    let mut big = 0i64;
    for i in 0..k {
        for j in 0..k {
            dist[i][j] = paths[i].0[defects[j]];
            big = big.max(dist[i][j]);
        }
    }
    let pairs = min_weight_perfect_matching(&dist, big + 1)?;
    let mut weight = 0;
    for &(i, j) in &pairs {
        weight += dist[i][j];
        let pred = &paths[i].1;
        let mut c = defects[j];
        while c != defects[i] {
            let q = pred[c];
            qubits[q] ^= true;
            let [a, b] = lat.qubit_checks(q);
            c = if a == c { b } else { a };
        }
    }
    Ok(Correction {
        qubits,
        matched_pairs: pairs.iter().map(|&(i, j)| (defects[i], defects[j])).collect(),
        weight,
    })
}

/// Perfect matching of minimum total weight on a complete graph given by a
/// symmetric distance matrix. `big` must exceed every entry.
pub fn min_weight_perfect_matching(dist: &[Vec<i64>], big: i64) -> Result<Vec<(usize, usize)>> {
    let k = dist.len();
    let mut g = UnGraph::<(), i128>::with_capacity(k, k * (k - 1) / 2);
    let nodes: Vec<_> = (0..k).map(|_| g.add_node(())).collect();
    for i in 0..k {
        for j in (i + 1)..k {
            g.add_edge(nodes[i], nodes[j], (big - dist[i][j]) as i128);
        }
    }
    let matching = max_weight_matching(&g, true, |e| Ok::<i128, Error>(*e.weight()), false)?;
    let mut pairs: Vec<(usize, usize)> = matching.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
    pairs.sort_unstable();
    if pairs.len() * 2 != k {
        return Err(Error::Matching(format!("{} pairs for {k} defects", pairs.len())));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub trial: u64,
    pub syndrome_size: usize,
    pub matched_pairs: usize,
    pub logical_failure: bool,
    /// `error ⊕ correction` left a nonzero syndrome. Never expected.
    pub syndrome_violation: bool,
    /// Homology changed when a trivial cycle was added to the correction. Never expected.
    pub homology_violation: bool,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub d: usize,
    pub n_trials: u64,
    pub analog: bool,
    pub seed: u64,
}

/// RNG for one trial. Streams are keyed by trial index so the result does not
/// depend on how trials are spread over workers.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn run_trial<N: NoiseSource>(lat: &RhgLattice, noise: &N, analog: bool, seed: u64, trial: u64) -> Result<TrialOutcome> {
    let start = std::time::Instant::now();
    let mut rng = trial_rng(seed, trial);
    let records: Vec<_> = (0..lat.num_qubits()).map(|_| noise.sample(&mut rng)).collect();
    let (weights, errors) = prepare_weights(&records, analog);
    let syndrome = lat.syndrome(&errors);
    let corr = decode_mwpm(lat, &weights, &syndrome)?;
    let chain: Vec<bool> = errors.iter().zip(&corr.qubits).map(|(&e, &c)| e ^ c).collect();
    let syndrome_violation = lat.syndrome(&chain).iter().any(|&s| s);
    let logical_failure = lat.logical_parity(&chain);

    // adding a random elementary cycle must not change the homology class
    let c = rng.gen_range(0..lat.num_checks());
    let a = rng.gen_range(0..3);
    let b = (a + rng.gen_range(1..3)) % 3;
    let mut shifted = chain.clone();
    for q in lat.plaquette(c, a, b) {
        shifted[q] ^= true;
    }
    let homology_violation = lat.logical_parity(&shifted) != logical_failure;

    Ok(TrialOutcome {
        seed,
        trial,
        syndrome_size: syndrome.iter().filter(|&&s| s).count(),
        matched_pairs: corr.matched_pairs.len(),
        logical_failure,
        syndrome_violation,
        homology_violation,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRate {
    pub n_trials: u64,
    pub failures: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub violations: u64,
}

/// Wilson score interval at 95%.
pub fn wilson_interval(failures: u64, n: u64) -> (f64, f64) {
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = failures as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    let lo = if failures == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if failures as f64 >= n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

impl FailureRate {
    pub fn from_outcomes(outcomes: &[TrialOutcome]) -> Self {
        let n = outcomes.len() as u64;
        let failures = outcomes.iter().filter(|o| o.logical_failure).count() as u64;
        let violations = outcomes
            .iter()
            .filter(|o| o.syndrome_violation || o.homology_violation)
            .count() as u64;
        let (ci_low, ci_high) = wilson_interval(failures, n.max(1));
        FailureRate {
            n_trials: n,
            failures,
            rate: failures as f64 / n.max(1) as f64,
            ci_low,
            ci_high,
            violations,
        }
    }
}

/// Runs trials `0..n_trials`, in parallel unless `workers == 1`.
pub fn run_trials<N: NoiseSource>(cfg: &TrialConfig, noise: &N, workers: usize) -> Result<Vec<TrialOutcome>> {
    let lat = RhgLattice::new(cfg.d)?;
    if cfg.n_trials == 0 {
        return Err(Error::InvalidParameter {
            name: "n_trials",
            value: 0.0,
            reason: "at least one trial is required",
        });
    }
    let run = |t| run_trial(&lat, noise, cfg.analog, cfg.seed, t);
    if workers == 1 {
        (0..cfg.n_trials).map(run).collect()
    } else if workers == 0 {
        (0..cfg.n_trials).into_par_iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Matching(e.to_string()))?;
        pool.install(|| (0..cfg.n_trials).into_par_iter().map(run).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub d: usize,
    pub n_trials: u64,
    pub failures: u64,
}

/// Failure rate of a fully scrambled periodic lattice: the winding parity of a
/// random chain is even or odd with equal odds.
pub const FAILURE_CEILING: f64 = 0.5;

/// Fraction of the ceiling above which a rate counts as saturated.
const SATURATED: f64 = 0.8;

/// Binomial logistic fit `logit(rate) = a + b·σ` by Newton iterations.
pub fn fit_logistic(points: &[(f64, u64, u64)]) -> Option<(f64, f64)> {
    fit_logistic_capped(points, 1.0)
}

/// Binomial fit of `rate = ceiling·sigmoid(a + b·σ)` by Fisher scoring.
pub fn fit_logistic_capped(points: &[(f64, u64, u64)], ceiling: f64) -> Option<(f64, f64)> {
    if points.len() < 2 || !(ceiling > 0.0 && ceiling <= 1.0) {
        return None;
    }
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let (mut a, mut b) = (0.0, 0.0);
    for _ in 0..200 {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, n, k) in points {
            let x = x - mean_x;
            let s = 1.0 / (1.0 + (-(a + b * x)).exp());
            let p = (ceiling * s).clamp(1e-300, 1.0 - 1e-12);
            let dp = ceiling * s * (1.0 - s);
            let (n, k) = (n as f64, (k as f64).min(n as f64));
            let score = (k - n * p) / (p * (1.0 - p)) * dp;
            g0 += score;
            g1 += score * x;
            let w = n * dp * dp / (p * (1.0 - p));
            h00 += w;
            h01 += w * x;
            h11 += w * x * x;
        }
        // light ridge keeps all-zero or all-one data finite
        h00 += 1e-9;
        h11 += 1e-9;
        let det = h00 * h11 - h01 * h01;
        if det.abs() < 1e-300 {
            return None;
        }
        let mut da = (h11 * g0 - h01 * g1) / det;
        let mut db = (h00 * g1 - h01 * g0) / det;
        let step = (da.abs() / 5.0).max(db.abs() * points.iter().map(|p| (p.0 - mean_x).abs()).fold(0.0, f64::max) / 5.0);
        if step > 1.0 {
            da /= step;
            db /= step;
        }
        a += da;
        b += db;
        if !a.is_finite() || !b.is_finite() {
            return None;
        }
        if da.abs() < 1e-12 && db.abs() < 1e-12 {
            break;
        }
    }
    Some((a - b * mean_x, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub sigma: f64,
    pub squeezing_db: f64,
    pub ci_sigma: (f64, f64),
    pub ci_db: (f64, f64),
}

fn crossing(points: &[SweepPoint], d_small: usize, d_large: usize) -> Option<f64> {
    let pick = |d| {
        points
            .iter()
            .filter(|p| p.d == d)
            .map(|p| (p.sigma, p.n_trials, p.failures))
            .collect::<Vec<_>>()
    };
    let (a1, b1) = fit_logistic_capped(&pick(d_small), FAILURE_CEILING)?;
    let (a2, b2) = fit_logistic_capped(&pick(d_large), FAILURE_CEILING)?;
    if (b1 - b2).abs() < 1e-12 {
        return None;
    }
    let x = (a2 - a1) / (b1 - b2);
    let lo = points.iter().map(|p| p.sigma).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.sigma).fold(f64::NEG_INFINITY, f64::max);
    (x.is_finite() && x >= lo && x <= hi).then_some(x)
}

/// Crossing of the logistic failure curves for the two smallest distances,
/// with a parametric bootstrap interval.
pub fn estimate_threshold(points: &[SweepPoint], n_boot: usize, seed: u64) -> Result<ThresholdEstimate> {
    let mut ds: Vec<usize> = points.iter().map(|p| p.d).collect();
    ds.sort_unstable();
    ds.dedup();
    if ds.len() < 2 {
        return Err(Error::NoCrossing);
    }
    let (d1, d2) = (ds[0], ds[1]);
    let sigma = crossing(points, d1, d2).ok_or(Error::NoCrossing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boots = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let resampled: Vec<SweepPoint> = points
            .iter()
            .map(|p| {
                let rate = p.failures as f64 / p.n_trials as f64;
                let k = rand_distr::Distribution::sample(&rand_distr::Binomial::new(p.n_trials, rate).unwrap(), &mut rng);
                SweepPoint { failures: k, ..*p }
            })
            .collect();
        if let Some(x) = crossing(&resampled, d1, d2) {
            boots.push(x);
        }
    }
    boots.sort_by(|a, b| a.total_cmp(b));
    let ci_sigma = if boots.len() >= 20 {
        let q = |f: f64| boots[((boots.len() - 1) as f64 * f).round() as usize];
        (q(0.025), q(0.975))
    } else {
        (f64::NAN, f64::NAN)
    };
    let db = |s: f64| crate::gkp::SqueezingDb::from_sigma(s).db();
    Ok(ThresholdEstimate {
        sigma,
        squeezing_db: db(sigma),
        ci_sigma,
        ci_db: (db(ci_sigma.1), db(ci_sigma.0)),
    })
}

/// Independent Gaussian deviations whose lattice parities add, plus discrete
/// flips of which the decoder only knows the rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeNoise {
    /// Variance of each analog component, readout noise included.
    pub components: Vec<f64>,
    pub discrete_flip: f64,
}

impl CompositeNoise {
    /// Marginal flip probability per qubit.
    pub fn flip_rate(&self) -> Result<f64> {
        let mut ps = vec![self.discrete_flip];
        for &v in &self.components {
            ps.push(crate::gkp::error_prob_binned(v)?);
        }
        Ok(combine_flip_probabilities(ps))
    }
}

impl NoiseSource for CompositeNoise {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QubitNoiseRecord {
        let mut flip = false;
        let mut ps = Vec::with_capacity(self.components.len() + 1);
        let mut dev_m = 0.0;
        for (i, &v) in self.components.iter().enumerate() {
            let x = v.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let r = lattice_residual(x);
            if i == 0 {
                dev_m = r;
            }
            flip ^= lattice_parity(x) == 1;
            ps.push(analog_flip_likelihood(r, v));
        }
        let discrete = self.discrete_flip > 0.0 && rng.gen::<f64>() < self.discrete_flip;
        ps.push(self.discrete_flip);
        QubitNoiseRecord {
            true_flip: flip ^ discrete,
            dev_m,
            flip_likelihood: combine_flip_probabilities(ps),
            source: if discrete {
                FlipSource::FusionResidual
            } else {
                FlipSource::GaussianDeviation
            },
        }
    }
}

/// Node noise with every readout simulated: the node's own p deviation from a
/// freshly built 3-tree, plus the deterministic fusions it takes part in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulNoise {
    pub build: BuildConfig,
    pub port: FusionPort,
    pub fusions_per_node: usize,
    /// Extra flip the decoder only knows the rate of.
    pub discrete_flip: f64,
}

impl FaithfulNoise {
    fn node_variance(&self) -> f64 {
        tree3_ledger(&self.build)[0].1 + self.build.loss.added_variance()
    }
}

impl NoiseSource for FaithfulNoise {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QubitNoiseRecord {
        let (tree, _) = build_3tree(&self.build, rng);
        let node = &tree.nodes[tree.centre()];
        let out = lossy_homodyne(&node.state, Quadrature::P, &self.build.loss, rng);
        let mut flip = out.bit == 1;
        let mut ps = vec![analog_flip_likelihood(out.dev_m, self.node_variance())];
        let fcfg = FusionConfig::from_build(&self.build);
        let mut residual = false;
        for _ in 0..self.fusions_per_node {
            let f = run_deterministic_fusion(&self.port, &self.port, &fcfg, rng).expect("validated port");
            flip ^= f.node_bit_flips[0] == 1;
            residual |= f.node_bit_flips[0] == 1;
            ps.push(f.flip_likelihood[0]);
        }
        let discrete = self.discrete_flip > 0.0 && rng.gen::<f64>() < self.discrete_flip;
        ps.push(self.discrete_flip);
        QubitNoiseRecord {
            true_flip: flip ^ discrete,
            dev_m: out.dev_m,
            flip_likelihood: combine_flip_probabilities(ps),
            source: if discrete || residual {
                FlipSource::FusionResidual
            } else {
                FlipSource::GaussianDeviation
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseMode {
    #[default]
    Ledger,
    Faithful,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Method {
    #[default]
    Proposed,
    Previous,
}

/// Where Ledger mode takes the fusion-residual flip rates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionRates {
    /// Closed-form `E_ML`, `m·E_anc,q`, `(L−1)·E_anc,p` with the HRM window as the `E_ML` proxy.
    LeadingOrder,
    /// Component rates counted over `samples` simulated fusions.
    Sampled { samples: u64, seed: u64 },
}

impl Default for FusionRates {
    fn default() -> Self {
        FusionRates::Sampled {
            samples: 20_000,
            seed: 0x5eed,
        }
    }
}

/// Physical parameters of one simulated point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sigma2: f64,
    pub loss: LossConfig,
    pub qnd: QndConfig,
    pub leaves: usize,
    pub ancillae: usize,
    pub me_sqec_iters: usize,
    pub hrm: HrmConfig,
    pub method: Method,
    pub mode: NoiseMode,
    /// Measurement loss on the ME-SQEC ancillae as well as on fusion and node readouts.
    pub ancilla_loss: bool,
    pub fusion_rates: FusionRates,
}

impl PipelineConfig {
    pub fn new(sigma2: f64, loss: LossConfig) -> Result<Self> {
        crate::error::check_variance(sigma2)?;
        Ok(PipelineConfig {
            sigma2,
            loss,
            qnd: QndConfig::default(),
            leaves: 4,
            ancillae: 3,
            me_sqec_iters: 3,
            hrm: HrmConfig::default(),
            method: Method::Proposed,
            mode: NoiseMode::Ledger,
            ancilla_loss: false,
            fusion_rates: FusionRates::default(),
        })
    }

    pub fn build(&self) -> Result<BuildConfig> {
        BuildConfig {
            sigma2: self.sigma2,
            me_sqec_iters: self.me_sqec_iters,
            leaves: self.leaves,
            ancillae: self.ancillae,
            hrm: self.hrm,
            gate: GateModel::Qnd(self.qnd),
            loss: self.loss,
            ancilla_loss: self.ancilla_loss,
        }
        .validated()
    }
}

/// Noise source chosen by method and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PipelineNoise {
    Composite(CompositeNoise),
    Faithful(FaithfulNoise),
}

impl NoiseSource for PipelineNoise {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QubitNoiseRecord {
        match self {
            PipelineNoise::Composite(n) => n.sample(rng),
            PipelineNoise::Faithful(n) => n.sample(rng),
        }
    }
}

/// Rates `[E_ML, m·E_anc,q, (L−1)·E_anc,p]` of the frame error one fusion
/// leaves on one node, counted over simulated fusions.
pub fn sampled_fusion_rates(port: &FusionPort, cfg: &FusionConfig, samples: u64, seed: u64) -> Result<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0u64; 3];
    for _ in 0..samples {
        let f = run_deterministic_fusion(port, port, cfg, &mut rng)?;
        let parity = |bits: &mut dyn Iterator<Item = u8>| bits.fold(0u8, |a, b| a ^ b) as u64;
        counts[0] += f.records[f.kept_index].bits.0 as u64;
        counts[1] += parity(&mut f.winner_ancillae[0].iter().map(|o| o.bit));
        counts[2] += parity(&mut f.loser_blocks[0].iter().map(|b| b.decoded_bit));
    }
    Ok(counts.map(|c| c as f64 / samples.max(1) as f64))
}

/// Per-node p-quadrature noise of the 3D cluster.
///
/// Proposed method: the node's own readout (ledger variance plus loss) and two
/// deterministic fusions. Ledger mode turns each fusion into discrete flips at
/// the `E_ML`, `m·E_anc,q` and `(L−1)·E_anc,p` rates; Faithful mode builds the
/// node's 3-tree and simulates both fusions readout by readout.
///
/// Previous method: two HRM-free fusions, each an analog Gaussian with the
/// `σ'²` of [`PreviousModel::Effective`].
pub fn pipeline_noise(cfg: &PipelineConfig) -> Result<PipelineNoise> {
    let build = cfg.build()?;
    let loss = cfg.loss.added_variance();
    if cfg.method == Method::Previous {
        let v = PreviousModel::Effective.sigma_prime_sq(cfg.sigma2, &cfg.qnd, &cfg.loss);
        return Ok(PipelineNoise::Composite(CompositeNoise {
            components: vec![v, v],
            discrete_flip: 0.0,
        }));
    }
    let [node, _, leaf] = tree3_ledger(&build);
    let port = FusionPort {
        leaves: cfg.leaves,
        ancillae: cfg.ancillae,
        leaf_var: node,
        ancilla_var: leaf,
    };
    let fcfg = FusionConfig::from_build(&build);
    Ok(match cfg.mode {
        NoiseMode::Ledger => {
            let per_fusion = match cfg.fusion_rates {
                FusionRates::LeadingOrder => {
                    let var = FusionVariances::new(&port, &port, &fcfg);
                    let f = leading_order_fusion_error(cfg.leaves, cfg.ancillae, &var, &cfg.hrm, RepetitionExponent::Leading)?;
                    let m = cfg.ancillae as f64;
                    let l = cfg.leaves.saturating_sub(1) as f64;
                    [f.e_ml, (m * f.e_anc_q).min(0.5), (l * f.e_anc_p).min(0.5)]
                }
                FusionRates::Sampled { samples, seed } => sampled_fusion_rates(&port, &fcfg, samples, seed)?,
            };
            PipelineNoise::Composite(CompositeNoise {
                components: vec![node.1 + loss],
                discrete_flip: combine_flip_probabilities(per_fusion.into_iter().chain(per_fusion)),
            })
        }
        NoiseMode::Faithful => PipelineNoise::Faithful(FaithfulNoise {
            build,
            port,
            fusions_per_node: 2,
            discrete_flip: 0.0,
        }),
    })
}

/// Failure counts over `sigmas × ds`, one [`PipelineConfig`] per sigma.
pub fn sweep(
    base: &PipelineConfig,
    sigmas: &[f64],
    ds: &[usize],
    n_trials: u64,
    analog: bool,
    seed: u64,
    workers: usize,
) -> Result<Vec<(SweepPoint, FailureRate)>> {
    let mut out = Vec::new();
    for &sigma in sigmas {
        let noise = pipeline_noise(&PipelineConfig {
            sigma2: sigma * sigma,
            ..*base
        })?;
        for &d in ds {
            let cfg = TrialConfig {
                d,
                n_trials,
                analog,
                seed,
            };
            let rate = FailureRate::from_outcomes(&run_trials(&cfg, &noise, workers)?);
            out.push((
                SweepPoint {
                    sigma,
                    d,
                    n_trials,
                    failures: rate.failures,
                },
                rate,
            ));
        }
    }
    Ok(out)
}

/// Bisection sweep for the crossing of the two smallest distances in `ds`.
///
/// Each of the `points` sigmas is the midpoint of the current bracket; the
/// bracket moves down when the larger code fails more often (above threshold)
/// or the smaller one is near [`FAILURE_CEILING`], where the ordering of the
/// two rates is noise. Otherwise it moves up. Every evaluated point is returned.
#[allow(clippy::too_many_arguments)]
pub fn bisection_sweep(
    base: &PipelineConfig,
    bracket: (f64, f64),
    points: usize,
    ds: &[usize],
    n_trials: u64,
    analog: bool,
    seed: u64,
    workers: usize,
) -> Result<Vec<(SweepPoint, FailureRate)>> {
    let mut sorted = ds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 2 || !(bracket.0 > 0.0 && bracket.0 < bracket.1) {
        return Err(Error::InvalidParameter {
            name: "sweep",
            value: sorted.len() as f64,
            reason: "need two distances and an increasing positive bracket",
        });
    }
    let (mut lo, mut hi) = bracket;
    let mut out = Vec::new();
    for _ in 0..points {
        let mid = 0.5 * (lo + hi);
        let rows = sweep(base, &[mid], ds, n_trials, analog, seed, workers)?;
        let rate = |d| rows.iter().find(|r| r.0.d == d).map(|r| r.1.rate).unwrap_or(0.0);
        if rate(sorted[1]) > rate(sorted[0]) || rate(sorted[0]) >= SATURATED * FAILURE_CEILING {
            hi = mid;
        } else {
            lo = mid;
        }
        out.extend(rows);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gkp::SQRT_PI;

    #[test]
    fn lattice_counts() {
        let lat = RhgLattice::new(3).unwrap();
        assert_eq!(lat.num_checks(), 27);
        assert_eq!(lat.num_qubits(), 81);
        let mut incidence = [0; 27];
        for q in 0..81 {
            let [a, b] = lat.qubit_checks(q);
            assert_ne!(a, b);
            incidence[a] += 1;
            incidence[b] += 1;
        }
        assert!(incidence.iter().all(|&k| k == 6));
        assert!(RhgLattice::new(4).is_err());
        assert!(RhgLattice::new(1).is_err());
    }

    #[test]
    fn plaquettes_are_trivial_cycles() {
        let lat = RhgLattice::new(5).unwrap();
        for c in 0..lat.num_checks() {
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                let mut chain = vec![false; lat.num_qubits()];
                for q in lat.plaquette(c, a, b) {
                    chain[q] ^= true;
                }
                assert!(lat.syndrome(&chain).iter().all(|&s| !s));
                assert!(!lat.logical_parity(&chain));
            }
        }
    }

    #[test]
    fn winding_line_is_logical() {
        let lat = RhgLattice::new(5).unwrap();
        let mut chain = vec![false; lat.num_qubits()];
        for x in 0..5 {
            chain[lat.qubit(lat.cell(x, 2, 3), 0)] = true;
        }
        assert!(lat.syndrome(&chain).iter().all(|&s| !s));
        assert!(lat.logical_parity(&chain));
    }

    #[test]
    fn empty_and_forced_matchings() {
        let lat = RhgLattice::new(5).unwrap();
        let w = vec![1i64; lat.num_qubits()];
        let s = vec![false; lat.num_checks()];
        let c = decode_mwpm(&lat, &w, &s).unwrap();
        assert!(c.qubits.iter().all(|&q| !q) && c.matched_pairs.is_empty());

        let mut e = vec![false; lat.num_qubits()];
        e[lat.qubit(lat.cell(0, 0, 0), 1)] = true;
        e[lat.qubit(lat.cell(0, 1, 0), 2)] = true;
        let s = lat.syndrome(&e);
        let c = decode_mwpm(&lat, &w, &s).unwrap();
        assert_eq!(c.weight, 2);
        assert_eq!(c.qubits.iter().filter(|&&q| q).count(), 2);
        let mut s1 = s.clone();
        s1[lat.cell(3, 3, 3)] ^= true;
        assert_eq!(decode_mwpm(&lat, &w, &s1), Err(Error::OddDefectCount(3)));
    }

    #[test]
    fn analog_likelihood_limits() {
        assert!((analog_flip_likelihood(SQRT_PI / 2.0, 0.1) - 0.5).abs() < 1e-12);
        assert!(analog_flip_likelihood(0.0, 0.1) < 1e-3);
        let n = GaussianFlipNoise {
            variance: 0.1,
            discrete_flip: 0.02,
        };
        assert!((n.likelihood(0.0) - 0.02).abs() < 1e-3);
    }

    #[test]
    fn wilson_bounds() {
        let (lo, hi) = wilson_interval(0, 100);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
        let (lo, hi) = wilson_interval(50, 100);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn logistic_fit_recovers_parameters() {
        let pts: Vec<_> = (0..6)
            .map(|i| {
                let x = 0.2 + 0.02 * i as f64;
                let p = 1.0 / (1.0 + (-(-20.0 + 80.0 * x)).exp());
                (x, 1_000_000u64, (p * 1e6).round() as u64)
            })
            .collect();
        let (a, b) = fit_logistic(&pts).unwrap();
        assert!((a + 20.0).abs() < 0.05 && (b - 80.0).abs() < 0.2, "{a} {b}");
    }

    #[test]
    fn crossing_of_synthetic_curves() {
        let curve = |d: usize, s: f64| FAILURE_CEILING / (1.0 + (-(d as f64) * 30.0 * (s - 0.25)).exp());
        let mut pts = vec![];
        for d in [5, 7] {
            for i in 0..6 {
                let s = 0.2 + 0.02 * i as f64;
                pts.push(SweepPoint {
                    sigma: s,
                    d,
                    n_trials: 100_000,
                    failures: (curve(d, s) * 1e5).round() as u64,
                });
            }
        }
        let t = estimate_threshold(&pts, 200, 1).unwrap();
        assert!((t.sigma - 0.25).abs() < 0.01, "{t:?}");
        assert!(t.ci_sigma.0 <= t.sigma && t.sigma <= t.ci_sigma.1);

        let flat: Vec<_> = pts
            .iter()
            .map(|p| SweepPoint {
                failures: p.failures / 2 + p.d as u64,
                ..*p
            })
            .collect();
        let shifted: Vec<_> = flat.iter().filter(|p| p.d == 5).copied().collect();
        assert_eq!(estimate_threshold(&shifted, 10, 1), Err(Error::NoCrossing));
    }
}
