//! Resource-state construction: 3-tree clusters prepared with ME-SQEC, grown
//! into larger trees and hexagonal clusters with encoded leaves by
//! HRM-gated Bell measurements.
//!
//! Fusion rules used throughout:
//!
//! * `Merge`: a leaf of `A` is fused with the centre of `B`; every neighbour of
//!   `B`'s centre becomes a neighbour of `A`'s centre. Grows stars.
//! * `Link`: a leaf of `A` is fused with a leaf of `B`; the two centres become
//!   neighbours. Attaches encoded leaves and closes the hexagon.
//!
//! Neither rule changes the deviations of surviving qubits: the measured
//! residuals are fed forward as byproduct displacements, so a fusion only
//! contributes a logical flip when one of its two outcomes is misidentified.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::devices::{lossy_homodyne, GateModel, LossConfig};
use crate::error::{Error, Result};
use crate::gkp::{hrm_acceptance, GkpQubitState, HrmConfig, MeasurementOutcome, Quadrature};
use crate::sqec::{correct_with_ancilla, round_variances, Estimator, RoundMoments, SqecConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Node,
    Leaf,
    EncodedLeafAncilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub op: String,
    pub d_var_q: f64,
    pub d_var_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceLedger {
    pub var_q: f64,
    pub var_p: f64,
    pub history: Vec<LedgerEntry>,
}

impl VarianceLedger {
    pub fn new(var_q: f64, var_p: f64) -> Self {
        VarianceLedger {
            var_q,
            var_p,
            history: vec![LedgerEntry {
                op: "init".into(),
                d_var_q: var_q,
                d_var_p: var_p,
            }],
        }
    }

    pub fn record(&mut self, op: &str, var_q: f64, var_p: f64) {
        self.history.push(LedgerEntry {
            op: op.into(),
            d_var_q: var_q - self.var_q,
            d_var_p: var_p - self.var_p,
        });
        self.var_q = var_q;
        self.var_p = var_p;
    }

    /// Variances rebuilt by summing the history.
    pub fn replay(&self) -> (f64, f64) {
        self.history
            .iter()
            .fold((0.0, 0.0), |(q, p), e| (q + e.d_var_q, p + e.d_var_p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub id: usize,
    pub role: Role,
    pub state: GkpQubitState,
    pub ledger: VarianceLedger,
    /// `(q, p)` displacement left by misidentified ancilla outcomes. The ledger
    /// describes `state` deviations minus this part.
    pub misread_shift: (f64, f64),
}

impl ClusterNode {
    fn new(id: usize, role: Role, state: GkpQubitState) -> Self {
        ClusterNode {
            id,
            role,
            ledger: VarianceLedger::new(state.var_q, state.var_p),
            state,
            misread_shift: (0.0, 0.0),
        }
    }

    fn set_state(&mut self, op: &str, state: GkpQubitState) {
        self.state = state;
        self.ledger.record(op, state.var_q, state.var_p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterKind {
    Tree3,
    Tree4,
    Tree5,
    /// Star with the given number of leaves, for sizes the named kinds do not cover.
    Star(usize),
    EncTree3,
    EncTree5,
    Hex,
}

impl ClusterKind {
    pub fn star(leaves: usize) -> Self {
        match leaves {
            2 => ClusterKind::Tree3,
            3 => ClusterKind::Tree4,
            4 => ClusterKind::Tree5,
            k => ClusterKind::Star(k),
        }
    }

    pub fn star_leaves(self) -> Option<usize> {
        match self {
            ClusterKind::Tree3 => Some(2),
            ClusterKind::Tree4 => Some(3),
            ClusterKind::Tree5 => Some(4),
            ClusterKind::Star(k) => Some(k),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCluster {
    pub kind: ClusterKind,
    pub nodes: Vec<ClusterNode>,
    /// CZ edges as index pairs `(a, b)` with `a < b`.
    pub edges: BTreeSet<(usize, usize)>,
    /// Indices of the centre qubit(s): one for trees, six for the hexagon.
    pub centres: Vec<usize>,
    /// Logical flips from misidentified fusion outcomes, tracked in the Pauli frame.
    pub frame_flips: u32,
}

impl TreeCluster {
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn centre(&self) -> usize {
        self.centres[0]
    }

    /// Plain leaves of a centre (degree-one neighbours with role `Leaf`).
    pub fn free_leaves(&self, centre: usize) -> Vec<usize> {
        self.neighbours(centre)
            .into_iter()
            .filter(|&n| self.nodes[n].role == Role::Leaf && self.neighbours(n).len() == 1)
            .collect()
    }

    fn add_edge(&mut self, a: usize, b: usize) {
        self.edges.insert((a.min(b), a.max(b)));
    }

    /// Drops the given qubits and renumbers the rest in order.
    fn remove(&mut self, drop: &[usize]) {
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut kept = Vec::with_capacity(self.nodes.len());
        for (i, n) in std::mem::take(&mut self.nodes).into_iter().enumerate() {
            if !drop.contains(&i) {
                map[i] = kept.len();
                kept.push(n);
            }
        }
        for (i, n) in kept.iter_mut().enumerate() {
            n.id = i;
        }
        self.nodes = kept;
        self.edges = self
            .edges
            .iter()
            .filter(|(a, b)| map[*a] != usize::MAX && map[*b] != usize::MAX)
            .map(|&(a, b)| (map[a].min(map[b]), map[a].max(map[b])))
            .collect();
        self.centres = self.centres.iter().map(|&c| map[c]).collect();
    }

    /// Appends `other` and returns the index offset of its qubits.
    fn absorb(&mut self, other: TreeCluster) -> usize {
        let off = self.nodes.len();
        for mut n in other.nodes {
            n.id += off;
            self.nodes.push(n);
        }
        for (a, b) in other.edges {
            self.edges.insert((a + off, b + off));
        }
        self.frame_flips += other.frame_flips;
        off
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.nodes.iter().filter(|n| n.role == role).count()
    }

    /// One line per qubit: `id role var_q var_p neighbours`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let nb: Vec<String> = self.neighbours(n.id).iter().map(|x| x.to_string()).collect();
            let _ = writeln!(
                s,
                "{} {:?} {:.9e} {:.9e} {}",
                n.id,
                n.role,
                n.ledger.var_q,
                n.ledger.var_p,
                nb.join(",")
            );
        }
        s
    }

    pub fn graph(&self) -> petgraph::graph::UnGraph<Role, ()> {
        let mut g = petgraph::graph::UnGraph::new_undirected();
        let idx: Vec<_> = self.nodes.iter().map(|n| g.add_node(n.role)).collect();
        for &(a, b) in &self.edges {
            g.add_edge(idx[a], idx[b], ());
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Variance of every freshly prepared GKP qubit and ancilla.
    pub sigma2: f64,
    pub me_sqec_iters: usize,
    pub leaves: usize,
    pub ancillae: usize,
    pub hrm: HrmConfig,
    pub gate: GateModel,
    pub loss: LossConfig,
    /// Apply the measurement loss to the ME-SQEC ancilla readouts too.
    pub ancilla_loss: bool,
}

impl BuildConfig {
    pub fn new(sigma2: f64) -> Result<Self> {
        BuildConfig {
            sigma2,
            me_sqec_iters: 3,
            leaves: 4,
            ancillae: 3,
            hrm: HrmConfig::default(),
            gate: GateModel::default(),
            loss: LossConfig::lossless(),
            ancilla_loss: true,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        crate::error::check_variance(self.sigma2)?;
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
        Ok(self)
    }

    pub fn sqec(&self) -> SqecConfig {
        SqecConfig {
            gate: self.gate,
            hrm: Some(self.hrm),
            loss: self.loss,
            ancilla_loss: self.ancilla_loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildStats {
    pub attempts: u64,
    pub hrm_rejections: u64,
    pub qubits_consumed: u64,
    pub fusion_flips: u64,
    /// Accepted ME-SQEC rounds whose ancilla outcome sat nearer an odd peak.
    pub misread_rounds: u64,
}

impl BuildStats {
    fn add(&mut self, o: BuildStats) {
        self.attempts += o.attempts;
        self.hrm_rejections += o.hrm_rejections;
        self.qubits_consumed += o.qubits_consumed;
        self.fusion_flips += o.fusion_flips;
        self.misread_rounds += o.misread_rounds;
    }
}

/// One ME-SQEC round with a fresh ancilla. Returns false when the HRM rejects.
fn me_round<R: Rng + ?Sized>(
    node: &mut ClusterNode,
    quad: Quadrature,
    cfg: &BuildConfig,
    stats: &mut BuildStats,
    rng: &mut R,
) -> bool {
    let sq = cfg.sqec();
    let moments = RoundMoments::new(node.state.var(quad), cfg.sigma2, quad, &sq);
    let k = moments.gain(Estimator::MaxLikelihood);
    let ancilla = GkpQubitState::sample(cfg.sigma2, rng);
    stats.qubits_consumed += 1;
    let r = correct_with_ancilla(node.state, ancilla, quad, Estimator::MaxLikelihood, &sq, rng);
    if !r.accepted {
        stats.hrm_rejections += 1;
        return false;
    }
    // the readout also sees the old shift, and a wrapped outcome adds k·n√π
    let wrap = r.ancilla_outcome.raw_value - r.ancilla_outcome.dev_m;
    if wrap.abs() > 0.5 {
        stats.misread_rounds += 1;
    }
    let (shift, tag) = match quad {
        Quadrature::Q => (&mut node.misread_shift.0, "me_sqec_q"),
        Quadrature::P => (&mut node.misread_shift.1, "me_sqec_p"),
    };
    *shift = *shift * (1.0 - k * moments.data_coeff) + k * wrap;
    node.set_state(tag, r.data);
    true
}

fn me_rounds<R: Rng + ?Sized>(node: &mut ClusterNode, cfg: &BuildConfig, stats: &mut BuildStats, rng: &mut R) -> bool {
    for _ in 0..cfg.me_sqec_iters {
        for quad in [Quadrature::P, Quadrature::Q] {
            if !me_round(node, quad, cfg, stats, rng) {
                return false;
            }
        }
    }
    true
}

fn cz_nodes<R: Rng + ?Sized>(t: &mut TreeCluster, a: usize, b: usize, gate: &GateModel, rng: &mut R) {
    let (sa, sb) = gate.cz(t.nodes[a].state, t.nodes[b].state, rng);
    t.nodes[a].set_state("cz", sa);
    t.nodes[b].set_state("cz", sb);
    let g = gate.cnot_moments().coupling;
    let (ma, mb) = (t.nodes[a].misread_shift, t.nodes[b].misread_shift);
    t.nodes[a].misread_shift.1 += g * mb.0;
    t.nodes[b].misread_shift.1 += g * ma.0;
    t.add_edge(a, b);
}

/// Two fresh qubits joined by a CZ, ME-SQEC on both, then a third qubit
/// attached to the centre followed by ME-SQEC on the centre and the new leaf.
/// A rejected ancilla readout discards the partial tree and starts over.
pub fn build_3tree<R: Rng + ?Sized>(cfg: &BuildConfig, rng: &mut R) -> (TreeCluster, BuildStats) {
    let mut stats = BuildStats::default();
    loop {
        stats.attempts += 1;
        if let Some(t) = try_3tree(cfg, &mut stats, rng) {
            return (t, stats);
        }
    }
}

fn try_3tree<R: Rng + ?Sized>(cfg: &BuildConfig, stats: &mut BuildStats, rng: &mut R) -> Option<TreeCluster> {
    let fresh = |id, role, rng: &mut R| ClusterNode::new(id, role, GkpQubitState::sample(cfg.sigma2, rng));
    let mut t = TreeCluster {
        kind: ClusterKind::Tree3,
        nodes: vec![fresh(0, Role::Node, rng), fresh(1, Role::Leaf, rng)],
        edges: BTreeSet::new(),
        centres: vec![0],
        frame_flips: 0,
    };
    stats.qubits_consumed += 2;
    cz_nodes(&mut t, 0, 1, &cfg.gate, rng);
    for i in 0..2 {
        if !me_rounds(&mut t.nodes[i], cfg, stats, rng) {
            return None;
        }
    }
    t.nodes.push(fresh(2, Role::Leaf, rng));
    stats.qubits_consumed += 1;
    cz_nodes(&mut t, 0, 2, &cfg.gate, rng);
    for i in [0, 2] {
        if !me_rounds(&mut t.nodes[i], cfg, stats, rng) {
            return None;
        }
    }
    Some(t)
}

/// Deterministic ledger of a 3-tree: `[(var_q, var_p)]` for centre, first and second leaf.
pub fn tree3_ledger(cfg: &BuildConfig) -> [(f64, f64); 3] {
    let s = cfg.sigma2;
    let sq = cfg.sqec();
    let round = |v: (f64, f64), quad| round_variances(v.0, v.1, s, quad, Estimator::MaxLikelihood, &sq);
    let rounds = |mut v: (f64, f64)| {
        for _ in 0..cfg.me_sqec_iters {
            v = round(v, Quadrature::P);
            v = round(v, Quadrature::Q);
        }
        v
    };
    let (n, l1) = cfg.gate.cz_variances((s, s), (s, s));
    let (n, l1) = (rounds(n), rounds(l1));
    let (n, l2) = cfg.gate.cz_variances(n, (s, s));
    [rounds(n), l1, rounds(l2)]
}

/// Acceptance probability of every ME-SQEC round of a 3-tree, in build order.
pub fn tree3_round_acceptance(cfg: &BuildConfig) -> Result<Vec<f64>> {
    let s = cfg.sigma2;
    let sq = cfg.sqec();
    let mut out = Vec::new();
    let rounds = |mut v: (f64, f64), out: &mut Vec<f64>| -> Result<(f64, f64)> {
        for _ in 0..cfg.me_sqec_iters {
            for quad in [Quadrature::P, Quadrature::Q] {
                let var = match quad {
                    Quadrature::P => v.1,
                    Quadrature::Q => v.0,
                };
                out.push(hrm_acceptance(RoundMoments::new(var, s, quad, &sq).meas_var, &cfg.hrm)?);
                v = round_variances(v.0, v.1, s, quad, Estimator::MaxLikelihood, &sq);
            }
        }
        Ok(v)
    };
    let (n, l1) = cfg.gate.cz_variances((s, s), (s, s));
    let n = rounds(n, &mut out)?;
    rounds(l1, &mut out)?;
    let (n, l2) = cfg.gate.cz_variances(n, (s, s));
    rounds(n, &mut out)?;
    rounds(l2, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionRule {
    Merge,
    Link,
}

/// Variances of the two Bell outcomes `p_u + q_v` and `p_v + q_u` including readout noise.
pub fn bell_outcome_variances(u: (f64, f64), v: (f64, f64), gate: &GateModel, loss: &LossConfig) -> (f64, f64) {
    let ((_, up), (_, vp)) = gate.cz_variances(u, v);
    (up + loss.added_variance(), vp + loss.added_variance())
}

/// Acceptance probability of one HRM Bell measurement.
pub fn bell_acceptance(u: (f64, f64), v: (f64, f64), cfg: &BuildConfig) -> Result<f64> {
    let (a, b) = bell_outcome_variances(u, v, &cfg.gate, &cfg.loss);
    Ok(hrm_acceptance(a, &cfg.hrm)? * hrm_acceptance(b, &cfg.hrm)?)
}

/// Bell measurement on two qubit states: CZ, then both read in p.
pub fn bell_readout<R: Rng + ?Sized>(
    u: GkpQubitState,
    v: GkpQubitState,
    gate: &GateModel,
    loss: &LossConfig,
    rng: &mut R,
) -> (MeasurementOutcome, MeasurementOutcome) {
    let (su, sv) = gate.cz(u, v, rng);
    (
        lossy_homodyne(&su, Quadrature::P, loss, rng),
        lossy_homodyne(&sv, Quadrature::P, loss, rng),
    )
}

/// HRM-gated Bell measurement. Returns the number of misread outcomes when
/// both are accepted.
pub fn bell_sample<R: Rng + ?Sized>(u: GkpQubitState, v: GkpQubitState, cfg: &BuildConfig, rng: &mut R) -> Option<u32> {
    let (ra, rb) = bell_readout(u, v, &cfg.gate, &cfg.loss, rng);
    if ra.dev_m.abs() >= cfg.hrm.v_up || rb.dev_m.abs() >= cfg.hrm.v_up {
        return None;
    }
    Some((ra.bit + rb.bit) as u32)
}

/// How a cluster kind is assembled. Every fusion retries with freshly built
/// copies of both of its inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recipe {
    Tree3,
    Fuse {
        a: Box<Recipe>,
        b: Box<Recipe>,
        rule: FusionRule,
        kind: ClusterKind,
    },
    /// Marks all but one free leaf as encoded-leaf ancillae and the centre as a leaf.
    EncodedLeaf(Box<Recipe>),
    /// Links the last centre to the first one.
    Close(Box<Recipe>),
    /// Measures out the remaining free leaves in q.
    Trim(Box<Recipe>),
}

impl Recipe {
    pub fn for_kind(kind: ClusterKind, cfg: &BuildConfig) -> Recipe {
        match kind {
            ClusterKind::EncTree3 => (0..cfg.leaves).fold(Recipe::star(cfg.leaves + 1), |r, _| {
                Recipe::fuse(
                    r,
                    Recipe::EncodedLeaf(Box::new(Recipe::star(cfg.ancillae + 1))),
                    FusionRule::Link,
                    kind,
                )
            }),
            ClusterKind::EncTree5 => (0..2).fold(Recipe::star(4), |r, _| {
                Recipe::fuse(r, Recipe::for_kind(ClusterKind::EncTree3, cfg), FusionRule::Merge, kind)
            }),
            ClusterKind::Hex => {
                let part = Recipe::for_kind(ClusterKind::EncTree5, cfg);
                let ring = (1..6).fold(part.clone(), |r, _| Recipe::fuse(r, part.clone(), FusionRule::Link, kind));
                Recipe::Trim(Box::new(Recipe::Close(Box::new(ring))))
            }
            k => Recipe::star(k.star_leaves().expect("star kind")),
        }
    }

    fn star(leaves: usize) -> Recipe {
        assert!(leaves >= 2, "stars start from a 3-tree");
        (3..=leaves).fold(Recipe::Tree3, |r, k| {
            Recipe::fuse(r, Recipe::Tree3, FusionRule::Merge, ClusterKind::star(k))
        })
    }

    fn fuse(a: Recipe, b: Recipe, rule: FusionRule, kind: ClusterKind) -> Recipe {
        Recipe::Fuse {
            a: Box::new(a),
            b: Box::new(b),
            rule,
            kind,
        }
    }
}

/// Fused qubits `(u in a, v in b)`: the last free leaf of `a`'s newest centre,
/// and either `b`'s centre (merge) or its last free leaf (link).
fn fusion_ports(a: &TreeCluster, b: &TreeCluster, rule: FusionRule) -> (usize, usize) {
    let at = *a.centres.last().unwrap();
    let u = *a.free_leaves(at).last().expect("cluster has a free leaf");
    let v = match rule {
        FusionRule::Merge => b.centre(),
        FusionRule::Link => *b.free_leaves(b.centre()).last().expect("cluster has a free leaf"),
    };
    (u, v)
}

/// Graph update after an accepted fusion of ports `u` and `v`.
fn splice(mut a: TreeCluster, b: TreeCluster, rule: FusionRule, kind: ClusterKind, u: usize, v: usize) -> TreeCluster {
    let at = *a.centres.last().unwrap();
    let bc = b.centre();
    let bc_nb = b.neighbours(bc);
    let off = a.absorb(b);
    match rule {
        FusionRule::Merge => {
            for w in bc_nb {
                a.add_edge(at, w + off);
            }
        }
        FusionRule::Link => {
            a.add_edge(at, bc + off);
            if kind == ClusterKind::Hex {
                a.centres.push(bc + off);
            }
        }
    }
    a.remove(&[u, v + off]);
    a.kind = kind;
    a
}

fn close_ports(t: &TreeCluster) -> (usize, usize) {
    let (a, b) = (*t.centres.last().unwrap(), t.centres[0]);
    (*t.free_leaves(a).last().unwrap(), *t.free_leaves(b).last().unwrap())
}

fn close(mut t: TreeCluster, u: usize, v: usize) -> TreeCluster {
    let (a, b) = (*t.centres.last().unwrap(), t.centres[0]);
    t.add_edge(a, b);
    t.remove(&[u, v]);
    t
}

fn trim(mut t: TreeCluster) -> TreeCluster {
    let spare: Vec<usize> = t.centres.iter().flat_map(|&c| t.free_leaves(c)).collect();
    t.remove(&spare);
    t
}

fn mark_encoded_leaf(mut t: TreeCluster) -> TreeCluster {
    let c = t.centre();
    let leaves = t.free_leaves(c);
    for &i in &leaves[..leaves.len() - 1] {
        t.nodes[i].role = Role::EncodedLeafAncilla;
    }
    t.nodes[c].role = Role::Leaf;
    t
}

fn pair(s: &GkpQubitState) -> (f64, f64) {
    (s.var_q, s.var_p)
}

/// Samples a cluster following `recipe`.
pub fn build_recipe<R: Rng + ?Sized>(recipe: &Recipe, cfg: &BuildConfig, rng: &mut R) -> (TreeCluster, BuildStats) {
    match recipe {
        Recipe::Tree3 => build_3tree(cfg, rng),
        Recipe::Fuse { a, b, rule, kind } => {
            let mut stats = BuildStats::default();
            loop {
                let (ca, sa) = build_recipe(a, cfg, rng);
                let (cb, sb) = build_recipe(b, cfg, rng);
                stats.add(sa);
                stats.add(sb);
                stats.attempts += 1;
                let (u, v) = fusion_ports(&ca, &cb, *rule);
                match bell_sample(ca.nodes[u].state, cb.nodes[v].state, cfg, rng) {
                    Some(flips) => {
                        stats.fusion_flips += flips as u64;
                        let mut t = splice(ca, cb, *rule, *kind, u, v);
                        t.frame_flips += flips;
                        return (t, stats);
                    }
                    None => stats.hrm_rejections += 1,
                }
            }
        }
        Recipe::EncodedLeaf(r) => {
            let (t, s) = build_recipe(r, cfg, rng);
            (mark_encoded_leaf(t), s)
        }
        Recipe::Close(r) => {
            let mut stats = BuildStats::default();
            loop {
                let (t, s) = build_recipe(r, cfg, rng);
                stats.add(s);
                stats.attempts += 1;
                let (u, v) = close_ports(&t);
                match bell_sample(t.nodes[u].state, t.nodes[v].state, cfg, rng) {
                    Some(flips) => {
                        stats.fusion_flips += flips as u64;
                        let mut t = close(t, u, v);
                        t.frame_flips += flips;
                        return (t, stats);
                    }
                    None => stats.hrm_rejections += 1,
                }
            }
        }
        Recipe::Trim(r) => {
            let (t, s) = build_recipe(r, cfg, rng);
            (trim(t), s)
        }
    }
}

/// Expected resource cost of a recipe under independent geometric retries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpectedCost {
    pub attempts: f64,
    pub hrm_rejections: f64,
    pub qubits_consumed: f64,
}

/// Deterministic counterpart of [`build_recipe`]: every qubit carries zero
/// deviation and its ledger variances, and the cost of each fusion is the
/// cost of its inputs times the mean number of attempts `1/P_acc`.
pub fn ledger_recipe(recipe: &Recipe, cfg: &BuildConfig) -> Result<(TreeCluster, ExpectedCost)> {
    match recipe {
        Recipe::Tree3 => {
            let vars = tree3_ledger(cfg);
            let nodes = vars
                .iter()
                .enumerate()
                .map(|(i, &(q, p))| {
                    let role = if i == 0 { Role::Node } else { Role::Leaf };
                    ClusterNode::new(
                        i,
                        role,
                        GkpQubitState {
                            dev_q: 0.0,
                            dev_p: 0.0,
                            var_q: q,
                            var_p: p,
                        },
                    )
                })
                .collect();
            let t = TreeCluster {
                kind: ClusterKind::Tree3,
                nodes,
                edges: [(0, 1), (0, 2)].into_iter().collect(),
                centres: vec![0],
                frame_flips: 0,
            };
            let acc = tree3_round_acceptance(cfg)?;
            // qubits spent per attempt: two fresh qubits, one ancilla per round
            // reached, and the third qubit once the first half is through
            let half = acc.len() / 2;
            let (mut reach, mut spent) = (1.0, 2.0);
            for (i, a) in acc.iter().enumerate() {
                if i == half {
                    spent += reach;
                }
                spent += reach;
                reach *= a;
            }
            let n = 1.0 / reach;
            let cost = ExpectedCost {
                attempts: n,
                hrm_rejections: n - 1.0,
                qubits_consumed: n * spent,
            };
            Ok((t, cost))
        }
        Recipe::Fuse { a, b, rule, kind } => {
            let (ca, xa) = ledger_recipe(a, cfg)?;
            let (cb, xb) = ledger_recipe(b, cfg)?;
            let (u, v) = fusion_ports(&ca, &cb, *rule);
            let p = bell_acceptance(pair(&ca.nodes[u].state), pair(&cb.nodes[v].state), cfg)?;
            let n = 1.0 / p;
            let cost = ExpectedCost {
                attempts: n * (xa.attempts + xb.attempts + 1.0),
                hrm_rejections: n * (xa.hrm_rejections + xb.hrm_rejections) + n - 1.0,
                qubits_consumed: n * (xa.qubits_consumed + xb.qubits_consumed),
            };
            Ok((splice(ca, cb, *rule, *kind, u, v), cost))
        }
        Recipe::EncodedLeaf(r) => {
            let (t, x) = ledger_recipe(r, cfg)?;
            Ok((mark_encoded_leaf(t), x))
        }
        Recipe::Close(r) => {
            let (t, x) = ledger_recipe(r, cfg)?;
            let (u, v) = close_ports(&t);
            let p = bell_acceptance(pair(&t.nodes[u].state), pair(&t.nodes[v].state), cfg)?;
            let n = 1.0 / p;
            let cost = ExpectedCost {
                attempts: n * (x.attempts + 1.0),
                hrm_rejections: n * x.hrm_rejections + n - 1.0,
                qubits_consumed: n * x.qubits_consumed,
            };
            Ok((close(t, u, v), cost))
        }
        Recipe::Trim(r) => {
            let (t, x) = ledger_recipe(r, cfg)?;
            Ok((trim(t), x))
        }
    }
}

/// Fuses two clusters with the HRM Bell measurement. On rejection both inputs
/// are rebuilt from scratch according to their kinds.
pub fn fuse_hrm<R: Rng + ?Sized>(
    a: TreeCluster,
    b: TreeCluster,
    rule: FusionRule,
    kind: ClusterKind,
    cfg: &BuildConfig,
    rng: &mut R,
) -> (TreeCluster, BuildStats) {
    let mut stats = BuildStats::default();
    let (mut a, mut b) = (a, b);
    loop {
        stats.attempts += 1;
        let (u, v) = fusion_ports(&a, &b, rule);
        if let Some(flips) = bell_sample(a.nodes[u].state, b.nodes[v].state, cfg, rng) {
            stats.fusion_flips += flips as u64;
            let mut t = splice(a, b, rule, kind, u, v);
            t.frame_flips += flips;
            return (t, stats);
        }
        stats.hrm_rejections += 1;
        let (na, sa) = build_kind(a.kind, cfg, rng);
        let (nb, sb) = build_kind(b.kind, cfg, rng);
        stats.add(sa);
        stats.add(sb);
        a = na;
        b = nb;
    }
}

/// Builds any supported kind from scratch.
pub fn build_kind<R: Rng + ?Sized>(kind: ClusterKind, cfg: &BuildConfig, rng: &mut R) -> (TreeCluster, BuildStats) {
    build_recipe(&Recipe::for_kind(kind, cfg), cfg, rng)
}

/// Hexagonal cluster: six nodes in a ring, each carrying `2L` encoded leaves
/// of `m` ancillae.
pub fn build_hexagonal<R: Rng + ?Sized>(cfg: &BuildConfig, rng: &mut R) -> (TreeCluster, BuildStats) {
    build_kind(ClusterKind::Hex, cfg, rng)
}

/// Ledger-only hexagonal cluster with its expected construction cost.
pub fn hexagonal_ledger(cfg: &BuildConfig) -> Result<(TreeCluster, ExpectedCost)> {
    ledger_recipe(&Recipe::for_kind(ClusterKind::Hex, cfg), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ideal(sigma2: f64, iters: usize) -> BuildConfig {
        BuildConfig {
            me_sqec_iters: iters,
            gate: GateModel::Ideal,
            ..BuildConfig::new(sigma2).unwrap()
        }
    }

    #[test]
    fn config_validation() {
        assert!(BuildConfig::new(0.05).is_ok());
        let even = BuildConfig {
            ancillae: 2,
            ..BuildConfig::new(0.05).unwrap()
        };
        assert!(even.validated().is_err());
        let none = BuildConfig {
            leaves: 0,
            ..BuildConfig::new(0.05).unwrap()
        };
        assert!(none.validated().is_err());
        assert!(BuildConfig::new(-1.0).is_err());
    }

    #[test]
    fn zero_iterations_is_raw_cz_propagation() {
        let s = 0.07;
        let cfg = ideal(s, 0);
        let [n, l1, l2] = tree3_ledger(&cfg);
        assert!((n.0 - s).abs() < 1e-15 && (n.1 - 3.0 * s).abs() < 1e-15);
        assert!((l1.0 - s).abs() < 1e-15 && (l1.1 - 2.0 * s).abs() < 1e-15);
        assert!((l2.0 - s).abs() < 1e-15 && (l2.1 - 2.0 * s).abs() < 1e-15);

        let (t, stats) = build_3tree(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(stats.qubits_consumed, 3);
        assert_eq!((t.nodes[0].ledger.var_q, t.nodes[0].ledger.var_p), n);
        assert_eq!((t.nodes[2].ledger.var_q, t.nodes[2].ledger.var_p), l2);
    }

    #[test]
    fn ideal_rounds_settle_near_sigma2() {
        // alternating LMMSE rounds with perfect gates: p then q, each leaves
        // the other quadrature with the ancilla's back-action
        let s = 0.05;
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        for (q, p) in tree3_ledger(&ideal(s, 40)) {
            assert!((q / s - golden).abs() < 1e-9, "{q}");
            assert!((p / s - 1.0 - golden).abs() < 1e-9, "{p}");
            assert!(q / s > 0.5 && p / s < 1.7);
        }
    }

    #[test]
    fn ledger_replays_from_history() {
        let (t, _) = build_3tree(&BuildConfig::new(0.05).unwrap(), &mut ChaCha8Rng::seed_from_u64(3));
        for n in &t.nodes {
            let (q, p) = n.ledger.replay();
            assert!((q - n.ledger.var_q).abs() < 1e-12 && (p - n.ledger.var_p).abs() < 1e-12);
            assert_eq!((n.state.var_q, n.state.var_p), (n.ledger.var_q, n.ledger.var_p));
            assert!(n.ledger.var_q >= 0.0 && n.ledger.var_p >= 0.0);
        }
        // CZ + 3×(p, q) on node and first leaf, CZ + 3×(p, q) on node and second leaf
        assert_eq!(t.nodes[0].ledger.history.len(), 1 + 1 + 6 + 1 + 6);
    }

    #[test]
    fn star_kinds_have_expected_shape() {
        let cfg = BuildConfig::new(0.03).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 2..=6 {
            let (t, _) = build_kind(ClusterKind::star(k), &cfg, &mut rng);
            assert_eq!(t.nodes.len(), k + 1);
            assert_eq!(t.neighbours(t.centre()).len(), k);
            assert_eq!(t.free_leaves(t.centre()).len(), k);
            assert_eq!(t.kind, ClusterKind::star(k));
        }
    }

    #[test]
    fn encoded_leaf_counts() {
        let cfg = BuildConfig::new(0.03).unwrap();
        let (t, _) = ledger_recipe(&Recipe::for_kind(ClusterKind::Hex, &cfg), &cfg).unwrap();
        let (l, m) = (cfg.leaves, cfg.ancillae);
        assert_eq!(t.count_role(Role::Node), 6);
        assert_eq!(t.count_role(Role::Leaf), 6 * 2 * l);
        assert_eq!(t.count_role(Role::EncodedLeafAncilla), 6 * 2 * l * m);
        assert_eq!(t.edges.len(), 6 + 6 * 2 * l + 6 * 2 * l * m);
    }

    #[test]
    fn fusion_keeps_variances() {
        let cfg = BuildConfig::new(0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, _) = build_3tree(&cfg, &mut rng);
        let (b, _) = build_3tree(&cfg, &mut rng);
        let before: Vec<_> = [a.nodes[0].ledger.clone(), a.nodes[1].ledger.clone()].to_vec();
        let (t, s) = fuse_hrm(a, b, FusionRule::Merge, ClusterKind::Tree4, &cfg, &mut rng);
        assert!(s.attempts >= 1);
        assert_eq!(t.nodes.len(), 4);
        if s.attempts == 1 {
            assert_eq!(t.nodes[0].ledger, before[0]);
            assert_eq!(t.nodes[1].ledger, before[1]);
        }
    }

    #[test]
    fn noiseless_fusions_never_reject_or_flip() {
        let cfg = BuildConfig {
            leaves: 1,
            ancillae: 1,
            ..ideal(1e-4, 3)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (t, s) = build_hexagonal(&cfg, &mut rng);
            assert_eq!(s.hrm_rejections, 0);
            assert_eq!(s.fusion_flips, 0);
            assert_eq!(t.frame_flips, 0);
        }
    }

    #[test]
    fn identical_seeds_identical_clusters() {
        let cfg = BuildConfig {
            leaves: 1,
            ancillae: 1,
            ..BuildConfig::new(0.06).unwrap()
        };
        let a = build_hexagonal(&cfg, &mut ChaCha8Rng::seed_from_u64(77));
        let b = build_hexagonal(&cfg, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
        assert_eq!(a.0.dump(), b.0.dump());
    }

    #[test]
    fn sampled_and_ledger_hex_agree_on_variances() {
        let cfg = BuildConfig {
            leaves: 2,
            ancillae: 1,
            ..BuildConfig::new(0.05).unwrap()
        };
        let (s, _) = build_hexagonal(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let (l, _) = hexagonal_ledger(&cfg).unwrap();
        assert_eq!(s.edges, l.edges);
        for (a, b) in s.nodes.iter().zip(&l.nodes) {
            assert_eq!(a.role, b.role);
            assert!((a.ledger.var_q - b.ledger.var_q).abs() < 1e-12);
            assert!((a.ledger.var_p - b.ledger.var_p).abs() < 1e-12);
        }
    }

    #[test]
    fn dump_lists_every_node() {
        let (t, _) = build_3tree(&BuildConfig::new(0.05).unwrap(), &mut ChaCha8Rng::seed_from_u64(8));
        let d = t.dump();
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("0 Node "));
        assert!(lines[0].ends_with(" 1,2"));
        assert!(lines[1].ends_with(" 0"));
    }

    #[test]
    fn tree4_cost_matches_hand_oracle() {
        let cfg = BuildConfig::new(0.06).unwrap();
        let acc = tree3_round_acceptance(&cfg).unwrap();
        assert_eq!(acc.len(), 4 * 6);
        // restart on any rejection: spend per attempt over success probability
        let mut spent = 2.0;
        for i in 0..acc.len() {
            let reach: f64 = acc[..i].iter().product();
            spent += reach * if i == 12 { 2.0 } else { 1.0 };
        }
        let c3 = spent / acc.iter().product::<f64>();
        let [n, _, l2] = tree3_ledger(&cfg);
        // last free leaf of the first tree fused with the centre of the second
        let p = bell_acceptance(l2, n, &cfg).unwrap();
        let (_, x) = ledger_recipe(&Recipe::for_kind(ClusterKind::Tree4, &cfg), &cfg).unwrap();
        assert!((x.qubits_consumed - 2.0 * c3 / p).abs() < 1e-9);
        let t3 = 1.0 / acc.iter().product::<f64>();
        assert!((x.attempts - (2.0 * t3 + 1.0) / p).abs() < 1e-9);
    }
}
