use gkp_mbqc::cluster::*;
use gkp_mbqc::devices::GateModel;
use gkp_mbqc::gkp::{GkpQubitState, HrmConfig};
use petgraph::algo::is_isomorphic_matching;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn encoded_leaf(g: &mut UnGraph<Role, ()>, at: NodeIndex, m: usize) {
    let e = g.add_node(Role::Leaf);
    g.add_edge(at, e, ());
    for _ in 0..m {
        let a = g.add_node(Role::EncodedLeafAncilla);
        g.add_edge(e, a, ());
    }
}

fn plain_leaves(g: &mut UnGraph<Role, ()>, at: NodeIndex, k: usize) {
    for _ in 0..k {
        let l = g.add_node(Role::Leaf);
        g.add_edge(at, l, ());
    }
}

fn template(kind: ClusterKind, l: usize, m: usize) -> UnGraph<Role, ()> {
    let mut g = UnGraph::new_undirected();
    let c = g.add_node(Role::Node);
    match kind {
        ClusterKind::EncTree3 => {
            (0..l).for_each(|_| encoded_leaf(&mut g, c, m));
            plain_leaves(&mut g, c, 1);
        }
        ClusterKind::EncTree5 => {
            (0..2 * l).for_each(|_| encoded_leaf(&mut g, c, m));
            plain_leaves(&mut g, c, 4);
        }
        ClusterKind::Hex => {
            let mut ring = vec![c];
            ring.extend((1..6).map(|_| g.add_node(Role::Node)));
            for i in 0..6 {
                g.add_edge(ring[i], ring[(i + 1) % 6], ());
                (0..2 * l).for_each(|_| encoded_leaf(&mut g, ring[i], m));
            }
        }
        k => plain_leaves(&mut g, c, k.star_leaves().unwrap()),
    }
    g
}

fn isomorphic(t: &TreeCluster, kind: ClusterKind, l: usize, m: usize) -> bool {
    is_isomorphic_matching(&t.graph(), &template(kind, l, m), |a, b| a == b, |_, _| true)
}

#[test]
fn clusters_match_their_templates() {
    use ClusterKind::*;
    for (l, m) in [(4, 3), (1, 1), (3, 5)] {
        let cfg = BuildConfig {
            leaves: l,
            ancillae: m,
            ..BuildConfig::new(0.04).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(l as u64 * 10 + m as u64);
        for kind in [Tree3, Tree4, Tree5, Star(6), EncTree3, EncTree5, Hex] {
            let (t, stats) = build_kind(kind, &cfg, &mut rng);
            assert!(stats.attempts >= 1);
            assert_eq!(t.kind, kind);
            assert!(isomorphic(&t, kind, l, m), "{kind:?} L={l} m={m}");
            let (d, _) = ledger_recipe(&Recipe::for_kind(kind, &cfg), &cfg).unwrap();
            assert!(isomorphic(&d, kind, l, m));
        }
    }
    // a single encoded leaf with one ancilla is an uncoded two-qubit chain
    let cfg = BuildConfig {
        leaves: 1,
        ancillae: 1,
        ..BuildConfig::new(0.04).unwrap()
    };
    let (t, _) = hexagonal_ledger(&cfg).unwrap();
    assert_eq!(t.nodes.len(), 6 * 5);
    assert!(!isomorphic(&t, ClusterKind::Hex, 1, 3));
}

/// Variance of `xs` and its standard error.
fn var_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let v = xs.iter().map(|x| x * x).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| x.powi(4)).sum::<f64>() / n;
    (v, ((m4 - v * v) / n).sqrt())
}

fn check_ledger_vs_samples(kind: ClusterKind, cfg: &BuildConfig, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (reference, _) = ledger_recipe(&Recipe::for_kind(kind, cfg), cfg).unwrap();
    let k = reference.nodes.len();
    let mut q = vec![Vec::with_capacity(n); k];
    let mut p = vec![Vec::with_capacity(n); k];
    for _ in 0..n {
        let (t, _) = build_kind(kind, cfg, &mut rng);
        for (i, node) in t.nodes.iter().enumerate() {
            assert!((node.ledger.var_q - reference.nodes[i].ledger.var_q).abs() < 1e-12);
            q[i].push(node.state.dev_q - node.misread_shift.0);
            p[i].push(node.state.dev_p - node.misread_shift.1);
        }
    }
    for i in 0..k {
        for (xs, want) in [
            (&q[i], reference.nodes[i].ledger.var_q),
            (&p[i], reference.nodes[i].ledger.var_p),
        ] {
            let (v, se) = var_se(xs);
            assert!(
                (v - want).abs() < 3.0 * se,
                "{kind:?} node {i}: sampled {v} ledger {want} se {se}"
            );
        }
    }
}

#[test]
fn ledger_matches_sampled_3tree_deviations() {
    let cfg = BuildConfig::new(0.273f64.powi(2)).unwrap();
    check_ledger_vs_samples(ClusterKind::Tree3, &cfg, 10_000, 11);
}

#[test]
fn ledger_matches_sampled_fused_deviations() {
    let cfg = BuildConfig::new(0.273f64.powi(2)).unwrap();
    check_ledger_vs_samples(ClusterKind::Tree4, &cfg, 10_000, 12);
    let cfg = BuildConfig {
        leaves: 1,
        ancillae: 1,
        ..cfg
    };
    check_ledger_vs_samples(ClusterKind::EncTree3, &cfg, 40_000, 13);
}

#[test]
fn hex_cost_matches_retry_model() {
    // misidentified ancilla outcomes push the sampled cost above the Gaussian
    // retry model as σ grows; 0.18 keeps them rare
    let cfg = BuildConfig::new(0.18f64.powi(2)).unwrap();
    let (_, expect) = hexagonal_ledger(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 300;
    let mut qubits = Vec::with_capacity(n);
    let mut attempts = Vec::with_capacity(n);
    for _ in 0..n {
        let (_, s) = build_hexagonal(&cfg, &mut rng);
        qubits.push(s.qubits_consumed as f64);
        attempts.push(s.attempts as f64);
    }
    for (xs, want) in [(&qubits, expect.qubits_consumed), (&attempts, expect.attempts)] {
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        println!("sampled {mean:.1} ± {se:.1}, retry model {want:.1}");
        assert!((mean - want).abs() < 3.0 * se);
    }
}

#[test]
fn hex_node_p_variance_by_hand() {
    let s = 0.273f64.powi(2);
    let cfg = BuildConfig {
        gate: GateModel::Ideal,
        ..BuildConfig::new(s).unwrap()
    };
    // CZ with a fresh leaf, three (p, q) rounds, CZ with a second leaf, three rounds
    let rounds = |(mut q, mut p): (f64, f64)| {
        for _ in 0..3 {
            p = p * s / (p + s);
            q += s;
            q = q * s / (q + s);
            p += s;
        }
        (q, p)
    };
    let (q, p) = rounds((s, 2.0 * s));
    let (_, p) = rounds((q, p + s));
    let (hex, _) = hexagonal_ledger(&cfg).unwrap();
    for n in hex.nodes.iter().filter(|n| n.role == Role::Node) {
        assert!((n.ledger.var_p - p).abs() < 1e-12, "{} vs {p}", n.ledger.var_p);
    }
}

#[test]
fn hrm_does_not_raise_fusion_flip_rate() {
    let cfg = BuildConfig::new(0.1).unwrap();
    let loose = BuildConfig {
        hrm: HrmConfig::new(0.886).unwrap(),
        ..cfg
    };
    let [n, _, l2] = tree3_ledger(&cfg);
    let state = |v: (f64, f64), rng: &mut ChaCha8Rng| {
        let mut s = GkpQubitState::sample(1.0, rng);
        s.dev_q *= v.0.sqrt();
        s.dev_p *= v.1.sqrt();
        s.var_q = v.0;
        s.var_p = v.1;
        s
    };
    let rate = |c: &BuildConfig, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut acc, mut flips) = (0u64, 0u64);
        for _ in 0..200_000 {
            let (u, v) = (state(l2, &mut rng), state(n, &mut rng));
            if let Some(f) = bell_sample(u, v, c, &mut rng) {
                acc += 1;
                flips += (f > 0) as u64;
            }
        }
        let r = flips as f64 / acc as f64;
        (r, (r * (1.0 - r) / acc as f64).sqrt())
    };
    let (with, se1) = rate(&cfg, 1);
    let (without, se2) = rate(&loose, 2);
    assert!(with <= without + 3.0 * (se1 * se1 + se2 * se2).sqrt(), "{with} vs {without}");
    assert!(with < without);
}
