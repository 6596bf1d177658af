//! Generators and oracles shared by the integration suites. The oracles
//! never call into the production metric code.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use modsift_core::graph::{CallEdge, FunctionNode, ProgramGraph};
use rand::seq::SliceRandom;
use rand::Rng;

/// Normalized mutual information `2 I(A;B) / (H(A) + H(B))`; 1 when both
/// labelings are a single cluster.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    let entropy =
        |m: &HashMap<usize, f64>| -> f64 { m.values().map(|&c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c / n;
            pxy * (pxy / ((pa[&x] / n) * (pb[&y] / n))).ln()
        })
        .sum();
    2.0 * mi / (ha + hb)
}

/// Directed graph on `n` functions with each ordered pair (self-calls
/// included) present with probability `p`. Addresses are shuffled so that
/// ordinals differ from indices.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, p: f64) -> ProgramGraph {
    let mut g = ProgramGraph::new("random");
    let mut addresses: Vec<u64> = (0..n as u64).map(|a| 0x1000 + 0x10 * a).collect();
    addresses.shuffle(rng);
    for (v, &a) in addresses.iter().enumerate() {
        g.functions
            .push(FunctionNode::new(format!("f{v}"), a, rng.gen_range(1..20)));
    }
    for i in 0..n {
        for j in 0..n {
            if rng.gen_bool(p) {
                g.edges
                    .push(CallEdge::new(format!("f{i}"), format!("f{j}")));
            }
        }
    }
    g.assign_ordinals();
    g
}

/// Weakly connected random graph: a random spanning tree with random
/// directions plus extra edges.
pub fn random_connected_graph<R: Rng>(rng: &mut R, n: usize, extra: f64) -> ProgramGraph {
    let mut g = random_graph(rng, n, extra);
    let mut have: HashSet<(String, String)> = g
        .edges
        .iter()
        .map(|e| (e.caller.clone(), e.callee.clone()))
        .collect();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        let (a, b) = if rng.gen_bool(0.5) { (u, v) } else { (v, u) };
        let key = (format!("f{a}"), format!("f{b}"));
        if have.insert(key.clone()) {
            g.edges.push(CallEdge::new(key.0, key.1));
        }
    }
    g
}

/// Random rooted call tree: every non-root function has exactly one
/// caller. Returns the graph and the root index.
pub fn random_tree<R: Rng>(rng: &mut R, n: usize) -> (ProgramGraph, usize) {
    let mut g = ProgramGraph::new("tree");
    for v in 0..n {
        g.functions.push(FunctionNode::new(
            format!("f{v}"),
            0x1000 + 0x10 * v as u64,
            rng.gen_range(1..1000),
        ));
    }
    for v in 1..n {
        let parent = rng.gen_range(0..v);
        g.edges
            .push(CallEdge::new(format!("f{parent}"), format!("f{v}")));
    }
    g.assign_ordinals();
    (g, 0)
}

pub fn random_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let k = rng.gen_range(1..=n.max(1));
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

/// Undirected modularity by the textbook double sum over an adjacency
/// matrix. A self-call is a loop with `A_ii = 2`.
pub fn origin_mq_oracle(g: &ProgramGraph, labels: &[usize]) -> f64 {
    let n = g.len();
    let idx = |id: &str| g.functions.iter().position(|f| f.id == id).unwrap();
    let mut a = vec![vec![0.0f64; n]; n];
    for e in &g.edges {
        let (i, j) = (idx(&e.caller), idx(&e.callee));
        if i == j {
            a[i][i] = 2.0;
        } else {
            a[i][j] = 1.0;
            a[j][i] = 1.0;
        }
    }
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Directed weighted modularity by the double sum:
/// `1/outer · Σ_ij (A_ij − kout_i·kin_j / null) δ(c_i, c_j)`.
pub fn directed_mq_oracle(
    n: usize,
    weighted_edges: &[(usize, usize, f64)],
    labels: &[usize],
    standard: bool,
) -> f64 {
    let mut a = vec![vec![0.0f64; n]; n];
    for &(i, j, w) in weighted_edges {
        if i != j {
            a[i][j] += w;
        }
    }
    let kout: Vec<f64> = (0..n).map(|i| a[i].iter().sum()).collect();
    let kin: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a[i][j]).sum()).collect();
    let w: f64 = kout.iter().sum();
    if w == 0.0 {
        return 0.0;
    }
    let (outer, null) = if standard { (w, w) } else { (2.0 * w, 2.0 * w) };
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i][j] - kout[i] * kin[j] / null;
            }
        }
    }
    q / outer
}

/// Number of weakly connected components of the subgraph induced by
/// `members`, by breadth-first search over call edges in both directions.
pub fn weak_components(g: &ProgramGraph, members: &[usize]) -> usize {
    let index = g.id_index();
    let inside: HashSet<usize> = members.iter().copied().collect();
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in &g.edges {
        let (u, v) = (index[e.caller.as_str()], index[e.callee.as_str()]);
        if inside.contains(&u) && inside.contains(&v) {
            adj.entry(u).or_default().push(v);
            adj.entry(v).or_default().push(u);
        }
    }
    let mut seen = HashSet::new();
    let mut count = 0;
    for &s in members {
        if !seen.insert(s) {
            continue;
        }
        count += 1;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
    }
    count
}

/// Library-like graph with random strings, constants, data references and
/// dispatch flags, for signature tests.
pub fn random_attributed_graph<R: Rng>(rng: &mut R, n: usize) -> ProgramGraph {
    let mut g = random_connected_graph(rng, n, (2.0 / n.max(1) as f64).min(0.5));
    let words = [
        "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
    ];
    for f in &mut g.functions {
        f.bb_count = rng.gen_range(0..30);
        f.cfg_edge_count = rng.gen_range(0..40);
        for _ in 0..rng.gen_range(0..3) {
            f.strings.insert(format!(
                "{}-{}",
                words[rng.gen_range(0..words.len())],
                rng.gen_range(0..4)
            ));
        }
        for _ in 0..rng.gen_range(0..4) {
            f.constants.push(rng.gen_range(-50..50));
        }
        if rng.gen_bool(0.2) {
            f.data_refs.insert(format!("obj{}", rng.gen_range(0..5)));
        }
        f.is_dispatch_target = rng.gen_bool(0.1);
    }
    g
}
