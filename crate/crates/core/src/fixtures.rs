//! Deterministic synthetic call graphs for tests, benchmarks and demos.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CallEdge, FunctionNode, ProgramGraph};

/// A generated graph together with the module each function was planted in.
#[derive(Debug, Clone)]
pub struct Planted {
    pub graph: ProgramGraph,
    /// Planted module per function index.
    pub labels: Vec<usize>,
}

impl Planted {
    pub fn modules(&self) -> Vec<Vec<usize>> {
        let count = self.labels.iter().max().map_or(0, |m| m + 1);
        let mut modules = vec![Vec::new(); count];
        for (v, &m) in self.labels.iter().enumerate() {
            modules[m].push(v);
        }
        modules
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedParams {
    pub blocks: usize,
    pub block_size: usize,
    pub p_in: f64,
    pub p_out: f64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        PlantedParams {
            blocks: 20,
            block_size: 20,
            p_in: 0.3,
            p_out: 0.01,
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// Planted-partition graph with unit volumes. Each unordered pair of
/// functions is linked with probability `p_in` inside a block and `p_out`
/// across blocks; the call direction is a fair coin. Blocks occupy
/// contiguous address ranges.
pub fn planted_partition(params: &PlantedParams, seed: u64) -> Result<Planted> {
    check_probability("p_in", params.p_in)?;
    check_probability("p_out", params.p_out)?;
    if params.blocks == 0 || params.block_size == 0 {
        return Err(Error::Config(
            "blocks and block_size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.blocks * params.block_size;
    let labels: Vec<usize> = (0..n).map(|v| v / params.block_size).collect();
    let mut graph = ProgramGraph::new(format!("planted-{seed}"));
    for v in 0..n {
        graph.functions.push(FunctionNode::new(
            format!("f{v}"),
            0x1000 + 0x40 * v as u64,
            1,
        ));
    }
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] {
                params.p_in
            } else {
                params.p_out
            };
            if rng.gen_bool(p) {
                let (a, b) = if rng.gen_bool(0.5) { (i, j) } else { (j, i) };
                graph
                    .edges
                    .push(CallEdge::new(format!("f{a}"), format!("f{b}")));
            }
        }
    }
    graph.assign_ordinals();
    Ok(Planted { graph, labels })
}

/// Two disjoint 3-cliques, calls in both directions.
pub fn clique_pair() -> ProgramGraph {
    let mut graph = ProgramGraph::new("clique-pair");
    for v in 0..6u64 {
        graph
            .functions
            .push(FunctionNode::new(format!("f{v}"), 0x1000 + 0x40 * v, 1));
    }
    for base in [0, 3] {
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    graph.edges.push(CallEdge::new(
                        format!("f{}", base + i),
                        format!("f{}", base + j),
                    ));
                }
            }
        }
    }
    graph.assign_ordinals();
    graph
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryParams {
    pub name: String,
    pub modules: usize,
    pub min_module_size: usize,
    pub max_module_size: usize,
    /// Probability of an extra call between two functions of one module,
    /// on top of the spanning call tree.
    pub p_extra: f64,
    /// Calls from one module into another.
    pub cross_calls: usize,
}

impl Default for LibraryParams {
    fn default() -> Self {
        LibraryParams {
            name: "libsynth".into(),
            modules: 16,
            min_module_size: 10,
            max_module_size: 30,
            p_extra: 0.15,
            cross_calls: 8,
        }
    }
}

/// Synthetic library made of functionality modules. Each module is a call
/// tree rooted at an exported entry, thickened by extra downward calls,
/// with module-private strings, constants and shared data objects and an
/// occasional dispatch table. A handful of calls link modules' entries.
pub fn library(params: &LibraryParams, seed: u64) -> Result<Planted> {
    check_probability("p_extra", params.p_extra)?;
    if params.modules == 0
        || params.min_module_size == 0
        || params.min_module_size > params.max_module_size
    {
        return Err(Error::Config("invalid module count or size range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = ProgramGraph::new(params.name.clone());
    let mut labels = Vec::new();
    let mut entries = Vec::new();
    let mut address = 0x10000u64;
    let tag = &params.name;

    for m in 0..params.modules {
        let size = rng.gen_range(params.min_module_size..=params.max_module_size);
        let base = graph.functions.len();
        entries.push(base);
        let pool: Vec<i64> = (0..6).map(|_| rng.gen_range(-1 << 20..1 << 20)).collect();
        let objects: Vec<String> = (0..3).map(|k| format!("{tag}.m{m}.d{k}")).collect();
        let dispatch = rng.gen_bool(0.4);
        for k in 0..size {
            let mut f =
                FunctionNode::new(format!("{tag}_m{m}_f{k}"), address, rng.gen_range(4..400));
            address += 0x10 * f.volume + 0x20;
            f.name = Some(f.id.clone());
            f.bb_count = rng.gen_range(1..=(f.volume / 4).max(1));
            f.cfg_edge_count = f.bb_count - 1 + rng.gen_range(0..=f.bb_count / 2);
            if k == 0 || rng.gen_bool(0.45) {
                f.strings
                    .insert(format!("{tag}: module {m} routine {k} failed"));
            }
            if rng.gen_bool(0.3) {
                f.strings
                    .insert(format!("{tag}-m{m}-msg-{}", rng.gen::<u32>()));
            }
            for _ in 0..rng.gen_range(0..6) {
                f.constants
                    .push(*pool.choose(&mut rng).expect("non-empty pool"));
            }
            for c in [0i64, 1, -1] {
                if rng.gen_bool(0.3) {
                    f.constants.push(c);
                }
            }
            if rng.gen_bool(0.35) {
                f.data_refs
                    .insert(objects.choose(&mut rng).expect("objects").clone());
            }
            f.is_dispatch_target = dispatch && k > 0 && rng.gen_bool(0.3);
            f.is_export = k == 0;
            graph.functions.push(f);
            labels.push(m);
        }
        let mut pairs = BTreeSet::new();
        for k in 1..size {
            let parent = rng.gen_range(0..k);
            pairs.insert((base + parent, base + k));
        }
        for i in 0..size {
            for j in i + 1..size {
                if rng.gen_bool(params.p_extra) {
                    pairs.insert((base + i, base + j));
                }
            }
        }
        for (a, b) in pairs {
            let (ca, cb) = (graph.functions[a].id.clone(), graph.functions[b].id.clone());
            graph.edges.push(CallEdge::new(ca, cb));
        }
    }

    let mut cross = BTreeSet::new();
    if params.modules > 1 {
        for _ in 0..params.cross_calls {
            let from = rng.gen_range(0..labels.len());
            let to = entries[rng.gen_range(0..entries.len())];
            if labels[from] != labels[to] {
                cross.insert((from, to));
            }
        }
    }
    for (a, b) in cross {
        let (ca, cb) = (graph.functions[a].id.clone(), graph.functions[b].id.clone());
        graph.edges.push(CallEdge::new(ca, cb));
    }
    graph.assign_ordinals();
    Ok(Planted { graph, labels })
}

/// Functions with random attributes and random calls among themselves,
/// placed after every existing address of `graph`.
pub fn append_noise(graph: &mut ProgramGraph, count: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut address = graph
        .functions
        .iter()
        .map(|f| f.address)
        .max()
        .map_or(0x1000, |a| a + 0x1000);
    let base = graph.functions.len();
    for k in 0..count {
        let mut f = FunctionNode::new(format!("noise_{seed}_{k}"), address, rng.gen_range(2..300));
        address += 0x10 * f.volume + 0x20;
        f.bb_count = rng.gen_range(1..=(f.volume / 3).max(1));
        f.cfg_edge_count = f.bb_count + rng.gen_range(0..4);
        if rng.gen_bool(0.4) {
            f.strings
                .insert(format!("app message {}", rng.gen::<u64>()));
        }
        for _ in 0..rng.gen_range(0..5) {
            f.constants.push(rng.gen_range(-4096..4096));
        }
        if rng.gen_bool(0.2) {
            f.data_refs.insert(format!("app.d{}", rng.gen_range(0..8)));
        }
        graph.functions.push(f);
    }
    let mut pairs = BTreeSet::new();
    for k in 1..count {
        pairs.insert((base + rng.gen_range(0..k), base + k));
        if rng.gen_bool(0.5) {
            let other = base + rng.gen_range(0..count);
            if other != base + k {
                pairs.insert((base + k, other));
            }
        }
    }
    for (a, b) in pairs {
        let (ca, cb) = (graph.functions[a].id.clone(), graph.functions[b].id.clone());
        graph.edges.push(CallEdge::new(ca, cb));
    }
    graph.assign_ordinals();
}

/// Subgraph induced by the functions at `keep` (any order), keeping all
/// attributes.
pub fn induced_subgraph(graph: &ProgramGraph, keep: &[usize], name: &str) -> ProgramGraph {
    let mut kept = vec![false; graph.len()];
    for &v in keep {
        kept[v] = true;
    }
    let mut sub = ProgramGraph::new(name);
    sub.functions = graph
        .functions
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .map(|(f, _)| f.clone())
        .collect();
    let ids: BTreeSet<&str> = sub.functions.iter().map(|f| f.id.as_str()).collect();
    sub.edges = graph
        .edges
        .iter()
        .filter(|e| ids.contains(e.caller.as_str()) && ids.contains(e.callee.as_str()))
        .cloned()
        .collect();
    sub.assign_ordinals();
    sub
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate;

    #[test]
    fn planted_shape_and_determinism() {
        let a = planted_partition(&PlantedParams::default(), 7).unwrap();
        assert_eq!(a.graph.len(), 400);
        assert!(validate(&a.graph).is_empty());
        let b = planted_partition(&PlantedParams::default(), 7).unwrap();
        assert_eq!(a.graph.to_json(), b.graph.to_json());
        let c = planted_partition(&PlantedParams::default(), 8).unwrap();
        assert_ne!(a.graph.edges, c.graph.edges);
    }

    #[test]
    fn clique_pair_shape() {
        let g = clique_pair();
        assert_eq!(g.len(), 6);
        assert_eq!(g.edges.len(), 12);
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn library_is_valid() {
        let lib = library(&LibraryParams::default(), 3).unwrap();
        assert!(validate(&lib.graph).is_empty());
        assert_eq!(lib.modules().len(), 16);
        let mut g = lib.graph.clone();
        append_noise(&mut g, 50, 9);
        assert!(validate(&g).is_empty());
        assert_eq!(g.len(), lib.graph.len() + 50);

        let sub = induced_subgraph(&lib.graph, &lib.modules()[2], "part");
        assert!(validate(&sub).is_empty());
        assert_eq!(sub.len(), lib.modules()[2].len());
    }

    #[test]
    fn rejects_bad_params() {
        let bad = PlantedParams {
            p_in: 1.5,
            ..Default::default()
        };
        assert!(planted_partition(&bad, 1).is_err());
        let bad = LibraryParams {
            min_module_size: 5,
            max_module_size: 2,
            ..Default::default()
        };
        assert!(library(&bad, 1).is_err());
    }
}
