//! Bottom-up propagation of function volumes through the call graph.
//!
//! Every function starts with its own volume. Functions that call nothing
//! (end nodes) hand `c * FV(v) / callers(v)` to each of their callers and
//! are removed; when only cycles remain, each sink strongly connected
//! component is condensed into one end node whose weight is the sum of its
//! members. The loop runs until the graph is empty. The edge weight of
//! `i -> j` is the final weight of the callee `j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ProgramGraph, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    /// Normalization factor applied to every propagated share.
    pub c: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig { c: 1.0 }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c.is_finite() && self.c > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("c must be positive, got {}", self.c)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedEdge {
    pub caller: usize,
    pub callee: usize,
    pub weight: f64,
}

/// Call graph annotated with propagated function weights.
#[derive(Debug, Clone)]
pub struct WeightedGraph<'g> {
    pub base: &'g ProgramGraph,
    pub topology: Topology,
    /// Final propagated weight per function index.
    pub fv: Vec<f64>,
    /// Non-self call edges with their weights.
    pub edges: Vec<WeightedEdge>,
    pub total_weight: f64,
    pub k_out: Vec<f64>,
    pub k_in: Vec<f64>,
}

impl<'g> WeightedGraph<'g> {
    /// Builds the weighted view from explicit edge weights. Self-edges are
    /// dropped.
    pub fn from_weights(
        base: &'g ProgramGraph,
        fv: Vec<f64>,
        mut weight: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let topology = base.topology();
        let n = base.len();
        let mut k_out = vec![0.0; n];
        let mut k_in = vec![0.0; n];
        let mut edges = Vec::with_capacity(topology.edges.len());
        for &(u, v) in &topology.edges {
            if u == v {
                continue;
            }
            let w = weight(u, v);
            k_out[u] += w;
            k_in[v] += w;
            edges.push(WeightedEdge {
                caller: u,
                callee: v,
                weight: w,
            });
        }
        let total_weight = edges.iter().map(|e| e.weight).sum();
        WeightedGraph {
            base,
            topology,
            fv,
            edges,
            total_weight,
            k_out,
            k_in,
        }
    }

    /// Every non-self edge weighted 1 and every function weighted by its
    /// raw volume.
    pub fn unit(base: &'g ProgramGraph) -> Self {
        let fv = base.functions.iter().map(|f| f.volume as f64).collect();
        Self::from_weights(base, fv, |_, _| 1.0)
    }

    pub fn len(&self) -> usize {
        self.fv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fv.is_empty()
    }

    pub fn fv_of(&self, id: &str) -> Option<f64> {
        self.base
            .functions
            .iter()
            .position(|f| f.id == id)
            .map(|i| self.fv[i])
    }

    pub fn edge_weight(&self, caller: &str, callee: &str) -> Option<f64> {
        let index = self.base.id_index();
        let (u, v) = (*index.get(caller)?, *index.get(callee)?);
        self.edges
            .iter()
            .find(|e| e.caller == u && e.callee == v)
            .map(|e| e.weight)
    }
}

/// One elimination step, for debugging output.
#[derive(Debug, Clone, PartialEq)]
pub struct Elimination {
    pub step: usize,
    /// Function indices removed in this step.
    pub removed: Vec<usize>,
    /// True when `removed` is a condensed cycle.
    pub condensed: bool,
}

/// Nodes with no outgoing call edges, ignoring self-edges.
pub fn end_nodes(topology: &Topology) -> Vec<usize> {
    (0..topology.len())
        .filter(|&v| topology.succ[v].iter().all(|&w| w == v))
        .collect()
}

pub fn propagate_volumes<'g>(
    graph: &'g ProgramGraph,
    config: &PropagationConfig,
) -> WeightedGraph<'g> {
    propagate_volumes_traced(graph, config).0
}

pub fn propagate_volumes_traced<'g>(
    graph: &'g ProgramGraph,
    config: &PropagationConfig,
) -> (WeightedGraph<'g>, Vec<Elimination>) {
    let topology = graph.topology();
    let n = graph.len();
    let ordinals: Vec<usize> = graph
        .functions
        .iter()
        .enumerate()
        .map(|(i, f)| f.ordinal.unwrap_or(i))
        .collect();

    // Distinct neighbors without self-edges.
    let dedup = |lists: &[Vec<usize>]| -> Vec<Vec<usize>> {
        lists
            .iter()
            .enumerate()
            .map(|(v, l)| {
                let mut l: Vec<usize> = l.iter().copied().filter(|&w| w != v).collect();
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect()
    };
    let succ = dedup(&topology.succ);
    let pred = dedup(&topology.pred);

    let mut fv: Vec<f64> = graph.functions.iter().map(|f| f.volume as f64).collect();
    let mut alive = vec![true; n];
    let mut out_count: Vec<usize> = succ.iter().map(Vec::len).collect();
    let mut remaining = n;
    let mut trace = Vec::new();
    let mut marked = vec![false; n];

    let mut frontier: Vec<usize> = (0..n).filter(|&v| out_count[v] == 0).collect();
    while remaining > 0 {
        if frontier.is_empty() {
            for component in sink_components(&succ, &alive, &ordinals) {
                let total: f64 = component.iter().map(|&v| fv[v]).sum();
                for &v in &component {
                    marked[v] = true;
                }
                let mut callers: Vec<usize> = component
                    .iter()
                    .flat_map(|&v| pred[v].iter().copied())
                    .filter(|&u| alive[u] && !marked[u])
                    .collect();
                callers.sort_unstable();
                callers.dedup();
                spread(&mut fv, &callers, config.c * total);
                // Condensed members keep their weight: the condensed node is
                // eliminated at once, so it never receives inflow to share.
                remove(
                    &component,
                    &pred,
                    &mut alive,
                    &mut out_count,
                    &mut frontier,
                    &mut remaining,
                );
                trace.push(Elimination {
                    step: trace.len(),
                    removed: component,
                    condensed: true,
                });
            }
            continue;
        }
        let mut batch = std::mem::take(&mut frontier);
        batch.sort_unstable_by_key(|&v| ordinals[v]);
        for &v in &batch {
            let callers: Vec<usize> = pred[v].iter().copied().filter(|&u| alive[u]).collect();
            let amount = config.c * fv[v];
            spread(&mut fv, &callers, amount);
        }
        remove(
            &batch,
            &pred,
            &mut alive,
            &mut out_count,
            &mut frontier,
            &mut remaining,
        );
        trace.push(Elimination {
            step: trace.len(),
            removed: batch,
            condensed: false,
        });
    }

    let weights = fv.clone();
    let wg = WeightedGraph::from_weights(graph, fv, |_, v| weights[v]);
    (wg, trace)
}

fn spread(fv: &mut [f64], callers: &[usize], amount: f64) {
    if callers.is_empty() {
        return;
    }
    let share = amount / callers.len() as f64;
    for &u in callers {
        fv[u] += share;
    }
}

fn remove(
    nodes: &[usize],
    pred: &[Vec<usize>],
    alive: &mut [bool],
    out_count: &mut [usize],
    frontier: &mut Vec<usize>,
    remaining: &mut usize,
) {
    for &v in nodes {
        alive[v] = false;
    }
    *remaining -= nodes.len();
    for &v in nodes {
        for &u in &pred[v] {
            if alive[u] {
                out_count[u] -= 1;
                if out_count[u] == 0 {
                    frontier.push(u);
                }
            }
        }
    }
}

/// Strongly connected components of the live subgraph that have no edge
/// leaving them, ordered by smallest member ordinal. Members are sorted by
/// ordinal.
fn sink_components(succ: &[Vec<usize>], alive: &[bool], ordinals: &[usize]) -> Vec<Vec<usize>> {
    let n = succ.len();
    let comp = tarjan(succ, alive);
    let count = comp.iter().filter_map(|c| *c).max().map_or(0, |m| m + 1);
    let mut is_sink = vec![true; count];
    let mut members = vec![Vec::new(); count];
    for v in (0..n).filter(|&v| alive[v]) {
        let c = comp[v].expect("live node has a component");
        members[c].push(v);
        if succ[v].iter().any(|&w| alive[w] && comp[w] != Some(c)) {
            is_sink[c] = false;
        }
    }
    let mut sinks: Vec<Vec<usize>> = members
        .into_iter()
        .zip(is_sink)
        .filter_map(|(mut m, sink)| {
            sink.then(|| {
                m.sort_unstable_by_key(|&v| ordinals[v]);
                m
            })
        })
        .collect();
    sinks.sort_unstable_by_key(|m| ordinals[m[0]]);
    sinks
}

/// Iterative Tarjan over live nodes.
fn tarjan(succ: &[Vec<usize>], alive: &[bool]) -> Vec<Option<usize>> {
    let n = succ.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comp = vec![None; n];
    let mut next_index = 0;
    let mut next_comp = 0;
    let mut call: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if !alive[root] || index[root] != usize::MAX {
            continue;
        }
        call.push((root, 0));
        while let Some(&(v, start)) = call.last() {
            if start == 0 && index[v] == usize::MAX {
                index[v] = next_index;
                low[v] = next_index;
                next_index += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            let mut pos = start;
            let mut child = None;
            while pos < succ[v].len() {
                let w = succ[v][pos];
                pos += 1;
                if !alive[w] {
                    continue;
                }
                if index[w] == usize::MAX {
                    child = Some(w);
                    break;
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            }
            if let Some(w) = child {
                call.last_mut().expect("frame present").1 = pos;
                call.push((w, 0));
                continue;
            }
            if low[v] == index[v] {
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp[w] = Some(next_comp);
                    if w == v {
                        break;
                    }
                }
                next_comp += 1;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
        }
    }
    comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{CallEdge, FunctionNode};

    fn graph(nodes: &[(&str, u64)], edges: &[(&str, &str)]) -> ProgramGraph {
        let mut g = ProgramGraph::new("t");
        for (i, &(id, vol)) in nodes.iter().enumerate() {
            g.functions
                .push(FunctionNode::new(id, 0x100 * (i as u64 + 1), vol));
        }
        for &(a, b) in edges {
            g.edges.push(CallEdge::new(a, b));
        }
        g.assign_ordinals();
        g
    }

    #[test]
    fn diamond_example() {
        let g = graph(
            &[("A", 10), ("B", 5), ("C", 4)],
            &[("A", "B"), ("A", "C"), ("B", "C")],
        );
        let wg = propagate_volumes(&g, &PropagationConfig::default());
        assert_eq!(wg.fv, vec![19.0, 7.0, 4.0]);
        assert_eq!(wg.edge_weight("A", "B"), Some(7.0));
        assert_eq!(wg.edge_weight("A", "C"), Some(4.0));
        assert_eq!(wg.edge_weight("B", "C"), Some(4.0));
        assert_eq!(wg.total_weight, 15.0);
        assert_eq!(wg.k_out, vec![11.0, 4.0, 0.0]);
        assert_eq!(wg.k_in, vec![0.0, 7.0, 8.0]);
    }

    #[test]
    fn isolated_function_keeps_volume() {
        let g = graph(&[("A", 7)], &[]);
        let wg = propagate_volumes(&g, &PropagationConfig::default());
        assert_eq!(wg.fv, vec![7.0]);
        assert_eq!(wg.total_weight, 0.0);
    }

    #[test]
    fn two_cycle_condenses() {
        let g = graph(&[("A", 3), ("B", 3)], &[("A", "B"), ("B", "A")]);
        let (wg, trace) = propagate_volumes_traced(&g, &PropagationConfig::default());
        assert_eq!(wg.fv, vec![3.0, 3.0]);
        assert_eq!(
            trace,
            vec![Elimination {
                step: 0,
                removed: vec![0, 1],
                condensed: true
            }]
        );
    }

    #[test]
    fn cycle_feeds_its_caller() {
        // R -> A <-> B, condensed {A,B} carries 6 up to R.
        let g = graph(
            &[("R", 1), ("A", 3), ("B", 3)],
            &[("R", "A"), ("A", "B"), ("B", "A")],
        );
        let wg = propagate_volumes(&g, &PropagationConfig::default());
        assert_eq!(wg.fv, vec![7.0, 3.0, 3.0]);
    }

    #[test]
    fn self_edges_ignored() {
        let g = graph(&[("A", 2), ("B", 3)], &[("A", "A"), ("A", "B")]);
        let wg = propagate_volumes(&g, &PropagationConfig::default());
        assert_eq!(wg.fv, vec![5.0, 3.0]);
        assert_eq!(wg.edges.len(), 1);
    }

    #[test]
    fn normalization_factor_scales_shares() {
        let g = graph(&[("A", 1), ("B", 4)], &[("A", "B")]);
        let wg = propagate_volumes(&g, &PropagationConfig { c: 0.5 });
        assert_eq!(wg.fv, vec![3.0, 4.0]);
        assert!(PropagationConfig { c: 0.0 }.validate().is_err());
    }

    #[test]
    fn end_node_examples() {
        let g = graph(&[("A", 1), ("B", 1), ("C", 1)], &[("A", "B"), ("A", "C")]);
        assert_eq!(end_nodes(&g.topology()), vec![1, 2]);
        let tri = graph(
            &[("A", 1), ("B", 1), ("C", 1)],
            &[("A", "B"), ("B", "C"), ("C", "A")],
        );
        assert!(end_nodes(&tri.topology()).is_empty());
        assert!(end_nodes(&ProgramGraph::new("e").topology()).is_empty());
    }

    #[test]
    fn nested_cycles_terminate() {
        // Two SCCs chained: {A,B} -> {C,D}; plus E calling into both.
        let g = graph(
            &[("A", 1), ("B", 2), ("C", 3), ("D", 4), ("E", 5)],
            &[
                ("A", "B"),
                ("B", "A"),
                ("B", "C"),
                ("C", "D"),
                ("D", "C"),
                ("E", "A"),
                ("E", "D"),
            ],
        );
        let (wg, trace) = propagate_volumes_traced(&g, &PropagationConfig::default());
        // {C,D}=7 goes to B and E (3.5 each); then {A,B}=1+5.5 goes to E.
        assert_eq!(wg.fv, vec![1.0, 5.5, 3.0, 4.0, 5.0 + 3.5 + 6.5]);
        assert_eq!(trace.len(), 3);
    }
}
