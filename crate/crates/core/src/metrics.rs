//! Module-quality metrics for a partition of a call graph.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{Partition, ProgramGraph, Topology};
use crate::volume::{WeightedEdge, WeightedGraph};

/// Normalization of the weighted directed modularity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MqNormalization {
    /// `1/(2W)` outer factor and `2W` null-model denominator.
    #[default]
    Literal,
    /// `1/W` for both, the usual directed modularity.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub origin_mq: f64,
    pub directed_mq: f64,
    pub weighted_directed_mq: f64,
    pub bunch_mq: f64,
    pub turbo_mq: f64,
    pub avg_entries: f64,
    pub avg_isolated_clusters: f64,
}

impl QualityReport {
    pub fn compute(wgraph: &WeightedGraph<'_>, partition: &Partition) -> Self {
        let graph = wgraph.base;
        let topology = &wgraph.topology;
        let unit = WeightedGraph::unit(graph);
        let modules = partition.module_count().max(1) as f64;
        let entries = module_entries(topology, partition);
        let clusters = isolated_clusters(topology, partition);
        QualityReport {
            origin_mq: origin_mq(graph, partition),
            directed_mq: weighted_directed_mq(&unit, partition, MqNormalization::Literal),
            weighted_directed_mq: weighted_directed_mq(wgraph, partition, MqNormalization::Literal),
            bunch_mq: turbo_mq(&unit, partition),
            turbo_mq: turbo_mq(wgraph, partition),
            avg_entries: entries.iter().sum::<usize>() as f64 / modules,
            avg_isolated_clusters: clusters.iter().sum::<usize>() as f64 / modules,
        }
    }

    /// Flat `key value` lines.
    pub fn to_table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for QualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("origin_mq", self.origin_mq),
            ("directed_mq", self.directed_mq),
            ("weighted_directed_mq", self.weighted_directed_mq),
            ("bunch_mq", self.bunch_mq),
            ("turbo_mq", self.turbo_mq),
            ("avg_entries", self.avg_entries),
            ("avg_isolated_clusters", self.avg_isolated_clusters),
        ];
        for (key, value) in rows {
            writeln!(f, "{key:<24}{value:.6}")?;
        }
        Ok(())
    }
}

/// Undirected, unweighted modularity. Any call between two distinct
/// functions (in either direction) is one undirected edge; a self-call is a
/// loop contributing 2 to its node's degree.
pub fn origin_mq(graph: &ProgramGraph, partition: &Partition) -> f64 {
    let topology = graph.topology();
    let mut undirected = BTreeSet::new();
    for &(u, v) in &topology.edges {
        undirected.insert((u.min(v), u.max(v)));
    }
    let m = undirected.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let k = partition.module_count();
    let mut intra = vec![0.0; k];
    let mut degree = vec![0.0; k];
    for &(u, v) in &undirected {
        let (cu, cv) = (partition.module_of(u), partition.module_of(v));
        degree[cu] += 1.0;
        degree[cv] += 1.0;
        if cu == cv {
            // A_uv + A_vu, or A_uu = 2 for a loop.
            intra[cu] += 2.0;
        }
    }
    intra
        .iter()
        .zip(&degree)
        .map(|(a, d)| a / (2.0 * m) - (d / (2.0 * m)).powi(2))
        .sum()
}

/// Directed modularity of the weighted call graph.
pub fn weighted_directed_mq(
    wgraph: &WeightedGraph<'_>,
    partition: &Partition,
    normalization: MqNormalization,
) -> f64 {
    let w = wgraph.total_weight;
    if w == 0.0 {
        return 0.0;
    }
    let k = partition.module_count();
    let mut intra = vec![0.0; k];
    let mut k_out = vec![0.0; k];
    let mut k_in = vec![0.0; k];
    for e in &wgraph.edges {
        let (cu, cv) = (partition.module_of(e.caller), partition.module_of(e.callee));
        if cu == cv {
            intra[cu] += e.weight;
        }
    }
    for v in 0..wgraph.len() {
        let c = partition.module_of(v);
        k_out[c] += wgraph.k_out[v];
        k_in[c] += wgraph.k_in[v];
    }
    let (outer, null) = match normalization {
        MqNormalization::Literal => (2.0 * w, 2.0 * w),
        MqNormalization::Standard => (w, w),
    };
    (0..k)
        .map(|c| (intra[c] - k_out[c] * k_in[c] / null) / outer)
        .sum()
}

/// Weighted directed modularity with every edge weighted 1.
pub fn directed_mq(graph: &ProgramGraph, partition: &Partition) -> f64 {
    weighted_directed_mq(
        &WeightedGraph::unit(graph),
        partition,
        MqNormalization::Literal,
    )
}

/// Sum of cluster factors `2μ / (2μ + Σ inter-cluster edges)` over edge
/// counts.
pub fn bunch_mq(graph: &ProgramGraph, partition: &Partition) -> f64 {
    turbo_mq(&WeightedGraph::unit(graph), partition)
}

/// Cluster-factor sum over edge weights.
pub fn turbo_mq(wgraph: &WeightedGraph<'_>, partition: &Partition) -> f64 {
    cluster_factor_sum(&wgraph.edges, partition)
}

fn cluster_factor_sum(edges: &[WeightedEdge], partition: &Partition) -> f64 {
    let k = partition.module_count();
    let mut intra = vec![0.0; k];
    let mut boundary = vec![0.0; k];
    for e in edges {
        let (cu, cv) = (partition.module_of(e.caller), partition.module_of(e.callee));
        if cu == cv {
            intra[cu] += e.weight;
        } else {
            boundary[cu] += e.weight;
            boundary[cv] += e.weight;
        }
    }
    intra
        .iter()
        .zip(&boundary)
        .map(|(&mu, &eps)| {
            if mu == 0.0 {
                0.0
            } else {
                2.0 * mu / (2.0 * mu + eps)
            }
        })
        .sum()
}

/// Whether function `v` is an entry of its module under `labels`: none of
/// its callers (self-calls aside) lie in the same module.
pub(crate) fn is_entry(topology: &Topology, labels: &[usize], v: usize) -> bool {
    topology.pred[v]
        .iter()
        .all(|&u| u == v || labels[u] != labels[v])
}

/// Per module, the number of members whose callers all lie outside it.
pub fn module_entries(topology: &Topology, partition: &Partition) -> Vec<usize> {
    let mut entries = vec![0; partition.module_count()];
    for v in 0..topology.len() {
        if is_entry(topology, partition.labels(), v) {
            entries[partition.module_of(v)] += 1;
        }
    }
    entries
}

/// Per module, the number of weakly connected components of the subgraph
/// its members induce.
pub fn isolated_clusters(topology: &Topology, partition: &Partition) -> Vec<usize> {
    let n = topology.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(u, v) in &topology.edges {
        if partition.module_of(u) == partition.module_of(v) {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru.max(rv)] = ru.min(rv);
            }
        }
    }
    let mut counts = vec![0; partition.module_count()];
    for v in 0..n {
        if find(&mut parent, v) == v {
            counts[partition.module_of(v)] += 1;
        }
    }
    counts
}

/// Mean number of labeled modules touched by each generated module.
pub fn overlap_score(generated: &Partition, labeled: &Partition) -> f64 {
    assert_eq!(
        generated.len(),
        labeled.len(),
        "partitions must cover the same functions"
    );
    if generated.module_count() == 0 {
        return 0.0;
    }
    let mut touched = vec![BTreeSet::new(); generated.module_count()];
    for v in 0..generated.len() {
        touched[generated.module_of(v)].insert(labeled.module_of(v));
    }
    touched.iter().map(|t| t.len() as f64).sum::<f64>() / generated.module_count() as f64
}
