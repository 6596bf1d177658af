//! Per-module feature bundles used for matching.
//!
//! A [`ModuleSignature`] collects the syntactic channels (strings and
//! constants) and the structural ones: propagation-kernel histograms, edge
//! vectors, per-function vectors and anchor groups.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FunctionNode, Partition, ProgramGraph, Topology};
use crate::parallel::{self, Execution};

pub const SIGNATURE_FORMAT: &str = "msig-1";

/// Dimension of the built-in statistical function vector.
pub const FUNCTION_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub min_string_len: usize,
    pub kernel_iterations: usize,
    pub kernel_bin_width: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            min_string_len: 5,
            kernel_iterations: 3,
            kernel_bin_width: 0.1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_iterations == 0 {
            return Err(Error::Config("kernel_iterations must be at least 1".into()));
        }
        if !(self.kernel_bin_width > 0.0 && self.kernel_bin_width.is_finite()) {
            return Err(Error::Config(format!(
                "kernel_bin_width must be positive, got {}",
                self.kernel_bin_width
            )));
        }
        Ok(())
    }
}

/// Maps a function to a fixed-length vector. Swap in a learned model by
/// implementing this trait.
pub trait Embedder: Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, function: &FunctionNode, in_degree: usize, out_degree: usize) -> Vec<f64>;
}

/// Log-scaled attribute counts, L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatisticalEmbedder;

impl Embedder for StatisticalEmbedder {
    fn dimension(&self) -> usize {
        FUNCTION_DIM
    }

    fn embed(&self, f: &FunctionNode, in_degree: usize, out_degree: usize) -> Vec<f64> {
        let raw = [
            f.volume,
            f.bb_count,
            f.cfg_edge_count,
            in_degree as u64,
            out_degree as u64,
            f.strings.len() as u64,
            f.constants.len() as u64,
            f.data_refs.len() as u64,
        ];
        let mut v: Vec<f64> = raw.iter().map(|&x| (x as f64).ln_1p()).collect();
        normalize_l2(&mut v);
        v
    }
}

pub fn function_vector(graph: &ProgramGraph, function: usize) -> Vec<f64> {
    let topology = graph.topology();
    StatisticalEmbedder.embed(
        &graph.functions[function],
        topology.in_degree(function),
        topology.out_degree(function),
    )
}

fn normalize_l2(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Document frequencies of constants over a corpus of module signatures.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub module_count: usize,
    pub document_frequency: BTreeMap<i64, usize>,
}

impl CorpusStats {
    pub fn from_signatures<'a>(signatures: impl IntoIterator<Item = &'a ModuleSignature>) -> Self {
        let mut stats = CorpusStats::default();
        for sig in signatures {
            stats.module_count += 1;
            for &c in sig.constant_bag.keys() {
                *stats.document_frequency.entry(c).or_default() += 1;
            }
        }
        stats
    }

    pub fn df(&self, constant: i64) -> usize {
        self.document_frequency.get(&constant).copied().unwrap_or(0)
    }
}

/// `tf · ln(N / (1 + df))`, clamped at zero. Zero weights are omitted.
pub fn tfidf_vector(bag: &BTreeMap<i64, u32>, stats: &CorpusStats) -> BTreeMap<i64, f64> {
    let n = stats.module_count as f64;
    bag.iter()
        .filter_map(|(&c, &tf)| {
            let idf = (n / (1 + stats.df(c)) as f64).ln();
            let w = tf as f64 * idf;
            (w > 0.0).then_some((c, w))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    DataShared,
    Dispatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGroup {
    pub kind: AnchorKind,
    /// Member ids, by descending volume.
    pub members: Vec<String>,
    pub member_vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionFeature {
    pub volume: u64,
    pub vector: Vec<f64>,
}

/// Sparse per-iteration counts of nodes per label bin.
pub type Histogram = BTreeMap<u64, u32>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSignature {
    pub module_id: usize,
    pub function_count: usize,
    pub string_set: BTreeSet<String>,
    pub constant_bag: BTreeMap<i64, u32>,
    /// Constant weights under some corpus; empty until
    /// [`ModuleSignature::apply_corpus`] runs.
    #[serde(default)]
    pub tfidf: BTreeMap<i64, f64>,
    pub kernel_histograms: Vec<Histogram>,
    pub edge_vectors: Vec<Vec<f64>>,
    pub function_vectors: BTreeMap<String, FunctionFeature>,
    pub anchor_groups: Vec<AnchorGroup>,
}

impl ModuleSignature {
    pub fn apply_corpus(&mut self, stats: &CorpusStats) {
        self.tfidf = tfidf_vector(&self.constant_bag, stats);
    }

    pub fn total_volume(&self) -> u64 {
        self.function_vectors.values().map(|f| f.volume).sum()
    }

    /// Deterministic total order on signature content (the module id is
    /// ignored). Used to put pairwise comparisons in a fixed argument order.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.function_count
            .cmp(&other.function_count)
            .then_with(|| self.string_set.cmp(&other.string_set))
            .then_with(|| self.constant_bag.cmp(&other.constant_bag))
            .then_with(|| self.kernel_histograms.cmp(&other.kernel_histograms))
            .then_with(|| cmp_maps(&self.tfidf, &other.tfidf))
            .then_with(|| cmp_lists(&self.edge_vectors, &other.edge_vectors))
            .then_with(|| {
                let a = self.function_vectors.values();
                let b = other.function_vectors.values();
                a.len().cmp(&b.len()).then_with(|| {
                    a.zip(b)
                        .map(|(x, y)| {
                            x.volume
                                .cmp(&y.volume)
                                .then_with(|| cmp_f64s(&x.vector, &y.vector))
                        })
                        .find(|o| o.is_ne())
                        .unwrap_or(Ordering::Equal)
                })
            })
            .then_with(|| {
                let a = &self.anchor_groups;
                let b = &other.anchor_groups;
                a.len().cmp(&b.len()).then_with(|| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| {
                            x.kind
                                .cmp(&y.kind)
                                .then_with(|| x.members.len().cmp(&y.members.len()))
                                .then_with(|| cmp_lists(&x.member_vectors, &y.member_vectors))
                        })
                        .find(|o| o.is_ne())
                        .unwrap_or(Ordering::Equal)
                })
            })
    }

    pub fn to_json(&self) -> String {
        let doc = SignatureDocument {
            version: SIGNATURE_FORMAT.into(),
            signature: self.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("signature serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: String,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.version != SIGNATURE_FORMAT {
            return Err(Error::Version {
                expected: SIGNATURE_FORMAT.into(),
                found: probe.version,
            });
        }
        let doc: SignatureDocument = serde_json::from_str(text)?;
        Ok(doc.signature)
    }
}

#[derive(Serialize, Deserialize)]
struct SignatureDocument {
    version: String,
    signature: ModuleSignature,
}

pub(crate) fn cmp_f64s(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn cmp_lists(a: &[Vec<f64>], b: &[Vec<f64>]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| cmp_f64s(x, y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn cmp_maps(a: &BTreeMap<i64, f64>, b: &BTreeMap<i64, f64>) -> Ordering {
    a.iter()
        .zip(b)
        .map(|((ka, va), (kb, vb))| ka.cmp(kb).then_with(|| va.total_cmp(vb)))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Turns function vectors into per-iteration bin histograms over the
/// undirected call structure among `members`.
///
/// `neighbors[i]` lists positions (into `members`) adjacent to member `i`.
pub fn kernel_signature(
    vectors: &[Vec<f64>],
    neighbors: &[Vec<usize>],
    config: &FeatureConfig,
) -> Vec<Histogram> {
    let mut dist: Vec<Vec<f64>> = vectors.iter().map(|v| to_simplex(v)).collect();
    let mut histograms = Vec::with_capacity(config.kernel_iterations + 1);
    histograms.push(histogram(&dist, config.kernel_bin_width));
    for _ in 0..config.kernel_iterations {
        dist = (0..dist.len())
            .map(|i| {
                if neighbors[i].is_empty() {
                    return dist[i].clone();
                }
                // Summation order must not depend on member numbering.
                let mut around: Vec<&Vec<f64>> = neighbors[i].iter().map(|&j| &dist[j]).collect();
                around.sort_by(|a, b| cmp_f64s(a, b));
                let k = around.len() as f64;
                let mut mean = vec![0.0; dist[i].len()];
                for v in around {
                    for (m, x) in mean.iter_mut().zip(v) {
                        *m += x;
                    }
                }
                dist[i]
                    .iter()
                    .zip(&mean)
                    .map(|(own, m)| 0.5 * own + 0.5 * (m / k))
                    .collect()
            })
            .collect();
        histograms.push(histogram(&dist, config.kernel_bin_width));
    }
    histograms
}

/// Clamps negatives and rescales to sum 1; an all-zero input becomes the
/// uniform distribution.
fn to_simplex(v: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum > 0.0 {
        clamped.iter().map(|x| x / sum).collect()
    } else {
        vec![1.0 / v.len().max(1) as f64; v.len()]
    }
}

fn histogram(dist: &[Vec<f64>], bin_width: f64) -> Histogram {
    let mut h = Histogram::new();
    for d in dist {
        *h.entry(bin_of(d, bin_width)).or_default() += 1;
    }
    h
}

/// FNV-1a over the floored coordinates.
fn bin_of(dist: &[f64], bin_width: f64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for x in dist {
        let q = (x / bin_width).floor() as i64;
        for byte in q.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(PRIME);
        }
    }
    hash
}

/// Caller and callee vectors concatenated, one per call edge; sorted.
pub fn edge_vectors(vectors: &[Vec<f64>], edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = edges
        .iter()
        .map(|&(a, b)| vectors[a].iter().chain(&vectors[b]).copied().collect())
        .collect();
    out.sort_by(|a, b| cmp_f64s(a, b));
    out
}

/// Anchor groups among `members` (graph indices). Vectors are looked up by
/// position in `members`.
pub fn anchor_groups(
    graph: &ProgramGraph,
    members: &[usize],
    vectors: &[Vec<f64>],
) -> Vec<AnchorGroup> {
    let mut parent: Vec<usize> = (0..members.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    let mut has_refs = vec![false; members.len()];
    for (i, &v) in members.iter().enumerate() {
        for r in &graph.functions[v].data_refs {
            has_refs[i] = true;
            match owner.get(r.as_str()) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    owner.insert(r, i);
                }
            }
        }
    }
    let mut sets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &refs) in has_refs.iter().enumerate() {
        if refs {
            let root = find(&mut parent, i);
            sets.entry(root).or_default().push(i);
        }
    }
    let mut raw: Vec<(AnchorKind, Vec<usize>)> = sets
        .into_values()
        .filter(|s| s.len() >= 2)
        .map(|s| (AnchorKind::DataShared, s))
        .collect();
    let dispatch: Vec<usize> = (0..members.len())
        .filter(|&i| graph.functions[members[i]].is_dispatch_target)
        .collect();
    if dispatch.len() >= 2 {
        raw.push((AnchorKind::Dispatch, dispatch));
    }

    let mut groups: Vec<AnchorGroup> = raw
        .into_iter()
        .map(|(kind, mut set)| {
            set.sort_by(|&a, &b| {
                let (fa, fb) = (&graph.functions[members[a]], &graph.functions[members[b]]);
                fb.volume
                    .cmp(&fa.volume)
                    .then_with(|| cmp_f64s(&vectors[a], &vectors[b]))
                    .then_with(|| fa.id.cmp(&fb.id))
            });
            AnchorGroup {
                kind,
                members: set
                    .iter()
                    .map(|&i| graph.functions[members[i]].id.clone())
                    .collect(),
                member_vectors: set.iter().map(|&i| vectors[i].clone()).collect(),
            }
        })
        .collect();
    groups.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then_with(|| b.members.len().cmp(&a.members.len()))
            .then_with(|| cmp_lists(&a.member_vectors, &b.member_vectors))
    });
    groups
}

/// Signs modules of one partitioned program. Function vectors are computed
/// once for the whole graph.
pub struct SignatureExtractor<'a> {
    graph: &'a ProgramGraph,
    topology: Topology,
    config: &'a FeatureConfig,
    vectors: Vec<Vec<f64>>,
    modules: Vec<Vec<usize>>,
}

impl<'a> SignatureExtractor<'a> {
    pub fn new(
        graph: &'a ProgramGraph,
        partition: &'a Partition,
        config: &'a FeatureConfig,
        embedder: &dyn Embedder,
    ) -> Result<Self> {
        config.validate()?;
        if partition.len() != graph.len() {
            return Err(Error::PartitionSize {
                partition: partition.len(),
                graph: graph.len(),
            });
        }
        let topology = graph.topology();
        let vectors = graph
            .functions
            .iter()
            .enumerate()
            .map(|(v, f)| embedder.embed(f, topology.in_degree(v), topology.out_degree(v)))
            .collect();
        Ok(SignatureExtractor {
            graph,
            topology,
            config,
            vectors,
            modules: partition.modules(),
        })
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    pub fn extract(&self, module_id: usize) -> Result<ModuleSignature> {
        let members = self
            .modules
            .get(module_id)
            .filter(|m| !m.is_empty())
            .ok_or(Error::UnknownModule(module_id))?;
        let position: BTreeMap<usize, usize> =
            members.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let functions: Vec<&FunctionNode> =
            members.iter().map(|&v| &self.graph.functions[v]).collect();
        let vectors: Vec<Vec<f64>> = members.iter().map(|&v| self.vectors[v].clone()).collect();

        let string_set = functions
            .iter()
            .flat_map(|f| &f.strings)
            .filter(|s| s.chars().count() >= self.config.min_string_len)
            .cloned()
            .collect();
        let mut constant_bag = BTreeMap::new();
        for c in functions.iter().flat_map(|f| &f.constants) {
            *constant_bag.entry(*c).or_insert(0u32) += 1;
        }

        let mut internal = Vec::new();
        let mut neighbors = vec![BTreeSet::new(); members.len()];
        for (i, &v) in members.iter().enumerate() {
            for &w in &self.topology.succ[v] {
                if let Some(&j) = position.get(&w) {
                    internal.push((i, j));
                    if i != j {
                        neighbors[i].insert(j);
                        neighbors[j].insert(i);
                    }
                }
            }
        }
        let neighbors: Vec<Vec<usize>> = neighbors
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect();

        Ok(ModuleSignature {
            module_id,
            function_count: members.len(),
            string_set,
            constant_bag,
            tfidf: BTreeMap::new(),
            kernel_histograms: kernel_signature(&vectors, &neighbors, self.config),
            edge_vectors: edge_vectors(&vectors, &internal),
            anchor_groups: anchor_groups(self.graph, members, &vectors),
            function_vectors: functions
                .iter()
                .zip(vectors)
                .map(|(f, vector)| {
                    let feature = FunctionFeature {
                        volume: f.volume,
                        vector,
                    };
                    (f.id.clone(), feature)
                })
                .collect(),
        })
    }

    /// Signs every module, in module order.
    pub fn extract_all(&self, exec: Execution) -> Vec<ModuleSignature> {
        parallel::map_range(exec, self.modules.len(), |m| {
            self.extract(m).expect("partition modules are non-empty")
        })
    }
}

/// Signs one module with the built-in embedder.
pub fn extract_signature(
    graph: &ProgramGraph,
    partition: &Partition,
    module_id: usize,
    config: &FeatureConfig,
) -> Result<ModuleSignature> {
    SignatureExtractor::new(graph, partition, config, &StatisticalEmbedder)?.extract(module_id)
}
