//! Attributed call-graph model and the `mgx-1` exchange format.
//!
//! A [`ProgramGraph`] is plain data: it can be built in memory with
//! arbitrary contents and checked with [`validate`]. Documents read through
//! [`load_program_graph`] are always valid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAPH_FORMAT: &str = "mgx-1";
pub const PARTITION_FORMAT: &str = "mpt-1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionNode {
    pub id: String,
    pub address: u64,
    /// Rank of `address` among all functions of the program.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub volume: u64,
    #[serde(default)]
    pub bb_count: u64,
    #[serde(default)]
    pub cfg_edge_count: u64,
    #[serde(default)]
    pub strings: BTreeSet<String>,
    #[serde(default)]
    pub constants: Vec<i64>,
    #[serde(default)]
    pub data_refs: BTreeSet<String>,
    #[serde(default)]
    pub is_dispatch_target: bool,
    #[serde(default)]
    pub is_export: bool,
}

impl FunctionNode {
    /// A function with the given identity and volume and no other attributes.
    pub fn new(id: impl Into<String>, address: u64, volume: u64) -> Self {
        FunctionNode {
            id: id.into(),
            address,
            ordinal: None,
            name: None,
            volume,
            bb_count: 0,
            cfg_edge_count: 0,
            strings: BTreeSet::new(),
            constants: Vec::new(),
            data_refs: BTreeSet::new(),
            is_dispatch_target: false,
            is_export: false,
        }
    }

    /// Ordinal of a loaded function. Panics on graphs that were never
    /// passed through [`ProgramGraph::assign_ordinals`].
    pub fn ordinal(&self) -> usize {
        self.ordinal.expect("function ordinal not assigned")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallEdge {
    pub caller: String,
    pub callee: String,
    #[serde(default = "one")]
    pub callsites: u32,
}

fn one() -> u32 {
    1
}

impl CallEdge {
    pub fn new(caller: impl Into<String>, callee: impl Into<String>) -> Self {
        CallEdge {
            caller: caller.into(),
            callee: callee.into(),
            callsites: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProgramGraph {
    pub program_name: String,
    pub functions: Vec<FunctionNode>,
    pub edges: Vec<CallEdge>,
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    version: String,
    #[serde(default)]
    program_name: String,
    #[serde(default)]
    functions: Vec<FunctionNode>,
    #[serde(default)]
    edges: Vec<CallEdge>,
}

impl ProgramGraph {
    pub fn new(program_name: impl Into<String>) -> Self {
        ProgramGraph {
            program_name: program_name.into(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Map from function id to its position in `functions`. Later
    /// duplicates win; call [`validate`] first if that matters.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.functions
            .iter()
            .enumerate()
            .map(|(i, f)| (f.id.as_str(), i))
            .collect()
    }

    /// Recompute every ordinal from ascending address (ties by id).
    pub fn assign_ordinals(&mut self) {
        let mut order: Vec<usize> = (0..self.functions.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (&self.functions[a], &self.functions[b]);
            fa.address.cmp(&fb.address).then_with(|| fa.id.cmp(&fb.id))
        });
        for (rank, idx) in order.into_iter().enumerate() {
            self.functions[idx].ordinal = Some(rank);
        }
    }

    /// Serialize as an `mgx-1` document.
    pub fn to_json(&self) -> String {
        let doc = GraphDocument {
            version: GRAPH_FORMAT.to_string(),
            program_name: self.program_name.clone(),
            functions: self.functions.clone(),
            edges: self.edges.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serialization cannot fail")
    }

    /// Index-based adjacency of a valid graph.
    pub fn topology(&self) -> Topology {
        Topology::new(self)
    }
}

/// Reads and validates an `mgx-1` document.
pub fn load_program_graph<R: Read>(mut source: R) -> Result<ProgramGraph> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<input>", e))?;
    parse_program_graph(&bytes)
}

pub fn parse_program_graph(bytes: &[u8]) -> Result<ProgramGraph> {
    let doc: GraphDocument = serde_json::from_slice(bytes)?;
    if doc.version != GRAPH_FORMAT {
        return Err(Error::Version {
            expected: GRAPH_FORMAT.into(),
            found: doc.version,
        });
    }
    let mut graph = ProgramGraph {
        program_name: doc.program_name,
        functions: doc.functions,
        edges: doc.edges,
    };
    if graph.functions.iter().any(|f| f.ordinal.is_none()) {
        graph.assign_ordinals();
    }
    let violations = validate(&graph);
    if violations.is_empty() {
        Ok(graph)
    } else {
        Err(Error::Invalid(violations))
    }
}

pub fn load_program_graph_file(path: impl AsRef<std::path::Path>) -> Result<ProgramGraph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_program_graph(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    InvalidVolume {
        id: String,
        index: usize,
    },
    DanglingEndpoint {
        edge: usize,
        id: String,
    },
    DuplicateEdge {
        edge: usize,
        caller: String,
        callee: String,
    },
    ZeroCallsites {
        edge: usize,
    },
    MissingOrdinal {
        id: String,
    },
    OrdinalPermutation {
        detail: String,
    },
    OrdinalOrder {
        id: String,
        ordinal: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id, first, second } => write!(
                f,
                "functions[{second}]: duplicate id {id:?} (first seen at functions[{first}])"
            ),
            Violation::InvalidVolume { id, index } => {
                write!(f, "functions[{index}] ({id:?}): volume must be at least 1")
            }
            Violation::DanglingEndpoint { edge, id } => {
                write!(f, "edges[{edge}]: endpoint {id:?} is not a known function")
            }
            Violation::DuplicateEdge {
                edge,
                caller,
                callee,
            } => write!(f, "edges[{edge}]: duplicate edge {caller:?} -> {callee:?}"),
            Violation::ZeroCallsites { edge } => {
                write!(f, "edges[{edge}]: callsites must be at least 1")
            }
            Violation::MissingOrdinal { id } => write!(f, "function {id:?} has no ordinal"),
            Violation::OrdinalPermutation { detail } => {
                write!(f, "ordinals are not a permutation of 0..N: {detail}")
            }
            Violation::OrdinalOrder { id, ordinal } => write!(
                f,
                "function {id:?} has ordinal {ordinal} inconsistent with address order"
            ),
        }
    }
}

/// Lists every broken invariant of `graph`. Empty means valid.
pub fn validate(graph: &ProgramGraph) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, f) in graph.functions.iter().enumerate() {
        if let Some(&first) = seen.get(f.id.as_str()) {
            violations.push(Violation::DuplicateId {
                id: f.id.clone(),
                first,
                second: i,
            });
        } else {
            seen.insert(&f.id, i);
        }
        if f.volume < 1 {
            violations.push(Violation::InvalidVolume {
                id: f.id.clone(),
                index: i,
            });
        }
    }

    let mut pairs = BTreeSet::new();
    for (i, e) in graph.edges.iter().enumerate() {
        for id in [&e.caller, &e.callee] {
            if !seen.contains_key(id.as_str()) {
                violations.push(Violation::DanglingEndpoint {
                    edge: i,
                    id: id.clone(),
                });
            }
        }
        if !pairs.insert((e.caller.as_str(), e.callee.as_str())) {
            violations.push(Violation::DuplicateEdge {
                edge: i,
                caller: e.caller.clone(),
                callee: e.callee.clone(),
            });
        }
        if e.callsites == 0 {
            violations.push(Violation::ZeroCallsites { edge: i });
        }
    }

    check_ordinals(graph, &mut violations);
    violations
}

fn check_ordinals(graph: &ProgramGraph, violations: &mut Vec<Violation>) {
    let n = graph.functions.len();
    let mut by_ordinal: Vec<Option<usize>> = vec![None; n];
    let mut permutation_ok = true;
    for (i, f) in graph.functions.iter().enumerate() {
        match f.ordinal {
            None => {
                violations.push(Violation::MissingOrdinal { id: f.id.clone() });
                permutation_ok = false;
            }
            Some(o) if o >= n => {
                violations.push(Violation::OrdinalPermutation {
                    detail: format!("{:?} has ordinal {o} >= {n}", f.id),
                });
                permutation_ok = false;
            }
            Some(o) => match by_ordinal[o] {
                Some(prev) => {
                    violations.push(Violation::OrdinalPermutation {
                        detail: format!(
                            "ordinal {o} shared by {:?} and {:?}",
                            graph.functions[prev].id, f.id
                        ),
                    });
                    permutation_ok = false;
                }
                None => by_ordinal[o] = Some(i),
            },
        }
    }
    if !permutation_ok {
        return;
    }
    let mut prev_address = None;
    for (o, idx) in by_ordinal.into_iter().enumerate() {
        let f = &graph.functions[idx.expect("permutation checked")];
        if let Some(prev) = prev_address {
            if f.address < prev {
                violations.push(Violation::OrdinalOrder {
                    id: f.id.clone(),
                    ordinal: o,
                });
            }
        }
        prev_address = Some(f.address);
    }
}

/// Index adjacency of a valid [`ProgramGraph`]; self-edges are kept.
#[derive(Debug, Clone)]
pub struct Topology {
    pub succ: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
    /// `(caller, callee)` pairs in document order.
    pub edges: Vec<(usize, usize)>,
}

impl Topology {
    pub fn new(graph: &ProgramGraph) -> Self {
        let index = graph.id_index();
        let n = graph.functions.len();
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        let mut edges = Vec::with_capacity(graph.edges.len());
        for e in &graph.edges {
            let (Some(&u), Some(&v)) = (index.get(e.caller.as_str()), index.get(e.callee.as_str()))
            else {
                continue;
            };
            succ[u].push(v);
            pred[v].push(u);
            edges.push((u, v));
        }
        Topology { succ, pred, edges }
    }

    pub fn len(&self) -> usize {
        self.succ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.succ.is_empty()
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.succ[v].len()
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.pred[v].len()
    }
}

/// Non-overlapping assignment of functions (by graph index) to dense
/// module ids `0..module_count`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    labels: Vec<usize>,
    module_count: usize,
}

impl Partition {
    /// Builds a partition from arbitrary labels, compressing them to a dense
    /// range while keeping their relative order.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let distinct: BTreeSet<usize> = labels.iter().copied().collect();
        let module_count = distinct.len();
        if distinct
            .iter()
            .next_back()
            .is_none_or(|&m| m + 1 == module_count)
        {
            return Partition {
                labels,
                module_count,
            };
        }
        let remap: HashMap<usize, usize> = distinct.into_iter().zip(0..).collect();
        Partition {
            labels: labels.iter().map(|l| remap[l]).collect(),
            module_count,
        }
    }

    /// Module `k` of the result holds the indices in `modules[k]`. Panics if
    /// the lists do not cover `0..n` exactly once or a module is empty.
    pub fn from_modules(n: usize, modules: &[Vec<usize>]) -> Self {
        let mut labels = vec![usize::MAX; n];
        for (m, members) in modules.iter().enumerate() {
            assert!(!members.is_empty(), "module {m} is empty");
            for &v in members {
                assert_eq!(labels[v], usize::MAX, "function {v} assigned twice");
                labels[v] = m;
            }
        }
        assert!(
            labels.iter().all(|&l| l != usize::MAX),
            "partition not total"
        );
        Partition {
            labels,
            module_count: modules.len(),
        }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            labels: (0..n).collect(),
            module_count: n,
        }
    }

    pub fn single(n: usize) -> Self {
        Partition {
            labels: vec![0; n],
            module_count: usize::from(n > 0),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn module_count(&self) -> usize {
        self.module_count
    }

    pub fn module_of(&self, function: usize) -> usize {
        self.labels[function]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Members of every module, each list in ascending index order.
    pub fn modules(&self) -> Vec<Vec<usize>> {
        let mut modules = vec![Vec::new(); self.module_count];
        for (v, &m) in self.labels.iter().enumerate() {
            modules[m].push(v);
        }
        modules
    }

    pub fn members(&self, module: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(v, &m)| (m == module).then_some(v))
            .collect()
    }

    /// Assignment keyed by function id.
    pub fn assignment<'g>(&self, graph: &'g ProgramGraph) -> BTreeMap<&'g str, usize> {
        graph
            .functions
            .iter()
            .zip(&self.labels)
            .map(|(f, &m)| (f.id.as_str(), m))
            .collect()
    }

    pub fn to_document(&self, graph: &ProgramGraph) -> PartitionDocument {
        let modules = self
            .modules()
            .into_iter()
            .enumerate()
            .map(|(id, members)| PartitionModule {
                id,
                members: members
                    .into_iter()
                    .map(|v| graph.functions[v].id.clone())
                    .collect(),
            })
            .collect();
        PartitionDocument {
            version: PARTITION_FORMAT.to_string(),
            program_name: graph.program_name.clone(),
            modules,
        }
    }

    pub fn from_document(doc: &PartitionDocument, graph: &ProgramGraph) -> Result<Self> {
        if doc.version != PARTITION_FORMAT {
            return Err(Error::Version {
                expected: PARTITION_FORMAT.into(),
                found: doc.version.clone(),
            });
        }
        let index = graph.id_index();
        let mut labels = vec![usize::MAX; graph.len()];
        for module in &doc.modules {
            for id in &module.members {
                let &v = index
                    .get(id.as_str())
                    .ok_or_else(|| Error::UnknownFunction(id.clone()))?;
                labels[v] = module.id;
            }
        }
        let covered = labels.iter().filter(|&&l| l != usize::MAX).count();
        if covered != graph.len() {
            return Err(Error::PartitionSize {
                partition: covered,
                graph: graph.len(),
            });
        }
        Ok(Partition::from_labels(labels))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionDocument {
    pub version: String,
    pub program_name: String,
    pub modules: Vec<PartitionModule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionModule {
    pub id: usize,
    pub members: Vec<String>,
}
