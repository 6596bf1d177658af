//! Adapter from a disassembler's program model to `mgx-1` documents.
//!
//! A host script walks its analysis database and fills an [`ExportSession`];
//! [`export`] turns that into a validated [`ProgramGraph`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{parse_program_graph, validate, CallEdge, FunctionNode, ProgramGraph};

pub const SUPPORTED_ARCHITECTURES: &[&str] = &["x86", "x86_64", "arm", "aarch64", "mips"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportFunction {
    pub address: u64,
    /// Symbol name; stripped binaries have none.
    pub name: Option<String>,
    pub instruction_count: u64,
    pub basic_blocks: u64,
    pub cfg_edges: u64,
    pub strings: Vec<String>,
    /// Immediate operands and referenced scalar data.
    pub constants: Vec<i64>,
    pub data_refs: Vec<String>,
    /// Referenced from a pointer table.
    pub in_pointer_table: bool,
    pub exported: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallTarget {
    Direct(u64),
    /// Target address when the host resolved it.
    Indirect(Option<u64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportCall {
    pub caller: u64,
    pub target: CallTarget,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportSession {
    pub program_name: String,
    pub architecture: String,
    pub analyzed: bool,
    pub functions: Vec<ExportFunction>,
    pub calls: Vec<ExportCall>,
}

/// Id of a function: its symbol, or one synthesized from the address.
pub fn function_id(f: &ExportFunction) -> String {
    match &f.name {
        Some(name) if !name.is_empty() => name.clone(),
        _ => format!("sub_{:x}", f.address),
    }
}

/// Builds the program graph of an analyzed binary. Unresolved indirect
/// calls and calls leaving the binary are dropped; repeated calls between
/// the same pair count as extra call sites.
pub fn export(session: &ExportSession) -> Result<ProgramGraph> {
    if !session.analyzed {
        return Err(Error::Export("binary has not been analyzed".into()));
    }
    if !SUPPORTED_ARCHITECTURES.contains(&session.architecture.as_str()) {
        return Err(Error::Export(format!(
            "unsupported architecture {:?}",
            session.architecture
        )));
    }
    let mut graph = ProgramGraph::new(session.program_name.clone());
    let mut by_address = HashMap::new();
    for f in &session.functions {
        let id = function_id(f);
        if by_address.insert(f.address, id.clone()).is_some() {
            return Err(Error::Export(format!("two functions at {:#x}", f.address)));
        }
        let mut node = FunctionNode::new(id, f.address, f.instruction_count.max(1));
        node.name = f.name.clone().filter(|n| !n.is_empty());
        node.bb_count = f.basic_blocks;
        node.cfg_edge_count = f.cfg_edges;
        node.strings = f.strings.iter().cloned().collect();
        node.constants = f.constants.clone();
        node.data_refs = f.data_refs.iter().cloned().collect::<BTreeSet<_>>();
        node.is_dispatch_target = f.in_pointer_table;
        node.is_export = f.exported;
        graph.functions.push(node);
    }
    let mut callsites: BTreeMap<(&str, &str), u32> = BTreeMap::new();
    for call in &session.calls {
        let target = match call.target {
            CallTarget::Direct(a) | CallTarget::Indirect(Some(a)) => a,
            CallTarget::Indirect(None) => continue,
        };
        if let (Some(caller), Some(callee)) =
            (by_address.get(&call.caller), by_address.get(&target))
        {
            *callsites
                .entry((caller.as_str(), callee.as_str()))
                .or_default() += 1;
        }
    }
    graph.edges = callsites
        .into_iter()
        .map(|((caller, callee), n)| CallEdge {
            callsites: n,
            ..CallEdge::new(caller, callee)
        })
        .collect();
    graph.assign_ordinals();
    let violations = validate(&graph);
    if violations.is_empty() {
        Ok(graph)
    } else {
        Err(Error::Invalid(violations))
    }
}

/// Re-validates a serialized document before it is written out.
pub fn self_check(document: &str) -> Result<()> {
    parse_program_graph(document.as_bytes()).map(|_| ())
}
