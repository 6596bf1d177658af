//! Multi-level modularization of a weighted call graph.
//!
//! Every function starts as its own module. Functions are visited in
//! binary-layout order and moved to the neighboring module with the
//! largest biased gain `ΔQ' × B_l × B_e`; when no move helps, modules are
//! collapsed into single units and the process repeats on the coarser
//! level. `ΔQ'` is the exact change of [`weighted_directed_mq`] caused by
//! the move; `B_l` favors modules whose members sit close together in the
//! binary and `B_e` favors moves that reduce the number of entry
//! functions. Modules that end up weakly disconnected are split.
//!
//! [`weighted_directed_mq`]: crate::metrics::weighted_directed_mq

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Partition;
use crate::metrics::MqNormalization;
use crate::volume::WeightedGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModularizerConfig {
    /// The dispersion limit is `functions / ds_limit_divisor`.
    pub ds_limit_divisor: u32,
    /// Upper end of the locality bias.
    pub bias_cap: f64,
    /// Maximum number of levels; `None` runs to convergence.
    pub max_passes: Option<usize>,
    /// Smallest biased gain that is still applied.
    pub epsilon: f64,
    pub locality_bias: bool,
    pub entry_bias: bool,
    pub normalization: MqNormalization,
}

impl Default for ModularizerConfig {
    fn default() -> Self {
        ModularizerConfig {
            ds_limit_divisor: 100,
            bias_cap: 3.0,
            max_passes: None,
            epsilon: 1e-12,
            locality_bias: true,
            entry_bias: true,
            normalization: MqNormalization::Literal,
        }
    }
}

impl ModularizerConfig {
    /// Plain modularity optimization with both biases fixed at 1.
    pub fn without_biases() -> Self {
        ModularizerConfig {
            locality_bias: false,
            entry_bias: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ds_limit_divisor == 0 {
            return Err(Error::Config("ds_limit_divisor must be positive".into()));
        }
        if self.bias_cap.is_nan() || self.bias_cap <= 0.0 {
            return Err(Error::Config("bias_cap must be positive".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        if self.max_passes == Some(0) {
            return Err(Error::Config("max_passes must be positive".into()));
        }
        Ok(())
    }
}

/// Summary of one module, sufficient to score merges.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleState {
    /// Member function indices, ascending.
    pub members: Vec<usize>,
    pub avg_ordinal: f64,
    /// Sum of absolute deviations of member ordinals from `avg_ordinal`.
    pub dispersion: f64,
    /// Members without a caller inside the module.
    pub entry_count: usize,
    /// Summed weighted in-degree of the members.
    pub k_in: f64,
    /// Summed weighted out-degree of the members.
    pub k_out: f64,
    ordinals: Vec<usize>,
}

impl ModuleState {
    pub fn new(wgraph: &WeightedGraph<'_>, members: &[usize]) -> Self {
        let mut members = members.to_vec();
        members.sort_unstable();
        members.dedup();
        let mut ordinals: Vec<usize> = members.iter().map(|&v| ordinal(wgraph, v)).collect();
        ordinals.sort_unstable();
        let avg_ordinal = mean(&ordinals);
        let dispersion = ordinals
            .iter()
            .map(|&o| (o as f64 - avg_ordinal).abs())
            .sum();
        let inside = membership(wgraph.len(), &members);
        let entry_count = members
            .iter()
            .filter(|&&v| {
                wgraph.topology.pred[v]
                    .iter()
                    .all(|&u| u == v || !inside[u])
            })
            .count();
        ModuleState {
            k_in: members.iter().map(|&v| wgraph.k_in[v]).sum(),
            k_out: members.iter().map(|&v| wgraph.k_out[v]).sum(),
            members,
            avg_ordinal,
            dispersion,
            entry_count,
            ordinals,
        }
    }

    /// `a_in` accumulator: share of all edge weight entering the module,
    /// over the null-model denominator.
    pub fn a_in(&self, total_weight: f64, normalization: MqNormalization) -> f64 {
        self.k_in / null_denominator(total_weight, normalization)
    }

    pub fn a_out(&self, total_weight: f64, normalization: MqNormalization) -> f64 {
        self.k_out / null_denominator(total_weight, normalization)
    }

    pub fn min_ordinal(&self) -> usize {
        self.ordinals[0]
    }
}

fn ordinal(wgraph: &WeightedGraph<'_>, v: usize) -> usize {
    wgraph.base.functions[v].ordinal.unwrap_or(v)
}

fn mean(values: &[usize]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().map(|&o| o as f64).sum::<f64>() / values.len() as f64
    }
}

fn membership(n: usize, members: &[usize]) -> Vec<bool> {
    let mut inside = vec![false; n];
    for &v in members {
        inside[v] = true;
    }
    inside
}

fn null_denominator(total_weight: f64, normalization: MqNormalization) -> f64 {
    match normalization {
        MqNormalization::Literal => 2.0 * total_weight,
        MqNormalization::Standard => total_weight,
    }
}

/// Change of the directed modularity when `r` and `s` are merged:
/// `e_in(r,s) + e_out(r,s) + e_in(s,r) + e_out(s,r) − (a_out(r)·a_in(s) +
/// a_in(r)·a_out(s))`.
pub fn delta_q(
    r: &ModuleState,
    s: &ModuleState,
    wgraph: &WeightedGraph<'_>,
    normalization: MqNormalization,
) -> f64 {
    let w = wgraph.total_weight;
    if w == 0.0 {
        return 0.0;
    }
    let in_r = membership(wgraph.len(), &r.members);
    let in_s = membership(wgraph.len(), &s.members);
    let (mut r_to_s, mut s_to_r) = (0.0, 0.0);
    for e in &wgraph.edges {
        if in_r[e.caller] && in_s[e.callee] {
            r_to_s += e.weight;
        } else if in_s[e.caller] && in_r[e.callee] {
            s_to_r += e.weight;
        }
    }
    gain(
        r_to_s + s_to_r,
        r.k_out,
        r.k_in,
        s.k_out,
        s.k_in,
        w,
        normalization,
    )
}

fn gain(
    between: f64,
    r_out: f64,
    r_in: f64,
    s_out: f64,
    s_in: f64,
    total_weight: f64,
    normalization: MqNormalization,
) -> f64 {
    let outer = match normalization {
        MqNormalization::Literal => 2.0 * total_weight,
        MqNormalization::Standard => total_weight,
    };
    let null = null_denominator(total_weight, normalization);
    between / outer - (r_out * s_in + s_out * r_in) / (outer * null)
}

/// Locality bias of merging `r` and `s` in a program of `total_functions`.
pub fn locality_bias(
    r: &ModuleState,
    s: &ModuleState,
    total_functions: usize,
    config: &ModularizerConfig,
) -> f64 {
    let limit = total_functions as f64 / config.ds_limit_divisor as f64;
    let count = (r.ordinals.len() + s.ordinals.len()) as f64;
    let sum: f64 = r
        .ordinals
        .iter()
        .chain(&s.ordinals)
        .map(|&o| o as f64)
        .sum();
    let avg = sum / count;
    let merged: f64 = r
        .ordinals
        .iter()
        .chain(&s.ordinals)
        .map(|&o| (o as f64 - avg).abs())
        .sum();
    locality_bias_from_dispersion(merged, limit, config.bias_cap)
}

/// Locality bias for a merged dispersion `dispersion` against `limit`.
pub fn locality_bias_from_dispersion(dispersion: f64, limit: f64, cap: f64) -> f64 {
    if dispersion > limit {
        0.0
    } else if dispersion == 0.0 {
        cap
    } else {
        cap * (1.0 - dispersion / limit)
    }
}

/// Entry-limit bias `2^-ΔEQ`, with `ΔEQ` the merged entry count minus the
/// mean entry count of `r` and `s`.
pub fn entry_bias(r: &ModuleState, s: &ModuleState, wgraph: &WeightedGraph<'_>) -> f64 {
    let mut merged: Vec<usize> = r.members.iter().chain(&s.members).copied().collect();
    merged.sort_unstable();
    let merged = ModuleState::new(wgraph, &merged);
    entry_bias_from_counts(r.entry_count, s.entry_count, merged.entry_count)
}

pub fn entry_bias_from_counts(r_entries: usize, s_entries: usize, merged: usize) -> f64 {
    let delta = merged as f64 - (r_entries + s_entries) as f64 / 2.0;
    (-delta).exp2()
}

/// One applied move of a unit (a function, or a whole module at later
/// levels) from one module into another.
#[derive(Debug, Clone, PartialEq)]
pub struct MoveStep {
    /// Level of the multi-level loop, starting at 0.
    pub level: usize,
    /// Function indices that moved together.
    pub moved: Vec<usize>,
    /// A function of the receiving module, `None` when the unit left to
    /// stand alone.
    pub joined: Option<usize>,
    /// Exact change of the unbiased modularity caused by the move.
    pub delta_q_prime: f64,
    pub locality_bias: f64,
    pub entry_bias: f64,
    /// Biased gain of the chosen module minus that of the module left.
    pub delta_q: f64,
}

pub fn modularize(wgraph: &WeightedGraph<'_>, config: &ModularizerConfig) -> Partition {
    let mut engine = Engine::new(wgraph, config, false);
    engine.run();
    engine.partition()
}

/// Runs the optimizer and also returns every applied move in order.
pub fn modularize_traced(
    wgraph: &WeightedGraph<'_>,
    config: &ModularizerConfig,
) -> (Partition, Vec<MoveStep>) {
    let mut engine = Engine::new(wgraph, config, true);
    engine.run();
    let partition = engine.partition();
    (partition, engine.trace.unwrap_or_default())
}

#[derive(Debug, Clone, Default)]
struct OrdinalSet {
    sorted: Vec<usize>,
    prefix: Vec<f64>,
}

impl OrdinalSet {
    fn from_sorted(sorted: Vec<usize>) -> Self {
        let prefix = std::iter::once(0.0)
            .chain(sorted.iter().scan(0.0, |acc, &o| {
                *acc += o as f64;
                Some(*acc)
            }))
            .collect();
        OrdinalSet { sorted, prefix }
    }

    fn len(&self) -> usize {
        self.sorted.len()
    }

    fn sum(&self) -> f64 {
        self.prefix.last().copied().unwrap_or(0.0)
    }

    fn min(&self) -> usize {
        self.sorted[0]
    }

    /// `Σ |o − mu|` over the set.
    fn deviation(&self, mu: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        let split = self.sorted.partition_point(|&o| (o as f64) < mu);
        let below = self.prefix[split];
        let above = self.sum() - below;
        (mu * split as f64 - below) + (above - mu * (self.len() - split) as f64)
    }

    fn insert_all(&mut self, other: &OrdinalSet) {
        let mut merged = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        while i < self.sorted.len() || j < other.sorted.len() {
            if j == other.sorted.len()
                || (i < self.sorted.len() && self.sorted[i] <= other.sorted[j])
            {
                merged.push(self.sorted[i]);
                i += 1;
            } else {
                merged.push(other.sorted[j]);
                j += 1;
            }
        }
        *self = OrdinalSet::from_sorted(merged);
    }

    fn remove_all(&mut self, other: &OrdinalSet) {
        let mut kept = Vec::with_capacity(self.len().saturating_sub(other.len()));
        let mut j = 0;
        for &o in &self.sorted {
            if j < other.sorted.len() && other.sorted[j] == o {
                j += 1;
            } else {
                kept.push(o);
            }
        }
        *self = OrdinalSet::from_sorted(kept);
    }
}

/// A group of functions that moves as one during a level.
#[derive(Debug, Clone)]
struct Unit {
    members: Vec<usize>,
    ordinals: OrdinalSet,
    k_out: f64,
    k_in: f64,
    /// Members with no caller inside the unit.
    entries: usize,
}

#[derive(Debug, Clone, Default)]
struct Community {
    units: usize,
    ordinals: OrdinalSet,
    k_out: f64,
    k_in: f64,
    entries: usize,
}

/// Per-candidate accumulator while evaluating one unit.
#[derive(Debug, Clone, Default)]
struct Link {
    weight: f64,
    lost_entries: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Gain {
    unbiased: f64,
    locality: f64,
    entry: f64,
    biased: f64,
}

struct Engine<'a, 'g> {
    wgraph: &'a WeightedGraph<'g>,
    config: &'a ModularizerConfig,
    ds_limit: f64,
    ordinal: Vec<usize>,
    /// `(neighbor, weight)` per function, non-self edges only.
    out_adj: Vec<Vec<(usize, f64)>>,
    in_adj: Vec<Vec<(usize, f64)>>,
    units: Vec<Unit>,
    unit_of: Vec<usize>,
    /// Callers of each function inside its own unit.
    unit_callers: Vec<u32>,
    communities: Vec<Community>,
    /// Community of each unit.
    community_of: Vec<usize>,
    /// Callers of each function inside its community.
    intra_callers: Vec<u32>,
    free: Vec<usize>,
    links: Vec<Link>,
    touched: Vec<usize>,
    level: usize,
    trace: Option<Vec<MoveStep>>,
}

const MAX_SWEEPS: usize = 1000;

impl<'a, 'g> Engine<'a, 'g> {
    fn new(wgraph: &'a WeightedGraph<'g>, config: &'a ModularizerConfig, traced: bool) -> Self {
        let n = wgraph.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for e in &wgraph.edges {
            out_adj[e.caller].push((e.callee, e.weight));
            in_adj[e.callee].push((e.caller, e.weight));
        }
        let mut engine = Engine {
            wgraph,
            config,
            ds_limit: n as f64 / config.ds_limit_divisor as f64,
            ordinal: (0..n).map(|v| ordinal(wgraph, v)).collect(),
            out_adj,
            in_adj,
            units: Vec::new(),
            unit_of: Vec::new(),
            unit_callers: Vec::new(),
            communities: Vec::new(),
            community_of: Vec::new(),
            intra_callers: Vec::new(),
            free: Vec::new(),
            links: vec![Link::default(); n],
            touched: Vec::new(),
            level: 0,
            trace: traced.then(Vec::new),
        };
        let singletons: Vec<Vec<usize>> = (0..n).map(|v| vec![v]).collect();
        engine.install_units(singletons);
        engine
    }

    /// Makes every group a unit sitting in its own community.
    fn install_units(&mut self, groups: Vec<Vec<usize>>) {
        let n = self.wgraph.len();
        self.unit_of = vec![usize::MAX; n];
        for (u, members) in groups.iter().enumerate() {
            for &v in members {
                self.unit_of[v] = u;
            }
        }
        self.unit_callers = (0..n)
            .map(|v| {
                self.in_adj[v]
                    .iter()
                    .filter(|&&(x, _)| self.unit_of[x] == self.unit_of[v])
                    .count() as u32
            })
            .collect();
        self.intra_callers = self.unit_callers.clone();
        self.units = groups
            .into_iter()
            .map(|members| {
                let mut ordinals: Vec<usize> = members.iter().map(|&v| self.ordinal[v]).collect();
                ordinals.sort_unstable();
                Unit {
                    k_out: members.iter().map(|&v| self.wgraph.k_out[v]).sum(),
                    k_in: members.iter().map(|&v| self.wgraph.k_in[v]).sum(),
                    entries: members
                        .iter()
                        .filter(|&&v| self.unit_callers[v] == 0)
                        .count(),
                    ordinals: OrdinalSet::from_sorted(ordinals),
                    members,
                }
            })
            .collect();
        self.communities = self
            .units
            .iter()
            .map(|u| Community {
                units: 1,
                ordinals: u.ordinals.clone(),
                k_out: u.k_out,
                k_in: u.k_in,
                entries: u.entries,
            })
            .collect();
        self.community_of = (0..self.units.len()).collect();
        self.free.clear();
    }

    fn community_of_function(&self, v: usize) -> usize {
        self.community_of[self.unit_of[v]]
    }

    fn run(&mut self) {
        let max_levels = self.config.max_passes.unwrap_or(usize::MAX);
        while self.level < max_levels {
            let moved = self.local_moves();
            if !moved {
                break;
            }
            self.aggregate();
            self.level += 1;
        }
        self.split_disconnected();
    }

    /// Sweeps units in ordinal order until no unit moves. Returns whether
    /// anything moved.
    fn local_moves(&mut self) -> bool {
        let mut order: Vec<usize> = (0..self.units.len()).collect();
        order.sort_unstable_by_key(|&u| self.units[u].ordinals.min());
        let mut any = false;
        for _ in 0..MAX_SWEEPS {
            let mut moved = false;
            for &u in &order {
                moved |= self.visit(u);
            }
            any |= moved;
            if !moved {
                break;
            }
        }
        any
    }

    /// Removes unit `u` from its community and reinserts it where the
    /// biased gain is largest.
    fn visit(&mut self, u: usize) -> bool {
        let home = self.community_of[u];
        self.detach(u, home);
        self.collect_links(u);

        let unit = &self.units[u];
        let eval = |c: usize, link: &Link| -> Gain { self.gain(unit, c, link) };
        let empty = Link::default();
        let home_gain = if self.communities[home].units == 0 {
            Gain {
                unbiased: 0.0,
                locality: 1.0,
                entry: 1.0,
                biased: 0.0,
            }
        } else {
            eval(home, self.links.get(home).unwrap_or(&empty))
        };
        let alone = Gain {
            unbiased: 0.0,
            locality: 1.0,
            entry: 1.0,
            biased: 0.0,
        };
        // (community or None for alone, gain)
        let mut best: (Option<usize>, Gain) = (Some(home), home_gain);
        if self.communities[home].units > 0 && alone.biased > best.1.biased + self.config.epsilon {
            best = (None, alone);
        }
        let mut candidates: Vec<usize> = self
            .touched
            .iter()
            .copied()
            .filter(|&c| c != home)
            .collect();
        candidates.sort_unstable_by_key(|&c| self.communities[c].ordinals.min());
        for c in candidates {
            let g = eval(c, &self.links[c]);
            if g.biased > best.1.biased + self.config.epsilon {
                best = (Some(c), g);
            }
        }
        self.clear_links();

        let target = match best.0 {
            Some(c) => c,
            None => self.free.pop().expect("detached home leaves a free slot"),
        };
        self.attach(u, target);
        if target == home {
            return false;
        }
        if let Some(trace) = self.trace.as_mut() {
            let joined = best.0.map(|c| {
                let other = (0..self.units.len())
                    .find(|&w| w != u && self.community_of[w] == c)
                    .expect("receiving community is not empty");
                self.units[other].members[0]
            });
            trace.push(MoveStep {
                level: self.level,
                moved: self.units[u].members.clone(),
                joined,
                delta_q_prime: best.1.unbiased - home_gain.unbiased,
                locality_bias: best.1.locality,
                entry_bias: best.1.entry,
                delta_q: best.1.biased - home_gain.biased,
            });
        }
        true
    }

    /// Weights and lost entries between unit `u` (detached) and every
    /// neighboring community; fills `links` and `touched`.
    fn collect_links(&mut self, u: usize) {
        for &f in &self.units[u].members {
            for &(x, w) in &self.out_adj[f] {
                if self.unit_of[x] == u {
                    continue;
                }
                let c = self.community_of_function(x);
                if self.links[c].weight == 0.0 && self.links[c].lost_entries.is_empty() {
                    self.touched.push(c);
                }
                self.links[c].weight += w;
                if self.intra_callers[x] == 0 {
                    self.links[c].lost_entries.push(x);
                }
            }
            for &(x, w) in &self.in_adj[f] {
                if self.unit_of[x] == u {
                    continue;
                }
                let c = self.community_of_function(x);
                if self.links[c].weight == 0.0 && self.links[c].lost_entries.is_empty() {
                    self.touched.push(c);
                }
                self.links[c].weight += w;
                if self.unit_callers[f] == 0 {
                    self.links[c].lost_entries.push(f);
                }
            }
        }
        self.touched.sort_unstable();
        self.touched.dedup();
        for &c in &self.touched {
            let lost = &mut self.links[c].lost_entries;
            lost.sort_unstable();
            lost.dedup();
        }
    }

    fn clear_links(&mut self) {
        for c in std::mem::take(&mut self.touched) {
            self.links[c] = Link::default();
        }
    }

    fn gain(&self, unit: &Unit, c: usize, link: &Link) -> Gain {
        let comm = &self.communities[c];
        let unbiased = gain(
            link.weight,
            unit.k_out,
            unit.k_in,
            comm.k_out,
            comm.k_in,
            self.wgraph.total_weight,
            self.config.normalization,
        );
        let locality = if self.config.locality_bias {
            let count = (unit.ordinals.len() + comm.ordinals.len()) as f64;
            let mu = (unit.ordinals.sum() + comm.ordinals.sum()) / count;
            let dispersion = unit.ordinals.deviation(mu) + comm.ordinals.deviation(mu);
            locality_bias_from_dispersion(dispersion, self.ds_limit, self.config.bias_cap)
        } else {
            1.0
        };
        let entry = if self.config.entry_bias {
            let merged = unit.entries + comm.entries - link.lost_entries.len();
            entry_bias_from_counts(unit.entries, comm.entries, merged)
        } else {
            1.0
        };
        Gain {
            unbiased,
            locality,
            entry,
            biased: unbiased * locality * entry,
        }
    }

    /// Takes unit `u` out of community `c`, updating entry bookkeeping.
    fn detach(&mut self, u: usize, c: usize) {
        let unit = &self.units[u];
        for &f in &unit.members {
            if self.intra_callers[f] == 0 {
                self.communities[c].entries -= 1;
            }
        }
        for &f in &unit.members {
            for &(x, _) in &self.out_adj[f] {
                if self.unit_of[x] != u && self.community_of_function(x) == c {
                    self.intra_callers[x] -= 1;
                    if self.intra_callers[x] == 0 {
                        self.communities[c].entries += 1;
                    }
                }
            }
        }
        for &f in &unit.members {
            self.intra_callers[f] = self.unit_callers[f];
        }
        let comm = &mut self.communities[c];
        comm.units -= 1;
        comm.k_out -= unit.k_out;
        comm.k_in -= unit.k_in;
        if comm.units == 0 {
            *comm = Community::default();
            self.free.push(c);
        } else {
            comm.ordinals.remove_all(&unit.ordinals);
        }
        self.community_of[u] = usize::MAX;
    }

    fn attach(&mut self, u: usize, c: usize) {
        if let Some(pos) = self.free.iter().position(|&f| f == c) {
            self.free.swap_remove(pos);
        }
        let unit = &self.units[u];
        for &f in &unit.members {
            for &(x, _) in &self.out_adj[f] {
                if self.unit_of[x] != u && self.community_of_function(x) == c {
                    if self.intra_callers[x] == 0 {
                        self.communities[c].entries -= 1;
                    }
                    self.intra_callers[x] += 1;
                }
            }
            for &(x, _) in &self.in_adj[f] {
                if self.unit_of[x] != u && self.community_of_function(x) == c {
                    self.intra_callers[f] += 1;
                }
            }
        }
        let comm = &mut self.communities[c];
        comm.entries += unit
            .members
            .iter()
            .filter(|&&f| self.intra_callers[f] == 0)
            .count();
        comm.units += 1;
        comm.k_out += unit.k_out;
        comm.k_in += unit.k_in;
        comm.ordinals.insert_all(&unit.ordinals);
        self.community_of[u] = c;
    }

    /// Current modules as function lists, ordered by smallest ordinal.
    fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (u, unit) in self.units.iter().enumerate() {
            groups
                .entry(self.community_of[u])
                .or_default()
                .extend_from_slice(&unit.members);
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort_unstable_by_key(|g| g.iter().map(|&v| self.ordinal[v]).min());
        groups
    }

    fn aggregate(&mut self) {
        let groups = self.groups();
        self.install_units(groups);
    }

    /// Splits every module into the weakly connected components of the
    /// subgraph it induces.
    fn split_disconnected(&mut self) {
        let n = self.wgraph.len();
        let groups = self.groups();
        let mut label = vec![0; n];
        for (g, members) in groups.iter().enumerate() {
            for &v in members {
                label[v] = g;
            }
        }
        let mut seen = vec![false; n];
        let mut parts = Vec::new();
        for members in &groups {
            let start = parts.len();
            for &v in members {
                if seen[v] {
                    continue;
                }
                seen[v] = true;
                let mut part = vec![v];
                let mut i = 0;
                while i < part.len() {
                    let v = part[i];
                    i += 1;
                    let neighbors = self.out_adj[v].iter().chain(&self.in_adj[v]);
                    for &(x, _) in neighbors {
                        if !seen[x] && label[x] == label[v] {
                            seen[x] = true;
                            part.push(x);
                        }
                    }
                }
                part.sort_unstable();
                parts.push(part);
            }
            self.trace_split(&parts[start..]);
        }
        parts.sort_unstable_by_key(|p| p.iter().map(|&v| self.ordinal[v]).min());
        self.install_units(parts);
    }

    /// Records the detachment of every component but the first as a move
    /// to a fresh module. No weight links the components, so only the
    /// null-model term changes.
    fn trace_split(&mut self, parts: &[Vec<usize>]) {
        let Some(trace) = self.trace.as_mut() else {
            return;
        };
        let strength = |part: &[usize], k: &[f64]| part.iter().map(|&v| k[v]).sum::<f64>();
        let (k_out, k_in) = (&self.wgraph.k_out, &self.wgraph.k_in);
        let mut rest_out: f64 = parts.iter().map(|p| strength(p, k_out)).sum();
        let mut rest_in: f64 = parts.iter().map(|p| strength(p, k_in)).sum();
        for part in &parts[1..] {
            let (p_out, p_in) = (strength(part, k_out), strength(part, k_in));
            rest_out -= p_out;
            rest_in -= p_in;
            let delta = -gain(
                0.0,
                p_out,
                p_in,
                rest_out,
                rest_in,
                self.wgraph.total_weight,
                self.config.normalization,
            );
            trace.push(MoveStep {
                level: self.level,
                moved: part.clone(),
                joined: None,
                delta_q_prime: delta,
                locality_bias: 1.0,
                entry_bias: 1.0,
                delta_q: delta,
            });
        }
    }

    fn partition(&self) -> Partition {
        Partition::from_modules(self.wgraph.len(), &self.groups())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{CallEdge, FunctionNode, ProgramGraph};
    use crate::metrics::weighted_directed_mq;

    fn graph(n: usize, edges: &[(usize, usize)]) -> ProgramGraph {
        let mut g = ProgramGraph::new("t");
        for i in 0..n {
            g.functions
                .push(FunctionNode::new(format!("f{i}"), i as u64 * 16, 1));
        }
        for &(a, b) in edges {
            g.edges
                .push(CallEdge::new(format!("f{a}"), format!("f{b}")));
        }
        g.assign_ordinals();
        g
    }

    fn clique_pair() -> ProgramGraph {
        let mut edges = Vec::new();
        for base in [0, 3] {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        edges.push((base + i, base + j));
                    }
                }
            }
        }
        graph(6, &edges)
    }

    #[test]
    fn clique_pair_splits() {
        let g = clique_pair();
        let wg = WeightedGraph::unit(&g);
        let entry_only = ModularizerConfig {
            locality_bias: false,
            ..Default::default()
        };
        for config in [ModularizerConfig::without_biases(), entry_only] {
            let p = modularize(&wg, &config);
            assert_eq!(
                p.modules(),
                vec![vec![0, 1, 2], vec![3, 4, 5]],
                "{config:?}"
            );
        }
        // Six functions allow a dispersion of 0.06; even adjacent pairs
        // exceed it, so the locality bias blocks every merge.
        let p = modularize(&wg, &ModularizerConfig::default());
        assert_eq!(p.module_count(), 6);
    }

    #[test]
    fn clique_pair_is_global_optimum() {
        // Exhaustive search over all set partitions of six nodes.
        let g = clique_pair();
        let wg = WeightedGraph::unit(&g);
        fn partitions(n: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if labels.len() == n {
                out.push(labels.clone());
                return;
            }
            let next = labels.iter().max().map_or(0, |m| m + 1);
            for l in 0..=next {
                labels.push(l);
                partitions(n, labels, out);
                labels.pop();
            }
        }
        let mut all = Vec::new();
        partitions(6, &mut Vec::new(), &mut all);
        let best = all
            .into_iter()
            .map(|l| {
                let q = weighted_directed_mq(
                    &wg,
                    &Partition::from_labels(l.clone()),
                    MqNormalization::Literal,
                );
                (q, l)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert_eq!(best.1, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn trivial_graphs() {
        let single = graph(1, &[]);
        let p = modularize(&WeightedGraph::unit(&single), &ModularizerConfig::default());
        assert_eq!(p.module_count(), 1);
        let empty = ProgramGraph::new("e");
        let p = modularize(&WeightedGraph::unit(&empty), &ModularizerConfig::default());
        assert!(p.is_empty());
    }

    #[test]
    fn delta_q_examples() {
        let g = graph(2, &[(0, 1)]);
        let wg = WeightedGraph::from_weights(&g, vec![1.0, 4.0], |_, _| 4.0);
        let (a, b) = (ModuleState::new(&wg, &[0]), ModuleState::new(&wg, &[1]));
        let lit = MqNormalization::Literal;
        assert!((delta_q(&a, &b, &wg, lit) - 0.25).abs() < 1e-15);
        assert_eq!(delta_q(&a, &b, &wg, lit), delta_q(&b, &a, &wg, lit));

        // Unconnected singletons: only the null-model term remains.
        let g = graph(4, &[(0, 1), (2, 3)]);
        let wg = WeightedGraph::unit(&g);
        let (a, c) = (ModuleState::new(&wg, &[0]), ModuleState::new(&wg, &[3]));
        let expected =
            -(a.a_out(2.0, lit) * c.a_in(2.0, lit) + a.a_in(2.0, lit) * c.a_out(2.0, lit));
        assert!(delta_q(&a, &c, &wg, lit) <= 0.0);
        assert!((delta_q(&a, &c, &wg, lit) - expected).abs() < 1e-15);
    }

    #[test]
    fn locality_examples() {
        let mut g = graph(1000, &[]);
        g.assign_ordinals();
        let wg = WeightedGraph::unit(&g);
        let cfg = ModularizerConfig::default();
        let (a, b) = (ModuleState::new(&wg, &[5]), ModuleState::new(&wg, &[6]));
        assert!((locality_bias(&a, &b, 1000, &cfg) - 2.7).abs() < 1e-12);
        let far = ModuleState::new(&wg, &[500]);
        assert_eq!(locality_bias(&a, &far, 1000, &cfg), 0.0);
        assert_eq!(locality_bias_from_dispersion(0.0, 10.0, 3.0), 3.0);
    }

    #[test]
    fn entry_bias_examples() {
        assert_eq!(entry_bias_from_counts(1, 1, 1), 1.0);
        assert_eq!(entry_bias_from_counts(1, 1, 2), 0.5);
        assert_eq!(entry_bias_from_counts(1, 1, 0), 2.0);

        // A <-> B cycle: both singletons are entries, the merge has none.
        let g = graph(2, &[(0, 1), (1, 0)]);
        let wg = WeightedGraph::unit(&g);
        let (a, b) = (ModuleState::new(&wg, &[0]), ModuleState::new(&wg, &[1]));
        assert_eq!(entry_bias(&a, &b, &wg), 2.0);
    }

    #[test]
    fn module_state_consistency() {
        let g = graph(5, &[(0, 1), (1, 2), (3, 2)]);
        let wg = WeightedGraph::unit(&g);
        let m = ModuleState::new(&wg, &[0, 1, 2]);
        assert_eq!(m.avg_ordinal, 1.0);
        assert_eq!(m.dispersion, 2.0);
        assert_eq!(m.entry_count, 1);
        assert_eq!(m.k_out, 2.0);
        assert_eq!(m.k_in, 3.0);
    }

    #[test]
    fn max_passes_limits_levels() {
        let g = clique_pair();
        let wg = WeightedGraph::unit(&g);
        let cfg = ModularizerConfig {
            max_passes: Some(1),
            ..ModularizerConfig::without_biases()
        };
        let (p, steps) = modularize_traced(&wg, &cfg);
        assert!(steps.iter().all(|s| s.level == 0));
        assert_eq!(p.module_count(), 2);
    }

    #[test]
    fn trace_replays_to_partition() {
        let g = clique_pair();
        let wg = WeightedGraph::unit(&g);
        let norm = MqNormalization::Literal;
        let (p, steps) = modularize_traced(&wg, &ModularizerConfig::without_biases());
        let mut labels: Vec<usize> = (0..g.len()).collect();
        let mut q = weighted_directed_mq(&wg, &Partition::from_labels(labels.clone()), norm);
        let mut fresh = g.len();
        for s in &steps {
            let to = match s.joined {
                Some(f) => labels[f],
                None => {
                    fresh += 1;
                    fresh
                }
            };
            for &m in &s.moved {
                labels[m] = to;
            }
            let next = weighted_directed_mq(&wg, &Partition::from_labels(labels.clone()), norm);
            assert!((next - q - s.delta_q_prime).abs() < 1e-12);
            assert!(s.delta_q > 0.0);
            q = next;
        }
        assert_eq!(Partition::from_labels(labels).modules(), p.modules());
    }

    #[test]
    fn config_validation() {
        assert!(ModularizerConfig::default().validate().is_ok());
        let bad = ModularizerConfig {
            bias_cap: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
