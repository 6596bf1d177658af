//! Channel-wise similarity between two module signatures.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{cmp_f64s, AnchorKind, Histogram, ModuleSignature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Strings,
    Constants,
    Kernel,
    Edges,
    Functions,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Strings,
        Channel::Constants,
        Channel::Kernel,
        Channel::Edges,
        Channel::Functions,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Strings => "strings",
            Channel::Constants => "constants",
            Channel::Kernel => "kernel",
            Channel::Edges => "edges",
            Channel::Functions => "functions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelWeights {
    pub strings: f64,
    pub constants: f64,
    pub kernel: f64,
    pub edges: f64,
    pub functions: f64,
}

impl Default for ChannelWeights {
    fn default() -> Self {
        ChannelWeights {
            strings: 0.30,
            constants: 0.15,
            kernel: 0.20,
            edges: 0.10,
            functions: 0.25,
        }
    }
}

impl ChannelWeights {
    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Strings => self.strings,
            Channel::Constants => self.constants,
            Channel::Kernel => self.kernel,
            Channel::Edges => self.edges,
            Channel::Functions => self.functions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = Channel::ALL.map(|c| self.get(c));
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("channel weights must be non-negative".into()));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "channel weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Per-channel scores; `None` marks an inactive channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBreakdown {
    pub strings: Option<f64>,
    pub constants: Option<f64>,
    pub kernel: Option<f64>,
    pub edges: Option<f64>,
    pub functions: Option<f64>,
    pub aggregate: f64,
}

impl SimilarityBreakdown {
    pub fn score(&self, channel: Channel) -> Option<f64> {
        match channel {
            Channel::Strings => self.strings,
            Channel::Constants => self.constants,
            Channel::Kernel => self.kernel,
            Channel::Edges => self.edges,
            Channel::Functions => self.functions,
        }
    }

    pub fn channels_active(&self) -> BTreeSet<Channel> {
        Channel::ALL
            .into_iter()
            .filter(|&c| self.score(c).is_some())
            .collect()
    }

    /// Builds a breakdown from channel scores, renormalizing the weights
    /// over the active channels.
    pub fn from_scores(scores: [Option<f64>; 5], weights: &ChannelWeights) -> Self {
        let (mut num, mut den) = (0.0, 0.0);
        for (c, s) in Channel::ALL.into_iter().zip(scores) {
            if let Some(s) = s {
                num += weights.get(c) * s;
                den += weights.get(c);
            }
        }
        let [strings, constants, kernel, edges, functions] = scores;
        SimilarityBreakdown {
            strings,
            constants,
            kernel,
            edges,
            functions,
            aggregate: if den > 0.0 {
                (num / den).clamp(0.0, 1.0)
            } else {
                0.0
            },
        }
    }
}

impl fmt::Display for SimilarityBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in Channel::ALL {
            match self.score(c) {
                Some(s) => writeln!(f, "{:<10} {s:.6}", c.name())?,
                None => writeln!(f, "{:<10} inactive", c.name())?,
            }
        }
        write!(f, "{:<10} {:.6}", "aggregate", self.aggregate)
    }
}

/// Jaccard index. Inactive when either side has no strings: an empty set
/// carries no evidence either way.
pub fn string_similarity(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let common = a.intersection(b).count();
    Some(common as f64 / (a.len() + b.len() - common) as f64)
}

/// Cosine of two sparse non-negative vectors; inactive if either is zero.
pub fn constant_similarity(a: &BTreeMap<i64, f64>, b: &BTreeMap<i64, f64>) -> Option<f64> {
    let aa: f64 = a.values().map(|x| x * x).sum();
    let bb: f64 = b.values().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    let ab: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    Some((ab / (aa * bb).sqrt()).clamp(0.0, 1.0))
}

fn histogram_dot(a: &[Histogram], b: &[Histogram]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(ha, hb)| {
            ha.iter()
                .filter_map(|(bin, &x)| hb.get(bin).map(|&y| x as u64 * y as u64))
                .sum::<u64>()
        })
        .sum()
}

/// Normalized propagation-kernel value.
pub fn kernel_similarity(a: &[Histogram], b: &[Histogram]) -> f64 {
    let (aa, bb) = (histogram_dot(a, a), histogram_dot(b, b));
    if aa == 0 || bb == 0 {
        return 0.0;
    }
    let ab = histogram_dot(a, b) as f64;
    (ab / (aa as f64 * bb as f64).sqrt()).clamp(0.0, 1.0)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa * bb).sqrt()).clamp(0.0, 1.0)
}

/// Greedy one-to-one pairing: repeatedly take the highest-cosine pair whose
/// ends are both unused. Returns `(i, j, cosine)` triples.
pub fn greedy_pairs(a: &[&[f64]], b: &[&[f64]]) -> Vec<(usize, usize, f64)> {
    let mut all: Vec<(usize, usize, f64)> = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            all.push((i, j, cosine(x, y)));
        }
    }
    all.sort_by(|p, q| {
        q.2.total_cmp(&p.2)
            .then_with(|| pair_key(a, b, p).cmp(&pair_key(a, b, q)))
            .then_with(|| (p.0, p.1).cmp(&(q.0, q.1)))
    });
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut pairs = Vec::with_capacity(a.len().min(b.len()));
    for (i, j, c) in all {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j, c));
            if pairs.len() == a.len().min(b.len()) {
                break;
            }
        }
    }
    pairs
}

/// Orders tied pairs by their vectors (smaller one first), so the choice
/// does not depend on which side a vector came from.
fn pair_key<'v>(a: &[&'v [f64]], b: &[&'v [f64]], p: &(usize, usize, f64)) -> VecPair<'v> {
    let (x, y) = (a[p.0], b[p.1]);
    if cmp_f64s(x, y).is_le() {
        VecPair(x, y)
    } else {
        VecPair(y, x)
    }
}

struct VecPair<'v>(&'v [f64], &'v [f64]);

impl PartialEq for VecPair<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for VecPair<'_> {}

impl PartialOrd for VecPair<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for VecPair<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_f64s(self.0, other.0).then_with(|| cmp_f64s(self.1, other.1))
    }
}

/// Greedy best match over edge vectors, scaled by the matched fraction of
/// the longer list. Inactive if either list is empty.
pub fn edge_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ra: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
    let rb: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
    let total: f64 = greedy_pairs(&ra, &rb).iter().map(|p| p.2).sum();
    Some((total / a.len().max(b.len()) as f64).clamp(0.0, 1.0))
}

/// Drill-down function pairing: anchor groups of the same kind first
/// (largest with largest), then the remaining functions pooled. The score
/// is the volume-weighted mean cosine over matched pairs, with unmatched
/// functions counting as zero.
pub fn function_similarity(a: &ModuleSignature, b: &ModuleSignature) -> f64 {
    let total = (a.total_volume() + b.total_volume()) as f64;
    if total == 0.0 {
        return 0.0;
    }
    let mut used_a = BTreeSet::new();
    let mut used_b = BTreeSet::new();
    let mut score = 0.0;

    let mut pair_up = |ids_a: Vec<&String>,
                       ids_b: Vec<&String>,
                       used_a: &mut BTreeSet<String>,
                       used_b: &mut BTreeSet<String>| {
        let va: Vec<&[f64]> = ids_a
            .iter()
            .map(|id| a.function_vectors[*id].vector.as_slice())
            .collect();
        let vb: Vec<&[f64]> = ids_b
            .iter()
            .map(|id| b.function_vectors[*id].vector.as_slice())
            .collect();
        for (i, j, c) in greedy_pairs(&va, &vb) {
            let weight = a.function_vectors[ids_a[i]].volume + b.function_vectors[ids_b[j]].volume;
            score += c * weight as f64;
            used_a.insert(ids_a[i].clone());
            used_b.insert(ids_b[j].clone());
        }
    };

    for kind in [AnchorKind::DataShared, AnchorKind::Dispatch] {
        let ga = a.anchor_groups.iter().filter(|g| g.kind == kind);
        let gb = b.anchor_groups.iter().filter(|g| g.kind == kind);
        for (x, y) in ga.zip(gb) {
            let ids_a: Vec<&String> = x
                .members
                .iter()
                .filter(|id| !used_a.contains(*id))
                .collect();
            let ids_b: Vec<&String> = y
                .members
                .iter()
                .filter(|id| !used_b.contains(*id))
                .collect();
            pair_up(ids_a, ids_b, &mut used_a, &mut used_b);
        }
    }
    let rest_a: Vec<&String> = a
        .function_vectors
        .keys()
        .filter(|id| !used_a.contains(*id))
        .collect();
    let rest_b: Vec<&String> = b
        .function_vectors
        .keys()
        .filter(|id| !used_b.contains(*id))
        .collect();
    pair_up(rest_a, rest_b, &mut used_a, &mut used_b);

    (score / total).clamp(0.0, 1.0)
}

/// All five channels plus the renormalized aggregate. Symmetric in its
/// arguments: the pair is put in canonical order first.
pub fn aggregate(
    a: &ModuleSignature,
    b: &ModuleSignature,
    weights: &ChannelWeights,
) -> SimilarityBreakdown {
    let (a, b) = if a.canonical_cmp(b).is_gt() {
        (b, a)
    } else {
        (a, b)
    };
    let scores = [
        string_similarity(&a.string_set, &b.string_set),
        constant_similarity(&a.tfidf, &b.tfidf),
        Some(kernel_similarity(
            &a.kernel_histograms,
            &b.kernel_histograms,
        )),
        edge_similarity(&a.edge_vectors, &b.edge_vectors),
        Some(function_similarity(a, b)),
    ];
    SimilarityBreakdown::from_scores(scores, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_signature, FeatureConfig, FunctionFeature};
    use crate::graph::{CallEdge, FunctionNode, Partition, ProgramGraph};

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(
            string_similarity(&set(&["x", "y"]), &set(&["x", "y"])),
            Some(1.0)
        );
        assert_eq!(string_similarity(&set(&["x"]), &set(&["y"])), Some(0.0));
        let third = string_similarity(&set(&["x", "y"]), &set(&["y", "z"])).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(string_similarity(&set(&[]), &set(&[])), None);
        assert_eq!(string_similarity(&set(&["x"]), &set(&[])), None);
    }

    #[test]
    fn constant_cosine_examples() {
        let a = BTreeMap::from([(1, 1.0)]);
        let b = BTreeMap::from([(1, 1.0), (2, 1.0)]);
        assert_eq!(constant_similarity(&a, &a), Some(1.0));
        assert_eq!(
            constant_similarity(&a, &BTreeMap::from([(3, 2.0)])),
            Some(0.0)
        );
        let s = constant_similarity(&a, &b).unwrap();
        assert!((s - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(constant_similarity(&a, &BTreeMap::new()), None);
    }

    #[test]
    fn kernel_examples() {
        let a = vec![Histogram::from([(1, 2)]), Histogram::from([(5, 1), (6, 1)])];
        let b = vec![Histogram::from([(1, 1), (2, 1)]), Histogram::from([(5, 2)])];
        assert_eq!(kernel_similarity(&a, &a), 1.0);
        // <a,b> = 2 + 2, <a,a> = 4 + 2, <b,b> = 2 + 4.
        assert!((kernel_similarity(&a, &b) - 4.0 / 6.0).abs() < 1e-15);
        let c = vec![Histogram::from([(9, 2)]), Histogram::from([(9, 2)])];
        assert_eq!(kernel_similarity(&a, &c), 0.0);
    }

    #[test]
    fn edge_examples() {
        let e = vec![1.0, 0.0];
        let f = vec![0.0, 1.0];
        assert_eq!(
            edge_similarity(&[e.clone(), f.clone()], &[e.clone(), f.clone()]),
            Some(1.0)
        );
        assert_eq!(edge_similarity(&[], std::slice::from_ref(&e)), None);
        assert_eq!(
            edge_similarity(std::slice::from_ref(&e), &[e.clone(), f.clone()]),
            Some(0.5)
        );
    }

    fn signature(vectors: &[(&str, u64, Vec<f64>)]) -> ModuleSignature {
        ModuleSignature {
            module_id: 0,
            function_count: vectors.len(),
            string_set: BTreeSet::new(),
            constant_bag: BTreeMap::new(),
            tfidf: BTreeMap::new(),
            kernel_histograms: vec![Histogram::from([(0, vectors.len() as u32)])],
            edge_vectors: Vec::new(),
            function_vectors: vectors
                .iter()
                .map(|(id, volume, vector)| {
                    let f = FunctionFeature {
                        volume: *volume,
                        vector: vector.clone(),
                    };
                    (id.to_string(), f)
                })
                .collect(),
            anchor_groups: Vec::new(),
        }
    }

    #[test]
    fn function_pairing_examples() {
        let a = signature(&[("p", 5, vec![1.0, 0.0]), ("q", 5, vec![1.0, 0.0])]);
        let b = signature(&[("r", 5, vec![1.0, 0.0]), ("s", 5, vec![0.0, 1.0])]);
        assert_eq!(function_similarity(&a, &a), 1.0);
        assert_eq!(function_similarity(&a, &b), 0.5);
        assert_eq!(function_similarity(&b, &a), 0.5);
        // One unmatched function of volume 10 on the larger side.
        let c = signature(&[("p", 5, vec![1.0, 0.0])]);
        let d = signature(&[("r", 5, vec![1.0, 0.0]), ("s", 10, vec![1.0, 0.0])]);
        assert_eq!(function_similarity(&c, &d), 10.0 / 20.0);
    }

    fn sample(strings: bool) -> ModuleSignature {
        let mut g = ProgramGraph::new("t");
        for i in 0..4 {
            let mut f = FunctionNode::new(format!("f{i}"), 0x100 * i, 10 + 7 * i);
            f.bb_count = 1 + i;
            if strings {
                f.strings.insert(format!("message number {i}"));
            }
            f.constants = vec![i as i64, 42];
            if i % 2 == 0 {
                f.data_refs.insert("obj".into());
            }
            g.functions.push(f);
        }
        for (a, b) in [(0, 1), (0, 2), (2, 3)] {
            g.edges
                .push(CallEdge::new(format!("f{a}"), format!("f{b}")));
        }
        g.assign_ordinals();
        extract_signature(&g, &Partition::single(4), 0, &FeatureConfig::default()).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let w = ChannelWeights::default();
        let s = sample(true);
        let own = aggregate(&s, &s, &w);
        assert_eq!(own.aggregate, 1.0);
        assert_eq!(own.channels_active().len(), 4);

        let zero = SimilarityBreakdown::from_scores([Some(0.0); 5], &w);
        assert_eq!(zero.aggregate, 0.0);
        let strings_only =
            SimilarityBreakdown::from_scores([Some(1.0), None, None, None, None], &w);
        assert_eq!(strings_only.aggregate, 1.0);
    }

    #[test]
    fn stripping_strings_only_deactivates_the_channel() {
        let w = ChannelWeights::default();
        let (full, bare) = (sample(true), sample(false));
        let x = aggregate(&full, &full, &w);
        let y = aggregate(&bare, &bare, &w);
        assert_eq!(y.strings, None);
        assert_eq!(x.kernel, y.kernel);
        assert_eq!(x.functions, y.functions);
        assert_eq!(y.aggregate, 1.0);
        assert_eq!(aggregate(&full, &bare, &w).strings, None);
    }

    #[test]
    fn weights_validation() {
        assert!(ChannelWeights::default().validate().is_ok());
        let bad = ChannelWeights {
            strings: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
