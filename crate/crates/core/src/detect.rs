//! Matching program modules against a signature database.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::GlobalConfig;
use crate::db::SignatureDatabase;
use crate::error::{Error, Result};
use crate::features::{ModuleSignature, SignatureExtractor, StatisticalEmbedder};
use crate::graph::{validate, Partition, ProgramGraph};
use crate::modularize::modularize;
use crate::parallel::{self, Execution};
use crate::similarity::{aggregate, ChannelWeights, SimilarityBreakdown};
use crate::volume::propagate_volumes;

pub const REPORT_FORMAT: &str = "mrep-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Smallest aggregate similarity a match may have.
    pub tau_match: f64,
    /// Required lead of the best candidate over the runner-up.
    pub delta: f64,
    /// Evidence needed to report a library.
    pub theta_lib: f64,
    pub top_k: usize,
    /// Skip candidates of very different size or without any shared
    /// string, weighted constant or kernel bin.
    pub prefilter: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            tau_match: 0.70,
            delta: 0.05,
            theta_lib: 0.20,
            top_k: 5,
            prefilter: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_match", self.tau_match),
            ("delta", self.delta),
            ("theta_lib", self.theta_lib),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub library_name: String,
    pub library_module_id: usize,
    pub breakdown: SimilarityBreakdown,
}

/// Cheap test run before the full comparison.
pub fn may_match(a: &ModuleSignature, b: &ModuleSignature) -> bool {
    let (small, large) = if a.function_count <= b.function_count {
        (a.function_count, b.function_count)
    } else {
        (b.function_count, a.function_count)
    };
    if large > 3 * small {
        return false;
    }
    let shares_string = a.string_set.intersection(&b.string_set).next().is_some();
    let shares_constant = a.tfidf.keys().any(|c| b.tfidf.contains_key(c));
    let shares_bin = match (a.kernel_histograms.first(), b.kernel_histograms.first()) {
        (Some(x), Some(y)) => x.keys().any(|k| y.contains_key(k)),
        _ => false,
    };
    shares_string || shares_constant || shares_bin
}

/// Every surviving database module, best first. Ties go to the smaller
/// library name, then the smaller module id.
fn rank_all(
    signature: &ModuleSignature,
    db: &SignatureDatabase,
    weights: &ChannelWeights,
    config: &DetectorConfig,
) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = db
        .modules()
        .filter(|(_, m)| !config.prefilter || may_match(signature, m))
        .map(|(lib, m)| Candidate {
            library_name: lib.library_name.clone(),
            library_module_id: m.module_id,
            breakdown: aggregate(signature, m, weights),
        })
        .collect();
    out.sort_by(|a, b| {
        b.breakdown
            .aggregate
            .total_cmp(&a.breakdown.aggregate)
            .then_with(|| a.library_name.cmp(&b.library_name))
            .then_with(|| a.library_module_id.cmp(&b.library_module_id))
    });
    out
}

/// The `top_k` best database modules for one program module.
pub fn rank_candidates(
    signature: &ModuleSignature,
    db: &SignatureDatabase,
    weights: &ChannelWeights,
    config: &DetectorConfig,
) -> Vec<Candidate> {
    let mut all = rank_all(signature, db, weights, config);
    all.truncate(config.top_k);
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleMatch {
    pub program_module_id: usize,
    pub program_module_size: usize,
    pub library_name: String,
    pub library_module_id: usize,
    pub breakdown: SimilarityBreakdown,
    /// Aggregate of the second-best candidate, 0 when there is none.
    pub runner_up: f64,
    pub mc: f64,
    pub combined: f64,
    /// Another program module matched the same library module.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub library_name: String,
    pub evidence: f64,
    pub matched_module_count: usize,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub program_name: String,
    pub program_module_count: usize,
    pub matches: Vec<ModuleMatch>,
    /// One per database library, by name.
    pub verdicts: Vec<Verdict>,
}

impl DetectionReport {
    pub fn detected(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| v.detected)
    }

    pub fn verdict(&self, library: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.library_name == library)
    }
}

/// Modularizes `graph` and matches its modules against `db`.
pub fn detect(
    graph: &ProgramGraph,
    db: &SignatureDatabase,
    config: &GlobalConfig,
    exec: Execution,
) -> Result<DetectionReport> {
    config.validate()?;
    let violations = validate(graph);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    let weighted = propagate_volumes(graph, &config.propagation);
    let partition = modularize(&weighted, &config.modularizer);
    detect_partitioned(graph, &partition, db, config, exec)
}

/// Matching stage of [`detect`] for an already modularized program.
pub fn detect_partitioned(
    graph: &ProgramGraph,
    partition: &Partition,
    db: &SignatureDatabase,
    config: &GlobalConfig,
    exec: Execution,
) -> Result<DetectionReport> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let extractor =
        SignatureExtractor::new(graph, partition, &config.features, &StatisticalEmbedder)?;
    let mut signatures = extractor.extract_all(exec);
    for s in &mut signatures {
        s.apply_corpus(&db.corpus);
    }
    let det = &config.detector;
    let found: Vec<Option<ModuleMatch>> = parallel::map(exec, &signatures, |sig| {
        let ranked = rank_all(sig, db, &config.weights, det);
        let best = ranked.first()?;
        let runner_up = ranked.get(1).map_or(0.0, |c| c.breakdown.aggregate);
        let score = best.breakdown.aggregate;
        if score < det.tau_match || score - runner_up < det.delta {
            return None;
        }
        let lib = db
            .library(&best.library_name)
            .expect("candidate library exists");
        let module = &lib.modules[best.library_module_id];
        let mc = db.matching_confidence(lib, module);
        Some(ModuleMatch {
            program_module_id: sig.module_id,
            program_module_size: sig.function_count,
            library_name: best.library_name.clone(),
            library_module_id: best.library_module_id,
            breakdown: best.breakdown,
            runner_up,
            mc,
            combined: score * mc,
            duplicate: false,
        })
    });
    let mut matches: Vec<ModuleMatch> = found.into_iter().flatten().collect();

    let mut uses: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    for m in &matches {
        *uses
            .entry((m.library_name.as_str(), m.library_module_id))
            .or_default() += 1;
    }
    let repeated: Vec<bool> = matches
        .iter()
        .map(|m| uses[&(m.library_name.as_str(), m.library_module_id)] > 1)
        .collect();
    for (m, dup) in matches.iter_mut().zip(repeated) {
        m.duplicate = dup;
    }

    let verdicts = db
        .libraries
        .iter()
        .map(|lib| {
            let own = matches
                .iter()
                .filter(|m| m.library_name == lib.library_name);
            let (evidence, count) = own.fold((0.0, 0), |(e, n), m| (e + m.combined, n + 1));
            Verdict {
                library_name: lib.library_name.clone(),
                evidence,
                matched_module_count: count,
                detected: evidence >= det.theta_lib,
            }
        })
        .collect();
    Ok(DetectionReport {
        program_name: graph.program_name.clone(),
        program_module_count: partition.module_count(),
        matches,
        verdicts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Machine,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "machine" => Ok(ReportFormat::Machine),
            other => Err(Error::UnknownFormat(other.into())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReportDocument {
    version: String,
    report: DetectionReport,
}

pub fn render_report(report: &DetectionReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Machine => {
            let doc = ReportDocument {
                version: REPORT_FORMAT.into(),
                report: report.clone(),
            };
            serde_json::to_string_pretty(&doc).expect("report serialization cannot fail") + "\n"
        }
        ReportFormat::Text => render_text(report),
    }
}

fn render_text(report: &DetectionReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "program {} ({} modules)",
        report.program_name, report.program_module_count
    );
    let _ = writeln!(out, "verdicts:");
    for v in &report.verdicts {
        let _ = writeln!(
            out,
            "  {:<24} {:<12} evidence {:.4}  modules {}",
            v.library_name,
            if v.detected { "DETECTED" } else { "not-found" },
            v.evidence,
            v.matched_module_count
        );
    }
    let _ = writeln!(out, "matches:");
    for m in &report.matches {
        let _ = writeln!(
            out,
            "  module {:>4} ({:>3} fn) -> {}#{}  sim {:.4}  next {:.4}  mc {:.4}  combined {:.4}{}",
            m.program_module_id,
            m.program_module_size,
            m.library_name,
            m.library_module_id,
            m.breakdown.aggregate,
            m.runner_up,
            m.mc,
            m.combined,
            if m.duplicate { "  [duplicate]" } else { "" }
        );
    }
    out
}

pub fn parse_report(text: &str) -> Result<DetectionReport> {
    #[derive(Deserialize)]
    struct Probe {
        version: String,
    }
    let probe: Probe = serde_json::from_str(text)?;
    if probe.version != REPORT_FORMAT {
        return Err(Error::Version {
            expected: REPORT_FORMAT.into(),
            found: probe.version,
        });
    }
    let doc: ReportDocument = serde_json::from_str(text)?;
    Ok(doc.report)
}
