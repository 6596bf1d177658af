//! Library signature databases.
//!
//! On disk a database is a directory holding `corpus.json` (format version,
//! library list and constant document frequencies) plus one subdirectory
//! per library with its `signature.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::GlobalConfig;
use crate::error::{Error, Result};
use crate::features::{CorpusStats, ModuleSignature, SignatureExtractor, StatisticalEmbedder};
use crate::graph::{validate, ProgramGraph};
use crate::modularize::modularize;
use crate::parallel::Execution;
use crate::volume::propagate_volumes;

pub const DB_FORMAT: &str = "mdb-1";

const CORPUS_FILE: &str = "corpus.json";
const LIBRARY_FILE: &str = "signature.json";

/// Sidecar metadata supplied when a library is added.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryMeta {
    pub name: String,
    pub version: String,
    /// How often the library is referenced in the wild.
    pub ref_frequency: u32,
}

impl Default for LibraryMeta {
    fn default() -> Self {
        LibraryMeta {
            name: String::new(),
            version: "unknown".into(),
            ref_frequency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibrarySignature {
    pub library_name: String,
    pub version: String,
    pub ref_frequency: u32,
    pub module_count: usize,
    /// Library importance, `ln(ν + 1) / |l|`.
    pub li: f64,
    pub modules: Vec<ModuleSignature>,
}

impl LibrarySignature {
    pub fn function_count(&self) -> usize {
        self.modules.iter().map(|m| m.function_count).sum()
    }
}

pub fn library_importance(ref_frequency: u32, module_count: usize) -> f64 {
    if module_count == 0 {
        return 0.0;
    }
    (ref_frequency as f64).ln_1p() / module_count as f64
}

/// Library names double as directory names.
fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._+-".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "library name {name:?} must be non-empty and use only [A-Za-z0-9._+-]"
        )))
    }
}

/// Weights volumes, modularizes and signs every module of a library graph.
/// Constant weights are left empty; the database fills them in.
pub fn build_library_signature(
    graph: &ProgramGraph,
    meta: &LibraryMeta,
    config: &GlobalConfig,
    exec: Execution,
) -> Result<LibrarySignature> {
    check_name(&meta.name)?;
    config.validate()?;
    let violations = validate(graph);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    let weighted = propagate_volumes(graph, &config.propagation);
    let partition = modularize(&weighted, &config.modularizer);
    let extractor =
        SignatureExtractor::new(graph, &partition, &config.features, &StatisticalEmbedder)?;
    let modules = extractor.extract_all(exec);
    Ok(LibrarySignature {
        library_name: meta.name.clone(),
        version: meta.version.clone(),
        ref_frequency: meta.ref_frequency,
        module_count: modules.len(),
        li: library_importance(meta.ref_frequency, modules.len()),
        modules,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignatureDatabase {
    /// Sorted by name.
    pub libraries: Vec<LibrarySignature>,
    pub corpus: CorpusStats,
}

impl SignatureDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.module_count() == 0
    }

    /// Total number of modules over all libraries.
    pub fn module_count(&self) -> usize {
        self.libraries.iter().map(|l| l.modules.len()).sum()
    }

    pub fn function_count(&self) -> usize {
        self.libraries.iter().map(|l| l.function_count()).sum()
    }

    /// Adds a library, replacing one of the same name, and refreshes the
    /// corpus statistics and every module's constant weights.
    pub fn add_library(&mut self, library: LibrarySignature) {
        match self
            .libraries
            .binary_search_by(|l| l.library_name.as_str().cmp(&library.library_name))
        {
            Ok(i) => self.libraries[i] = library,
            Err(i) => self.libraries.insert(i, library),
        }
        self.refresh_corpus();
    }

    fn refresh_corpus(&mut self) {
        self.corpus = CorpusStats::from_signatures(self.modules().map(|(_, m)| m));
        let corpus = &self.corpus;
        for lib in &mut self.libraries {
            for m in &mut lib.modules {
                m.apply_corpus(corpus);
            }
        }
    }

    pub fn modules(&self) -> impl Iterator<Item = (&LibrarySignature, &ModuleSignature)> {
        self.libraries
            .iter()
            .flat_map(|l| l.modules.iter().map(move |m| (l, m)))
    }

    pub fn library(&self, name: &str) -> Option<&LibrarySignature> {
        self.libraries.iter().find(|l| l.library_name == name)
    }

    pub fn mean_module_size(&self) -> f64 {
        self.function_count() as f64 / self.module_count() as f64
    }

    /// Module importance of a module with `function_count` functions: its
    /// size over the mean module size of the whole database.
    pub fn module_importance(&self, function_count: usize) -> f64 {
        (function_count * self.module_count()) as f64 / self.function_count() as f64
    }

    pub fn matching_confidence(&self, library: &LibrarySignature, module: &ModuleSignature) -> f64 {
        self.module_importance(module.function_count) * library.li
    }
}

pub fn matching_confidence(module_importance: f64, library_importance: f64) -> f64 {
    module_importance * library_importance
}

#[derive(Serialize, Deserialize)]
struct CorpusDocument {
    version: String,
    libraries: Vec<String>,
    corpus: CorpusStats,
}

#[derive(Serialize, Deserialize)]
struct LibraryDocument {
    version: String,
    library: LibrarySignature,
}

fn check_version(found: &str) -> Result<()> {
    if found == DB_FORMAT {
        Ok(())
    } else {
        Err(Error::Version {
            expected: DB_FORMAT.into(),
            found: found.into(),
        })
    }
}

fn read_versioned<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    #[derive(Deserialize)]
    struct Probe {
        version: String,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: Probe = serde_json::from_str(&text)?;
    check_version(&probe.version)?;
    Ok(serde_json::from_str(&text)?)
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_db(db: &SignatureDatabase, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for lib in &db.libraries {
        check_name(&lib.library_name)?;
        let lib_dir = dir.join(&lib.library_name);
        fs::create_dir_all(&lib_dir).map_err(|e| Error::io(&lib_dir, e))?;
        let doc = LibraryDocument {
            version: DB_FORMAT.into(),
            library: lib.clone(),
        };
        write(
            &lib_dir.join(LIBRARY_FILE),
            serde_json::to_string_pretty(&doc)?,
        )?;
    }
    let doc = CorpusDocument {
        version: DB_FORMAT.into(),
        libraries: db
            .libraries
            .iter()
            .map(|l| l.library_name.clone())
            .collect(),
        corpus: db.corpus.clone(),
    };
    write(&dir.join(CORPUS_FILE), serde_json::to_string_pretty(&doc)?)
}

pub fn load_db(dir: impl AsRef<Path>) -> Result<SignatureDatabase> {
    let dir = dir.as_ref();
    let corpus: CorpusDocument = read_versioned(&dir.join(CORPUS_FILE))?;
    let mut libraries = Vec::with_capacity(corpus.libraries.len());
    for name in &corpus.libraries {
        check_name(name)?;
        let doc: LibraryDocument = read_versioned(&dir.join(name).join(LIBRARY_FILE))?;
        if doc.library.library_name != *name {
            return Err(Error::Corrupt(format!(
                "{name}/{LIBRARY_FILE} holds library {:?}",
                doc.library.library_name
            )));
        }
        if doc.library.module_count != doc.library.modules.len() {
            return Err(Error::Corrupt(format!(
                "{name}: module count does not match"
            )));
        }
        libraries.push(doc.library);
    }
    let db = SignatureDatabase {
        libraries,
        corpus: corpus.corpus,
    };
    if db.corpus.module_count != db.module_count() {
        return Err(Error::Corrupt(format!(
            "corpus counts {} modules but libraries hold {}",
            db.corpus.module_count,
            db.module_count()
        )));
    }
    Ok(db)
}
