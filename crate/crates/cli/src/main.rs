use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use modsift_core::config::GlobalConfig;
use modsift_core::db::{build_library_signature, load_db, save_db, LibraryMeta, SignatureDatabase};
use modsift_core::detect::{detect, render_report, ReportFormat};
use modsift_core::export::{export, self_check, ExportSession};
use modsift_core::features::{ModuleSignature, SignatureExtractor, StatisticalEmbedder};
use modsift_core::fixtures::{self, LibraryParams, PlantedParams};
use modsift_core::graph::{load_program_graph_file, Partition, PartitionDocument, ProgramGraph};
use modsift_core::metrics::{MqNormalization, QualityReport};
use modsift_core::modularize::{modularize, modularize_traced};
use modsift_core::parallel::Execution;
use modsift_core::similarity::aggregate;
use modsift_core::volume::{propagate_volumes, propagate_volumes_traced};
use modsift_core::Error;

const CONFIG_ENV: &str = "MODSIFT_CONFIG";

#[derive(Parser)]
#[command(
    name = "modsift",
    version,
    about = "Modularize binaries' call graphs and detect third-party libraries"
)]
struct Cli {
    /// Configuration document (JSON). Defaults to $MODSIFT_CONFIG when set.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a program graph into modules and print the partition document.
    Modularize {
        graph: PathBuf,
        #[command(flatten)]
        pipeline: PipelineFlags,
        /// Also write every applied move and volume elimination step here.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
    },
    /// Print quality metrics of a partition (computed when not given).
    Metrics {
        graph: PathBuf,
        #[arg(long, value_name = "PATH")]
        partition: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Sign a library graph and add it to a signature database.
    BuildDb {
        graph: PathBuf,
        #[arg(long)]
        lib_name: String,
        #[arg(long, default_value = "unknown")]
        lib_version: String,
        /// How often the library is referenced; raises its importance.
        #[arg(long, default_value_t = 1)]
        ref_frequency: u32,
        /// Database directory, created if missing.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Match a program against a signature database.
    Detect {
        graph: PathBuf,
        #[arg(long, value_name = "DIR")]
        db: PathBuf,
        #[arg(long, default_value = "text", value_parser = ["text", "machine"])]
        report: String,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Compare against every database module.
        #[arg(long)]
        no_prefilter: bool,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Print the signature document of one module of a program.
    Sign {
        graph: PathBuf,
        #[arg(long)]
        module: usize,
        #[arg(long, value_name = "PATH")]
        partition: Option<PathBuf>,
        /// Weight constants with this database's corpus statistics.
        #[arg(long, value_name = "DIR")]
        db: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Compare two module signature documents channel by channel.
    CompareModules {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Convert an exported disassembler session into a program graph.
    Export {
        session: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(short, long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Write a deterministic synthetic program graph.
    GenFixture {
        #[arg(value_enum)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        block_size: Option<usize>,
        #[arg(long)]
        p_in: Option<f64>,
        #[arg(long)]
        p_out: Option<f64>,
        /// Library name for library-with-noise.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        modules: Option<usize>,
        /// Noise functions appended to library-with-noise.
        #[arg(long, default_value_t = 50)]
        noise: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Planted,
    CliquePair,
    LibraryWithNoise,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalization {
    Literal,
    Standard,
}

/// Overrides of the propagation and modularization settings.
#[derive(Args, Default)]
struct PipelineFlags {
    /// Propagation normalization factor.
    #[arg(long)]
    c: Option<f64>,
    /// Dispersion limit is the function count divided by this.
    #[arg(long)]
    ds_divisor: Option<u32>,
    #[arg(long)]
    bias_cap: Option<f64>,
    /// Disable both the locality and the entry bias.
    #[arg(long)]
    no_biases: bool,
    #[arg(long)]
    no_locality: bool,
    #[arg(long)]
    no_entry_bias: bool,
    #[arg(long, value_enum)]
    normalization: Option<Normalization>,
    #[arg(long)]
    max_passes: Option<usize>,
}

impl PipelineFlags {
    fn apply(&self, config: &mut GlobalConfig) {
        let m = &mut config.modularizer;
        if let Some(c) = self.c {
            config.propagation.c = c;
        }
        if let Some(d) = self.ds_divisor {
            m.ds_limit_divisor = d;
        }
        if let Some(cap) = self.bias_cap {
            m.bias_cap = cap;
        }
        if self.no_biases || self.no_locality {
            m.locality_bias = false;
        }
        if self.no_biases || self.no_entry_bias {
            m.entry_bias = false;
        }
        if let Some(n) = self.normalization {
            m.normalization = match n {
                Normalization::Literal => MqNormalization::Literal,
                Normalization::Standard => MqNormalization::Standard,
            };
        }
        if self.max_passes.is_some() {
            m.max_passes = self.max_passes;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe (`| head`) is not a failure.
        Err(e)
            if e.downcast_ref::<io::Error>()
                .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn base_config(cli: &Cli) -> Result<GlobalConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    match path {
        // Validated only after flags are applied.
        Some(p) => {
            let text = fs::read_to_string(&p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(GlobalConfig::default()),
    }
}

fn resolved(mut config: GlobalConfig, pipeline: &PipelineFlags) -> Result<GlobalConfig> {
    pipeline.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn load_graph(path: &Path) -> Result<ProgramGraph> {
    load_program_graph_file(path).with_context(|| format!("reading graph {}", path.display()))
}

fn load_partition(path: &Path, graph: &ProgramGraph) -> Result<Partition> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading partition {}", path.display()))?;
    let doc: PartitionDocument = serde_json::from_str(&text).map_err(Error::from)?;
    Ok(Partition::from_document(&doc, graph)?)
}

fn print_text(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print_text(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let base = base_config(&cli)?;
    match &cli.command {
        Command::Modularize {
            graph,
            pipeline,
            trace,
        } => {
            let config = resolved(base, pipeline)?;
            let graph = load_graph(graph)?;
            let (weighted, eliminations) = propagate_volumes_traced(&graph, &config.propagation);
            let partition = match trace {
                Some(path) => {
                    let (partition, moves) = modularize_traced(&weighted, &config.modularizer);
                    let mut text = String::new();
                    for e in &eliminations {
                        let ids: Vec<&str> = e
                            .removed
                            .iter()
                            .map(|&v| graph.functions[v].id.as_str())
                            .collect();
                        let kind = if e.condensed { "condense" } else { "remove" };
                        text += &format!("volume step {} {kind} {}\n", e.step, ids.join(","));
                    }
                    for m in &moves {
                        let ids: Vec<&str> = m
                            .moved
                            .iter()
                            .map(|&v| graph.functions[v].id.as_str())
                            .collect();
                        let target = m.joined.map_or("<new>", |v| graph.functions[v].id.as_str());
                        text += &format!(
                            "move level {} [{}] -> {target} dq' {:.6e} bl {:.4} be {:.4} dq {:.6e}\n",
                            m.level,
                            ids.join(","),
                            m.delta_q_prime,
                            m.locality_bias,
                            m.entry_bias,
                            m.delta_q
                        );
                    }
                    fs::write(path, text)
                        .with_context(|| format!("writing trace {}", path.display()))?;
                    partition
                }
                None => modularize(&weighted, &config.modularizer),
            };
            print_json(&partition.to_document(&graph))?;
        }
        Command::Metrics {
            graph,
            partition,
            json,
            pipeline,
        } => {
            let config = resolved(base, pipeline)?;
            let graph = load_graph(graph)?;
            let weighted = propagate_volumes(&graph, &config.propagation);
            let partition = match partition {
                Some(p) => load_partition(p, &graph)?,
                None => modularize(&weighted, &config.modularizer),
            };
            let report = QualityReport::compute(&weighted, &partition);
            if *json {
                print_json(&report)?;
            } else {
                print_text(&format!("{report}\n"))?;
            }
        }
        Command::BuildDb {
            graph,
            lib_name,
            lib_version,
            ref_frequency,
            out,
            pipeline,
        } => {
            let config = resolved(base, pipeline)?;
            let graph = load_graph(graph)?;
            let meta = LibraryMeta {
                name: lib_name.clone(),
                version: lib_version.clone(),
                ref_frequency: *ref_frequency,
            };
            let mut db = if out.join("corpus.json").exists() {
                load_db(out).with_context(|| format!("loading database {}", out.display()))?
            } else {
                SignatureDatabase::new()
            };
            let library = build_library_signature(&graph, &meta, &config, exec)?;
            eprintln!(
                "{}: {} functions in {} modules, LI {:.6}",
                library.library_name,
                library.function_count(),
                library.module_count,
                library.li
            );
            db.add_library(library);
            save_db(&db, out).with_context(|| format!("writing database {}", out.display()))?;
        }
        Command::Detect {
            graph,
            db,
            report,
            tau,
            delta,
            theta,
            top_k,
            no_prefilter,
            pipeline,
        } => {
            let mut config = base;
            let d = &mut config.detector;
            d.tau_match = tau.unwrap_or(d.tau_match);
            d.delta = delta.unwrap_or(d.delta);
            d.theta_lib = theta.unwrap_or(d.theta_lib);
            d.top_k = top_k.unwrap_or(d.top_k);
            if *no_prefilter {
                d.prefilter = false;
            }
            let config = resolved(config, pipeline)?;
            let format: ReportFormat = report.parse()?;
            let graph = load_graph(graph)?;
            let db = load_db(db).with_context(|| format!("loading database {}", db.display()))?;
            let result = detect(&graph, &db, &config, exec)?;
            print_text(&render_report(&result, format))?;
        }
        Command::Sign {
            graph,
            module,
            partition,
            db,
            pipeline,
        } => {
            let config = resolved(base, pipeline)?;
            let graph = load_graph(graph)?;
            let partition = match partition {
                Some(p) => load_partition(p, &graph)?,
                None => modularize(
                    &propagate_volumes(&graph, &config.propagation),
                    &config.modularizer,
                ),
            };
            let extractor = SignatureExtractor::new(
                &graph,
                &partition,
                &config.features,
                &StatisticalEmbedder,
            )?;
            let mut signature = extractor.extract(*module)?;
            if let Some(dir) = db {
                let db =
                    load_db(dir).with_context(|| format!("loading database {}", dir.display()))?;
                signature.apply_corpus(&db.corpus);
            }
            print_text(&(signature.to_json() + "\n"))?;
        }
        Command::CompareModules { a, b, json } => {
            let read = |p: &PathBuf| -> Result<ModuleSignature> {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading signature {}", p.display()))?;
                ModuleSignature::from_json(&text)
                    .with_context(|| format!("parsing {}", p.display()))
            };
            let (a, b) = (read(a)?, read(b)?);
            base.weights.validate()?;
            let breakdown = aggregate(&a, &b, &base.weights);
            if *json {
                print_json(&breakdown)?;
            } else {
                print_text(&format!("{breakdown}\n"))?;
            }
        }
        Command::Export { session, out } => {
            let text = fs::read_to_string(session)
                .with_context(|| format!("reading session {}", session.display()))?;
            let session: ExportSession = serde_json::from_str(&text).map_err(Error::from)?;
            let json = export(&session)?.to_json();
            self_check(&json)?;
            match out {
                Some(path) => fs::write(path, json + "\n")
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print_text(&(json + "\n"))?,
            }
        }
        Command::GenFixture {
            kind,
            seed,
            blocks,
            block_size,
            p_in,
            p_out,
            name,
            modules,
            noise,
        } => {
            let graph = match kind {
                FixtureKind::Planted => {
                    let d = PlantedParams::default();
                    let params = PlantedParams {
                        blocks: blocks.unwrap_or(d.blocks),
                        block_size: block_size.unwrap_or(d.block_size),
                        p_in: p_in.unwrap_or(d.p_in),
                        p_out: p_out.unwrap_or(d.p_out),
                    };
                    fixtures::planted_partition(&params, *seed)?.graph
                }
                FixtureKind::CliquePair => fixtures::clique_pair(),
                FixtureKind::LibraryWithNoise => {
                    let d = LibraryParams::default();
                    let params = LibraryParams {
                        name: name.clone().unwrap_or(d.name.clone()),
                        modules: modules.unwrap_or(d.modules),
                        ..d
                    };
                    let mut graph = fixtures::library(&params, *seed)?.graph;
                    fixtures::append_noise(&mut graph, *noise, *seed);
                    graph
                }
            };
            if graph.is_empty() {
                bail!("fixture parameters produce an empty graph");
            }
            print_text(&(graph.to_json() + "\n"))?;
        }
    }
    Ok(())
}
