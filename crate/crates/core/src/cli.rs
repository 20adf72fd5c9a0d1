//! Command-line interface: `compile`, `infer`, `evaluate`, `serve-traces`
//! and `gen-fixtures`.
//!
//! Exit codes: 0 success, 2 usage error, 3 artifact/model incompatibility,
//! 4 any other failure.

use std::ffi::OsString;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use crate::compiler::{compile, seeds, CompileConfig, InProcessSource, TraceSource};
use crate::evaluate::{
    generate_fixtures, read_fixtures, read_observations, sweep, write_fixtures, write_sweep_csv, Extractor, SweepConfig,
};
use crate::models::ModelSpec;
use crate::neural::{ArtifactError, ProposalArtifact};
use crate::runtime::ModelProgram;
use crate::sis::{run_sis, Proposal, SisError};
use crate::wire::{serve_traces, RemoteTraceSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;
pub const EXIT_FAILURE: i32 = 4;

/// Environment variable naming the trace-server endpoint (`host:port`).
pub const ENDPOINT_ENV: &str = "INFCOMP_ENDPOINT";

#[derive(Debug, Parser)]
#[command(
    name = "infcomp",
    version,
    about = "Compile neural proposals for probabilistic programs and run importance sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model name: conjugate, two-coin, gmm, gmm-k<N>, geometric.
    #[arg(long)]
    pub model: String,
    /// TOML file with `[model]` parameters and `[compile]` settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a proposal artifact.
    Compile {
        #[command(flatten)]
        model: ModelArgs,
        /// Where to write the artifact.
        #[arg(long)]
        artifact: PathBuf,
        /// Training-log CSV (default: artifact path with `.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        minibatch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        hidden_size: Option<usize>,
        /// Fetch traces from a trace server instead of generating them here.
        #[arg(long, env = ENDPOINT_ENV)]
        endpoint: Option<String>,
    },
    /// Run importance sampling on one dataset.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Observation CSV (`y` column, or `x,y` for mixtures).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ProposalKind::Artifact)]
        proposal: ProposalKind,
        #[arg(long, default_value_t = 1000)]
        particles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-particle CSV.
        #[arg(long)]
        particles_out: PathBuf,
        /// Summary CSV with ESS, log evidence and posterior means.
        #[arg(long)]
        summary_out: PathBuf,
    },
    /// Compare prior and artifact proposals over a fixture set.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        artifact: PathBuf,
        /// Directory written by `gen-fixtures`.
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
        particles: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Extractor::HighestWeight)]
        extractor: Extractor,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve unconstrained traces to a remote trainer.
    ServeTraces {
        #[command(flatten)]
        model: ModelArgs,
        /// Address to bind, `host:port`.
        #[arg(long, env = ENDPOINT_ENV)]
        listen: String,
        /// Exit after this many client sessions.
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Write seeded datasets drawn from the model.
    GenFixtures {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProposalKind {
    Prior,
    Artifact,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<toml::Table>,
    compile: CompileConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Incompatible(String),
    #[error(transparent)]
    Failure(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Incompatible(_) => EXIT_INCOMPATIBLE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

/// Model named on the command line, with parameters from the config file's
/// `[model]` table layered over its defaults.
fn resolve_model(name: &str, table: Option<&toml::Table>) -> Result<ModelSpec, CliError> {
    let base = ModelSpec::from_name(name).map_err(|e| CliError::Usage(e.to_string()))?;
    let Some(table) = table else {
        base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        return Ok(base);
    };
    let mut merged = toml::Table::try_from(&base).map_err(|e| CliError::Failure(e.into()))?;
    for (k, v) in table {
        if k == "name" {
            if v.as_str() != Some(base.name()) {
                return Err(CliError::Usage(format!("config [model] name {v} does not match --model {name}")));
            }
            continue;
        }
        merged.insert(k.clone(), v.clone());
    }
    let spec: ModelSpec = merged.try_into().map_err(|e| CliError::Usage(format!("invalid [model] table: {e}")))?;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

fn load_artifact(path: &Path, model: &dyn ModelProgram) -> Result<ProposalArtifact, CliError> {
    ProposalArtifact::load(path, Some(&model.id())).map_err(|e| match e {
        ArtifactError::ModelMismatch { .. } | ArtifactError::Version { .. } => CliError::Incompatible(e.to_string()),
        other => CliError::Failure(anyhow::Error::new(other).context(format!("loading {}", path.display()))),
    })
}

fn sis_error(e: SisError) -> CliError {
    match e {
        SisError::ModelMismatch { .. } => CliError::Incompatible(e.to_string()),
        other => CliError::Failure(other.into()),
    }
}

/// Parses arguments and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute_command(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}

pub fn execute_command(command: Command) -> Result<(), CliError> {
    match command {
        Command::Compile {
            model,
            artifact,
            log,
            budget,
            seed,
            minibatch_size,
            learning_rate,
            hidden_size,
            endpoint,
        } => {
            let file = load_file_config(model.config.as_deref())?;
            let spec = resolve_model(&model.model, file.model.as_ref())?;
            let mut config = file.compile;
            if let Some(b) = budget {
                config.budget = b;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(m) = minibatch_size {
                config.minibatch_size = m;
            }
            if let Some(lr) = learning_rate {
                config.optimizer.learning_rate = lr;
            }
            if let Some(h) = hidden_size {
                config.arch.hidden_size = h;
            }
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let program = spec.build().map_err(|e| CliError::Usage(e.to_string()))?;
            let train_seed = seeds::derive(config.seed, seeds::TRAIN);
            let mut source: Box<dyn TraceSource + '_> = match endpoint {
                Some(ep) => {
                    info!("fetching traces from {ep}");
                    Box::new(RemoteTraceSource::new(ep, program.id(), train_seed))
                }
                None => Box::new(InProcessSource::new(program.as_ref(), train_seed)),
            };
            let (art, training_log) =
                compile(program.as_ref(), &config, source.as_mut()).context("compilation failed")?;
            drop(source);
            art.save(&artifact).with_context(|| format!("writing {}", artifact.display()))?;
            let log_path = log.unwrap_or_else(|| artifact.with_extension("log.csv"));
            let f = fs::File::create(&log_path).with_context(|| format!("writing {}", log_path.display()))?;
            training_log.write_csv(f).context("writing training log")?;
            info!("wrote {} and {}", artifact.display(), log_path.display());
            Ok(())
        }
        Command::Infer { model, data, artifact, proposal, particles, seed, particles_out, summary_out } => {
            let file = load_file_config(model.config.as_deref())?;
            let spec = resolve_model(&model.model, file.model.as_ref())?;
            let program = spec.build().map_err(|e| CliError::Usage(e.to_string()))?;
            if particles == 0 {
                return Err(CliError::Usage("--particles must be positive".into()));
            }
            let obs = read_observations(&data, program.observation_kind())?;
            if obs.len() != program.observe_count() {
                return Err(CliError::Usage(format!(
                    "{} has {} observations, model {} expects {}",
                    data.display(),
                    obs.len(),
                    program.id(),
                    program.observe_count()
                )));
            }
            let loaded = match proposal {
                ProposalKind::Prior => None,
                ProposalKind::Artifact => {
                    let path = artifact
                        .as_deref()
                        .ok_or_else(|| CliError::Usage("--proposal artifact requires --artifact".into()))?;
                    Some(load_artifact(path, program.as_ref())?)
                }
            };
            let prop = loaded.as_ref().map_or(Proposal::Prior, Proposal::Artifact);
            let ps = run_sis(program.as_ref(), &obs, particles, prop, seed).map_err(sis_error)?;
            let names = program.summary_names();
            let zeta = |t: &crate::trace::Trace| program.summarize(t);
            let f = fs::File::create(&particles_out).with_context(|| format!("writing {}", particles_out.display()))?;
            ps.write_particles_csv(f, &names, zeta).context("writing particle CSV")?;
            let f = fs::File::create(&summary_out).with_context(|| format!("writing {}", summary_out.display()))?;
            ps.write_summary_csv(f, &names, zeta).context("writing summary CSV")?;
            Ok(())
        }
        Command::Evaluate { model, artifact, fixtures, particles, repeats, seed, extractor, out } => {
            let file = load_file_config(model.config.as_deref())?;
            let spec = resolve_model(&model.model, file.model.as_ref())?;
            let program = spec.build().map_err(|e| CliError::Usage(e.to_string()))?;
            if particles.is_empty() || particles.contains(&0) || repeats == 0 {
                return Err(CliError::Usage("particle counts and --repeats must be positive".into()));
            }
            let art = load_artifact(&artifact, program.as_ref())?;
            let set = read_fixtures(&fixtures, program.as_ref())?;
            let config = SweepConfig { particle_counts: particles, repeats, seed, extractor };
            let rows = sweep(&spec, &art, &set, &config)?;
            let f = fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
            write_sweep_csv(f, &rows)?;
            info!("evaluation uses the {extractor:?} extractor for mixture means");
            Ok(())
        }
        Command::ServeTraces { model, listen, max_connections } => {
            let file = load_file_config(model.config.as_deref())?;
            let spec = resolve_model(&model.model, file.model.as_ref())?;
            let program = spec.build().map_err(|e| CliError::Usage(e.to_string()))?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            info!("serving {} on {}", program.id(), listener.local_addr().context("local address")?);
            serve_traces(&listener, program.as_ref(), max_connections).context("trace server failed")?;
            Ok(())
        }
        Command::GenFixtures { model, count, seed, out } => {
            let file = load_file_config(model.config.as_deref())?;
            let spec = resolve_model(&model.model, file.model.as_ref())?;
            let program = spec.build().map_err(|e| CliError::Usage(e.to_string()))?;
            if count == 0 {
                return Err(CliError::Usage("--count must be positive".into()));
            }
            let fixtures = generate_fixtures(&spec, count, seed)?;
            write_fixtures(&out, program.as_ref(), &fixtures)?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_table_merges_over_named_defaults() {
        let table: toml::Table = toml::from_str("points = 50\nbins = 10\n").unwrap();
        match resolve_model("gmm-k3", Some(&table)).unwrap() {
            ModelSpec::Gmm(g) => {
                assert_eq!((g.points, g.bins, g.fixed_clusters), (50, 10, Some(3)));
            }
            other => panic!("{other:?}"),
        }
        let wrong: toml::Table = toml::from_str("name = \"conjugate\"\n").unwrap();
        assert!(matches!(resolve_model("gmm", Some(&wrong)), Err(CliError::Usage(_))));
        let bad: toml::Table = toml::from_str("observations = 0\n").unwrap();
        assert!(matches!(resolve_model("conjugate", Some(&bad)), Err(CliError::Usage(_))));
    }

    #[test]
    fn missing_model_is_usage_error() {
        assert_eq!(run(["infcomp", "compile", "--artifact", "x.bin"]), EXIT_USAGE);
        assert_eq!(run(["infcomp", "compile", "--model", "nope", "--artifact", "x.bin"]), EXIT_USAGE);
    }
}
