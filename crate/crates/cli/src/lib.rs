//! Command implementations behind the `trierank` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use trierank::backend::remote::RemoteFactory;
use trierank::backend::{BackendFactory, MockBackend, MockSpec, RemoteServer};
use trierank::eval::{self, Clock, Dataset, EvalConfig, EvalReport};
use trierank::strategy::{
    PointInput, RankingStrategy, StrategyConfig, StrategyError, StrategyRegistry,
};
use trierank::{TokenTables, Vocabulary};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl From<StrategyError> for CliError {
    fn from(e: StrategyError) -> Self {
        if e.is_backend() {
            CliError::Backend(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

fn config_err(what: impl std::fmt::Display) -> CliError {
    CliError::Config(what.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "trierank",
    version,
    about = "Rank identifier completions with a language model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank the candidates of one completion point.
    Rank(RankArgs),
    /// Evaluate strategies over a JSONL dataset.
    Eval(DatasetArgs),
    /// Tree-manipulation statistics of the single-pass ranker.
    Stats(DatasetArgs),
    /// Per-metric deltas between two report files.
    Compare(CompareArgs),
    /// Serve a backend over the length-prefixed JSON protocol.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockArg {
    Wall,
    Virtual,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON config file; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mock:<path|seed> or remote:<host:port>
    #[arg(long)]
    pub backend: Option<String>,
    /// Vocabulary file: one `<id>\t<escaped text>` per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Strategy name; repeatable.
    #[arg(long = "strategy")]
    pub strategies: Vec<String>,
    /// Length-penalty exponent for beamall.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Query the model unmasked (ablation mode).
    #[arg(long)]
    pub unconstrained: bool,
    #[arg(long)]
    pub no_early_stop: bool,
    /// Do not admit identifier-ending tokens at terminal nodes.
    #[arg(long)]
    pub no_termination: bool,
    /// Build trees from the backend's own tokenization when it offers one.
    #[arg(long)]
    pub upstream_tokenizer: bool,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub first_token_ms: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ranking-time clock; defaults to virtual for mock backends.
    #[arg(long, value_enum)]
    pub clock: Option<ClockArg>,
    /// Cost of one forward pass under the virtual clock.
    #[arg(long)]
    pub pass_ms: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// File holding the code before the cursor.
    #[arg(long, conflicts_with = "prefix")]
    pub prefix_file: Option<PathBuf>,
    /// Code before the cursor, inline.
    #[arg(long)]
    pub prefix: Option<String>,
    /// File with one candidate per line.
    #[arg(long)]
    pub candidates_file: Option<PathBuf>,
    pub candidates: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    pub dataset: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub before: PathBuf,
    pub after: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
}

/// Config file contents. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub backend: Option<String>,
    pub vocab: Option<PathBuf>,
    pub strategies: Option<Vec<String>>,
    pub alpha: Option<f64>,
    pub max_steps: Option<usize>,
    pub constrained: Option<bool>,
    pub early_stop: Option<bool>,
    pub include_termination_mass: Option<bool>,
    pub upstream_tokenizer: Option<bool>,
    pub runs: Option<usize>,
    pub first_token_ms: Option<f64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub clock: Option<ClockArg>,
    pub pass_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    MockSeed(u64),
    MockFile(PathBuf),
    Remote(String),
}

impl BackendSpec {
    pub fn parse(spec: &str, base: Option<&Path>) -> Result<Self, CliError> {
        if let Some(rest) = spec.strip_prefix("mock:") {
            if rest.is_empty() {
                return Err(config_err("mock backend needs a seed or a file path"));
            }
            return Ok(match rest.parse::<u64>() {
                Ok(seed) => BackendSpec::MockSeed(seed),
                Err(_) => BackendSpec::MockFile(resolve(base, PathBuf::from(rest))),
            });
        }
        if let Some(rest) = spec.strip_prefix("remote:") {
            if rest.is_empty() {
                return Err(config_err("remote backend needs an endpoint"));
            }
            return Ok(BackendSpec::Remote(rest.to_string()));
        }
        Err(config_err(format!(
            "unrecognized backend {spec:?}; expected mock:<path|seed> or remote:<host:port>"
        )))
    }
}

fn resolve(base: Option<&Path>, path: PathBuf) -> PathBuf {
    match base {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path,
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: BackendSpec,
    pub vocab: PathBuf,
    pub strategies: Vec<String>,
    pub eval: EvalConfig,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_args(args: &CommonArgs, default_strategy: &str) -> Result<Self, CliError> {
        let (file, base) = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                let file: ConfigFile = serde_json::from_str(&text)
                    .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                (file, path.parent().map(Path::to_path_buf))
            }
            None => (ConfigFile::default(), None),
        };
        let base = base.as_deref();

        let backend = match (&args.backend, &file.backend) {
            (Some(b), _) => BackendSpec::parse(b, None)?,
            (None, Some(b)) => BackendSpec::parse(b, base)?,
            (None, None) => {
                return Err(config_err(
                    "no backend given (--backend mock:<path|seed> | remote:<endpoint>)",
                ))
            }
        };
        let vocab = match (&args.vocab, &file.vocab) {
            (Some(v), _) => v.clone(),
            (None, Some(v)) => resolve(base, v.clone()),
            (None, None) => return Err(config_err("no vocabulary given (--vocab)")),
        };
        let strategies = if !args.strategies.is_empty() {
            args.strategies.clone()
        } else {
            file.strategies
                .clone()
                .unwrap_or_else(|| vec![default_strategy.to_string()])
        };
        if strategies.is_empty() {
            return Err(config_err("at least one strategy is required"));
        }

        let mut strategy = StrategyConfig::default();
        let decode = &mut strategy.decode;
        decode.constrained = !args.unconstrained && file.constrained.unwrap_or(decode.constrained);
        decode.early_stop = !args.no_early_stop && file.early_stop.unwrap_or(decode.early_stop);
        decode.include_termination_mass = !args.no_termination
            && file
                .include_termination_mass
                .unwrap_or(decode.include_termination_mass);
        decode.upstream_tokenizer =
            args.upstream_tokenizer || file.upstream_tokenizer.unwrap_or(decode.upstream_tokenizer);
        decode.max_steps = args
            .max_steps
            .or(file.max_steps)
            .unwrap_or(decode.max_steps);
        if decode.max_steps == 0 {
            return Err(config_err("--max-steps must be at least 1"));
        }
        strategy.alpha = args.alpha.or(file.alpha).unwrap_or(strategy.alpha);
        if !(strategy.alpha.is_finite() && strategy.alpha >= 0.0) {
            return Err(config_err("--alpha must be a non-negative number"));
        }

        let defaults = EvalConfig::default();
        let runs = args.runs.or(file.runs).unwrap_or(defaults.runs);
        if runs == 0 {
            return Err(config_err("--runs must be at least 1"));
        }
        let jobs = args.jobs.or(file.jobs).unwrap_or(defaults.jobs);
        if jobs == 0 {
            return Err(config_err("--jobs must be at least 1"));
        }
        let first_token_ms = args
            .first_token_ms
            .or(file.first_token_ms)
            .unwrap_or(defaults.first_token_ms);
        let pass_ms = args.pass_ms.or(file.pass_ms).unwrap_or(25.0);
        let clock = match args.clock.or(file.clock) {
            Some(ClockArg::Wall) => Clock::Wall,
            Some(ClockArg::Virtual) => Clock::Virtual { pass_ms },
            None => match backend {
                BackendSpec::Remote(_) => Clock::Wall,
                _ => Clock::Virtual { pass_ms },
            },
        };
        let out = args
            .out
            .clone()
            .or_else(|| file.out.clone().map(|o| resolve(base, o)));
        Ok(Self {
            backend,
            vocab,
            strategies,
            eval: EvalConfig {
                strategy,
                runs,
                first_token_ms,
                jobs,
                clock,
            },
            out,
        })
    }

    pub fn load_tables(&self) -> Result<TokenTables, CliError> {
        let vocab = Vocabulary::load(&self.vocab)
            .map_err(|e| config_err(format!("{}: {e}", self.vocab.display())))?;
        Ok(TokenTables::new(vocab))
    }

    pub fn factory(&self, vocab: &Vocabulary) -> Result<Arc<dyn BackendFactory>, CliError> {
        Ok(match &self.backend {
            BackendSpec::MockSeed(seed) => {
                Arc::new(MockBackend::new(MockSpec::seeded(*seed, vocab.len())))
            }
            BackendSpec::MockFile(path) => {
                Arc::new(MockBackend::from_file(path, vocab).map_err(config_err)?)
            }
            BackendSpec::Remote(endpoint) => Arc::new(RemoteFactory {
                endpoint: endpoint.clone(),
            }),
        })
    }

    pub fn resolve_strategies(&self) -> Result<Vec<Arc<dyn RankingStrategy>>, CliError> {
        let registry = StrategyRegistry::with_defaults();
        self.strategies
            .iter()
            .map(|name| registry.resolve(name).map_err(CliError::from))
            .collect()
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Rank(args) => cmd_rank(&args, out),
        Command::Eval(args) => cmd_eval(&args, out),
        Command::Stats(args) => cmd_stats(&args, out),
        Command::Compare(args) => cmd_compare(&args, out),
        Command::Serve(args) => cmd_serve(&args, out),
    }
}

fn io_err(e: std::io::Error) -> CliError {
    config_err(format!("output: {e}"))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

pub fn cmd_rank(args: &RankArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = RunConfig::from_args(&args.common, "treeranker")?;
    let strategies = config.resolve_strategies()?;
    let tables = config.load_tables()?;
    let prefix_text = match (&args.prefix_file, &args.prefix) {
        (Some(path), _) => read_text(path)?,
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(config_err("no prefix given (--prefix-file or --prefix)")),
    };
    let mut candidates = args.candidates.clone();
    if let Some(path) = &args.candidates_file {
        candidates.extend(
            read_text(path)?
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        );
    }
    if candidates.is_empty() {
        return Err(config_err("no candidates given"));
    }
    let prefix = tables
        .vocab
        .tokenize(&prefix_text)
        .map_err(|e| config_err(format!("prefix: {e}")))?;
    let factory = config.factory(&tables.vocab)?;
    let baselines = Default::default();
    let point = PointInput {
        prefix: &prefix,
        candidates: &candidates,
        baselines: &baselines,
    };
    let mut outputs = Vec::new();
    for strategy in &strategies {
        let mut backend = factory
            .open()
            .map_err(|e| CliError::Backend(e.to_string()))?;
        outputs.push(strategy.rank(&point, backend.as_mut(), &tables, &config.eval.strategy)?);
    }
    let json = if outputs.len() == 1 {
        serde_json::to_string_pretty(&outputs[0])
    } else {
        serde_json::to_string_pretty(&outputs)
    }
    .expect("serializable");
    if let Some(path) = &config.out {
        fs::write(path, format!("{json}\n")).map_err(io_err)?;
    }
    writeln!(out, "{json}").map_err(io_err)
}

fn run_dataset(
    args: &DatasetArgs,
    default_strategy: &str,
) -> Result<(RunConfig, EvalReport), CliError> {
    let config = RunConfig::from_args(&args.common, default_strategy)?;
    let strategies = config.resolve_strategies()?;
    let tables = config.load_tables()?;
    let dataset = Dataset::load(&args.dataset)
        .map_err(|e| config_err(format!("{}: {e}", args.dataset.display())))?;
    if dataset.points.is_empty() {
        let mut msg = format!("{}: dataset has no valid points", args.dataset.display());
        for issue in dataset.issues() {
            msg.push_str(&format!("\n  {issue}"));
        }
        return Err(config_err(msg));
    }
    let factory = config.factory(&tables.vocab)?;
    let report = eval::evaluate_all(
        &strategies,
        &dataset,
        factory.as_ref(),
        &tables,
        &config.eval,
    )
    .map_err(config_err)?;
    Ok((config, report))
}

fn write_report(config: &RunConfig, report: &EvalReport, table: &str) -> Result<(), CliError> {
    if let Some(path) = &config.out {
        let json = serde_json::to_string_pretty(report).expect("serializable");
        fs::write(path, format!("{json}\n")).map_err(io_err)?;
        fs::write(path.with_extension("txt"), table).map_err(io_err)?;
    }
    Ok(())
}

/// Nonzero exit when any strategy had failing points.
fn check_aborted(report: &EvalReport) -> Result<(), CliError> {
    let failed: Vec<&eval::StrategyReport> =
        report.strategies.iter().filter(|s| s.aborted).collect();
    if failed.is_empty() {
        return Ok(());
    }
    let backend = failed.iter().any(|s| s.failures.iter().any(|f| f.backend));
    let mut msg = String::from("some strategies aborted:");
    for s in &failed {
        let first = &s.failures[0];
        msg.push_str(&format!(
            "\n  {}: {} failed point(s), first {}: {}",
            s.strategy,
            s.failures.len(),
            first.id,
            first.error
        ));
    }
    Err(if backend {
        CliError::Backend(msg)
    } else {
        CliError::Config(msg)
    })
}

pub fn cmd_eval(args: &DatasetArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (config, report) = run_dataset(args, "treeranker")?;
    let table = eval::render_table(&report);
    write_report(&config, &report, &table)?;
    write!(out, "{table}").map_err(io_err)?;
    check_aborted(&report)
}

pub fn cmd_stats(args: &DatasetArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (config, report) = run_dataset(args, "treeranker")?;
    if report
        .strategies
        .iter()
        .all(|s| s.tree.is_none() && !s.aborted)
    {
        return Err(config_err(
            "none of the strategies reports tree statistics (use treeranker)",
        ));
    }
    let table = eval::render_tree_stats(&report);
    write_report(&config, &report, &table)?;
    write!(out, "{table}").map_err(io_err)?;
    check_aborted(&report)
}

fn load_report(path: &Path) -> Result<EvalReport, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

pub fn cmd_compare(args: &CompareArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let before = load_report(&args.before)?;
    let after = load_report(&args.after)?;
    let diff = eval::compare(&before, &after);
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&diff).expect("serializable");
        fs::write(path, format!("{json}\n")).map_err(io_err)?;
    }
    write!(out, "{}", eval::render_diff(&diff)).map_err(io_err)
}

pub fn cmd_serve(args: &ServeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = RunConfig::from_args(&args.common, "treeranker")?;
    let tables = config.load_tables()?;
    let factory = config.factory(&tables.vocab)?;
    let server = RemoteServer::bind(
        args.listen.as_str(),
        factory,
        Arc::new(tables.vocab.clone()),
    )
    .map_err(|e| config_err(format!("bind {}: {e}", args.listen)))?;
    let addr = server.local_addr().map_err(io_err)?;
    writeln!(out, "listening on {addr}").map_err(io_err)?;
    out.flush().map_err(io_err)?;
    server.run().map_err(|e| CliError::Backend(e.to_string()))
}
