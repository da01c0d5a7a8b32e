//! Offline evaluation: run strategies over a dataset, compute ranking
//! metrics and timings, and render reports.

pub mod dataset;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, BackendFactory, CountingBackend, Distribution, LogitMask, ModelBackend,
};
use crate::engine::DecodeStats;
use crate::strategy::{PointInput, RankingStrategy, StrategyConfig, StrategyOutput};
use crate::subtoken::TokenTables;
use crate::token::TokenId;

pub use dataset::{CompletionPoint, Dataset, IssueKind, LineIssue};
pub use metrics::{exact_match, mean_ci95, mrr, recall_at_k, token_efficiency, MetricError};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("dataset has no valid points")]
    EmptyDataset,
    #[error("runs must be at least 1")]
    ZeroRuns,
    #[error("worker pool: {0}")]
    Pool(String),
}

/// How ranking time is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Clock {
    /// Monotonic time from the first backend response to the end of the
    /// decode.
    Wall,
    /// A fixed cost per forward pass after the first; reproducible.
    Virtual { pass_ms: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub strategy: StrategyConfig,
    pub runs: usize,
    /// Added to every total time in place of the first-token latency.
    pub first_token_ms: f64,
    pub jobs: usize,
    pub clock: Clock,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyConfig::default(),
            runs: 5,
            first_token_ms: 75.0,
            jobs: 1,
            clock: Clock::Wall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Seconds.
    pub mean: f64,
    pub ci95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_20: f64,
    pub em: f64,
    pub token_efficiency: Option<f64>,
    pub avg_generated_tokens: Option<f64>,
}

/// Tree-manipulation statistics of the single-pass ranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub early_stop_rate: f64,
    pub split_rate: f64,
    pub push_rate: f64,
    pub single_pass_rate: f64,
    pub within_two_rate: f64,
    pub off_tree_rate: f64,
    pub avg_generated_tokens: f64,
    pub std_generated_tokens: f64,
    pub token_efficiency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: String,
    pub rank: Option<usize>,
    pub generated: Option<String>,
    /// Backend calls in the first run.
    pub calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<DecodeStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub id: String,
    pub error: String,
    pub backend: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub points: usize,
    pub metrics: Option<Metrics>,
    pub tree: Option<TreeStats>,
    pub ranking_time: Timing,
    pub total_time: Timing,
    pub backend_calls: usize,
    pub avg_forward_passes: f64,
    /// Set when any point failed; metrics then cover the rest only.
    pub aborted: bool,
    pub failures: Vec<PointFailure>,
    pub warnings: Vec<String>,
    pub per_point: Vec<PointRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub points: usize,
    pub rejected: usize,
    pub avg_candidates: f64,
    pub median_candidates: f64,
    pub avg_gt_tokens: f64,
}

impl DatasetSummary {
    pub fn new(dataset: &Dataset, tables: &TokenTables) -> Self {
        let mut lens: Vec<usize> = dataset.points.iter().map(|p| p.candidates.len()).collect();
        lens.sort_unstable();
        let median = match lens.len() {
            0 => 0.0,
            n if n % 2 == 1 => lens[n / 2] as f64,
            n => (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0,
        };
        let gt: Vec<f64> = dataset
            .points
            .iter()
            .filter_map(|p| tables.vocab.tokenize(&p.ground_truth).ok())
            .map(|s| s.len() as f64)
            .collect();
        Self {
            points: dataset.points.len(),
            rejected: dataset.rejected.len(),
            avg_candidates: metrics::mean(&lens.iter().map(|&l| l as f64).collect::<Vec<_>>()),
            median_candidates: median,
            avg_gt_tokens: metrics::mean(&gt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub runs: usize,
    pub first_token_ms: f64,
    pub clock: Clock,
    pub strategy: StrategyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetSummary,
    pub settings: ReportSettings,
    pub strategies: Vec<StrategyReport>,
    /// Dataset loader rejections and warnings.
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn any_aborted(&self) -> bool {
        self.strategies.iter().any(|s| s.aborted)
    }

    pub fn strategy(&self, name: &str) -> Option<&StrategyReport> {
        self.strategies.iter().find(|s| s.strategy == name)
    }
}

/// Stands in for the model when a strategy never queries one.
struct NoBackend;

impl ModelBackend for NoBackend {
    fn next_distribution(
        &mut self,
        _context: &[TokenId],
        _allowed: Option<&LogitMask>,
        _query: Option<&[TokenId]>,
    ) -> Result<Distribution, BackendError> {
        Err(BackendError::BackendUnavailable(
            "no backend configured".into(),
        ))
    }
}

type Session = Result<CountingBackend<Box<dyn ModelBackend>>, BackendError>;

struct PointOutcome {
    record: PointRecord,
    ranking_times: Vec<f64>,
    total_times: Vec<f64>,
    generated_tokens: Option<usize>,
    gt_token_len: Option<usize>,
    total_calls: usize,
    warnings: Vec<String>,
}

fn run_point(
    strategy: &dyn RankingStrategy,
    point: &CompletionPoint,
    session: &mut Session,
    tables: &TokenTables,
    config: &EvalConfig,
) -> Result<PointOutcome, PointFailure> {
    let fail = |error: String, backend: bool| PointFailure {
        id: point.id.clone(),
        error,
        backend,
    };
    let backend = session.as_mut().map_err(|e| fail(e.to_string(), true))?;
    let prefix = tables
        .vocab
        .tokenize(&point.prefix)
        .map_err(|e| fail(format!("prefix: {e}"), false))?;
    let gt_token_len = tables
        .vocab
        .tokenize(&point.ground_truth)
        .ok()
        .map(|s| s.len());
    let input = PointInput {
        prefix: &prefix,
        candidates: &point.candidates,
        baselines: &point.baselines,
    };
    let first_token = if strategy.uses_backend() {
        config.first_token_ms / 1000.0
    } else {
        0.0
    };

    let mut first: Option<(StrategyOutput, usize)> = None;
    let mut ranking_times = Vec::with_capacity(config.runs);
    let mut total_times = Vec::with_capacity(config.runs);
    let mut total_calls = 0;
    for _ in 0..config.runs {
        backend.reset();
        let out = strategy
            .rank(&input, backend, tables, &config.strategy)
            .map_err(|e| fail(e.to_string(), e.is_backend()))?;
        let end = Instant::now();
        let calls = backend.calls();
        let ranking = match config.clock {
            Clock::Wall => backend
                .first_response()
                .map_or(0.0, |t| end.duration_since(t).as_secs_f64()),
            Clock::Virtual { pass_ms } => calls.saturating_sub(1) as f64 * pass_ms / 1000.0,
        };
        ranking_times.push(ranking);
        total_times.push(ranking + first_token);
        total_calls += calls;
        if first.is_none() {
            first = Some((out, calls));
        }
    }
    let (out, calls) = first.expect("runs >= 1");
    let stats = out.stats.clone().map(|mut s| {
        s.gt_token_len = gt_token_len;
        s
    });
    Ok(PointOutcome {
        record: PointRecord {
            id: point.id.clone(),
            rank: out.rank_of(&point.ground_truth),
            generated: out.generated.clone(),
            calls,
            stats,
        },
        ranking_times,
        total_times,
        generated_tokens: out.generated_tokens,
        gt_token_len,
        total_calls,
        warnings: out
            .warnings
            .iter()
            .map(|w| format!("{}: {w}", point.id))
            .collect(),
    })
}

fn timing(per_point: &[Vec<f64>]) -> Timing {
    let stats: Vec<(f64, Option<f64>)> = per_point.iter().map(|xs| mean_ci95(xs)).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let cis: Option<Vec<f64>> = stats.iter().map(|s| s.1).collect();
    Timing {
        mean: metrics::mean(&means),
        ci95: cis.filter(|c| !c.is_empty()).map(|c| metrics::mean(&c)),
    }
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut hits, mut n) = (0usize, 0usize);
    for f in flags {
        n += 1;
        hits += f as usize;
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

fn efficiency(outcomes: &[PointOutcome]) -> Option<f64> {
    let ratios: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| token_efficiency(o.gt_token_len?, o.generated_tokens?).ok())
        .collect();
    (!ratios.is_empty()).then(|| metrics::mean(&ratios))
}

/// Runs one strategy over every point, `config.runs` times each.
pub fn evaluate(
    strategy: &dyn RankingStrategy,
    points: &[CompletionPoint],
    factory: &dyn BackendFactory,
    tables: &TokenTables,
    config: &EvalConfig,
) -> Result<StrategyReport, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if config.runs == 0 {
        return Err(EvalError::ZeroRuns);
    }
    let open = || -> Session {
        let inner = if strategy.uses_backend() {
            factory.open()?
        } else {
            Box::new(NoBackend)
        };
        Ok(CountingBackend::new(inner))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let results: Vec<Result<PointOutcome, PointFailure>> = pool.install(|| {
        points
            .par_iter()
            .map_init(open, |session, p| {
                run_point(strategy, p, session, tables, config)
            })
            .collect()
    });

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(f) => failures.push(f),
        }
    }

    let ranks: Vec<Option<usize>> = outcomes.iter().map(|o| o.record.rank).collect();
    let metrics = (!outcomes.is_empty()).then(|| {
        let generated: Vec<Option<&str>> = outcomes
            .iter()
            .map(|o| o.record.generated.as_deref())
            .collect();
        let truths: Vec<&str> = outcomes
            .iter()
            .map(|o| {
                points
                    .iter()
                    .find(|p| p.id == o.record.id)
                    .map_or("", |p| p.ground_truth.as_str())
            })
            .collect();
        let gen_tokens: Option<Vec<f64>> = outcomes
            .iter()
            .map(|o| o.generated_tokens.map(|g| g as f64))
            .collect();
        Metrics {
            mrr: mrr(&ranks).expect("non-empty"),
            recall_at_1: recall_at_k(&ranks, 1).expect("non-empty"),
            recall_at_5: recall_at_k(&ranks, 5).expect("non-empty"),
            recall_at_20: recall_at_k(&ranks, 20).expect("non-empty"),
            em: exact_match(&generated, &truths).expect("non-empty"),
            token_efficiency: efficiency(&outcomes),
            avg_generated_tokens: gen_tokens.map(|g| metrics::mean(&g)),
        }
    });

    let stats: Option<Vec<&DecodeStats>> =
        outcomes.iter().map(|o| o.record.stats.as_ref()).collect();
    let tree = stats.filter(|s| !s.is_empty()).map(|stats| {
        let steps: Vec<f64> = stats.iter().map(|s| s.steps as f64).collect();
        TreeStats {
            early_stop_rate: rate(stats.iter().map(|s| s.early_stopped)),
            split_rate: rate(stats.iter().map(|s| s.splits > 0)),
            push_rate: rate(stats.iter().map(|s| s.pushes > 0)),
            single_pass_rate: rate(stats.iter().map(|s| s.steps == 1)),
            within_two_rate: rate(stats.iter().map(|s| s.steps <= 2)),
            off_tree_rate: rate(stats.iter().map(|s| s.off_tree_exit)),
            avg_generated_tokens: metrics::mean(&steps),
            std_generated_tokens: metrics::std_dev(&steps),
            token_efficiency: efficiency(&outcomes),
        }
    });

    let ranking_times: Vec<Vec<f64>> = outcomes.iter().map(|o| o.ranking_times.clone()).collect();
    let total_times: Vec<Vec<f64>> = outcomes.iter().map(|o| o.total_times.clone()).collect();
    let first_calls: Vec<f64> = outcomes.iter().map(|o| o.record.calls as f64).collect();
    Ok(StrategyReport {
        strategy: strategy.name().to_string(),
        points: outcomes.len(),
        metrics,
        tree,
        ranking_time: timing(&ranking_times),
        total_time: timing(&total_times),
        backend_calls: outcomes.iter().map(|o| o.total_calls).sum(),
        avg_forward_passes: metrics::mean(&first_calls),
        aborted: !failures.is_empty(),
        failures,
        warnings: outcomes
            .iter()
            .flat_map(|o| o.warnings.iter().cloned())
            .collect(),
        per_point: outcomes.into_iter().map(|o| o.record).collect(),
    })
}

/// Evaluates every strategy and assembles the full report.
pub fn evaluate_all(
    strategies: &[std::sync::Arc<dyn RankingStrategy>],
    dataset: &Dataset,
    factory: &dyn BackendFactory,
    tables: &TokenTables,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let mut reports = Vec::with_capacity(strategies.len());
    for s in strategies {
        reports.push(evaluate(
            s.as_ref(),
            &dataset.points,
            factory,
            tables,
            config,
        )?);
    }
    Ok(EvalReport {
        dataset: DatasetSummary::new(dataset, tables),
        settings: ReportSettings {
            runs: config.runs,
            first_token_ms: config.first_token_ms,
            clock: config.clock,
            strategy: config.strategy.clone(),
        },
        strategies: reports,
        warnings: dataset.issues().iter().map(|i| i.to_string()).collect(),
    })
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

fn time_cell(t: &Timing) -> String {
    match t.ci95 {
        Some(ci) => format!("{:.2}±{:.2}", t.mean * 1000.0, ci * 1000.0),
        None => format!("{:.2}", t.mean * 1000.0),
    }
}

/// Text table: strategy, MRR, R@1, R@5, R@20, EM, TER, ranking time (ms).
pub fn render_table(report: &EvalReport) -> String {
    let header = [
        "strategy", "MRR", "R@1", "R@5", "R@20", "EM", "TER", "rank ms",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for s in &report.strategies {
        let m = s.metrics.as_ref();
        let mut name = s.strategy.clone();
        if s.aborted {
            name.push_str(" (aborted)");
        }
        rows.push(vec![
            name,
            cell(m.map(|m| m.mrr)),
            cell(m.map(|m| m.recall_at_1)),
            cell(m.map(|m| m.recall_at_5)),
            cell(m.map(|m| m.recall_at_20)),
            cell(m.map(|m| m.em)),
            cell(m.and_then(|m| m.token_efficiency)),
            time_cell(&s.ranking_time),
        ]);
    }
    let mut out = grid(&rows);
    if !report.warnings.is_empty() {
        out.push_str("\nwarnings:\n");
        for w in &report.warnings {
            let _ = writeln!(out, "  {w}");
        }
    }
    out
}

/// Tree-manipulation statistics of every strategy that reports them.
pub fn render_tree_stats(report: &EvalReport) -> String {
    let mut rows = vec![vec!["statistic".to_string()]];
    let labels = [
        "early completion",
        "new sub-branch (split)",
        "main token push",
        "single forward pass",
        "within two passes",
        "off-tree exit",
        "avg generated tokens",
        "std generated tokens",
        "token efficiency ratio",
    ];
    rows.extend(labels.iter().map(|l| vec![l.to_string()]));
    for s in &report.strategies {
        let Some(t) = &s.tree else { continue };
        rows[0].push(s.strategy.clone());
        let values = [
            Some(t.early_stop_rate),
            Some(t.split_rate),
            Some(t.push_rate),
            Some(t.single_pass_rate),
            Some(t.within_two_rate),
            Some(t.off_tree_rate),
            Some(t.avg_generated_tokens),
            Some(t.std_generated_tokens),
            t.token_efficiency,
        ];
        for (row, v) in rows[1..].iter_mut().zip(values) {
            row.push(cell(v));
        }
    }
    grid(&rows)
}

fn grid(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDiff {
    pub strategies: BTreeMap<String, BTreeMap<String, Delta>>,
    pub only_before: Vec<String>,
    pub only_after: Vec<String>,
}

fn flatten(s: &StrategyReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(m) = &s.metrics {
        out.insert("mrr".into(), m.mrr);
        out.insert("recall_at_1".into(), m.recall_at_1);
        out.insert("recall_at_5".into(), m.recall_at_5);
        out.insert("recall_at_20".into(), m.recall_at_20);
        out.insert("em".into(), m.em);
        if let Some(t) = m.token_efficiency {
            out.insert("token_efficiency".into(), t);
        }
        if let Some(g) = m.avg_generated_tokens {
            out.insert("avg_generated_tokens".into(), g);
        }
    }
    if let Some(t) = &s.tree {
        out.insert("early_stop_rate".into(), t.early_stop_rate);
        out.insert("split_rate".into(), t.split_rate);
        out.insert("push_rate".into(), t.push_rate);
    }
    out.insert("ranking_time".into(), s.ranking_time.mean);
    out.insert("total_time".into(), s.total_time.mean);
    out.insert("avg_forward_passes".into(), s.avg_forward_passes);
    out
}

/// Per-metric deltas (`after - before`) for strategies present in both.
pub fn compare(before: &EvalReport, after: &EvalReport) -> ReportDiff {
    let mut strategies = BTreeMap::new();
    let mut only_before = Vec::new();
    for s in &before.strategies {
        let Some(t) = after.strategy(&s.strategy) else {
            only_before.push(s.strategy.clone());
            continue;
        };
        let (a, b) = (flatten(s), flatten(t));
        let deltas = a
            .iter()
            .filter_map(|(k, &x)| {
                b.get(k).map(|&y| {
                    (
                        k.clone(),
                        Delta {
                            before: x,
                            after: y,
                            delta: y - x,
                        },
                    )
                })
            })
            .collect();
        strategies.insert(s.strategy.clone(), deltas);
    }
    let only_after = after
        .strategies
        .iter()
        .filter(|s| before.strategy(&s.strategy).is_none())
        .map(|s| s.strategy.clone())
        .collect();
    ReportDiff {
        strategies,
        only_before,
        only_after,
    }
}

pub fn render_diff(diff: &ReportDiff) -> String {
    let mut rows = vec![["strategy", "metric", "before", "after", "delta"]
        .map(String::from)
        .to_vec()];
    for (name, deltas) in &diff.strategies {
        for (metric, d) in deltas {
            rows.push(vec![
                name.clone(),
                metric.clone(),
                format!("{:.4}", d.before),
                format!("{:.4}", d.after),
                format!("{:+.4}", d.delta),
            ]);
        }
    }
    let mut out = grid(&rows);
    for s in &diff.only_before {
        let _ = writeln!(out, "only in first report: {s}");
    }
    for s in &diff.only_after {
        let _ = writeln!(out, "only in second report: {s}");
    }
    out
}
