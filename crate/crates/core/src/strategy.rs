//! Ranking strategies behind one trait, looked up by name.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend};
use crate::baselines::{beam_all, beam_search, filter_to_candidates, greedy_complete, BeamResult};
use crate::engine::{rank, DecodeConfig, DecodeStats, RankError};
use crate::subtoken::TokenTables;
use crate::token::TokenSeq;
use crate::tree::{CompletionTree, TreeError};

pub const IDE_BASELINE_PREFIX: &str = "ide-baseline:";

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("unknown strategy {name:?}; valid strategies: {}", valid.join(", "))]
    Unknown { name: String, valid: Vec<String> },
    #[error("point has no baseline ranking named {0:?}")]
    MissingBaseline(String),
    #[error(transparent)]
    Rank(#[from] RankError),
}

impl From<BackendError> for StrategyError {
    fn from(e: BackendError) -> Self {
        StrategyError::Rank(RankError::Backend(e))
    }
}

impl From<TreeError> for StrategyError {
    fn from(e: TreeError) -> Self {
        StrategyError::Rank(RankError::Tree(e))
    }
}

impl StrategyError {
    pub fn is_backend(&self) -> bool {
        matches!(self, StrategyError::Rank(RankError::Backend(_)))
    }
}

/// Knobs shared by all strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub decode: DecodeConfig,
    /// Length-penalty exponent for the exhaustive tree scorer.
    pub alpha: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            alpha: 1.0,
        }
    }
}

/// One completion point as a strategy sees it.
#[derive(Debug, Clone, Copy)]
pub struct PointInput<'a> {
    pub prefix: &'a TokenSeq,
    pub candidates: &'a [String],
    pub baselines: &'a BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub identifier: String,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scored_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_prob: Option<f64>,
    /// Cumulative or penalized log-probability, for the log-prob rankers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutput {
    pub strategy: String,
    pub ranking: Vec<RankedEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<DecodeStats>,
    /// The identifier the model itself produced, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    /// Decode steps behind `generated`, for the efficiency figures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl StrategyOutput {
    pub fn identifiers(&self) -> Vec<&str> {
        self.ranking.iter().map(|e| e.identifier.as_str()).collect()
    }

    /// 1-based rank of `truth`, `None` when it is absent.
    pub fn rank_of(&self, truth: &str) -> Option<usize> {
        self.ranking
            .iter()
            .find(|e| e.identifier == truth)
            .map(|e| e.rank)
    }

    fn plain(strategy: &str, identifiers: impl IntoIterator<Item = String>) -> Self {
        Self {
            strategy: strategy.to_string(),
            ranking: identifiers
                .into_iter()
                .enumerate()
                .map(|(i, identifier)| RankedEntry {
                    identifier,
                    rank: i + 1,
                    scored_len: None,
                    last_prob: None,
                    score: None,
                })
                .collect(),
            stats: None,
            generated: None,
            generated_tokens: None,
            warnings: Vec::new(),
        }
    }
}

pub trait RankingStrategy: Send + Sync {
    fn name(&self) -> &str;

    /// False for strategies that never query a model.
    fn uses_backend(&self) -> bool {
        true
    }

    fn rank(
        &self,
        point: &PointInput<'_>,
        backend: &mut dyn ModelBackend,
        tables: &TokenTables,
        config: &StrategyConfig,
    ) -> Result<StrategyOutput, StrategyError>;
}

pub struct TreeRankerStrategy;

impl RankingStrategy for TreeRankerStrategy {
    fn name(&self) -> &str {
        "treeranker"
    }

    fn rank(
        &self,
        point: &PointInput<'_>,
        backend: &mut dyn ModelBackend,
        tables: &TokenTables,
        config: &StrategyConfig,
    ) -> Result<StrategyOutput, StrategyError> {
        let out = rank(
            backend,
            tables,
            point.prefix,
            point.candidates,
            &config.decode,
        )?;
        let warnings = out
            .boundary_merged
            .iter()
            .map(|c| format!("candidate {c:?} merges with the prefix under longest match"))
            .collect();
        Ok(StrategyOutput {
            strategy: self.name().to_string(),
            ranking: out
                .ranking
                .iter()
                .map(|r| RankedEntry {
                    identifier: r.identifier.clone(),
                    rank: r.rank,
                    scored_len: Some(r.scored_len),
                    last_prob: Some(r.last_prob),
                    score: None,
                })
                .collect(),
            generated_tokens: Some(out.stats.steps),
            stats: Some(out.stats),
            generated: out.generated,
            warnings,
        })
    }
}

pub struct BeamAllStrategy;

impl RankingStrategy for BeamAllStrategy {
    fn name(&self) -> &str {
        "beamall"
    }

    fn rank(
        &self,
        point: &PointInput<'_>,
        backend: &mut dyn ModelBackend,
        tables: &TokenTables,
        config: &StrategyConfig,
    ) -> Result<StrategyOutput, StrategyError> {
        if point.prefix.is_empty() {
            return Err(RankError::EmptyPrefix.into());
        }
        let tree = CompletionTree::build(point.candidates, &tables.vocab)?;
        let out = beam_all(
            backend,
            tables,
            &tree,
            point.prefix,
            config.alpha,
            config.decode.include_termination_mass,
        )?;
        let mut result =
            StrategyOutput::plain(self.name(), out.scores.iter().map(|s| s.identifier.clone()));
        for (entry, score) in result.ranking.iter_mut().zip(&out.scores) {
            entry.score = Some(score.penalized);
        }
        // the search is controlled, so its output is its first choice
        result.generated = result.ranking.first().map(|e| e.identifier.clone());
        Ok(result)
    }
}

pub struct GreedyStrategy;

impl RankingStrategy for GreedyStrategy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn rank(
        &self,
        point: &PointInput<'_>,
        backend: &mut dyn ModelBackend,
        tables: &TokenTables,
        config: &StrategyConfig,
    ) -> Result<StrategyOutput, StrategyError> {
        let out = greedy_complete(
            backend,
            &tables.vocab,
            point.prefix,
            config.decode.max_steps,
        )?;
        let mut result = StrategyOutput::plain(self.name(), [out.identifier.clone()]);
        result.generated = Some(out.identifier);
        result.generated_tokens = Some(out.steps);
        Ok(result)
    }
}

/// Unconstrained beam search; `filtered` keeps only candidate identifiers.
pub struct BeamStrategy {
    name: String,
    width: usize,
    filtered: bool,
}

impl BeamStrategy {
    pub fn new(width: usize, filtered: bool) -> Self {
        let name = format!("beam{width}{}", if filtered { "f" } else { "" });
        Self {
            name,
            width,
            filtered,
        }
    }
}

impl RankingStrategy for BeamStrategy {
    fn name(&self) -> &str {
        &self.name
    }

    fn rank(
        &self,
        point: &PointInput<'_>,
        backend: &mut dyn ModelBackend,
        tables: &TokenTables,
        config: &StrategyConfig,
    ) -> Result<StrategyOutput, StrategyError> {
        let mut beams = beam_search(
            backend,
            &tables.vocab,
            point.prefix,
            self.width,
            config.decode.max_steps,
        )?;
        let generated = beams.first().map(|b| b.identifier.clone());
        if self.filtered {
            let set: BTreeSet<String> = point.candidates.iter().cloned().collect();
            beams = filter_to_candidates(&beams, &set);
        }
        let mut result = StrategyOutput::plain(
            self.name(),
            beams.iter().map(|b: &BeamResult| b.identifier.clone()),
        );
        for (entry, beam) in result.ranking.iter_mut().zip(&beams) {
            entry.score = Some(beam.cum_logprob);
        }
        result.generated = generated;
        Ok(result)
    }
}

/// Replays a ranking supplied with the dataset point.
pub struct IdeBaselineStrategy {
    name: String,
    baseline: String,
}

impl IdeBaselineStrategy {
    pub fn new(baseline: &str) -> Self {
        Self {
            name: format!("{IDE_BASELINE_PREFIX}{baseline}"),
            baseline: baseline.to_string(),
        }
    }
}

impl RankingStrategy for IdeBaselineStrategy {
    fn name(&self) -> &str {
        &self.name
    }

    fn uses_backend(&self) -> bool {
        false
    }

    fn rank(
        &self,
        point: &PointInput<'_>,
        _backend: &mut dyn ModelBackend,
        _tables: &TokenTables,
        _config: &StrategyConfig,
    ) -> Result<StrategyOutput, StrategyError> {
        let list = match self.baseline.as_str() {
            // the static-analysis order of the candidate list itself
            "static" => point.candidates,
            name => point
                .baselines
                .get(name)
                .ok_or_else(|| StrategyError::MissingBaseline(name.to_string()))?,
        };
        let mut result = StrategyOutput::plain(self.name(), list.iter().cloned());
        result.generated = result.ranking.first().map(|e| e.identifier.clone());
        Ok(result)
    }
}

#[derive(Clone, Default)]
pub struct StrategyRegistry {
    entries: BTreeMap<String, Arc<dyn RankingStrategy>>,
}

impl StrategyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(TreeRankerStrategy));
        reg.register(Arc::new(BeamAllStrategy));
        reg.register(Arc::new(GreedyStrategy));
        for width in [5, 20] {
            reg.register(Arc::new(BeamStrategy::new(width, false)));
            reg.register(Arc::new(BeamStrategy::new(width, true)));
        }
        reg
    }

    pub fn register(&mut self, strategy: Arc<dyn RankingStrategy>) {
        self.entries.insert(strategy.name().to_string(), strategy);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.entries.keys().cloned().collect();
        names.push(format!("{IDE_BASELINE_PREFIX}<name>"));
        names
    }

    /// Looks up `name`; `ide-baseline:<name>` is resolved on the fly.
    pub fn resolve(&self, name: &str) -> Result<Arc<dyn RankingStrategy>, StrategyError> {
        if let Some(s) = self.entries.get(name) {
            return Ok(s.clone());
        }
        if let Some(baseline) = name.strip_prefix(IDE_BASELINE_PREFIX) {
            if !baseline.is_empty() {
                return Ok(Arc::new(IdeBaselineStrategy::new(baseline)));
            }
        }
        Err(StrategyError::Unknown {
            name: name.to_string(),
            valid: self.names(),
        })
    }
}
