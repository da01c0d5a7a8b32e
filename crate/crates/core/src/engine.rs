//! Single-pass ranking of a completion tree.
//!
//! The decoder starts at the root of the tree and repeatedly:
//!
//! 1. asks the backend for the next-token distribution, masked to the
//!    node's valid continuations (child main tokens, their subtokens, and
//!    identifier-ending tokens when the node is terminal), or unmasked with
//!    those tokens as a query set;
//! 2. appends the probability of every child edge to the trace of every
//!    candidate below that edge;
//! 3. follows the argmax. A selected subtoken is resolved by a main-token
//!    push when it prefixes exactly one child, or by splitting the tree when
//!    it prefixes several.
//!
//! Decoding stops at a leaf, once the current node holds a single candidate
//! (early stop), on a termination token, after `max_steps` forward passes,
//! or, unconstrained, when the argmax leaves the tree. Candidates are then
//! sorted by `(scored length, last probability)`, higher first, with the
//! original candidate order breaking exact ties.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Distribution, LogitMask, ModelBackend};
use crate::subtoken::TokenTables;
use crate::token::{TokenId, TokenSeq};
use crate::tree::{CandidateId, CompletionTree, NodeId, TreeError};

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("distribution has no probability for child token {0}")]
    MissingChildProbability(TokenId),
    #[error("no token is allowed at a terminal leaf with termination disabled")]
    EmptyMask,
    #[error("prefix context is empty")]
    EmptyPrefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Mask the model to valid continuations. Off for the ablation mode.
    pub constrained: bool,
    pub early_stop: bool,
    pub max_steps: usize,
    /// Admit identifier-ending tokens at terminal nodes.
    pub include_termination_mass: bool,
    /// Ask the backend for its own tokenization of the candidates and build
    /// the tree from it when it disagrees with longest match.
    pub upstream_tokenizer: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            constrained: true,
            early_stop: true,
            max_steps: 16,
            include_termination_mass: true,
            upstream_tokenizer: false,
        }
    }
}

/// Per-candidate probability traces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTraces {
    traces: Vec<Vec<f64>>,
}

impl ScoreTraces {
    pub fn new(candidates: usize) -> Self {
        Self {
            traces: vec![Vec::new(); candidates],
        }
    }

    pub fn trace(&self, id: CandidateId) -> &[f64] {
        &self.traces[id.0]
    }

    pub fn scored_len(&self, id: CandidateId) -> usize {
        self.traces[id.0].len()
    }

    pub fn last(&self, id: CandidateId) -> Option<f64> {
        self.traces[id.0].last().copied()
    }

    /// `(scored length, last probability)`; `(0, 0.0)` for an unscored
    /// candidate.
    pub fn key(&self, id: CandidateId) -> (usize, f64) {
        (self.scored_len(id), self.last(id).unwrap_or(0.0))
    }

    /// Appends the probability of each child edge of `node` to every
    /// candidate below it.
    pub fn record_step(
        &mut self,
        tree: &CompletionTree,
        node: NodeId,
        dist: &Distribution,
    ) -> Result<(), RankError> {
        let continuations = tree.valid_continuations(node);
        let probs = continuations
            .iter()
            .map(|(t, _)| dist.get(*t).ok_or(RankError::MissingChildProbability(*t)))
            .collect::<Result<Vec<_>, _>>()?;
        for ((_, members), p) in continuations.iter().zip(probs) {
            for m in members.iter() {
                self.traces[m.0].push(p);
            }
        }
        Ok(())
    }

    fn overwrite_last(&mut self, members: impl IntoIterator<Item = CandidateId>, p: f64) {
        for m in members {
            if let Some(last) = self.traces[m.0].last_mut() {
                *last = p;
            }
        }
    }
}

/// Ranking order of two keys: `Greater` means `a` ranks above `b`.
pub fn compare(a: (usize, f64), b: (usize, f64)) -> Ordering {
    a.0.cmp(&b.0).then(a.1.total_cmp(&b.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    Leaf,
    Termination,
    MaxSteps,
    OffTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub steps: usize,
    pub early_stopped: bool,
    pub splits: usize,
    pub pushes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_token_len: Option<usize>,
    pub off_tree_exit: bool,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCompletion {
    pub candidate: CandidateId,
    pub identifier: String,
    pub scored_len: usize,
    pub last_prob: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Child,
    Push { main: TokenId },
    Split { node: NodeId },
    Terminate,
    OffTree,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub node: NodeId,
    /// Child edges of the node before the selection was applied.
    pub children: Vec<TokenId>,
    pub allowed: LogitMask,
    pub selected: TokenId,
    pub outcome: StepOutcome,
}

/// Hooks into the decode loop; used by tests and diagnostics.
pub trait DecodeObserver {
    fn on_start(&mut self, _tree: &CompletionTree) {}
    fn on_step(&mut self, record: &StepRecord, tree: &CompletionTree);
}

impl DecodeObserver for () {
    fn on_step(&mut self, _record: &StepRecord, _tree: &CompletionTree) {}
}

#[derive(Debug, Clone)]
pub struct RankOutput {
    pub ranking: Vec<RankedCompletion>,
    pub stats: DecodeStats,
    pub traces: ScoreTraces,
    /// Candidate the decode itself produced, when it ended on one.
    pub generated: Option<String>,
    /// Candidates whose first token would merge with the end of the prefix
    /// under longest match.
    pub boundary_merged: Vec<String>,
    pub tree: CompletionTree,
}

/// Allowed set at `node`: child main tokens and their subtokens, plus the
/// termination set when the node ends a candidate and `include_termination`
/// is on.
pub fn build_allowed_set(
    tree: &CompletionTree,
    node: NodeId,
    tables: &TokenTables,
    include_termination: bool,
) -> Result<LogitMask, RankError> {
    let n = tree.node(node);
    let mut allowed: Vec<TokenId> = Vec::new();
    for &child in n.children.keys() {
        allowed.push(child);
        allowed.extend(tables.subtokens.subtokens_of(child).iter().copied());
    }
    if n.terminal_for.is_some() && include_termination {
        allowed.extend_from_slice(tables.termination_set());
    }
    let mask = LogitMask::new(allowed);
    if mask.is_empty() {
        return Err(RankError::EmptyMask);
    }
    Ok(mask)
}

/// Ranks `candidates` after `prefix`.
pub fn rank(
    backend: &mut dyn ModelBackend,
    tables: &TokenTables,
    prefix: &TokenSeq,
    candidates: &[String],
    config: &DecodeConfig,
) -> Result<RankOutput, RankError> {
    rank_observed(backend, tables, prefix, candidates, config, &mut ())
}

pub fn rank_observed(
    backend: &mut dyn ModelBackend,
    tables: &TokenTables,
    prefix: &TokenSeq,
    candidates: &[String],
    config: &DecodeConfig,
    observer: &mut dyn DecodeObserver,
) -> Result<RankOutput, RankError> {
    if prefix.is_empty() {
        return Err(RankError::EmptyPrefix);
    }
    let vocab = &tables.vocab;
    let mut tree = match config.upstream_tokenizer {
        true => match backend.tokenize_upstream(candidates)? {
            Some(seqs) => CompletionTree::from_sequences(candidates, seqs, vocab)?,
            None => CompletionTree::build(candidates, vocab)?,
        },
        false => CompletionTree::build(candidates, vocab)?,
    };
    observer.on_start(&tree);

    let mut traces = ScoreTraces::new(tree.len());
    let mut node = tree.root();
    let mut steps = 0;
    let mut pushes = 0;
    let mut splits = 0;
    let max_steps = config.max_steps.max(1);

    let stop_reason = loop {
        if steps >= max_steps {
            break StopReason::MaxSteps;
        }
        let allowed = build_allowed_set(&tree, node, tables, config.include_termination_mass)?;
        let mut context = prefix.tokens.clone();
        context.extend(tree.path_tokens(node));
        let dist = if config.constrained {
            backend.next_distribution(&context, Some(&allowed), None)?
        } else {
            backend.next_distribution(&context, None, Some(allowed.allowed()))?
        };
        steps += 1;
        traces.record_step(&tree, node, &dist)?;

        let selected = dist.argmax;
        let children: Vec<TokenId> = tree.node(node).children.keys().copied().collect();
        let at = node;
        let outcome = if let Some(child) = tree.child(node, selected) {
            node = child;
            StepOutcome::Child
        } else if !allowed.contains(selected) {
            if config.constrained {
                return Err(BackendError::Protocol(format!(
                    "backend selected token {selected} outside the logit mask"
                ))
                .into());
            }
            StepOutcome::OffTree
        } else if tables.is_termination(selected) && tree.node(node).terminal_for.is_some() {
            StepOutcome::Terminate
        } else if let Some(main) = tree.main_token_push(node, selected, &tables.subtokens) {
            pushes += 1;
            node = tree
                .child(node, main)
                .expect("pushed main token is a child");
            StepOutcome::Push { main }
        } else {
            let new = tree.split_on_subtoken(node, selected, vocab)?;
            splits += 1;
            let moved: Vec<CandidateId> = tree.node(new).members.iter().copied().collect();
            traces.overwrite_last(moved, dist.prob(selected));
            node = new;
            StepOutcome::Split { node: new }
        };

        let record = StepRecord {
            step: steps,
            node: at,
            children,
            allowed,
            selected,
            outcome,
        };
        observer.on_step(&record, &tree);
        match record.outcome {
            StepOutcome::Terminate => break StopReason::Termination,
            StepOutcome::OffTree => break StopReason::OffTree,
            _ => {}
        }
        if config.early_stop && tree.unique_candidate(node).is_some() {
            break StopReason::EarlyStop;
        }
        if tree.node(node).is_leaf() {
            break StopReason::Leaf;
        }
    };

    let generated = match stop_reason {
        StopReason::EarlyStop => tree.unique_candidate(node),
        StopReason::Leaf | StopReason::Termination => tree.node(node).terminal_for,
        StopReason::MaxSteps | StopReason::OffTree => None,
    }
    .map(|c| tree.candidate(c).identifier.clone());

    let ranking = order_candidates(&tree, &traces);
    let stats = DecodeStats {
        steps,
        early_stopped: stop_reason == StopReason::EarlyStop,
        splits,
        pushes,
        gt_token_len: None,
        off_tree_exit: stop_reason == StopReason::OffTree,
        stop_reason,
    };
    Ok(RankOutput {
        ranking,
        stats,
        traces,
        generated,
        boundary_merged: boundary_merges(prefix, candidates, tables),
        tree,
    })
}

fn order_candidates(tree: &CompletionTree, traces: &ScoreTraces) -> Vec<RankedCompletion> {
    let mut order: Vec<CandidateId> = (0..tree.len()).map(CandidateId).collect();
    debug_assert!(
        order.iter().all(|&c| traces.scored_len(c) >= 1),
        "every candidate is scored at the root"
    );
    // stable: equal keys keep candidate order
    order.sort_by(|&a, &b| compare(traces.key(b), traces.key(a)));
    order
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let (scored_len, last_prob) = traces.key(c);
            RankedCompletion {
                candidate: c,
                identifier: tree.candidate(c).identifier.clone(),
                scored_len,
                last_prob,
                rank: i + 1,
            }
        })
        .collect()
}

/// Candidates whose start would be absorbed into the last prefix token by
/// longest match (e.g. a `._` token swallowing the dot before `_field`).
/// Their first tree token cannot follow the prefix as the model saw it.
pub fn boundary_merges(
    prefix: &TokenSeq,
    candidates: &[String],
    tables: &TokenTables,
) -> Vec<String> {
    let Some(&last) = prefix.tokens.last() else {
        return Vec::new();
    };
    let last_text = tables.vocab.text(last);
    candidates
        .iter()
        .filter(|c| {
            let joined = format!("{last_text}{c}");
            match tables.vocab.tokenize(&joined) {
                Ok(seq) => seq.tokens.first() != Some(&last),
                Err(_) => false,
            }
        })
        .cloned()
        .collect()
}
