//! Reference decoders: unconstrained greedy and beam search over the full
//! vocabulary, and the exhaustive length-penalized tree scorer.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ModelBackend};
use crate::engine::{build_allowed_set, RankError};
use crate::subtoken::TokenTables;
use crate::token::{identifier_run, TokenId, TokenSeq, Vocabulary};
use crate::tree::{CandidateId, CompletionTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutput {
    pub identifier: String,
    /// Forward passes spent.
    pub steps: usize,
}

/// Follows the full-vocabulary argmax until a token leaves the identifier
/// character class. The output keeps only the identifier part and may be
/// empty.
pub fn greedy_complete(
    backend: &mut dyn ModelBackend,
    vocab: &Vocabulary,
    prefix: &TokenSeq,
    max_steps: usize,
) -> Result<GreedyOutput, BackendError> {
    let mut context = prefix.tokens.clone();
    let mut identifier = String::new();
    let mut steps = 0;
    while steps < max_steps.max(1) {
        let dist = backend.next_distribution(&context, None, Some(&[]))?;
        steps += 1;
        let text = vocab.text(dist.argmax);
        let run = identifier_run(text);
        identifier.push_str(&text[..run]);
        if run < text.len() {
            break;
        }
        context.push(dist.argmax);
    }
    Ok(GreedyOutput { identifier, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    pub identifier: String,
    pub cum_logprob: f64,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    text: String,
    logprob: f64,
    finished: bool,
}

/// Standard beam search over the unmasked model. Every live beam is
/// expanded with its `width` most probable tokens and the global best
/// `width` expansions survive. A beam finishes when a token crosses an
/// identifier boundary; beams alive after `max_steps` finish as they are.
/// Returns at most `width` distinct identifiers, best first.
pub fn beam_search(
    backend: &mut dyn ModelBackend,
    vocab: &Vocabulary,
    prefix: &TokenSeq,
    width: usize,
    max_steps: usize,
) -> Result<Vec<BeamResult>, BackendError> {
    let width = width.max(1);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        text: String::new(),
        logprob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_steps.max(1) {
        if live.is_empty() {
            break;
        }
        let mut expansions = Vec::new();
        for hyp in &live {
            let mut context = prefix.tokens.clone();
            context.extend_from_slice(&hyp.tokens);
            let dist = backend.next_distribution(&context, None, None)?;
            for (token, p) in dist.top_k(width) {
                if p <= 0.0 {
                    continue;
                }
                let text = vocab.text(token);
                let run = identifier_run(text);
                let mut tokens = hyp.tokens.clone();
                tokens.push(token);
                expansions.push(Hypothesis {
                    tokens,
                    text: format!("{}{}", hyp.text, &text[..run]),
                    logprob: hyp.logprob + p.ln(),
                    finished: run < text.len(),
                });
            }
        }
        expansions.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        expansions.truncate(width);
        live.clear();
        for hyp in expansions {
            if hyp.finished {
                done.push(hyp);
            } else {
                live.push(hyp);
            }
        }
    }
    done.extend(live);
    done.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for hyp in done {
        if seen.insert(hyp.text.clone()) {
            out.push(BeamResult {
                identifier: hyp.text,
                cum_logprob: hyp.logprob,
            });
        }
        if out.len() == width {
            break;
        }
    }
    Ok(out)
}

/// Keeps the beams whose identifier is a candidate, in order.
pub fn filter_to_candidates(
    beams: &[BeamResult],
    candidates: &BTreeSet<String>,
) -> Vec<BeamResult> {
    beams
        .iter()
        .filter(|b| candidates.contains(&b.identifier))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamAllScore {
    pub candidate: CandidateId,
    pub identifier: String,
    pub sum_logprob: f64,
    pub length: usize,
    pub penalized: f64,
}

#[derive(Debug, Clone)]
pub struct BeamAllOutput {
    pub scores: Vec<BeamAllScore>,
    pub forward_passes: usize,
}

/// Exhaustive constrained scoring of every candidate: one masked forward
/// pass per internal tree node, summed log-probabilities along each path,
/// divided by `length^alpha`. Sorted best first, ties in candidate order.
pub fn beam_all(
    backend: &mut dyn ModelBackend,
    tables: &TokenTables,
    tree: &CompletionTree,
    prefix: &TokenSeq,
    alpha: f64,
    include_termination: bool,
) -> Result<BeamAllOutput, RankError> {
    let mut sums = vec![0.0f64; tree.len()];
    let mut forward_passes = 0;
    for node in tree.reachable() {
        if tree.node(node).is_leaf() {
            continue;
        }
        let allowed = build_allowed_set(tree, node, tables, include_termination)?;
        let mut context = prefix.tokens.clone();
        context.extend(tree.path_tokens(node));
        let dist = backend.next_distribution(&context, Some(&allowed), None)?;
        forward_passes += 1;
        for (token, members) in tree.valid_continuations(node) {
            let p = dist
                .get(token)
                .ok_or(RankError::MissingChildProbability(token))?;
            let lp = p.ln();
            for m in members {
                sums[m.0] += lp;
            }
        }
    }
    let mut scores: Vec<BeamAllScore> = tree
        .candidates()
        .iter()
        .enumerate()
        .map(|(i, cand)| {
            let length = cand.tokens.len();
            BeamAllScore {
                candidate: CandidateId(i),
                identifier: cand.identifier.clone(),
                sum_logprob: sums[i],
                length,
                penalized: sums[i] / (length as f64).powf(alpha),
            }
        })
        .collect();
    scores.sort_by(|a, b| b.penalized.total_cmp(&a.penalized));
    Ok(BeamAllOutput {
        scores,
        forward_passes,
    })
}
