//! Prefix tree over the token sequences of completion candidates.
//!
//! Nodes live in an arena and are addressed by [`NodeId`]. Every node keeps
//! the set of candidates whose path passes through it; a node that ends a
//! candidate's full token sequence is terminal for that candidate and may
//! still have children (`add` / `addAll`).
//!
//! The tree is mutable during a decode: when the decoder selects a subtoken
//! shared by several child main tokens, [`CompletionTree::split_on_subtoken`]
//! inserts it as an intermediate node and re-tokenizes the affected
//! suffixes. Detached subtrees stay in the arena but are unreachable.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subtoken::SubtokenMap;
use crate::token::{TokenError, TokenId, Vocabulary};

/// Index into the original candidate list. Lower ids come first on ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("candidate list is empty")]
    EmptyCandidateList,
    #[error("duplicate candidate {0:?}")]
    DuplicateCandidate(String),
    #[error("empty identifier at candidate index {0}")]
    EmptyIdentifier(usize),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("token sequence for {identifier:?} does not spell it")]
    SequenceMismatch { identifier: String },
    #[error("token {token} is not a shared strict prefix of two or more children")]
    NotASharedPrefix { token: TokenId },
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub edge: Option<TokenId>,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub children: BTreeMap<TokenId, NodeId>,
    pub members: BTreeSet<CandidateId>,
    pub terminal_for: Option<CandidateId>,
    /// Tree version at which the node was created.
    pub created_at: u64,
}

impl TreeNode {
    fn new(edge: Option<TokenId>, parent: Option<NodeId>, depth: usize, created_at: u64) -> Self {
        Self {
            edge,
            parent,
            depth,
            children: BTreeMap::new(),
            members: BTreeSet::new(),
            terminal_for: None,
            created_at,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub identifier: String,
    /// Current token path; changes when a split re-tokenizes the suffix.
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct CompletionTree {
    nodes: Vec<TreeNode>,
    candidates: Vec<Candidate>,
    version: u64,
    splits: usize,
}

const ROOT: NodeId = NodeId(0);

impl CompletionTree {
    /// Tokenizes every candidate with longest match and inserts it.
    pub fn build<S: AsRef<str>>(candidates: &[S], vocab: &Vocabulary) -> Result<Self, TreeError> {
        let seqs = candidates
            .iter()
            .map(|c| vocab.tokenize(c.as_ref()).map(|s| s.tokens))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_sequences(candidates, seqs, vocab)
    }

    /// Builds from explicit token sequences, e.g. ones supplied by the
    /// model's own tokenizer. Each sequence must spell its identifier.
    pub fn from_sequences<S: AsRef<str>>(
        candidates: &[S],
        seqs: Vec<Vec<TokenId>>,
        vocab: &Vocabulary,
    ) -> Result<Self, TreeError> {
        if candidates.is_empty() {
            return Err(TreeError::EmptyCandidateList);
        }
        let mut seen = HashSet::with_capacity(candidates.len());
        let mut tree = Self {
            nodes: vec![TreeNode::new(None, None, 0, 0)],
            candidates: Vec::with_capacity(candidates.len()),
            version: 0,
            splits: 0,
        };
        for (i, (identifier, tokens)) in candidates.iter().zip(seqs).enumerate() {
            let identifier = identifier.as_ref();
            if identifier.is_empty() {
                return Err(TreeError::EmptyIdentifier(i));
            }
            if !seen.insert(identifier) {
                return Err(TreeError::DuplicateCandidate(identifier.to_string()));
            }
            if tokens.iter().any(|&t| !vocab.contains(t)) || vocab.decode(&tokens) != identifier {
                return Err(TreeError::SequenceMismatch {
                    identifier: identifier.to_string(),
                });
            }
            let id = CandidateId(i);
            tree.nodes[ROOT.0].members.insert(id);
            tree.insert_path(ROOT, &tokens, id)?;
            tree.candidates.push(Candidate {
                identifier: identifier.to_string(),
                tokens,
            });
        }
        Ok(tree)
    }

    fn insert_path(
        &mut self,
        from: NodeId,
        tokens: &[TokenId],
        id: CandidateId,
    ) -> Result<(), TreeError> {
        let mut at = from;
        for &t in tokens {
            at = match self.nodes[at.0].children.get(&t) {
                Some(&child) => child,
                None => {
                    let child = NodeId(self.nodes.len());
                    let depth = self.nodes[at.0].depth + 1;
                    self.nodes
                        .push(TreeNode::new(Some(t), Some(at), depth, self.version));
                    self.nodes[at.0].children.insert(t, child);
                    child
                }
            };
            self.nodes[at.0].members.insert(id);
        }
        let node = &mut self.nodes[at.0];
        if let Some(other) = node.terminal_for {
            let name = self
                .candidates
                .get(other.0)
                .map_or_else(String::new, |c| c.identifier.clone());
            return Err(TreeError::DuplicateCandidate(name));
        }
        node.terminal_for = Some(id);
        Ok(())
    }

    pub fn root(&self) -> NodeId {
        ROOT
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0]
    }

    pub fn child(&self, node: NodeId, token: TokenId) -> Option<NodeId> {
        self.nodes[node.0].children.get(&token).copied()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn candidate(&self, id: CandidateId) -> &Candidate {
        &self.candidates[id.0]
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Structural version; bumped by every split.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn splits(&self) -> usize {
        self.splits
    }

    /// One entry per child edge, ascending token id, with the members under
    /// that edge.
    pub fn valid_continuations(&self, node: NodeId) -> Vec<(TokenId, &BTreeSet<CandidateId>)> {
        self.nodes[node.0]
            .children
            .iter()
            .map(|(&t, &c)| (t, &self.nodes[c.0].members))
            .collect()
    }

    pub fn unique_candidate(&self, node: NodeId) -> Option<CandidateId> {
        let members = &self.nodes[node.0].members;
        if members.len() == 1 {
            members.first().copied()
        } else {
            None
        }
    }

    /// The single child main token that `subtoken` is a registered subtoken
    /// of, if exactly one exists.
    pub fn main_token_push(
        &self,
        node: NodeId,
        subtoken: TokenId,
        submap: &SubtokenMap,
    ) -> Option<TokenId> {
        let mut hits = self.nodes[node.0]
            .children
            .keys()
            .filter(|&&m| submap.is_subtoken_of(subtoken, m));
        match (hits.next(), hits.next()) {
            (Some(&m), None) => Some(m),
            _ => None,
        }
    }

    /// Inserts `subtoken` as a new child of `node` and moves every candidate
    /// whose next main token starts with it underneath, re-tokenizing the
    /// rest of each affected identifier.
    pub fn split_on_subtoken(
        &mut self,
        node: NodeId,
        subtoken: TokenId,
        vocab: &Vocabulary,
    ) -> Result<NodeId, TreeError> {
        let sub_text = vocab.text(subtoken);
        let not_shared = TreeError::NotASharedPrefix { token: subtoken };
        if self.nodes[node.0].children.contains_key(&subtoken) {
            return Err(not_shared);
        }
        let affected: Vec<(TokenId, NodeId)> = self.nodes[node.0]
            .children
            .iter()
            .filter(|(&t, _)| {
                let text = vocab.text(t);
                text.len() > sub_text.len() && text.starts_with(sub_text)
            })
            .map(|(&t, &c)| (t, c))
            .collect();
        if affected.len() < 2 {
            return Err(not_shared);
        }

        let path = self.path_tokens(node);
        let consumed = vocab.decode(&path).len() + sub_text.len();
        let mut moved = BTreeSet::new();
        for (t, child) in &affected {
            self.nodes[node.0].children.remove(t);
            moved.extend(self.nodes[child.0].members.iter().copied());
        }

        self.version += 1;
        self.splits += 1;
        let new = NodeId(self.nodes.len());
        let depth = self.nodes[node.0].depth + 1;
        let mut fresh = TreeNode::new(Some(subtoken), Some(node), depth, self.version);
        fresh.members = moved.clone();
        self.nodes.push(fresh);
        self.nodes[node.0].children.insert(subtoken, new);

        for id in moved {
            let rest = &self.candidates[id.0].identifier[consumed..];
            let tail = vocab.tokenize(rest)?.tokens;
            self.insert_path(new, &tail, id)?;
            let mut tokens = path.clone();
            tokens.push(subtoken);
            tokens.extend(tail);
            self.candidates[id.0].tokens = tokens;
        }
        Ok(new)
    }

    /// Edge tokens from the root down to `node`.
    pub fn path_tokens(&self, node: NodeId) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.nodes[node.0].depth);
        let mut at = node;
        while let Some(edge) = self.nodes[at.0].edge {
            out.push(edge);
            at = self.nodes[at.0].parent.expect("non-root node has a parent");
        }
        out.reverse();
        out
    }

    /// Nodes reachable from the root, depth first, children by token id.
    pub fn reachable(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![ROOT];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[n.0].children.values().rev().copied());
        }
        out
    }

    /// Number of reachable nodes that have children.
    pub fn internal_node_count(&self) -> usize {
        self.reachable()
            .into_iter()
            .filter(|&n| !self.nodes[n.0].is_leaf())
            .count()
    }

    /// True when every node with children lies on one root-down chain.
    pub fn internal_nodes_form_chain(&self) -> bool {
        self.reachable().into_iter().all(|n| {
            self.nodes[n.0]
                .children
                .values()
                .filter(|c| !self.nodes[c.0].is_leaf())
                .count()
                <= 1
        })
    }

    /// `(candidate, spelled string)` for every terminal reachable from the
    /// root, in depth-first order.
    pub fn represented(&self, vocab: &Vocabulary) -> Vec<(CandidateId, String)> {
        self.reachable()
            .into_iter()
            .filter_map(|n| {
                self.nodes[n.0]
                    .terminal_for
                    .map(|c| (c, vocab.decode(&self.path_tokens(n))))
            })
            .collect()
    }

    /// Checks every structural invariant; returns a description of the first
    /// violation.
    pub fn check_invariants(&self, vocab: &Vocabulary) -> Result<(), String> {
        let all: BTreeSet<CandidateId> = (0..self.candidates.len()).map(CandidateId).collect();
        if self.nodes[ROOT.0].members != all {
            return Err("root members differ from the candidate set".into());
        }
        let mut terminals = BTreeMap::new();
        for n in self.reachable() {
            let node = &self.nodes[n.0];
            let mut expected: BTreeSet<CandidateId> = node
                .children
                .values()
                .flat_map(|c| self.nodes[c.0].members.iter().copied())
                .collect();
            expected.extend(node.terminal_for);
            if expected != node.members {
                return Err(format!("member set mismatch at depth {}", node.depth));
            }
            for (&t, &c) in &node.children {
                let child = &self.nodes[c.0];
                if child.edge != Some(t) || child.parent != Some(n) || child.depth != node.depth + 1
                {
                    return Err(format!("bad child link for token {t}"));
                }
            }
            if let Some(c) = node.terminal_for {
                if terminals.insert(c, n).is_some() {
                    return Err(format!("candidate {} has two terminals", c.0));
                }
            }
        }
        for (i, cand) in self.candidates.iter().enumerate() {
            let Some(&term) = terminals.get(&CandidateId(i)) else {
                return Err(format!("candidate {:?} has no terminal", cand.identifier));
            };
            let path = self.path_tokens(term);
            if path != cand.tokens {
                return Err(format!(
                    "candidate {:?} path differs from its tokens",
                    cand.identifier
                ));
            }
            if vocab.decode(&path) != cand.identifier {
                return Err(format!("path for {:?} does not spell it", cand.identifier));
            }
        }
        Ok(())
    }

    /// Deterministic text rendering: depth first, children in ascending
    /// token id, one node per line.
    pub fn dump(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        let mut stack = vec![ROOT];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n.0];
            let indent = "  ".repeat(node.depth);
            match node.edge {
                None => out.push_str("<root>"),
                Some(t) => {
                    let _ = write!(out, "{indent}{} {:?}", t.0, vocab.text(t));
                }
            }
            if let Some(c) = node.terminal_for {
                let _ = write!(
                    out,
                    " terminal={}:{:?}",
                    c.0, self.candidates[c.0].identifier
                );
            }
            let members: Vec<String> = node.members.iter().map(|m| m.0.to_string()).collect();
            let _ = writeln!(out, " members=[{}]", members.join(","));
            stack.extend(node.children.values().rev().copied());
        }
        out
    }
}
