//! Fixture generators, wrapper models and reference scorers shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trierank::backend::{
    answer_from_dense, BackendError, Distribution, LogitMask, MockBackend, MockSpec, ModelBackend,
};
use trierank::engine::{DecodeObserver, StepOutcome, StepRecord};
use trierank::tree::CompletionTree;
use trierank::{TokenId, TokenSeq, TokenTables, Vocabulary};

pub const PREFIX: &str = "x.";
pub const TERMINATORS: [&str; 6] = [".", "(", ")", "\n", " ", ";"];

pub struct Fixture {
    pub seed: u64,
    pub tables: TokenTables,
    pub prefix: TokenSeq,
    pub candidates: Vec<String>,
    pub truth: String,
    pub model: MockBackend,
}

impl Fixture {
    pub fn tokens(&self, candidate: &str) -> Vec<TokenId> {
        self.tables.vocab.tokenize(candidate).unwrap().tokens
    }
}

/// Random vocabulary of at most 64 tokens: "x", terminators, single
/// letters and random 2-4 letter tokens (many of them prefixes of each
/// other). Up to 50 candidates of 1-6 tokens, built by extending earlier
/// candidates so that prefixes are shared. Seeded mock model.
pub fn fuzz_fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters: Vec<char> = "abcdefAB".chars().collect();
    let mut texts: Vec<String> = ["x"]
        .iter()
        .chain(TERMINATORS.iter())
        .map(|s| s.to_string())
        .collect();
    texts.extend(letters.iter().map(|c| c.to_string()));
    let target = rng.random_range(24..=64);
    let mut guard = 0;
    while texts.len() < target && guard < 10_000 {
        guard += 1;
        let len = rng.random_range(2..=4);
        let t: String = (0..len)
            .map(|_| *letters.choose(&mut rng).unwrap())
            .collect();
        if !texts.contains(&t) {
            texts.push(t);
        }
    }
    let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str)).unwrap();
    let words: Vec<&str> = texts
        .iter()
        .map(String::as_str)
        .filter(|t| t.chars().all(|c| c.is_ascii_alphabetic()) && *t != "x")
        .collect();
    let candidates = random_candidates(&mut rng, &vocab, &words, 50, 6);
    finish(seed, rng, vocab, candidates)
}

fn random_candidates(
    rng: &mut ChaCha8Rng,
    vocab: &Vocabulary,
    words: &[&str],
    max_count: usize,
    max_depth: usize,
) -> Vec<String> {
    let n = rng.random_range(1..=max_count);
    let mut out: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    let mut attempts = 0;
    while out.len() < n && attempts < n * 20 {
        attempts += 1;
        let mut s = String::new();
        if !out.is_empty() && rng.random_bool(0.6) {
            let base = vocab.tokenize(out.choose(rng).unwrap()).unwrap();
            let cut = rng.random_range(1..=base.len());
            for &t in &base.tokens[..cut] {
                s.push_str(vocab.text(t));
            }
        }
        for _ in 0..rng.random_range(1..=3) {
            s.push_str(words.choose(rng).unwrap());
        }
        let len = vocab.tokenize(&s).unwrap().len();
        if len >= 1 && len <= max_depth && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

fn finish(seed: u64, mut rng: ChaCha8Rng, vocab: Vocabulary, candidates: Vec<String>) -> Fixture {
    let truth = candidates.choose(&mut rng).unwrap().clone();
    let model = MockBackend::new(MockSpec::seeded(rng.random(), vocab.len()));
    let prefix = vocab.tokenize(PREFIX).unwrap();
    Fixture {
        seed,
        tables: TokenTables::new(vocab),
        prefix,
        candidates,
        truth,
        model,
    }
}

/// Two-letter consonant-vowel syllables: no token is a prefix of another,
/// so no subtoken events can occur. Candidates are syllable strings with
/// no candidate a token prefix of another, so no node is both terminal and
/// internal.
pub fn syllable_fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syllables: Vec<String> = "bdgkm"
        .chars()
        .flat_map(|c| "aeiou".chars().map(move |v| format!("{c}{v}")))
        .collect();
    let mut texts: Vec<String> = ["x"]
        .iter()
        .chain(TERMINATORS.iter())
        .map(|s| s.to_string())
        .collect();
    texts.extend(syllables.iter().cloned());
    let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str)).unwrap();
    let words: Vec<&str> = syllables.iter().map(String::as_str).collect();
    let mut candidates = random_candidates(&mut rng, &vocab, &words, 50, 6);
    let all = candidates.clone();
    candidates.retain(|c| !all.iter().any(|o| o != c && o.starts_with(c.as_str())));
    finish(seed, rng, vocab, candidates)
}

/// Fixture whose candidates all start with distinct tokens.
pub fn unique_first_fixture(seed: u64) -> Fixture {
    let mut f = fuzz_fixture(seed);
    let mut firsts = HashSet::new();
    let tables = &f.tables;
    f.candidates
        .retain(|c| firsts.insert(tables.vocab.tokenize(c).unwrap().tokens[0]));
    if !f.candidates.contains(&f.truth) {
        f.truth = f.candidates[0].clone();
    }
    f
}

/// Shared-prefix fixture: stems `s` are syllables, main tokens `s + t` are
/// in the vocabulary, so `s` is a subtoken of several root children.
pub fn split_fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syllables: Vec<String> = "bdgkmprt"
        .chars()
        .flat_map(|c| "aeio".chars().map(move |v| format!("{c}{v}")))
        .collect();
    let mut texts: Vec<String> = ["x"]
        .iter()
        .chain(TERMINATORS.iter())
        .map(|s| s.to_string())
        .collect();
    texts.extend(syllables.iter().cloned());
    let stems: Vec<String> = syllables.choose_multiple(&mut rng, 3).cloned().collect();
    let mut mains = Vec::new();
    for s in &stems {
        let k = rng.random_range(2..=4);
        for t in syllables.choose_multiple(&mut rng, k) {
            let m = format!("{s}{t}");
            if !texts.contains(&m) {
                texts.push(m.clone());
                mains.push(m);
            }
        }
    }
    // a few longer mains give nested shared prefixes
    for m in mains.clone().choose_multiple(&mut rng, 2) {
        let t = syllables.choose(&mut rng).unwrap();
        let long = format!("{m}{t}");
        if !texts.contains(&long) {
            texts.push(long);
        }
    }
    let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str)).unwrap();
    let mut candidates = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..rng.random_range(2..=30) {
        let mut s = mains.choose(&mut rng).unwrap().clone();
        for _ in 0..rng.random_range(0..=3) {
            s.push_str(syllables.choose(&mut rng).unwrap());
        }
        if seen.insert(s.clone()) {
            candidates.push(s);
        }
    }
    finish(seed, rng, vocab, candidates)
}

/// Reads the dense distribution a mock would answer with.
pub fn dense(model: &MockBackend, context: &[TokenId]) -> Vec<f64> {
    model.dense_probs(context)
}

/// Moves probability mass so that `winner` holds the largest value: swaps
/// its probability with the current maximum.
fn promote(probs: &mut [f64], winner: TokenId) {
    let (imax, _) =
        probs.iter().enumerate().fold(
            (0, f64::MIN),
            |best, (i, &p)| if p > best.1 { (i, p) } else { best },
        );
    probs.swap(imax, winner.index());
}

/// Candidate token sequences indexed for path lookups.
#[derive(Clone)]
pub struct PathIndex {
    pub prefix_len: usize,
    pub seqs: Vec<Vec<TokenId>>,
}

impl PathIndex {
    pub fn new(f: &Fixture) -> Self {
        Self {
            prefix_len: f.prefix.len(),
            seqs: f.candidates.iter().map(|c| f.tokens(c)).collect(),
        }
    }

    pub fn children(&self, path: &[TokenId]) -> BTreeSet<TokenId> {
        self.seqs
            .iter()
            .filter(|s| s.len() > path.len() && s[..path.len()] == *path)
            .map(|s| s[path.len()])
            .collect()
    }
}

/// Wraps a mock so that the unconstrained argmax is always the most likely
/// child of the current (unsplit) tree node.
pub struct OnTreeModel {
    pub inner: MockBackend,
    pub index: PathIndex,
}

impl ModelBackend for OnTreeModel {
    fn next_distribution(
        &mut self,
        context: &[TokenId],
        allowed: Option<&LogitMask>,
        query: Option<&[TokenId]>,
    ) -> Result<Distribution, BackendError> {
        let mut probs = self.inner.dense_probs(context);
        let path = &context[self.index.prefix_len.min(context.len())..];
        let children = self.index.children(path);
        if let Some(best) = children.iter().copied().reduce(|a, b| {
            if probs[b.index()] > probs[a.index()] {
                b
            } else {
                a
            }
        }) {
            promote(&mut probs, best);
        }
        answer_from_dense(&probs, allowed, query)
    }
}

/// Wraps a mock so that, whenever the mask holds a token that is a strict
/// text prefix of another masked token, the first such token is the
/// argmax. Forces subtoken selections and thus pushes and splits.
pub struct SubtokenModel {
    pub inner: MockBackend,
    pub vocab: Vocabulary,
}

impl ModelBackend for SubtokenModel {
    fn next_distribution(
        &mut self,
        context: &[TokenId],
        allowed: Option<&LogitMask>,
        query: Option<&[TokenId]>,
    ) -> Result<Distribution, BackendError> {
        let mut probs = self.inner.dense_probs(context);
        if let Some(mask) = allowed {
            let sub = mask.allowed().iter().copied().find(|&s| {
                let st = self.vocab.text(s);
                mask.allowed().iter().any(|&m| {
                    let mt = self.vocab.text(m);
                    mt.len() > st.len() && mt.starts_with(st)
                })
            });
            if let Some(s) = sub {
                promote(&mut probs, s);
            }
        }
        answer_from_dense(&probs, allowed, query)
    }
}

/// Beam@All recomputed from scratch: each candidate is re-tokenized and
/// its path walked token by token, rebuilding the allowed set at every
/// prefix from the raw candidate list and vocabulary.
pub fn brute_force_beam_all(f: &Fixture, alpha: f64) -> Vec<(String, f64)> {
    let vocab = &f.tables.vocab;
    let seqs: Vec<Vec<TokenId>> = f.candidates.iter().map(|c| f.tokens(c)).collect();
    let termination: Vec<TokenId> = vocab
        .iter()
        .filter(|(_, t)| {
            let c = t.chars().next().unwrap();
            !(c.is_ascii_alphanumeric() || c == '_')
        })
        .map(|(id, _)| id)
        .collect();
    let mut scores = Vec::new();
    for (cand, seq) in f.candidates.iter().zip(&seqs) {
        let mut sum = 0.0;
        for j in 0..seq.len() {
            let path = &seq[..j];
            let mut allowed: BTreeSet<TokenId> = BTreeSet::new();
            let mut terminal = false;
            for other in &seqs {
                if other.len() >= j && other[..j] == *path {
                    if other.len() == j {
                        terminal = true;
                    } else {
                        let main = other[j];
                        allowed.insert(main);
                        let mt = vocab.text(main);
                        for (id, t) in vocab.iter() {
                            if t.len() < mt.len() && mt.starts_with(t) {
                                allowed.insert(id);
                            }
                        }
                    }
                }
            }
            if terminal {
                allowed.extend(termination.iter().copied());
            }
            let mut context = f.prefix.tokens.clone();
            context.extend_from_slice(path);
            let probs = f.model.dense_probs(&context);
            let mass: f64 = allowed.iter().map(|t| probs[t.index()]).sum();
            let p = if mass > 0.0 {
                probs[seq[j].index()] / mass
            } else {
                1.0 / allowed.len() as f64
            };
            sum += p.ln();
        }
        scores.push((cand.clone(), sum / (seq.len() as f64).powf(alpha)));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].1.total_cmp(&scores[a].1));
    order.into_iter().map(|i| scores[i].clone()).collect()
}

/// Candidate reached by following the constrained argmax through child
/// edges only, with no tree restructuring.
pub fn constrained_greedy_descent(f: &Fixture) -> Option<String> {
    let tree = CompletionTree::build(&f.candidates, &f.tables.vocab).unwrap();
    let mut node = tree.root();
    let mut model = f.model.clone();
    loop {
        if let Some(c) = tree.unique_candidate(node) {
            return Some(tree.candidate(c).identifier.clone());
        }
        let children: Vec<TokenId> = tree.node(node).children.keys().copied().collect();
        if children.is_empty() {
            return tree
                .node(node)
                .terminal_for
                .map(|c| tree.candidate(c).identifier.clone());
        }
        let mask = trierank::engine::build_allowed_set(&tree, node, &f.tables, true).unwrap();
        let mut context = f.prefix.tokens.clone();
        context.extend(tree.path_tokens(node));
        let dist = model
            .next_distribution(&context, Some(&mask), None)
            .unwrap();
        node = tree.child(node, dist.argmax)?;
    }
}

/// Records every step and checks tree restructuring as it happens.
#[derive(Default)]
pub struct Recorder {
    pub steps: Vec<StepRecord>,
    pub mask_violations: usize,
    pub splits: usize,
    pub pushes: usize,
    pub represented_before: Option<BTreeSet<String>>,
    pub representation_changes: usize,
    pub invariant_errors: Vec<String>,
    pub vocab: Option<Vocabulary>,
}

impl Recorder {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            vocab: Some(vocab.clone()),
            ..Self::default()
        }
    }

    fn represented(&self, tree: &CompletionTree) -> BTreeSet<String> {
        let vocab = self.vocab.as_ref().unwrap();
        tree.represented(vocab)
            .into_iter()
            .map(|(_, s)| s)
            .collect()
    }
}

impl DecodeObserver for Recorder {
    fn on_start(&mut self, tree: &CompletionTree) {
        self.represented_before = Some(self.represented(tree));
    }

    fn on_step(&mut self, record: &StepRecord, tree: &CompletionTree) {
        if !record.allowed.contains(record.selected) {
            self.mask_violations += 1;
        }
        match record.outcome {
            StepOutcome::Split { .. } => {
                self.splits += 1;
                let now = self.represented(tree);
                if Some(&now) != self.represented_before.as_ref() {
                    self.representation_changes += 1;
                }
                if let Err(e) = tree.check_invariants(self.vocab.as_ref().unwrap()) {
                    self.invariant_errors.push(e);
                }
            }
            StepOutcome::Push { .. } => self.pushes += 1,
            _ => {}
        }
        self.steps.push(record.clone());
    }
}

/// Ranks of `truth` in each list, `None` when absent.
pub fn rank_in(list: &[String], truth: &str) -> Option<usize> {
    list.iter().position(|s| s == truth).map(|i| i + 1)
}

pub fn identifiers<T, F: Fn(&T) -> String>(items: &[T], f: F) -> Vec<String> {
    items.iter().map(f).collect()
}

pub fn histogram(values: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}
