//! Deterministic table-driven and seeded mock language models.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use super::{
    answer_from_dense, BackendError, BackendFactory, Distribution, LogitMask, ModelBackend,
};
use crate::token::{TokenId, Vocabulary};

/// Longest context suffix a table entry can key on.
pub const MAX_SUFFIX: usize = 4;

/// How a mock model maps contexts to distributions.
#[derive(Debug, Clone)]
pub enum MockSpec {
    /// Explicit distributions keyed on context suffixes of up to
    /// [`MAX_SUFFIX`] tokens. The longest matching suffix wins; contexts
    /// with no matching entry get `default`.
    Table {
        default: Vec<f64>,
        entries: HashMap<Vec<TokenId>, Vec<f64>>,
    },
    /// Distribution drawn from a generator seeded by `seed` and the last
    /// `order` context tokens: softmax of normal logits with std `spread`.
    Seeded {
        seed: u64,
        order: usize,
        spread: f64,
        vocab_size: usize,
    },
}

impl MockSpec {
    pub fn table(
        default: Vec<f64>,
        entries: impl IntoIterator<Item = (Vec<TokenId>, Vec<f64>)>,
    ) -> Result<Self, BackendError> {
        check_probs("default", &default)?;
        let mut map = HashMap::new();
        for (suffix, probs) in entries {
            if suffix.is_empty() || suffix.len() > MAX_SUFFIX {
                return Err(BackendError::MalformedSpec(format!(
                    "context suffix must have 1..={MAX_SUFFIX} tokens, got {}",
                    suffix.len()
                )));
            }
            if probs.len() != default.len() {
                return Err(BackendError::MalformedSpec(
                    "entry width differs from vocabulary size".into(),
                ));
            }
            check_probs("entry", &probs)?;
            map.insert(suffix, probs);
        }
        Ok(Self::Table {
            default,
            entries: map,
        })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self::Table {
            default: vec![1.0 / vocab_size as f64; vocab_size],
            entries: HashMap::new(),
        }
    }

    pub fn seeded(seed: u64, vocab_size: usize) -> Self {
        Self::Seeded {
            seed,
            order: MAX_SUFFIX,
            spread: 2.0,
            vocab_size,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Table { default, .. } => default.len(),
            Self::Seeded { vocab_size, .. } => *vocab_size,
        }
    }

    /// Parses the JSON description format, resolving token texts against
    /// `vocab`.
    pub fn from_json(json: &str, vocab: &Vocabulary) -> Result<Self, BackendError> {
        let file: MockSpecFile =
            serde_json::from_str(json).map_err(|e| BackendError::MalformedSpec(e.to_string()))?;
        file.resolve(vocab)
    }
}

fn check_probs(what: &str, probs: &[f64]) -> Result<(), BackendError> {
    if probs.is_empty() {
        return Err(BackendError::MalformedSpec(format!(
            "{what}: empty distribution"
        )));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(BackendError::MalformedSpec(format!(
            "{what}: invalid probability {p}"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if sum > 1.0 + 1e-9 {
        return Err(BackendError::MalformedSpec(format!(
            "{what}: probabilities sum to {sum}"
        )));
    }
    Ok(())
}

/// On-disk mock description. Tokens are named by text.
///
/// ```json
/// { "default": {"add": 0.5, "(": 0.5},
///   "contexts": [{"suffix": [".", "ad"], "probs": {"d": 1.0}}],
///   "max_context": 2048 }
/// ```
/// or `{ "seeded": {"seed": 7} }`.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MockSpecFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contexts: Vec<MockContextEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeded: Option<SeededFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockContextEntry {
    pub suffix: Vec<String>,
    pub probs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeededFile {
    pub seed: u64,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_order() -> usize {
    MAX_SUFFIX
}

fn default_spread() -> f64 {
    2.0
}

impl MockSpecFile {
    pub fn resolve(&self, vocab: &Vocabulary) -> Result<MockSpec, BackendError> {
        if let Some(seeded) = &self.seeded {
            if self.default.is_some() || !self.contexts.is_empty() {
                return Err(BackendError::MalformedSpec(
                    "\"seeded\" cannot be combined with table entries".into(),
                ));
            }
            if seeded.order == 0 || !(seeded.spread.is_finite() && seeded.spread >= 0.0) {
                return Err(BackendError::MalformedSpec("bad seeded parameters".into()));
            }
            return Ok(MockSpec::Seeded {
                seed: seeded.seed,
                order: seeded.order,
                spread: seeded.spread,
                vocab_size: vocab.len(),
            });
        }
        let default = self
            .default
            .as_ref()
            .ok_or_else(|| BackendError::MalformedSpec("missing default distribution".into()))?;
        let dense = |probs: &BTreeMap<String, f64>| -> Result<Vec<f64>, BackendError> {
            let mut out = vec![0.0; vocab.len()];
            for (text, &p) in probs {
                let id = lookup(vocab, text)?;
                out[id.index()] = p;
            }
            Ok(out)
        };
        let mut entries = Vec::with_capacity(self.contexts.len());
        for entry in &self.contexts {
            let suffix = entry
                .suffix
                .iter()
                .map(|t| lookup(vocab, t))
                .collect::<Result<Vec<_>, _>>()?;
            entries.push((suffix, dense(&entry.probs)?));
        }
        MockSpec::table(dense(default)?, entries)
    }
}

fn lookup(vocab: &Vocabulary, text: &str) -> Result<TokenId, BackendError> {
    vocab
        .id(text)
        .ok_or_else(|| BackendError::MalformedSpec(format!("token {text:?} not in vocabulary")))
}

/// Deterministic backend over a [`MockSpec`]. Clones share the spec.
#[derive(Debug, Clone)]
pub struct MockBackend {
    spec: Arc<MockSpec>,
    max_context: Option<usize>,
}

impl MockBackend {
    pub fn new(spec: MockSpec) -> Self {
        Self {
            spec: Arc::new(spec),
            max_context: None,
        }
    }

    pub fn with_max_context(mut self, max: usize) -> Self {
        self.max_context = Some(max);
        self
    }

    /// Reads a JSON description file, honoring its `max_context`.
    pub fn from_file(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self, BackendError> {
        let json = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            BackendError::MalformedSpec(format!("{}: {e}", path.as_ref().display()))
        })?;
        let file: MockSpecFile =
            serde_json::from_str(&json).map_err(|e| BackendError::MalformedSpec(e.to_string()))?;
        let backend = Self::new(file.resolve(vocab)?);
        Ok(match file.max_context {
            Some(max) => backend.with_max_context(max),
            None => backend,
        })
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    /// The unmasked distribution for `context` as a dense vector.
    pub fn dense_probs(&self, context: &[TokenId]) -> Vec<f64> {
        match &*self.spec {
            MockSpec::Table { default, entries } => {
                let longest = context.len().min(MAX_SUFFIX);
                (1..=longest)
                    .rev()
                    .find_map(|n| entries.get(&context[context.len() - n..]))
                    .unwrap_or(default)
                    .clone()
            }
            MockSpec::Seeded {
                seed,
                order,
                spread,
                vocab_size,
            } => {
                let key = &context[context.len().saturating_sub(*order)..];
                seeded_probs(*seed, key, *spread, *vocab_size)
            }
        }
    }
}

impl ModelBackend for MockBackend {
    fn next_distribution(
        &mut self,
        context: &[TokenId],
        allowed: Option<&LogitMask>,
        query: Option<&[TokenId]>,
    ) -> Result<Distribution, BackendError> {
        if context.is_empty() {
            return Err(BackendError::InvalidRequest("empty context".into()));
        }
        if let Some(max) = self.max_context {
            if context.len() > max {
                return Err(BackendError::ContextTooLong {
                    len: context.len(),
                    max,
                });
            }
        }
        answer_from_dense(&self.dense_probs(context), allowed, query)
    }
}

impl BackendFactory for MockBackend {
    fn open(&self) -> Result<Box<dyn ModelBackend>, BackendError> {
        Ok(Box::new(self.clone()))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn seeded_probs(seed: u64, key: &[TokenId], spread: f64, vocab_size: usize) -> Vec<f64> {
    let mut h = splitmix64(seed);
    for t in key {
        h = splitmix64(h ^ u64::from(t.0));
    }
    h = splitmix64(h ^ key.len() as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let normal = Normal::new(0.0, spread.max(f64::MIN_POSITIVE)).expect("finite spread");
    let logits: Vec<f64> = (0..vocab_size).map(|_| normal.sample(&mut rng)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
