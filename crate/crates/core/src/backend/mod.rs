//! The model-backend contract.
//!
//! A backend answers one question: given a context, what is the next-token
//! distribution? Constrained queries carry a [`LogitMask`]; the returned
//! probabilities are then renormalized over the allowed tokens, which is what
//! a softmax over logits with the disallowed entries set to `-inf` produces.
//! Unconstrained queries return the argmax of the full distribution plus the
//! probabilities of any requested query tokens.

pub mod mock;
pub mod remote;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::TokenId;

pub use mock::{MockBackend, MockSpec};
pub use remote::{RemoteBackend, RemoteServer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("context of {len} tokens exceeds the backend window of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("malformed mock spec: {0}")]
    MalformedSpec(String),
}

/// Set of tokens a constrained step may select. Sorted, deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LogitMask {
    allowed: Vec<TokenId>,
}

impl LogitMask {
    pub fn new(allowed: impl IntoIterator<Item = TokenId>) -> Self {
        let mut allowed: Vec<TokenId> = allowed.into_iter().collect();
        allowed.sort_unstable();
        allowed.dedup();
        Self { allowed }
    }

    pub fn allowed(&self) -> &[TokenId] {
        &self.allowed
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.allowed.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub probs: BTreeMap<TokenId, f64>,
    pub argmax: TokenId,
}

impl Distribution {
    /// Probability of `id`; tokens missing from the reported support are 0.
    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs.get(&id).copied().unwrap_or(0.0)
    }

    pub fn get(&self, id: TokenId) -> Option<f64> {
        self.probs.get(&id).copied()
    }

    pub fn support_mass(&self) -> f64 {
        self.probs.values().sum()
    }

    /// The `k` most probable reported tokens, ties broken by lower id.
    pub fn top_k(&self, k: usize) -> Vec<(TokenId, f64)> {
        let mut all: Vec<(TokenId, f64)> = self.probs.iter().map(|(&t, &p)| (t, p)).collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }
}

pub trait ModelBackend {
    /// Next-token distribution after `context`.
    ///
    /// With `allowed`, probabilities are renormalized over the allowed set
    /// and the argmax is taken within it. Without it, the argmax is over the
    /// whole vocabulary and `query` lists tokens whose probabilities must be
    /// reported; `query = None` asks for the full distribution.
    fn next_distribution(
        &mut self,
        context: &[TokenId],
        allowed: Option<&LogitMask>,
        query: Option<&[TokenId]>,
    ) -> Result<Distribution, BackendError>;

    /// Tokenization of `texts` as the model's own tokenizer produces it, when
    /// the backend can supply it.
    fn tokenize_upstream(
        &mut self,
        _texts: &[String],
    ) -> Result<Option<Vec<Vec<TokenId>>>, BackendError> {
        Ok(None)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn next_distribution(
        &mut self,
        context: &[TokenId],
        allowed: Option<&LogitMask>,
        query: Option<&[TokenId]>,
    ) -> Result<Distribution, BackendError> {
        (**self).next_distribution(context, allowed, query)
    }

    fn tokenize_upstream(
        &mut self,
        texts: &[String],
    ) -> Result<Option<Vec<Vec<TokenId>>>, BackendError> {
        (**self).tokenize_upstream(texts)
    }
}

/// Opens one backend session per completion point.
pub trait BackendFactory: Send + Sync {
    fn open(&self) -> Result<Box<dyn ModelBackend>, BackendError>;
}

/// Counts forward passes and remembers when the first one returned.
pub struct CountingBackend<B> {
    inner: B,
    calls: usize,
    first_response: Option<Instant>,
}

impl<B: ModelBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: 0,
            first_response: None,
        }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn first_response(&self) -> Option<Instant> {
        self.first_response
    }

    pub fn reset(&mut self) {
        self.calls = 0;
        self.first_response = None;
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: ModelBackend> ModelBackend for CountingBackend<B> {
    fn next_distribution(
        &mut self,
        context: &[TokenId],
        allowed: Option<&LogitMask>,
        query: Option<&[TokenId]>,
    ) -> Result<Distribution, BackendError> {
        self.calls += 1;
        let dist = self.inner.next_distribution(context, allowed, query)?;
        if self.first_response.is_none() {
            self.first_response = Some(Instant::now());
        }
        Ok(dist)
    }

    fn tokenize_upstream(
        &mut self,
        texts: &[String],
    ) -> Result<Option<Vec<Vec<TokenId>>>, BackendError> {
        self.inner.tokenize_upstream(texts)
    }
}

/// Allowed mass this close to one is taken as already normalized.
pub const NORMALIZED_EPS: f64 = 1e-12;

/// Answers a distribution request from a dense probability vector indexed by
/// token id. Shared by the mock backend and the protocol server.
pub fn answer_from_dense(
    probs: &[f64],
    allowed: Option<&LogitMask>,
    query: Option<&[TokenId]>,
) -> Result<Distribution, BackendError> {
    let size = probs.len();
    let check = |id: TokenId| {
        if id.index() < size {
            Ok(())
        } else {
            Err(BackendError::InvalidRequest(format!(
                "token id {id} outside vocabulary of {size}"
            )))
        }
    };
    match allowed {
        Some(mask) => {
            if mask.is_empty() {
                return Err(BackendError::InvalidRequest("empty logit mask".into()));
            }
            for &id in mask.allowed() {
                check(id)?;
            }
            let mass: f64 = mask.allowed().iter().map(|id| probs[id.index()]).sum();
            let mut out = BTreeMap::new();
            for &id in mask.allowed() {
                let p = if (mass - 1.0).abs() <= NORMALIZED_EPS {
                    // already a distribution over the mask; dividing would
                    // only add rounding noise
                    probs[id.index()]
                } else if mass > 0.0 {
                    probs[id.index()] / mass
                } else {
                    // every allowed logit is -inf relative to the rest: equal shares
                    1.0 / mask.len() as f64
                };
                out.insert(id, p);
            }
            let argmax = argmax_of(out.iter().map(|(&t, &p)| (t, p)));
            Ok(Distribution { probs: out, argmax })
        }
        None => {
            if size == 0 {
                return Err(BackendError::InvalidRequest("empty vocabulary".into()));
            }
            let argmax = argmax_of(
                probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (TokenId(i as u32), p)),
            );
            let mut out = BTreeMap::new();
            match query {
                Some(ids) => {
                    for &id in ids {
                        check(id)?;
                        out.insert(id, probs[id.index()]);
                    }
                    out.insert(argmax, probs[argmax.index()]);
                }
                None => {
                    for (i, &p) in probs.iter().enumerate() {
                        if p > 0.0 {
                            out.insert(TokenId(i as u32), p);
                        }
                    }
                    out.insert(argmax, probs[argmax.index()]);
                }
            }
            Ok(Distribution { probs: out, argmax })
        }
    }
}

/// Highest probability wins; ties go to the lowest token id.
fn argmax_of(it: impl Iterator<Item = (TokenId, f64)>) -> TokenId {
    let mut best: Option<(TokenId, f64)> = None;
    for (t, p) in it {
        match best {
            Some((bt, bp)) if p < bp || (p == bp && t > bt) => {}
            _ => best = Some((t, p)),
        }
    }
    best.expect("non-empty support").0
}
