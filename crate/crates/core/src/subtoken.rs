//! Main-token / subtoken relations.
//!
//! A main token is one produced by longest-match tokenization of a
//! candidate. Its subtokens are the vocabulary tokens whose text is a strict
//! prefix of it. The decoder admits subtokens in the logit mask and resolves
//! them back to main tokens after selection.

use std::collections::{BTreeMap, BTreeSet};

use crate::token::{is_identifier_char, TokenId, Vocabulary};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubtokenMap {
    by_main: BTreeMap<TokenId, BTreeSet<TokenId>>,
    by_sub: BTreeMap<TokenId, BTreeSet<TokenId>>,
}

static EMPTY: BTreeSet<TokenId> = BTreeSet::new();

impl SubtokenMap {
    pub fn build(vocab: &Vocabulary, mains: impl IntoIterator<Item = TokenId>) -> Self {
        let mut map = Self::default();
        for main in mains {
            let text = vocab.text(main);
            let subs: BTreeSet<TokenId> = text
                .char_indices()
                .skip(1)
                .filter_map(|(end, _)| vocab.id(&text[..end]))
                .collect();
            for &sub in &subs {
                map.by_sub.entry(sub).or_default().insert(main);
            }
            map.by_main.insert(main, subs);
        }
        map
    }

    /// Map over every vocabulary token taken as a main token.
    pub fn for_vocabulary(vocab: &Vocabulary) -> Self {
        Self::build(vocab, vocab.ids())
    }

    pub fn subtokens_of(&self, main: TokenId) -> &BTreeSet<TokenId> {
        self.by_main.get(&main).unwrap_or(&EMPTY)
    }

    pub fn mains_of(&self, sub: TokenId) -> &BTreeSet<TokenId> {
        self.by_sub.get(&sub).unwrap_or(&EMPTY)
    }

    pub fn is_subtoken_of(&self, sub: TokenId, main: TokenId) -> bool {
        self.subtokens_of(main).contains(&sub)
    }

    pub fn by_main(&self) -> &BTreeMap<TokenId, BTreeSet<TokenId>> {
        &self.by_main
    }

    pub fn by_sub(&self) -> &BTreeMap<TokenId, BTreeSet<TokenId>> {
        &self.by_sub
    }
}

/// Vocabulary plus the derived tables every decode needs. Immutable and
/// shareable across concurrent rankings.
#[derive(Debug, Clone)]
pub struct TokenTables {
    pub vocab: Vocabulary,
    pub subtokens: SubtokenMap,
    termination: Vec<TokenId>,
}

impl TokenTables {
    pub fn new(vocab: Vocabulary) -> Self {
        let subtokens = SubtokenMap::for_vocabulary(&vocab);
        let termination = vocab
            .iter()
            .filter(|(_, text)| text.chars().next().is_some_and(|c| !is_identifier_char(c)))
            .map(|(id, _)| id)
            .collect();
        Self {
            vocab,
            subtokens,
            termination,
        }
    }

    /// Tokens that end an identifier: their text starts with a
    /// non-identifier character. Sorted by id.
    pub fn termination_set(&self) -> &[TokenId] {
        &self.termination
    }

    pub fn is_termination(&self, id: TokenId) -> bool {
        self.termination.binary_search(&id).is_ok()
    }
}
