//! Closed token vocabulary for the synthetic world.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Marker and label tokens the prompt formats are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    /// End of answer.
    pub eos: TokenId,
    /// Introduces a question to be answered.
    pub question: TokenId,
    /// Introduces the answer span.
    pub answer: TokenId,
    /// Introduces the retrieved context.
    pub context: TokenId,
    /// Separates documents inside a context.
    pub separator: TokenId,
    /// Introduces a document-classification question.
    pub extract: TokenId,
    /// "The context lacks the needed clue"; precedes the recalled answer.
    pub no_clue: TokenId,
    /// Document label: relevant, contains the answer.
    pub label_relevant: TokenId,
    /// Document label: same topic but unhelpful.
    pub label_same_topic: TokenId,
    /// Document label: unrelated topic.
    pub label_off_topic: TokenId,
}

const SPECIAL_STRINGS: [&str; 10] =
    ["[EOS]", "[Q]", "[A]", "[CTX]", "[SEP]", "[EXTRACT]", "[NOCLUE]", "[REL]", "[SAME]", "[OFF]"];

/// Bidirectional token table. Specials occupy the lowest ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    pub specials: SpecialTokens,
}

impl Vocab {
    /// Build from the world's word list; duplicates are rejected.
    pub fn build<I: IntoIterator<Item = String>>(words: I) -> Result<Vocab> {
        let mut tokens: Vec<String> = SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect();
        for w in words {
            tokens.push(w);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let specials = SpecialTokens {
            eos: index["[EOS]"],
            question: index["[Q]"],
            answer: index["[A]"],
            context: index["[CTX]"],
            separator: index["[SEP]"],
            extract: index["[EXTRACT]"],
            no_clue: index["[NOCLUE]"],
            label_relevant: index["[REL]"],
            label_same_topic: index["[SAME]"],
            label_off_topic: index["[OFF]"],
        };
        Ok(Vocab { tokens, index, specials })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Format(format!("token `{token}` not in vocabulary")))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let body =
            fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut lines = body.lines();
        for special in SPECIAL_STRINGS {
            match lines.next() {
                Some(line) if line == special => {}
                other => {
                    return Err(Error::Format(format!(
                        "vocabulary file {} is missing special token {special} (found {other:?})",
                        path.display()
                    )))
                }
            }
        }
        let words: Vec<String> = lines.map(|l| l.to_string()).collect();
        Vocab::build(words)
    }
}
