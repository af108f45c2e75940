//! Statement templates and the pretraining corpus.

use crate::error::Result;
use crate::model::{TokenId, TrainExample};

use super::facts::{FactBase, FactId};
use super::vocab::Vocab;

pub const NUM_TEMPLATES: usize = 3;

/// Render a fact as a short statement asserting `value_token`, using one of
/// the paraphrase templates.
pub fn statement_words(base: &FactBase, id: FactId, value_token: &str, template: usize) -> Vec<String> {
    let e = base.entity_token(id.entity);
    let a = base.attribute_token(id.attribute);
    match template % NUM_TEMPLATES {
        0 => vec![e.into(), a.into(), "is".into(), value_token.into()],
        1 => vec!["the".into(), a.into(), "of".into(), e.into(), "is".into(), value_token.into()],
        _ => vec![e.into(), "has".into(), a.into(), value_token.into()],
    }
}

/// Closed-book question tokens for a fact: `entity attribute`.
pub fn question_tokens(base: &FactBase, vocab: &Vocab, id: FactId) -> Result<Vec<TokenId>> {
    Ok(vec![
        vocab.id(base.entity_token(id.entity))?,
        vocab.id(base.attribute_token(id.attribute))?,
    ])
}

/// Render every fact as all statement paraphrases plus a closed-book QA pair,
/// `coverage` times over. All sequences are trained with full language
/// modeling loss and end in the end-of-answer token.
pub fn render_pretrain_corpus(
    base: &FactBase,
    vocab: &Vocab,
    coverage: usize,
) -> Result<Vec<TrainExample>> {
    let s = vocab.specials;
    let mut corpus = Vec::with_capacity(base.facts.len() * (NUM_TEMPLATES + 1) * coverage.max(1));
    for _ in 0..coverage.max(1) {
        for fact in &base.facts {
            let value = base.true_value_token(fact.id);
            for template in 0..NUM_TEMPLATES {
                let words = statement_words(base, fact.id, value, template);
                let mut tokens = vocab.encode(&words)?;
                tokens.push(s.eos);
                corpus.push(TrainExample::full_lm(tokens));
            }
            let mut qa = vec![s.question];
            qa.extend(question_tokens(base, vocab, fact.id)?);
            qa.push(s.answer);
            qa.push(vocab.id(value)?);
            qa.push(s.eos);
            corpus.push(TrainExample::full_lm(qa));
        }
    }
    Ok(corpus)
}
