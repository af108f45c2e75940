//! Construction of the supervised sets, evaluation contexts, and probes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{MicroTransformer, TokenId};
use crate::util::derive_rng;

use super::corpus::{question_tokens, statement_words, NUM_TEMPLATES};
use super::example::{closed_book_prompt, DocKind, Document, LabelKind, NoiseProbe, ProbeExample};
use super::facts::{FactBase, FactId};
use super::vocab::Vocab;

/// Recorded closed-book answer per question.
pub type AlphaMap = BTreeMap<FactId, Vec<TokenId>>;

/// Longest parametric answer we record; real answers are single tokens, the
/// margin only matters for unconverged models.
pub const ALPHA_MAX_TOKENS: usize = 4;

/// Greedy closed-book decode for every fact's question. Whatever the model
/// emits is recorded verbatim; it does not have to be correct.
pub fn extract_parametric_knowledge(
    model: &MicroTransformer,
    vocab: &Vocab,
    base: &FactBase,
) -> Result<AlphaMap> {
    let answers: Vec<(FactId, Result<Vec<TokenId>>)> = base
        .facts
        .par_iter()
        .map(|fact| {
            let answer = question_tokens(base, vocab, fact.id)
                .and_then(|q| model.decode_greedy(&closed_book_prompt(vocab, &q), ALPHA_MAX_TOKENS, vocab.specials.eos));
            (fact.id, answer)
        })
        .collect();
    let mut map = AlphaMap::new();
    for (id, answer) in answers {
        map.insert(id, answer?);
    }
    Ok(map)
}

/// Renders documents about facts drawn from a restricted pool, honoring
/// "must not contain" token constraints.
struct DocPool<'a> {
    base: &'a FactBase,
    vocab: &'a Vocab,
    /// Facts documents may be written about (train or eval side).
    pool: &'a [FactId],
}

impl<'a> DocPool<'a> {
    fn new(base: &'a FactBase, vocab: &'a Vocab, pool: &'a [FactId]) -> Self {
        DocPool { base, vocab, pool }
    }

    fn render(&self, fact: FactId, value_token: &str, kind: DocKind, template: usize) -> Result<Document> {
        let words = statement_words(self.base, fact, value_token, template);
        Ok(Document { tokens: self.vocab.encode(&words)?, kind, source_fact: Some(fact) })
    }

    /// A truthful statement about some other fact that shares (or avoids) the
    /// question's topic and contains none of the forbidden tokens.
    fn noise_doc(
        &self,
        rng: &mut ChaCha8Rng,
        question: FactId,
        same_topic: bool,
        forbidden: &[TokenId],
        exclude: &[FactId],
    ) -> Result<Document> {
        let topic = self.base.topic_of(question.entity);
        let mut candidates: Vec<FactId> = Vec::new();
        for &id in self.pool {
            if id == question || exclude.contains(&id) {
                continue;
            }
            if (self.base.topic_of(id.entity) == topic) != same_topic {
                continue;
            }
            let content = [
                self.vocab.id(self.base.entity_token(id.entity))?,
                self.vocab.id(self.base.attribute_token(id.attribute))?,
                self.vocab.id(self.base.true_value_token(id))?,
            ];
            if content.iter().any(|t| forbidden.contains(t)) {
                continue;
            }
            candidates.push(id);
        }
        if candidates.is_empty() {
            return Err(Error::Input(format!(
                "insufficient noise pool: no {} document available for question {:?}",
                if same_topic { "same-topic" } else { "off-topic" },
                question
            )));
        }
        let fact = candidates[rng.gen_range(0..candidates.len())];
        let kind = if same_topic { DocKind::SameTopicNoise } else { DocKind::OffTopicNoise };
        // template words could in principle collide with forbidden tokens
        // (only when a recorded parametric answer contains filler words)
        let start = rng.gen_range(0..NUM_TEMPLATES);
        for offset in 0..NUM_TEMPLATES {
            let doc = self.render(fact, self.base.true_value_token(fact), kind, start + offset)?;
            if !doc.tokens.iter().any(|t| forbidden.contains(t)) {
                return Ok(doc);
            }
        }
        Err(Error::Input(format!(
            "insufficient noise pool: all paraphrases collide with forbidden tokens for {question:?}"
        )))
    }
}

/// Value indices of an attribute whose tokens differ from the true value and
/// from the recorded parametric answer.
fn substitute_candidates(
    base: &FactBase,
    vocab: &Vocab,
    fact: FactId,
    alpha: &[TokenId],
) -> Result<Vec<u32>> {
    let true_tok = vocab.id(base.true_value_token(fact))?;
    let mut out = Vec::new();
    for v in 0..base.config.values_per_attribute as u32 {
        let tok = vocab.id(base.value_token(fact.attribute, v))?;
        if tok == true_tok {
            continue;
        }
        if alpha.len() == 1 && alpha[0] == tok {
            continue;
        }
        out.push(v);
    }
    Ok(out)
}

fn cycled_facts(facts: &[FactId], rng: &mut ChaCha8Rng) -> Vec<FactId> {
    let mut order = facts.to_vec();
    order.shuffle(rng);
    order
}

/// Training set that teaches the model to follow conflicting evidence: each
/// example holds a single evidence document asserting a substituted value
/// v' (different from the true value and from the parametric answer), and the
/// target is v'.
pub fn build_adherence_set(
    base: &FactBase,
    vocab: &Vocab,
    alpha: &AlphaMap,
    m_a: usize,
    seed: u64,
) -> Result<Vec<ProbeExample>> {
    let mut rng = derive_rng(seed, "adherence-set");
    let order = cycled_facts(&base.train_facts, &mut rng);
    let pool = DocPool::new(base, vocab, &base.train_facts);
    let mut out = Vec::with_capacity(m_a);
    let mut cursor = 0usize;
    let mut attempts = 0usize;
    while out.len() < m_a {
        attempts += 1;
        if attempts > 20 * m_a + 1000 {
            return Err(Error::Input(
                "cannot build adherence set: too few eligible substitute values".into(),
            ));
        }
        let fact = order[cursor % order.len()];
        cursor += 1;
        let alpha_toks = alpha.get(&fact).cloned().unwrap_or_default();
        let candidates = substitute_candidates(base, vocab, fact, &alpha_toks)?;
        if candidates.is_empty() {
            log::warn!("no eligible substitute value for fact {fact:?}; skipping");
            continue;
        }
        let v_sub = candidates[rng.gen_range(0..candidates.len())];
        let value_token = base.value_token(fact.attribute, v_sub).to_string();
        let doc = pool.render(fact, &value_token, DocKind::Evidence, rng.gen_range(0..NUM_TEMPLATES))?;
        out.push(ProbeExample {
            id: out.len() as u64,
            label_kind: LabelKind::Adherence,
            relevance: 1,
            question: question_tokens(base, vocab, fact)?,
            documents: vec![doc],
            answer: vec![vocab.id(&value_token)?],
            parametric: alpha_toks,
            fact,
        });
    }
    Ok(out)
}

/// Training set that teaches the model to flag clueless contexts: a single
/// noise document, and the target is the no-clue marker followed by the
/// recorded parametric answer.
pub fn build_robustness_set(
    base: &FactBase,
    vocab: &Vocab,
    alpha: &AlphaMap,
    m_r: usize,
    seed: u64,
) -> Result<Vec<ProbeExample>> {
    let mut rng = derive_rng(seed, "robustness-set");
    let order = cycled_facts(&base.train_facts, &mut rng);
    let pool = DocPool::new(base, vocab, &base.train_facts);
    let mut out = Vec::with_capacity(m_r);
    let mut cursor = 0usize;
    while out.len() < m_r {
        let fact = order[cursor % order.len()];
        cursor += 1;
        let alpha_toks = alpha.get(&fact).cloned().unwrap_or_default();
        let mut forbidden = vec![vocab.id(base.true_value_token(fact))?];
        forbidden.extend_from_slice(&alpha_toks);
        let same_topic = rng.gen_bool(0.5);
        let doc = pool.noise_doc(&mut rng, fact, same_topic, &forbidden, &[])?;
        let mut answer = vec![vocab.specials.no_clue];
        answer.extend_from_slice(&alpha_toks);
        out.push(ProbeExample {
            id: out.len() as u64,
            label_kind: LabelKind::Robustness,
            relevance: 0,
            question: question_tokens(base, vocab, fact)?,
            documents: vec![doc],
            answer,
            parametric: alpha_toks,
            fact,
        });
    }
    Ok(out)
}

/// Document-extraction co-training set: a four-document context (one relevant
/// — true or substituted value — one same-topic noise, two off-topic noise,
/// shuffled), whose target labels every document's type in order and then
/// restates the relevant document.
pub fn build_extraction_set(
    base: &FactBase,
    vocab: &Vocab,
    m_c: usize,
    seed: u64,
) -> Result<Vec<ProbeExample>> {
    if base.config.num_topics < 2 {
        return Err(Error::Config("extraction set needs at least two topics".into()));
    }
    let mut rng = derive_rng(seed, "extraction-set");
    let order = cycled_facts(&base.train_facts, &mut rng);
    let pool = DocPool::new(base, vocab, &base.train_facts);
    let mut out = Vec::with_capacity(m_c);
    let mut cursor = 0usize;
    while out.len() < m_c {
        let fact = order[cursor % order.len()];
        cursor += 1;
        // the relevant document asserts the true value or a fabricated one
        let asserted = if rng.gen_bool(0.5) {
            base.true_value_token(fact).to_string()
        } else {
            let true_value = base.fact(fact).value;
            let alternatives: Vec<u32> = (0..base.config.values_per_attribute as u32)
                .filter(|&v| v != true_value)
                .collect();
            base.value_token(fact.attribute, alternatives[rng.gen_range(0..alternatives.len())])
                .to_string()
        };
        let rel_doc =
            pool.render(fact, &asserted, DocKind::Evidence, rng.gen_range(0..NUM_TEMPLATES))?;
        let forbidden = vec![vocab.id(&asserted)?];
        let mut docs = vec![rel_doc];
        let mut used: Vec<FactId> = Vec::new();
        let same = pool.noise_doc(&mut rng, fact, true, &forbidden, &used)?;
        used.extend(same.source_fact);
        docs.push(same);
        for _ in 0..2 {
            let off = pool.noise_doc(&mut rng, fact, false, &forbidden, &used)?;
            used.extend(off.source_fact);
            docs.push(off);
        }
        docs.shuffle(&mut rng);

        let mut answer: Vec<TokenId> = docs
            .iter()
            .map(|d| match d.kind {
                DocKind::Evidence => vocab.specials.label_relevant,
                DocKind::SameTopicNoise => vocab.specials.label_same_topic,
                DocKind::OffTopicNoise => vocab.specials.label_off_topic,
            })
            .collect();
        let rel = docs.iter().find(|d| d.kind == DocKind::Evidence).expect("one relevant doc");
        answer.extend_from_slice(&rel.tokens);

        out.push(ProbeExample {
            id: out.len() as u64,
            label_kind: LabelKind::Extraction,
            relevance: 1,
            question: question_tokens(base, vocab, fact)?,
            documents: docs,
            answer,
            parametric: Vec::new(),
            fact,
        });
    }
    Ok(out)
}

/// Held-out evaluation contexts over the evaluation facts: conflicting
/// contexts (one evidence document asserting v', the rest noise) and
/// irrelevant contexts (noise only), each `k` documents with the evidence
/// position shuffled uniformly.
pub fn build_eval_contexts(
    base: &FactBase,
    vocab: &Vocab,
    alpha: &AlphaMap,
    n_conflicting: usize,
    n_irrelevant: usize,
    k: usize,
    seed: u64,
) -> Result<(Vec<ProbeExample>, Vec<ProbeExample>)> {
    if k < 3 {
        return Err(Error::Config("eval contexts need at least 3 documents".into()));
    }
    let mut rng = derive_rng(seed, "eval-contexts");
    let pool = DocPool::new(base, vocab, &base.eval_facts);

    let order = cycled_facts(&base.eval_facts, &mut rng);
    let mut conflicting = Vec::with_capacity(n_conflicting);
    let mut cursor = 0usize;
    let mut attempts = 0usize;
    while conflicting.len() < n_conflicting {
        attempts += 1;
        if attempts > 20 * n_conflicting + 1000 {
            return Err(Error::Input("cannot build conflicting eval set".into()));
        }
        let fact = order[cursor % order.len()];
        cursor += 1;
        let alpha_toks = alpha.get(&fact).cloned().unwrap_or_default();
        let candidates = substitute_candidates(base, vocab, fact, &alpha_toks)?;
        if candidates.is_empty() {
            log::warn!("no eligible conflicting value for eval fact {fact:?}; skipping");
            continue;
        }
        let v_sub = candidates[rng.gen_range(0..candidates.len())];
        let value_token = base.value_token(fact.attribute, v_sub).to_string();
        let evidence =
            pool.render(fact, &value_token, DocKind::Evidence, rng.gen_range(0..NUM_TEMPLATES))?;

        let mut forbidden = vec![vocab.id(&value_token)?, vocab.id(base.true_value_token(fact))?];
        forbidden.extend_from_slice(&alpha_toks);
        let mut docs = vec![evidence];
        let mut used: Vec<FactId> = Vec::new();
        let same = pool.noise_doc(&mut rng, fact, true, &forbidden, &used)?;
        used.extend(same.source_fact);
        docs.push(same);
        for _ in 0..k - 2 {
            let off = pool.noise_doc(&mut rng, fact, false, &forbidden, &used)?;
            used.extend(off.source_fact);
            docs.push(off);
        }
        docs.shuffle(&mut rng);

        conflicting.push(ProbeExample {
            id: conflicting.len() as u64,
            label_kind: LabelKind::Adherence,
            relevance: 1,
            question: question_tokens(base, vocab, fact)?,
            documents: docs,
            answer: vec![vocab.id(&value_token)?],
            parametric: alpha_toks,
            fact,
        });
    }

    let order = cycled_facts(&base.eval_facts, &mut rng);
    let mut irrelevant = Vec::with_capacity(n_irrelevant);
    let mut cursor = 0usize;
    while irrelevant.len() < n_irrelevant {
        let fact = order[cursor % order.len()];
        cursor += 1;
        let alpha_toks = alpha.get(&fact).cloned().unwrap_or_default();
        let mut forbidden = vec![vocab.id(base.true_value_token(fact))?];
        forbidden.extend_from_slice(&alpha_toks);
        let mut docs = Vec::with_capacity(k);
        let mut used: Vec<FactId> = Vec::new();
        for _ in 0..2 {
            let same = pool.noise_doc(&mut rng, fact, true, &forbidden, &used)?;
            used.extend(same.source_fact);
            docs.push(same);
        }
        for _ in 0..k - 2 {
            let off = pool.noise_doc(&mut rng, fact, false, &forbidden, &used)?;
            used.extend(off.source_fact);
            docs.push(off);
        }
        docs.shuffle(&mut rng);

        let mut answer = vec![vocab.specials.no_clue];
        answer.extend_from_slice(&alpha_toks);
        irrelevant.push(ProbeExample {
            id: irrelevant.len() as u64,
            label_kind: LabelKind::Robustness,
            relevance: 0,
            question: question_tokens(base, vocab, fact)?,
            documents: docs,
            answer,
            parametric: alpha_toks,
            fact,
        });
    }

    Ok((conflicting, irrelevant))
}

/// Balanced single-document classification probes over the evaluation facts:
/// half the documents are evidence (assert the true value), half are noise.
pub fn build_noise_recognition_set(
    base: &FactBase,
    vocab: &Vocab,
    alpha: &AlphaMap,
    count: usize,
    seed: u64,
) -> Result<Vec<NoiseProbe>> {
    let mut rng = derive_rng(seed, "noise-recognition");
    let order = cycled_facts(&base.eval_facts, &mut rng);
    let pool = DocPool::new(base, vocab, &base.eval_facts);
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0usize;
    while out.len() < count {
        let fact = order[cursor % order.len()];
        cursor += 1;
        let question = question_tokens(base, vocab, fact)?;
        let is_evidence = out.len() % 2 == 0;
        let document = if is_evidence {
            pool.render(
                fact,
                base.true_value_token(fact),
                DocKind::Evidence,
                rng.gen_range(0..NUM_TEMPLATES),
            )?
        } else {
            let alpha_toks = alpha.get(&fact).cloned().unwrap_or_default();
            let mut forbidden = vec![vocab.id(base.true_value_token(fact))?];
            forbidden.extend_from_slice(&alpha_toks);
            let same_topic = rng.gen_bool(0.5);
            pool.noise_doc(&mut rng, fact, same_topic, &forbidden, &[])?
        };
        out.push(NoiseProbe { question, document, is_evidence });
    }
    Ok(out)
}
