//! Documents, supervised examples, and prompt assembly.

use serde::{Deserialize, Serialize};

use crate::model::{TokenId, TrainExample};

use super::facts::FactId;
use super::vocab::Vocab;

/// What role a document plays relative to its question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    /// Contains the question's answer value.
    Evidence,
    /// Same topic as the question but does not answer it.
    SameTopicNoise,
    /// Unrelated topic.
    OffTopicNoise,
}

impl DocKind {
    pub fn is_noise(self) -> bool {
        !matches!(self, DocKind::Evidence)
    }
}

/// One retrieved document: a short statement about some fact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub tokens: Vec<TokenId>,
    pub kind: DocKind,
    /// The fact the statement is about (present for all synthetic docs).
    pub source_fact: Option<FactId>,
}

/// Which training signal an example carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// Evidence conflicts with the model's memory; follow the evidence.
    Adherence,
    /// Context is pure noise; answer from memory behind the no-clue marker.
    Robustness,
    /// Label each document's type, then restate the relevant one.
    Extraction,
}

impl LabelKind {
    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Adherence => "adherence",
            LabelKind::Robustness => "robustness",
            LabelKind::Extraction => "extraction",
        }
    }
}

/// One supervised example: question, retrieved context, target answer, and
/// the model's recorded parametric answer for that question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeExample {
    pub id: u64,
    pub label_kind: LabelKind,
    /// Relevance label: 1 when the context contains evidence, else 0.
    pub relevance: u8,
    pub question: Vec<TokenId>,
    pub documents: Vec<Document>,
    /// Target answer tokens, without the trailing end-of-answer token.
    pub answer: Vec<TokenId>,
    /// The model's closed-book answer for this question.
    pub parametric: Vec<TokenId>,
    /// The fact the question asks about.
    pub fact: FactId,
}

impl ProbeExample {
    /// The input projection: everything up to and including the answer marker.
    pub fn prompt_tokens(&self, vocab: &Vocab) -> Vec<TokenId> {
        let task = match self.label_kind {
            LabelKind::Extraction => vocab.specials.extract,
            _ => vocab.specials.question,
        };
        assemble_prompt(vocab, &self.documents, &self.question, task)
    }

    /// Full training sequence with loss restricted to the answer span.
    pub fn to_train_example(&self, vocab: &Vocab) -> TrainExample {
        let mut tokens = self.prompt_tokens(vocab);
        let answer_start = tokens.len();
        tokens.extend_from_slice(&self.answer);
        tokens.push(vocab.specials.eos);
        TrainExample::new(tokens, answer_start)
    }
}

/// `[CTX] d1 [SEP] d2 … <task> question [A]`; the context section is omitted
/// when there are no documents (closed-book form).
pub fn assemble_prompt(
    vocab: &Vocab,
    documents: &[Document],
    question: &[TokenId],
    task_marker: TokenId,
) -> Vec<TokenId> {
    let s = vocab.specials;
    let mut tokens = Vec::new();
    if !documents.is_empty() {
        tokens.push(s.context);
        for (i, doc) in documents.iter().enumerate() {
            if i > 0 {
                tokens.push(s.separator);
            }
            tokens.extend_from_slice(&doc.tokens);
        }
    }
    tokens.push(task_marker);
    tokens.extend_from_slice(question);
    tokens.push(s.answer);
    tokens
}

/// Closed-book question prompt: `[Q] question [A]`.
pub fn closed_book_prompt(vocab: &Vocab, question: &[TokenId]) -> Vec<TokenId> {
    assemble_prompt(vocab, &[], question, vocab.specials.question)
}

/// A single labeled document for the noise-recognition check: the model sees
/// one document and must say whether it is evidence for the question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseProbe {
    pub question: Vec<TokenId>,
    pub document: Document,
    pub is_evidence: bool,
}
