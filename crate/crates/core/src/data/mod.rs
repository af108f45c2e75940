//! Synthetic fact world, pretraining corpus, supervised sets, and probes.
//!
//! The world is a grid of (entity, attribute) → value facts over closed value
//! vocabularies, with entities grouped into topics. Facts are split into a
//! train side and a held-out evaluation side; supervised contexts only ever
//! cite documents from their own side, so no fact appears in both a training
//! example and an evaluation example.

mod builder;
mod corpus;
mod example;
mod facts;
pub mod file;
mod vocab;

pub use builder::{
    build_adherence_set, build_eval_contexts, build_extraction_set, build_noise_recognition_set,
    build_robustness_set, extract_parametric_knowledge, AlphaMap, ALPHA_MAX_TOKENS,
};
pub use corpus::{question_tokens, render_pretrain_corpus, statement_words, NUM_TEMPLATES};
pub use example::{
    assemble_prompt, closed_book_prompt, DocKind, Document, LabelKind, NoiseProbe, ProbeExample,
};
pub use facts::{Fact, FactBase, FactConfig, FactId};
pub use vocab::{SpecialTokens, Vocab};

use crate::error::Result;
use crate::model::{MicroTransformer, TokenId, TrainExample};

/// Sizes and seed for one dataset build.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BundleConfig {
    pub m_a: usize,
    pub m_r: usize,
    pub m_c: usize,
    pub n_conflicting: usize,
    pub n_irrelevant: usize,
    /// Documents per evaluation context.
    pub context_docs: usize,
    pub seed: u64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        BundleConfig {
            m_a: 2000,
            m_r: 2000,
            m_c: 4000,
            n_conflicting: 100,
            n_irrelevant: 100,
            context_docs: 4,
            seed: 0,
        }
    }
}

/// Everything the probing, tuning, and evaluation stages consume.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub facts: FactBase,
    pub vocab: Vocab,
    pub alpha: AlphaMap,
    pub adherence: Vec<ProbeExample>,
    pub robustness: Vec<ProbeExample>,
    pub extraction: Vec<ProbeExample>,
    pub eval_conflicting: Vec<ProbeExample>,
    pub eval_irrelevant: Vec<ProbeExample>,
}

impl DatasetBundle {
    /// Build all sets from a pretrained model's parametric knowledge.
    pub fn build(
        model: &MicroTransformer,
        facts: FactBase,
        vocab: Vocab,
        cfg: &BundleConfig,
    ) -> Result<DatasetBundle> {
        let alpha = extract_parametric_knowledge(model, &vocab, &facts)?;
        Self::build_with_alpha(facts, vocab, alpha, cfg)
    }

    /// Build all sets from an already-recorded parametric map.
    pub fn build_with_alpha(
        facts: FactBase,
        vocab: Vocab,
        alpha: AlphaMap,
        cfg: &BundleConfig,
    ) -> Result<DatasetBundle> {
        let adherence = build_adherence_set(&facts, &vocab, &alpha, cfg.m_a, cfg.seed)?;
        let robustness = build_robustness_set(&facts, &vocab, &alpha, cfg.m_r, cfg.seed)?;
        let extraction = build_extraction_set(&facts, &vocab, cfg.m_c, cfg.seed)?;
        let (eval_conflicting, eval_irrelevant) = build_eval_contexts(
            &facts,
            &vocab,
            &alpha,
            cfg.n_conflicting,
            cfg.n_irrelevant,
            cfg.context_docs,
            cfg.seed,
        )?;
        Ok(DatasetBundle {
            facts,
            vocab,
            alpha,
            adherence,
            robustness,
            extraction,
            eval_conflicting,
            eval_irrelevant,
        })
    }

    fn set(&self, kind: LabelKind) -> &[ProbeExample] {
        match kind {
            LabelKind::Adherence => &self.adherence,
            LabelKind::Robustness => &self.robustness,
            LabelKind::Extraction => &self.extraction,
        }
    }

    /// Input-only projections of a training set (question plus context, no
    /// answer) — what activation probing runs on.
    pub fn probe_inputs(&self, kind: LabelKind) -> Vec<Vec<TokenId>> {
        self.set(kind).iter().map(|ex| ex.prompt_tokens(&self.vocab)).collect()
    }

    /// Training sequences with answer-span loss masks.
    pub fn train_examples(&self, kind: LabelKind) -> Vec<TrainExample> {
        self.set(kind).iter().map(|ex| ex.to_train_example(&self.vocab)).collect()
    }
}
