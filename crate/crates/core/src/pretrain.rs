//! Pretraining: instill the fact world into the model with plain language
//! modeling over statements and closed-book QA pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{closed_book_prompt, question_tokens, render_pretrain_corpus, FactBase, Vocab};
use crate::error::{Error, Result};
use crate::model::{MicroTransformer, TrainExample};
use crate::optim::FullAdam;
use crate::util::{derive_rng, BatchStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once closed-book accuracy reaches this level.
    pub target_accuracy: f64,
    /// Accuracy check cadence, in epochs.
    pub check_every: usize,
    /// How many times the corpus repeats each fact's renderings.
    pub coverage: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 2e-3,
            batch_size: 32,
            max_epochs: 400,
            target_accuracy: 0.98,
            check_every: 5,
            coverage: 1,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("pretrain learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.check_every == 0 {
            return Err(Error::Config("pretrain sizes must be positive".into()));
        }
        if !(0.0 < self.target_accuracy && self.target_accuracy <= 1.0) {
            return Err(Error::Config("target_accuracy must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub epochs: usize,
    pub final_loss: f64,
    pub closed_book_accuracy: f64,
}

/// Fraction of facts whose closed-book greedy decode is exactly the value
/// token.
pub fn closed_book_accuracy(
    model: &MicroTransformer,
    vocab: &Vocab,
    base: &FactBase,
) -> Result<f64> {
    let hits: Vec<Result<bool>> = base
        .facts
        .par_iter()
        .map(|fact| {
            let q = question_tokens(base, vocab, fact.id)?;
            let decoded = model.decode_greedy(&closed_book_prompt(vocab, &q), 2, vocab.specials.eos)?;
            Ok(decoded == vec![vocab.id(base.true_value_token(fact.id))?])
        })
        .collect();
    let mut correct = 0usize;
    for h in hits {
        if h? {
            correct += 1;
        }
    }
    Ok(correct as f64 / base.facts.len() as f64)
}

/// Adam over all base tensors until the closed-book target is reached (or
/// `max_epochs` expires, with a warning). Deterministic under the seed.
pub fn pretrain(
    model: &mut MicroTransformer,
    base: &FactBase,
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let corpus: Vec<TrainExample> = render_pretrain_corpus(base, vocab, cfg.coverage)?;
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let mut stream = BatchStream::new(corpus.len(), derive_rng(cfg.seed, "pretrain"));
    let mut adam = FullAdam::new(model);
    let mut last_loss = f64::NAN;
    let mut accuracy = 0.0;
    let mut epochs = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let batch: Vec<TrainExample> = stream
                .next_batch(cfg.batch_size)
                .into_iter()
                .map(|i| corpus[i].clone())
                .collect();
            let (loss, grads) = model.loss_and_grads_full(&batch)?;
            adam.step(model, &grads, cfg.learning_rate);
            loss_sum += loss;
        }
        last_loss = loss_sum / steps_per_epoch as f64;
        if epoch % cfg.check_every == 0 || epoch == cfg.max_epochs {
            accuracy = closed_book_accuracy(model, vocab, base)?;
            log::debug!("pretrain epoch {epoch}: loss {last_loss:.4}, closed-book {accuracy:.3}");
            if accuracy >= cfg.target_accuracy {
                break;
            }
        }
    }
    if accuracy < cfg.target_accuracy {
        log::warn!(
            "pretraining stopped at accuracy {accuracy:.3} below target {:.3} after {epochs} epochs",
            cfg.target_accuracy
        );
    }
    Ok(PretrainOutcome { epochs, final_loss: last_loss, closed_book_accuracy: accuracy })
}
