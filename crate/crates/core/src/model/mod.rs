//! A minimal decoder-only transformer with SwiGLU feed-forward blocks.
//!
//! The model is deliberately small and introspectable: every matrix is plain
//! row-major `f64`, forward passes can tally gate activations, and the
//! backward pass produces exact gradients for every parameter. Updates are
//! masked at parameter-unit granularity so subsets of the model can be tuned
//! while everything else stays bit-identical.
//!
//! Block wiring is pre-norm: `x + Attn(LN(x))` then `x + Ffn(LN(x))`, with an
//! affine-free layer norm, a final layer norm before the output head, and the
//! gated feed-forward `(Swish(h·W1) ⊗ h·V)·W2`.

mod activation;
mod checkpoint;
mod config;
mod grads;
mod trace;
mod unit;

pub use activation::{ActivationRecord, LayerCounts};
pub use config::{AdapterMode, ModelConfig};
pub use grads::{AdapterGrads, BlockGrads, FullGradients, GradientMap};
pub use unit::{AdapterTarget, ParameterUnitId, UnitKind};

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::{argmax, Mat};
use crate::util::derive_rng;

/// Token identifier; the vocabulary is owned by the data layer.
pub type TokenId = u32;

/// One training sequence. Loss is computed only on the answer span: positions
/// `answer_start..len` are targets, everything before is prompt/context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub answer_start: usize,
}

impl TrainExample {
    pub fn new(tokens: Vec<TokenId>, answer_start: usize) -> Self {
        TrainExample { tokens, answer_start }
    }

    /// Full-sequence language modeling: every position after the first is a target.
    pub fn full_lm(tokens: Vec<TokenId>) -> Self {
        TrainExample { tokens, answer_start: 1 }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.tokens.len() < 2 {
            return Err(Error::Input("training sequence needs at least two tokens".into()));
        }
        if self.answer_start == 0 || self.answer_start >= self.tokens.len() {
            return Err(Error::Input(format!(
                "answer_start {} out of range for sequence of length {}",
                self.answer_start,
                self.tokens.len()
            )));
        }
        validate_tokens(cfg, &self.tokens)
    }
}

fn validate_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub(crate) struct LayerAdapters {
    /// Adapter factors in target order q, k, v, o. `a[i]` is d×r, `b[i]` is r×d.
    pub a: [Mat; 4],
    pub b: [Mat; 4],
}

pub(crate) struct LayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w1_gate: Mat,
    pub v_up: Mat,
    pub w2_down: Mat,
    pub adapters: Option<LayerAdapters>,
}

impl LayerParams {
    fn by_kind(&self, kind: UnitKind) -> Option<&Mat> {
        match kind {
            UnitKind::Wq => Some(&self.wq),
            UnitKind::Wk => Some(&self.wk),
            UnitKind::Wv => Some(&self.wv),
            UnitKind::Wo => Some(&self.wo),
            UnitKind::W1Gate => Some(&self.w1_gate),
            UnitKind::VUp => Some(&self.v_up),
            UnitKind::W2Down => Some(&self.w2_down),
            UnitKind::AdapterA(t) => {
                self.adapters.as_ref().map(|ad| &ad.a[grads::AdapterGrads::target_index(t)])
            }
            UnitKind::AdapterB(t) => {
                self.adapters.as_ref().map(|ad| &ad.b[grads::AdapterGrads::target_index(t)])
            }
        }
    }

    fn by_kind_mut(&mut self, kind: UnitKind) -> Option<&mut Mat> {
        match kind {
            UnitKind::Wq => Some(&mut self.wq),
            UnitKind::Wk => Some(&mut self.wk),
            UnitKind::Wv => Some(&mut self.wv),
            UnitKind::Wo => Some(&mut self.wo),
            UnitKind::W1Gate => Some(&mut self.w1_gate),
            UnitKind::VUp => Some(&mut self.v_up),
            UnitKind::W2Down => Some(&mut self.w2_down),
            UnitKind::AdapterA(t) => {
                self.adapters.as_mut().map(|ad| &mut ad.a[grads::AdapterGrads::target_index(t)])
            }
            UnitKind::AdapterB(t) => {
                self.adapters.as_mut().map(|ad| &mut ad.b[grads::AdapterGrads::target_index(t)])
            }
        }
    }
}

/// The trainable model.
pub struct MicroTransformer {
    cfg: ModelConfig,
    pub(crate) embedding: Mat,
    pub(crate) positional: Mat,
    pub(crate) head: Mat,
    pub(crate) layers: Vec<LayerParams>,
}

impl MicroTransformer {
    /// Deterministically initialize a model from its configuration. Identical
    /// configurations yield bit-identical parameters.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(cfg.seed, "model-init");
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let base_std = 0.02;
        // keep residual writes small so deep stacks start near identity
        let resid_std = base_std / (2.0 * cfg.num_layers as f64).sqrt();

        let fill = |rows: usize, cols: usize, std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut m = Mat::zeros(rows, cols);
            for v in m.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
            m
        };

        let embedding = fill(cfg.vocab_size, d, base_std, &mut rng);
        let positional = fill(cfg.max_seq_len, d, base_std, &mut rng);
        let head = fill(d, cfg.vocab_size, base_std, &mut rng);

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let wq = fill(d, d, base_std, &mut rng);
            let wk = fill(d, d, base_std, &mut rng);
            let wv = fill(d, d, base_std, &mut rng);
            let wo = fill(d, d, resid_std, &mut rng);
            let w1_gate = fill(d, f, base_std, &mut rng);
            let v_up = fill(d, f, base_std, &mut rng);
            let w2_down = fill(f, d, resid_std, &mut rng);
            let adapters = match cfg.adapter_mode {
                AdapterMode::Full => None,
                AdapterMode::LowRank => {
                    let a = std::array::from_fn(|_| fill(d, cfg.adapter_rank, 0.01, &mut rng));
                    // B starts at zero so the adapted model equals the base model
                    let b = std::array::from_fn(|_| Mat::zeros(cfg.adapter_rank, d));
                    Some(LayerAdapters { a, b })
                }
            };
            layers.push(LayerParams { wq, wk, wv, wo, w1_gate, v_up, w2_down, adapters });
        }

        Ok(MicroTransformer { cfg: cfg.clone(), embedding, positional, head, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Logits for every position of the sequence, seq_len × vocab_size.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Mat> {
        validate_tokens(&self.cfg, tokens)?;
        Ok(self.forward_trace(tokens, None).logits)
    }

    /// Forward pass that also tallies positive gate pre-activations per layer
    /// and neuron into `record`.
    pub fn forward_recorded(&self, tokens: &[TokenId], record: &mut ActivationRecord) -> Result<Mat> {
        validate_tokens(&self.cfg, tokens)?;
        Ok(self.forward_trace(tokens, Some(record)).logits)
    }

    /// Tally activations over a set of sequences, in parallel.
    pub fn record_activations(&self, inputs: &[Vec<TokenId>]) -> Result<ActivationRecord> {
        if inputs.is_empty() {
            return Err(Error::Input("no sequences to record activations over".into()));
        }
        for tokens in inputs {
            validate_tokens(&self.cfg, tokens)?;
        }
        let partials: Vec<ActivationRecord> = inputs
            .par_iter()
            .map(|tokens| {
                let mut rec = ActivationRecord::new(self.cfg.num_layers, self.cfg.ffn_dim);
                self.forward_trace(tokens, Some(&mut rec));
                rec
            })
            .collect();
        let mut merged = ActivationRecord::new(self.cfg.num_layers, self.cfg.ffn_dim);
        for rec in &partials {
            merged.merge(rec);
        }
        Ok(merged)
    }

    /// Mean token-level cross-entropy over the batch's answer positions.
    pub fn loss(&self, batch: &[TrainExample]) -> Result<f64> {
        let (ce, count) = self.batch_ce(batch)?;
        Ok(ce / count as f64)
    }

    fn batch_ce(&self, batch: &[TrainExample]) -> Result<(f64, u64)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for ex in batch {
            ex.validate(&self.cfg)?;
        }
        let terms: Vec<(f64, u64)> = batch
            .par_iter()
            .map(|ex| {
                let trace = self.forward_trace(&ex.tokens, None);
                let (ce, count, _) = trace::loss_terms(&trace.logits, &ex.tokens, ex.answer_start, false);
                (ce, count)
            })
            .collect();
        Ok(binary_fold(terms, |(ca, na), (cb, nb)| (ca + cb, na + nb)))
    }

    /// Loss plus exact gradients with respect to the trainable unit universe.
    /// The model itself is not modified.
    pub fn loss_and_grads(&self, batch: &[TrainExample]) -> Result<(f64, GradientMap)> {
        let (loss, full) = self.loss_and_grads_full(batch)?;
        Ok((loss, full.into_unit_map(self.cfg.adapter_mode)))
    }

    /// Loss plus exact gradients for every matrix, including the embedding,
    /// positional table, and output head. Used by pretraining.
    pub fn loss_and_grads_full(&self, batch: &[TrainExample]) -> Result<(f64, FullGradients)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for ex in batch {
            ex.validate(&self.cfg)?;
        }
        let per_example: Vec<(f64, u64, FullGradients)> = batch
            .par_iter()
            .map(|ex| {
                let trace = self.forward_trace(&ex.tokens, None);
                let (ce, count, d_logits) =
                    trace::loss_terms(&trace.logits, &ex.tokens, ex.answer_start, true);
                let mut grads = FullGradients::zeros(&self.cfg);
                self.backward_trace(&trace, &d_logits.expect("gradient requested"), &mut grads);
                (ce, count, grads)
            })
            .collect();
        let (ce, count, mut grads) = binary_fold(per_example, |(ca, na, mut ga), (cb, nb, gb)| {
            ga.add_assign(&gb);
            (ca + cb, na + nb, ga)
        });
        let scale = 1.0 / count as f64;
        grads.scale(scale);
        Ok((ce * scale, grads))
    }

    /// Gradient-descent step restricted to the units in `mask`; every
    /// parameter outside the mask is left bit-identical.
    pub fn masked_update(
        &mut self,
        grads: &GradientMap,
        mask: &BTreeSet<ParameterUnitId>,
        lr: f64,
    ) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::Input("learning rate must be nonnegative".into()));
        }
        // validate the whole mask before touching any weights
        for id in mask {
            let grad = grads
                .get(id)
                .ok_or_else(|| Error::Internal(format!("no gradient for masked unit {id}")))?;
            let unit = self.unit(*id)?;
            if unit.shape() != grad.shape() {
                return Err(Error::Internal(format!(
                    "gradient shape {:?} does not match unit {id} shape {:?}",
                    grad.shape(),
                    unit.shape()
                )));
            }
        }
        if lr == 0.0 {
            return Ok(());
        }
        for id in mask {
            let grad = &grads[id];
            self.unit_mut(*id)?.add_scaled(grad, -lr);
        }
        Ok(())
    }

    /// Greedy (argmax) decoding; deterministic. Stops at `eos` or after
    /// `max_new` tokens, whichever comes first. The returned continuation
    /// excludes `eos`.
    pub fn decode_greedy(&self, prompt: &[TokenId], max_new: usize, eos: TokenId) -> Result<Vec<TokenId>> {
        validate_tokens(&self.cfg, prompt)?;
        if prompt.len() + max_new > self.cfg.max_seq_len {
            return Err(Error::Input(format!(
                "prompt length {} plus max_new {} exceeds max_seq_len {}",
                prompt.len(),
                max_new,
                self.cfg.max_seq_len
            )));
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let trace = self.forward_trace(&tokens, None);
            let next = argmax(trace.logits.row(tokens.len() - 1)) as TokenId;
            if next == eos {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }

    /// The trainable unit universe, in canonical order.
    pub fn unit_ids(&self) -> Vec<ParameterUnitId> {
        let kinds = UnitKind::universe(self.cfg.adapter_mode);
        let mut ids = Vec::with_capacity(self.cfg.num_layers * kinds.len());
        for layer in 1..=self.cfg.num_layers {
            for &kind in &kinds {
                ids.push(ParameterUnitId::new(layer, kind));
            }
        }
        ids
    }

    pub fn unit(&self, id: ParameterUnitId) -> Result<&Mat> {
        if id.layer == 0 || id.layer > self.cfg.num_layers {
            return Err(Error::Input(format!("unit {id} out of range")));
        }
        self.layers[id.layer_index0()]
            .by_kind(id.kind)
            .ok_or_else(|| Error::Input(format!("unit {id} does not exist in this adapter mode")))
    }

    /// Direct mutable access to one unit's values (optimizer support).
    pub fn unit_mut(&mut self, id: ParameterUnitId) -> Result<&mut Mat> {
        if id.layer == 0 || id.layer > self.cfg.num_layers {
            return Err(Error::Input(format!("unit {id} out of range")));
        }
        self.layers[id.layer_index0()]
            .by_kind_mut(id.kind)
            .ok_or_else(|| Error::Input(format!("unit {id} does not exist in this adapter mode")))
    }

    /// All tensors with their canonical names, for checkpoints and hashing.
    pub(crate) fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("embedding".into(), &self.embedding),
            ("positional".into(), &self.positional),
            ("head".into(), &self.head),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            for kind in UnitKind::BLOCK {
                out.push((format!("L{l}.{}", kind.label()), layer.by_kind(kind).unwrap()));
            }
            if layer.adapters.is_some() {
                for kind in UnitKind::adapter_kinds() {
                    out.push((format!("L{l}.{}", kind.label()), layer.by_kind(kind).unwrap()));
                }
            }
        }
        out
    }

    /// Base tensors updated during pretraining (everything except adapters),
    /// ordered to match [`FullGradients::base_tensors`].
    pub(crate) fn base_tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.embedding, &mut self.positional, &mut self.head];
        for layer in &mut self.layers {
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.w1_gate);
            out.push(&mut layer.v_up);
            out.push(&mut layer.w2_down);
        }
        out
    }

    /// Hash of the full parameter state (config included).
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&self.cfg).expect("config serializes").as_bytes());
        for (name, mat) in self.tensors() {
            hasher.update(name.as_bytes());
            hasher.update(mat.to_le_bytes());
        }
        hex(&hasher.finalize())
    }

    /// Hash of the tensors outside the unit universe that stay frozen after
    /// pretraining: embedding, positional table, output head — plus, in
    /// low-rank mode, the base block matrices.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.embedding.to_le_bytes());
        hasher.update(self.positional.to_le_bytes());
        hasher.update(self.head.to_le_bytes());
        if self.cfg.adapter_mode == AdapterMode::LowRank {
            for layer in &self.layers {
                for kind in UnitKind::BLOCK {
                    hasher.update(layer.by_kind(kind).unwrap().to_le_bytes());
                }
            }
        }
        hex(&hasher.finalize())
    }

    pub fn unit_checksum(&self, id: ParameterUnitId) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.unit(id)?.to_le_bytes());
        Ok(hex(&hasher.finalize()))
    }
}

impl Clone for MicroTransformer {
    fn clone(&self) -> Self {
        MicroTransformer {
            cfg: self.cfg.clone(),
            embedding: self.embedding.clone(),
            positional: self.positional.clone(),
            head: self.head.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.clone(),
                    wk: l.wk.clone(),
                    wv: l.wv.clone(),
                    wo: l.wo.clone(),
                    w1_gate: l.w1_gate.clone(),
                    v_up: l.v_up.clone(),
                    w2_down: l.w2_down.clone(),
                    adapters: l.adapters.as_ref().map(|a| LayerAdapters {
                        a: a.a.clone(),
                        b: a.b.clone(),
                    }),
                })
                .collect(),
        }
    }
}

fn hex(digest: &[u8]) -> String {
    let mut out = String::with_capacity(digest.len() * 2);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Reduce by recursive halving. Appending a copy of the input reduces to
/// exactly double the original result, which keeps batch duplication
/// bit-exact under floating-point summation.
fn binary_fold<T>(mut items: Vec<T>, combine: impl Fn(T, T) -> T + Copy) -> T {
    fn go<T>(items: &mut Vec<T>, combine: impl Fn(T, T) -> T + Copy) -> T {
        match items.len() {
            0 => unreachable!("binary_fold over empty vec"),
            1 => items.pop().unwrap(),
            n => {
                let mut right = items.split_off(n / 2);
                let left = go(items, combine);
                let right = go(&mut right, combine);
                combine(left, right)
            }
        }
    }
    go(&mut items, combine)
}

#[cfg(test)]
mod tests;
