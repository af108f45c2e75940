//! Gradient containers produced by the backward pass.

use std::collections::BTreeMap;

use crate::matrix::Mat;

use super::config::{AdapterMode, ModelConfig};
use super::unit::{AdapterTarget, ParameterUnitId, UnitKind};

/// Gradients keyed by parameter unit — the view masked updates consume.
pub type GradientMap = BTreeMap<ParameterUnitId, Mat>;

/// Gradients of one layer's block matrices.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w1_gate: Mat,
    pub v_up: Mat,
    pub w2_down: Mat,
}

impl BlockGrads {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        BlockGrads {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            w1_gate: Mat::zeros(d, f),
            v_up: Mat::zeros(d, f),
            w2_down: Mat::zeros(f, d),
        }
    }

    pub fn by_kind(&self, kind: UnitKind) -> Option<&Mat> {
        match kind {
            UnitKind::Wq => Some(&self.wq),
            UnitKind::Wk => Some(&self.wk),
            UnitKind::Wv => Some(&self.wv),
            UnitKind::Wo => Some(&self.wo),
            UnitKind::W1Gate => Some(&self.w1_gate),
            UnitKind::VUp => Some(&self.v_up),
            UnitKind::W2Down => Some(&self.w2_down),
            _ => None,
        }
    }
}

/// Gradients of one layer's adapter factors (low-rank mode only).
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub a: [Mat; 4],
    pub b: [Mat; 4],
}

impl AdapterGrads {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let r = cfg.adapter_rank;
        AdapterGrads {
            a: std::array::from_fn(|_| Mat::zeros(d, r)),
            b: std::array::from_fn(|_| Mat::zeros(r, d)),
        }
    }

    pub fn target_index(target: AdapterTarget) -> usize {
        match target {
            AdapterTarget::Query => 0,
            AdapterTarget::Key => 1,
            AdapterTarget::Value => 2,
            AdapterTarget::Output => 3,
        }
    }
}

/// Full gradient set: every matrix the backward pass differentiates, including
/// the embedding/positional/head tensors that pretraining updates but that are
/// never part of the unit universe.
#[derive(Debug, Clone)]
pub struct FullGradients {
    pub embedding: Mat,
    pub positional: Mat,
    pub head: Mat,
    pub blocks: Vec<BlockGrads>,
    pub adapters: Vec<Option<AdapterGrads>>,
}

impl FullGradients {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let adapters = (0..cfg.num_layers)
            .map(|_| match cfg.adapter_mode {
                AdapterMode::Full => None,
                AdapterMode::LowRank => Some(AdapterGrads::zeros(cfg)),
            })
            .collect();
        FullGradients {
            embedding: Mat::zeros(cfg.vocab_size, cfg.model_dim),
            positional: Mat::zeros(cfg.max_seq_len, cfg.model_dim),
            head: Mat::zeros(cfg.model_dim, cfg.vocab_size),
            blocks: (0..cfg.num_layers).map(|_| BlockGrads::zeros(cfg)).collect(),
            adapters,
        }
    }

    /// self += other, entrywise.
    pub fn add_assign(&mut self, other: &FullGradients) {
        self.embedding.add_assign(&other.embedding);
        self.positional.add_assign(&other.positional);
        self.head.add_assign(&other.head);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.wq.add_assign(&b.wq);
            a.wk.add_assign(&b.wk);
            a.wv.add_assign(&b.wv);
            a.wo.add_assign(&b.wo);
            a.w1_gate.add_assign(&b.w1_gate);
            a.v_up.add_assign(&b.v_up);
            a.w2_down.add_assign(&b.w2_down);
        }
        for (a, b) in self.adapters.iter_mut().zip(&other.adapters) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for i in 0..4 {
                    a.a[i].add_assign(&b.a[i]);
                    a.b[i].add_assign(&b.b[i]);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.embedding.scale(s);
        self.positional.scale(s);
        self.head.scale(s);
        for block in &mut self.blocks {
            block.wq.scale(s);
            block.wk.scale(s);
            block.wv.scale(s);
            block.wo.scale(s);
            block.w1_gate.scale(s);
            block.v_up.scale(s);
            block.w2_down.scale(s);
        }
        for ad in self.adapters.iter_mut().flatten() {
            for i in 0..4 {
                ad.a[i].scale(s);
                ad.b[i].scale(s);
            }
        }
    }

    /// Extract the unit-keyed view for the trainable universe of `mode`.
    pub fn into_unit_map(self, mode: AdapterMode) -> GradientMap {
        let mut map = GradientMap::new();
        match mode {
            AdapterMode::Full => {
                for (i, block) in self.blocks.into_iter().enumerate() {
                    let layer = i + 1;
                    map.insert(ParameterUnitId::new(layer, UnitKind::Wq), block.wq);
                    map.insert(ParameterUnitId::new(layer, UnitKind::Wk), block.wk);
                    map.insert(ParameterUnitId::new(layer, UnitKind::Wv), block.wv);
                    map.insert(ParameterUnitId::new(layer, UnitKind::Wo), block.wo);
                    map.insert(ParameterUnitId::new(layer, UnitKind::W1Gate), block.w1_gate);
                    map.insert(ParameterUnitId::new(layer, UnitKind::VUp), block.v_up);
                    map.insert(ParameterUnitId::new(layer, UnitKind::W2Down), block.w2_down);
                }
            }
            AdapterMode::LowRank => {
                for (i, ad) in self.adapters.into_iter().enumerate() {
                    let layer = i + 1;
                    let ad = ad.expect("low-rank gradients must carry adapters");
                    let [aq, ak, av, ao] = ad.a;
                    let [bq, bk, bv, bo] = ad.b;
                    for (target, a, b) in [
                        (AdapterTarget::Query, aq, bq),
                        (AdapterTarget::Key, ak, bk),
                        (AdapterTarget::Value, av, bv),
                        (AdapterTarget::Output, ao, bo),
                    ] {
                        map.insert(ParameterUnitId::new(layer, UnitKind::AdapterA(target)), a);
                        map.insert(ParameterUnitId::new(layer, UnitKind::AdapterB(target)), b);
                    }
                }
            }
        }
        map
    }
}
