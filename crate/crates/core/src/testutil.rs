//! Shared fixtures for the crate's own tests.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use crate::data::{
    extract_parametric_knowledge, BundleConfig, DatasetBundle, FactBase, FactConfig, Vocab,
};
use crate::model::{MicroTransformer, ModelConfig};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::subspace::SubspacePartition;

/// A small but structurally complete world with a perfectly-converged alpha
/// map standing in for a pretrained model's parametric knowledge.
pub fn tiny_bundle(seed: u64) -> (DatasetBundle, ModelConfig) {
    let base = FactBase::generate(&FactConfig {
        num_entities: 24,
        num_attributes: 3,
        values_per_attribute: 6,
        num_topics: 3,
        eval_fraction: 0.25,
        seed,
    })
    .unwrap();
    let vocab = Vocab::build(base.vocabulary_words()).unwrap();
    let alpha = base
        .facts
        .iter()
        .map(|f| (f.id, vec![vocab.id(base.true_value_token(f.id)).unwrap()]))
        .collect();
    let cfg = BundleConfig {
        m_a: 24,
        m_r: 24,
        m_c: 32,
        n_conflicting: 8,
        n_irrelevant: 8,
        seed,
        ..BundleConfig::default()
    };
    let model_cfg = ModelConfig::new(2, 16, 4, vocab.len(), 48, seed);
    let bundle = DatasetBundle::build_with_alpha(base, vocab, alpha, &cfg).unwrap();
    (bundle, model_cfg)
}

/// A genuinely pretrained micro model over a small world, with its bundle
/// built from real decoded parametric knowledge. Computed once per process;
/// decodes from this model terminate with the end token, which keeps
/// exact-match scoring stable.
pub fn pretrained_tiny() -> &'static (MicroTransformer, DatasetBundle) {
    static CELL: OnceLock<(MicroTransformer, DatasetBundle)> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = FactBase::generate(&FactConfig {
            num_entities: 16,
            num_attributes: 3,
            values_per_attribute: 5,
            num_topics: 2,
            eval_fraction: 0.25,
            seed: 77,
        })
        .unwrap();
        let vocab = Vocab::build(base.vocabulary_words()).unwrap();
        let model_cfg = ModelConfig::new(2, 32, 4, vocab.len(), 48, 77);
        let mut model = MicroTransformer::init(&model_cfg).unwrap();
        let outcome = pretrain(
            &mut model,
            &base,
            &vocab,
            &PretrainConfig { max_epochs: 200, check_every: 10, seed: 77, ..Default::default() },
        )
        .unwrap();
        assert!(outcome.closed_book_accuracy >= 0.95, "tiny fixture failed to converge");
        let alpha = extract_parametric_knowledge(&model, &vocab, &base).unwrap();
        let bundle_cfg = BundleConfig {
            m_a: 24,
            m_r: 24,
            m_c: 32,
            n_conflicting: 10,
            n_irrelevant: 10,
            seed: 77,
            ..BundleConfig::default()
        };
        let bundle = DatasetBundle::build_with_alpha(base, vocab, alpha, &bundle_cfg).unwrap();
        (model, bundle)
    })
}

/// Round-robin partition over the model's units with γ = (0.5, 0.5).
pub fn round_robin_partition(model: &MicroTransformer) -> SubspacePartition {
    let ids = model.unit_ids();
    let mut entangled = BTreeSet::new();
    let mut adherence = BTreeSet::new();
    let mut robustness = BTreeSet::new();
    let mut other = BTreeSet::new();
    let mut z_a = BTreeMap::new();
    let mut z_r = BTreeMap::new();
    for (i, id) in ids.iter().copied().enumerate() {
        let (za, zr) = match i % 4 {
            0 => {
                entangled.insert(id);
                (2.0, 2.0)
            }
            1 => {
                adherence.insert(id);
                (2.0, 0.0)
            }
            2 => {
                robustness.insert(id);
                (0.0, 2.0)
            }
            _ => {
                other.insert(id);
                (0.0, 0.0)
            }
        };
        z_a.insert(id, za);
        z_r.insert(id, zr);
    }
    SubspacePartition {
        entangled,
        adherence,
        robustness,
        other,
        tau: 1.0,
        gamma_a: 0.5,
        gamma_r: 0.5,
        z_adherence: z_a,
        z_robustness: z_r,
    }
}
