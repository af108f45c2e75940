use super::*;
use crate::model::{MicroTransformer, ParameterUnitId};
use crate::testutil::{pretrained_tiny, round_robin_partition, tiny_bundle};

#[test]
fn rate_stat_rejects_empty_totals() {
    assert!(RateStat::new(0, 0).is_err());
    assert!((RateStat::new(7, 10).unwrap().rate() - 0.7).abs() < 1e-15);
}

/// Eval items whose answers are aligned with the model's actual decodes (an
/// always-right oracle fixture) for the first `align` items and deliberately
/// misaligned for the rest. Requires terminating decodes, hence the
/// pretrained fixture.
fn aligned_items(
    model: &MicroTransformer,
    bundle: &crate::data::DatasetBundle,
    align: usize,
) -> Vec<crate::data::ProbeExample> {
    let mut items = bundle.eval_conflicting.clone();
    let budget = items.iter().map(|ex| ex.answer.len()).max().unwrap() + 4;
    for (i, ex) in items.iter_mut().enumerate() {
        let decoded = model
            .decode_greedy(&ex.prompt_tokens(&bundle.vocab), budget, bundle.vocab.specials.eos)
            .unwrap();
        assert!(decoded.len() < budget, "fixture decode must terminate at the end token");
        if i < align {
            ex.answer = decoded;
        } else {
            let mut wrong = decoded;
            wrong.push(bundle.vocab.specials.separator);
            ex.answer = wrong;
        }
        if ex.answer.is_empty() {
            ex.answer = vec![bundle.vocab.specials.separator];
        }
    }
    items
}

#[test]
fn adherence_counts_exact_matches() {
    let (model, bundle) = pretrained_tiny();

    let all = aligned_items(model, bundle, bundle.eval_conflicting.len());
    assert_eq!(eval_adherence(model, &bundle.vocab, &all).unwrap().rate(), 1.0);

    let none = aligned_items(model, bundle, 0);
    assert_eq!(eval_adherence(model, &bundle.vocab, &none).unwrap().rate(), 0.0);

    let some = aligned_items(model, bundle, 7);
    let stat = eval_adherence(model, &bundle.vocab, &some).unwrap();
    assert_eq!((stat.successes, stat.total), (7, 10));
    assert!(matches!(
        eval_adherence(model, &bundle.vocab, &[]),
        Err(crate::error::Error::Input(_))
    ));
}

#[test]
fn robustness_accepts_parametric_with_or_without_marker() {
    let (bundle, model_cfg) = tiny_bundle(52);
    let model = MicroTransformer::init(&model_cfg).unwrap();
    let mut items = bundle.eval_irrelevant.clone();
    let max_new = items.iter().map(|ex| ex.answer.len()).max().unwrap() + 2;
    for ex in items.iter_mut() {
        let decoded = model
            .decode_greedy(&ex.prompt_tokens(&bundle.vocab), max_new, bundle.vocab.specials.eos)
            .unwrap();
        // recorded parametric answer equals the decode → strictly robust,
        // whether or not the decode begins with the no-clue marker
        ex.parametric = if decoded.first() == Some(&bundle.vocab.specials.no_clue) {
            decoded[1..].to_vec()
        } else {
            decoded
        };
    }
    let score = eval_robustness(&model, &bundle.vocab, &items).unwrap();
    assert_eq!(score.strict.rate(), 1.0);

    for ex in items.iter_mut() {
        ex.parametric = vec![bundle.vocab.specials.separator, bundle.vocab.specials.separator];
    }
    let score = eval_robustness(&model, &bundle.vocab, &items).unwrap();
    assert_eq!(score.strict.rate(), 0.0);
}

#[test]
fn loose_robustness_flags_extracted_document_values() {
    let (bundle, model_cfg) = tiny_bundle(53);
    let model = MicroTransformer::init(&model_cfg).unwrap();
    let mut items = bundle.eval_irrelevant.clone();
    // force every document's value token to be whatever the model emits first
    let max_new = 3;
    for ex in items.iter_mut() {
        let decoded = model
            .decode_greedy(&ex.prompt_tokens(&bundle.vocab), max_new, bundle.vocab.specials.eos)
            .unwrap();
        if let Some(&first) = decoded.first() {
            for doc in ex.documents.iter_mut() {
                *doc.tokens.last_mut().unwrap() = first;
            }
        }
    }
    let score = eval_robustness(&model, &bundle.vocab, &items).unwrap();
    assert_eq!(score.loose.rate(), 0.0, "every decode now extracts a context value");
}

#[test]
fn memorization_extremes() {
    let (model, bundle) = pretrained_tiny();

    // the pretrained model answers with its parametric knowledge closed-book,
    // which by construction differs from every substituted training answer
    let rate = memorization_rate(model, &bundle.vocab, &bundle.adherence).unwrap();
    assert_eq!(rate.rate(), 0.0, "an untuned model cannot have memorized substitutes");

    // a model "answering v' everywhere" is emulated by aligning v' with the
    // actual closed-book decode
    let mut items = bundle.adherence.clone();
    for ex in items.iter_mut() {
        let decoded = model
            .decode_greedy(
                &crate::data::closed_book_prompt(&bundle.vocab, &ex.question),
                ex.answer.len() + 3,
                bundle.vocab.specials.eos,
            )
            .unwrap();
        assert!(decoded.len() < ex.answer.len() + 3);
        ex.answer = decoded;
    }
    assert_eq!(memorization_rate(model, &bundle.vocab, &items).unwrap().rate(), 1.0);
}

#[test]
fn spearman_known_values() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, 4.0, 3.0]) + 1.0).abs() < 1e-12);
    let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
    assert!((r - 0.8).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 1.0], &[2.0, 3.0]), 0.0);
}

#[test]
fn sweep_runs_cells_and_applies_the_size_rule() {
    let (bundle, model_cfg) = tiny_bundle(56);
    let model = MicroTransformer::init(&model_cfg).unwrap();
    let partition = round_robin_partition(&model);
    let tune = crate::tuning::TuneConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 0.05,
        seed: 56,
        ..Default::default()
    };

    // ratios must include 1
    let bad = SweepConfig { ratios: vec![0.5, 2.0], ..SweepConfig::default() };
    assert!(matches!(
        ratio_sweep(&model, &bundle, &partition, &tune, &bad),
        Err(crate::error::Error::Config(_))
    ));

    // base larger than the pool is a configuration error
    let bad = SweepConfig { base_size: Some(1000), ..SweepConfig::default() };
    assert!(matches!(
        ratio_sweep(&model, &bundle, &partition, &tune, &bad),
        Err(crate::error::Error::Config(_))
    ));

    let sweep = SweepConfig {
        ratios: vec![0.5, 1.0, 2.0],
        base_size: Some(8),
        methods: vec![SweepMethod::Tailored, SweepMethod::NoBoundary],
    };
    let table = ratio_sweep(&model, &bundle, &partition, &tune, &sweep).unwrap();
    assert_eq!(table.rows.len(), 6);
    let tailored = table.rows_for(SweepMethod::Tailored);
    let ratios: Vec<f64> = tailored.iter().map(|r| r.ratio).collect();
    assert_eq!(ratios, vec![0.5, 1.0, 2.0], "rows are sorted by ratio");
    for row in &table.rows {
        assert!((0.0..=1.0).contains(&row.adherence));
        assert!((0.0..=1.0).contains(&row.robustness));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.tsv");
    table.save(&path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().lines().count() >= 7);
}

#[test]
fn heatmap_export_is_exact_and_idempotent() {
    let (_, model_cfg) = tiny_bundle(57);
    let model = MicroTransformer::init(&model_cfg).unwrap();
    let mut adherence = std::collections::BTreeMap::new();
    let mut robustness = std::collections::BTreeMap::new();
    for (i, id) in model.unit_ids().into_iter().enumerate() {
        adherence.insert(id, (i as f64) * 0.125);
        robustness.insert(id, 1.0 / (i as f64 + 2.0));
    }
    let dists = ImportanceDistribution { adherence: adherence.clone(), robustness };
    let partition = round_robin_partition(&model);

    let dir = tempfile::tempdir().unwrap();
    let written = export_heatmap(&dists, Some(&partition), dir.path()).unwrap();
    assert_eq!(written.len(), 3);

    let body = std::fs::read_to_string(&written[0]).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    // header + one row per layer
    assert_eq!(lines.len(), 1 + model.config().num_layers);
    let header: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(header.len(), 1 + 7, "layer column plus seven block kinds");
    // cell values survive the round trip exactly
    let row1: Vec<&str> = lines[1].split('\t').collect();
    let id = ParameterUnitId::new(1, crate::model::UnitKind::Wq);
    assert_eq!(row1[1].parse::<f64>().unwrap(), adherence[&id]);

    let again = export_heatmap(&dists, Some(&partition), dir.path()).unwrap();
    for path in &again {
        let a = std::fs::read(path).unwrap();
        assert_eq!(a, std::fs::read(path).unwrap());
    }
    let first = std::fs::read(&written[0]).unwrap();
    let second = std::fs::read(&again[0]).unwrap();
    assert_eq!(first, second, "re-export is byte-identical");

    let subspace_body = std::fs::read_to_string(&written[2]).unwrap();
    assert!(subspace_body.contains("entangled"));
    assert!(subspace_body.contains("other"));
}
