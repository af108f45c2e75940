//! Type-tailored tuning with boundary control.
//!
//! Each tuning step draws one mini-batch from each of the three supervised
//! sets and computes three gradient maps on the same pre-step weights. Every
//! trainable subspace then receives its own blend:
//!
//! - entangled:   δ1·(γ_a·g_a + γ_r·g_r) + (1−δ1)·g_c
//! - adherence:   δ1·g_a + (1−δ1)·g_c
//! - robustness:  δ1·g_r + (1−δ1)·g_c
//! - other:       zero — those units keep their pretrained weights
//!
//! so the adherence subspace never sees robustness gradients and vice versa.
//! Ablation flags relax this: `no_boundary` routes the entangled blend to all
//! trainable subspaces, and `no_extraction` drops the g_c term, renormalizing
//! each blend's coefficients to sum to one.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, LabelKind};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::model::{GradientMap, MicroTransformer, TrainExample};
use crate::optim::MaskedAdam;
use crate::subspace::{Subspace, SubspacePartition};
use crate::util::{derive_rng, BatchStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Drop the forward-activation layer clue during probing.
    pub no_layer_clue: bool,
    /// Train every trainable subspace on the entangled blend.
    pub no_boundary: bool,
    /// Drop the document-extraction task.
    pub no_extraction: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<OptimizerKind> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    /// Reweighting factor between the behavior losses and the extraction
    /// loss, in (0, 1).
    pub delta1: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ablation: AblationFlags,
    /// Apply the three subspace updates sequentially with refreshed
    /// gradients instead of one combined masked step.
    pub sequential_updates: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            delta1: 0.5,
            learning_rate: 0.15,
            epochs: 3,
            batch_size: 16,
            ablation: AblationFlags::default(),
            sequential_updates: false,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.delta1 && self.delta1 < 1.0) {
            return Err(Error::Config("delta1 must lie in (0, 1)".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be nonnegative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar losses of one step: the three raw losses and the three composite
/// forms actually optimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_adherence: f64,
    pub loss_robustness: f64,
    pub loss_extraction: Option<f64>,
    pub composite_entangled: f64,
    pub composite_adherence: f64,
    pub composite_robustness: f64,
}

/// Per-subspace blend coefficients (adherence, robustness, extraction).
fn blend(subspace: Subspace, delta1: f64, gamma: (f64, f64), flags: AblationFlags) -> [f64; 3] {
    let (gamma_a, gamma_r) = gamma;
    let effective = if flags.no_boundary && subspace != Subspace::Other {
        Subspace::Entangled
    } else {
        subspace
    };
    match (effective, flags.no_extraction) {
        (Subspace::Entangled, false) => [delta1 * gamma_a, delta1 * gamma_r, 1.0 - delta1],
        (Subspace::Entangled, true) => [gamma_a, gamma_r, 0.0],
        (Subspace::Adherence, false) => [delta1, 0.0, 1.0 - delta1],
        (Subspace::Adherence, true) => [1.0, 0.0, 0.0],
        (Subspace::Robustness, false) => [0.0, delta1, 1.0 - delta1],
        (Subspace::Robustness, true) => [0.0, 1.0, 0.0],
        (Subspace::Other, _) => [0.0, 0.0, 0.0],
    }
}

/// Combine the three gradient maps into one per-unit composite. Every unit of
/// the partition appears in the result; units of the frozen subspace map to
/// zero matrices.
pub fn composite_gradient(
    grads_a: &GradientMap,
    grads_r: &GradientMap,
    grads_c: Option<&GradientMap>,
    partition: &SubspacePartition,
    delta1: f64,
    flags: AblationFlags,
) -> Result<GradientMap> {
    if grads_c.is_none() && !flags.no_extraction {
        return Err(Error::Input("extraction gradients missing without the no_extraction flag".into()));
    }
    let mut out = GradientMap::new();
    for (&id, _) in partition.z_adherence.iter() {
        let subspace = partition
            .assignment(id)
            .ok_or_else(|| Error::Internal(format!("unit {id} missing from partition")))?;
        let ga = grads_a
            .get(&id)
            .ok_or_else(|| Error::Internal(format!("adherence gradient missing for {id}")))?;
        let gr = grads_r
            .get(&id)
            .ok_or_else(|| Error::Internal(format!("robustness gradient missing for {id}")))?;
        if ga.shape() != gr.shape() {
            return Err(Error::Internal(format!("gradient shape mismatch for {id}")));
        }
        let [ca, cr, cc] = blend(subspace, delta1, (partition.gamma_a, partition.gamma_r), flags);
        let mut g = Mat::zeros(ga.rows(), ga.cols());
        if ca != 0.0 {
            g.add_scaled(ga, ca);
        }
        if cr != 0.0 {
            g.add_scaled(gr, cr);
        }
        if cc != 0.0 {
            let gc = grads_c
                .and_then(|m| m.get(&id))
                .ok_or_else(|| Error::Internal(format!("extraction gradient missing for {id}")))?;
            if gc.shape() != ga.shape() {
                return Err(Error::Internal(format!("gradient shape mismatch for {id}")));
            }
            g.add_scaled(gc, cc);
        }
        out.insert(id, g);
    }
    Ok(out)
}

/// Composite scalar losses from the raw losses with the same coefficients.
pub fn composite_losses(
    loss_a: f64,
    loss_r: f64,
    loss_c: Option<f64>,
    partition: &SubspacePartition,
    delta1: f64,
    flags: AblationFlags,
) -> LossBreakdown {
    let gamma = (partition.gamma_a, partition.gamma_r);
    let lc = loss_c.unwrap_or(0.0);
    let form = |subspace: Subspace| {
        let [ca, cr, cc] = blend(subspace, delta1, gamma, flags);
        ca * loss_a + cr * loss_r + cc * lc
    };
    LossBreakdown {
        loss_adherence: loss_a,
        loss_robustness: loss_r,
        loss_extraction: loss_c,
        composite_entangled: form(Subspace::Entangled),
        composite_adherence: form(Subspace::Adherence),
        composite_robustness: form(Subspace::Robustness),
    }
}

/// What one tuning step produced: the scalar losses plus the Frobenius norm
/// of the composite gradient restricted to each trainable subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub grad_norm_entangled: f64,
    pub grad_norm_adherence: f64,
    pub grad_norm_robustness: f64,
}

fn subspace_norms(composite: &GradientMap, partition: &SubspacePartition) -> [f64; 3] {
    let norm = |members: &BTreeSet<crate::model::ParameterUnitId>| {
        members
            .iter()
            .filter_map(|id| composite.get(id))
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };
    [norm(&partition.entangled), norm(&partition.adherence), norm(&partition.robustness)]
}

/// Optimizer state threaded through the steps of one training run.
pub enum TuneOptimizer {
    Sgd,
    Adam(MaskedAdam),
}

impl TuneOptimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => TuneOptimizer::Sgd,
            OptimizerKind::Adam => TuneOptimizer::Adam(MaskedAdam::new()),
        }
    }

    fn apply(
        &mut self,
        model: &mut MicroTransformer,
        grads: &GradientMap,
        mask: &BTreeSet<crate::model::ParameterUnitId>,
        lr: f64,
    ) -> Result<()> {
        match self {
            TuneOptimizer::Sgd => model.masked_update(grads, mask, lr),
            TuneOptimizer::Adam(state) => state.step(model, grads, mask, lr),
        }
    }
}

/// One synchronized tuning step over three mini-batches. Gradients for all
/// three losses are taken on the same pre-step weights, combined per
/// subspace, and applied in a single masked update; the frozen subspace (and
/// the embedding/positional/head tensors) is never touched.
pub fn tuning_step(
    model: &mut MicroTransformer,
    batch_a: &[TrainExample],
    batch_r: &[TrainExample],
    batch_c: Option<&[TrainExample]>,
    partition: &SubspacePartition,
    cfg: &TuneConfig,
    optimizer: &mut TuneOptimizer,
) -> Result<StepOutcome> {
    cfg.validate()?;
    if batch_a.is_empty() || batch_r.is_empty() {
        return Err(Error::Input("tuning step needs adherence and robustness batches".into()));
    }
    match (batch_c, cfg.ablation.no_extraction) {
        (None, false) => {
            return Err(Error::Input(
                "tuning step needs an extraction batch unless no_extraction is set".into(),
            ))
        }
        (Some(b), false) if b.is_empty() => {
            return Err(Error::Input("empty extraction batch".into()))
        }
        _ => {}
    }
    let batch_c = if cfg.ablation.no_extraction { None } else { batch_c };

    if cfg.sequential_updates {
        return sequential_step(model, batch_a, batch_r, batch_c, partition, cfg, optimizer);
    }

    let (loss_a, grads_a) = model.loss_and_grads(batch_a)?;
    let (loss_r, grads_r) = model.loss_and_grads(batch_r)?;
    let (loss_c, grads_c) = match batch_c {
        Some(batch) => {
            let (l, g) = model.loss_and_grads(batch)?;
            (Some(l), Some(g))
        }
        None => (None, None),
    };

    let composite = composite_gradient(
        &grads_a,
        &grads_r,
        grads_c.as_ref(),
        partition,
        cfg.delta1,
        cfg.ablation,
    )?;
    let [gn_e, gn_a, gn_r] = subspace_norms(&composite, partition);
    optimizer.apply(model, &composite, &partition.trainable(), cfg.learning_rate)?;
    Ok(StepOutcome {
        losses: composite_losses(loss_a, loss_r, loss_c, partition, cfg.delta1, cfg.ablation),
        grad_norm_entangled: gn_e,
        grad_norm_adherence: gn_a,
        grad_norm_robustness: gn_r,
    })
}

/// The sequential variant: update the entangled subspace first, then the
/// adherence subspace, then the robustness subspace, refreshing gradients
/// before each sub-update. Order matters here, which is why the combined
/// step is the default.
fn sequential_step(
    model: &mut MicroTransformer,
    batch_a: &[TrainExample],
    batch_r: &[TrainExample],
    batch_c: Option<&[TrainExample]>,
    partition: &SubspacePartition,
    cfg: &TuneConfig,
    optimizer: &mut TuneOptimizer,
) -> Result<StepOutcome> {
    // telemetry reports the pre-step losses
    let loss_a = model.loss(batch_a)?;
    let loss_r = model.loss(batch_r)?;
    let loss_c = batch_c.map(|b| model.loss(b)).transpose()?;
    let losses = composite_losses(loss_a, loss_r, loss_c, partition, cfg.delta1, cfg.ablation);

    let mut norms: Option<[f64; 3]> = None;
    for subspace in [Subspace::Entangled, Subspace::Adherence, Subspace::Robustness] {
        let mask = partition.members(subspace);
        if mask.is_empty() {
            continue;
        }
        let (_, grads_a) = model.loss_and_grads(batch_a)?;
        let (_, grads_r) = model.loss_and_grads(batch_r)?;
        let grads_c = batch_c.map(|b| model.loss_and_grads(b)).transpose()?.map(|(_, g)| g);
        let mut composite = composite_gradient(
            &grads_a,
            &grads_r,
            grads_c.as_ref(),
            partition,
            cfg.delta1,
            cfg.ablation,
        )?;
        if norms.is_none() {
            norms = Some(subspace_norms(&composite, partition));
        }
        composite.retain(|id, _| mask.contains(id));
        optimizer.apply(model, &composite, mask, cfg.learning_rate)?;
    }
    let [gn_e, gn_a, gn_r] = norms.unwrap_or([0.0; 3]);
    Ok(StepOutcome {
        losses,
        grad_norm_entangled: gn_e,
        grad_norm_adherence: gn_a,
        grad_norm_robustness: gn_r,
    })
}

/// Per-epoch aggregates written to the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss_adherence: f64,
    pub mean_loss_robustness: f64,
    pub mean_loss_extraction: Option<f64>,
    pub grad_norm_entangled: f64,
    pub grad_norm_adherence: f64,
    pub grad_norm_robustness: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTelemetry {
    pub steps: Vec<StepOutcome>,
    pub epochs: Vec<EpochStats>,
}

/// Run the full tuning loop: `epochs` passes where one pass is defined by the
/// largest stream, with each stream cycling (and reshuffling) independently.
pub fn train(
    model: &mut MicroTransformer,
    bundle: &DatasetBundle,
    partition: &SubspacePartition,
    cfg: &TuneConfig,
) -> Result<TrainTelemetry> {
    cfg.validate()?;
    let examples_a = bundle.train_examples(LabelKind::Adherence);
    let examples_r = bundle.train_examples(LabelKind::Robustness);
    let examples_c = bundle.train_examples(LabelKind::Extraction);
    train_on_examples(model, &examples_a, &examples_r, &examples_c, partition, cfg)
}

/// Tuning loop over pre-assembled training sequences.
pub fn train_on_examples(
    model: &mut MicroTransformer,
    examples_a: &[TrainExample],
    examples_r: &[TrainExample],
    examples_c: &[TrainExample],
    partition: &SubspacePartition,
    cfg: &TuneConfig,
) -> Result<TrainTelemetry> {
    cfg.validate()?;
    if examples_a.is_empty() || examples_r.is_empty() {
        return Err(Error::Input("tuning needs nonempty adherence and robustness sets".into()));
    }
    let use_extraction = !cfg.ablation.no_extraction;
    if use_extraction && examples_c.is_empty() {
        return Err(Error::Input("tuning needs an extraction set unless no_extraction is set".into()));
    }

    let mut stream_a = BatchStream::new(examples_a.len(), derive_rng(cfg.seed, "tune-adherence"));
    let mut stream_r = BatchStream::new(examples_r.len(), derive_rng(cfg.seed, "tune-robustness"));
    let mut stream_c = use_extraction
        .then(|| BatchStream::new(examples_c.len(), derive_rng(cfg.seed, "tune-extraction")));

    let longest = examples_a
        .len()
        .max(examples_r.len())
        .max(if use_extraction { examples_c.len() } else { 0 });
    let steps_per_epoch = longest.div_ceil(cfg.batch_size);
    let mut optimizer = TuneOptimizer::new(cfg.optimizer);
    let mut telemetry = TrainTelemetry::default();

    for epoch in 1..=cfg.epochs {
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut norm_sums = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..steps_per_epoch {
            let batch_a: Vec<TrainExample> = stream_a
                .next_batch(cfg.batch_size)
                .into_iter()
                .map(|i| examples_a[i].clone())
                .collect();
            let batch_r: Vec<TrainExample> = stream_r
                .next_batch(cfg.batch_size)
                .into_iter()
                .map(|i| examples_r[i].clone())
                .collect();
            let batch_c: Option<Vec<TrainExample>> = stream_c.as_mut().map(|s| {
                s.next_batch(cfg.batch_size).into_iter().map(|i| examples_c[i].clone()).collect()
            });

            let outcome = tuning_step(
                model,
                &batch_a,
                &batch_r,
                batch_c.as_deref(),
                partition,
                cfg,
                &mut optimizer,
            )?;
            sums.0 += outcome.losses.loss_adherence;
            sums.1 += outcome.losses.loss_robustness;
            sums.2 += outcome.losses.loss_extraction.unwrap_or(0.0);
            norm_sums.0 += outcome.grad_norm_entangled;
            norm_sums.1 += outcome.grad_norm_adherence;
            norm_sums.2 += outcome.grad_norm_robustness;
            telemetry.steps.push(outcome);
        }
        let n = steps_per_epoch as f64;
        telemetry.epochs.push(EpochStats {
            epoch,
            mean_loss_adherence: sums.0 / n,
            mean_loss_robustness: sums.1 / n,
            mean_loss_extraction: use_extraction.then_some(sums.2 / n),
            grad_norm_entangled: norm_sums.0 / n,
            grad_norm_adherence: norm_sums.1 / n,
            grad_norm_robustness: norm_sums.2 / n,
        });
    }
    Ok(telemetry)
}

/// Write the per-epoch log plus the mixing constants needed to recompute the
/// composite forms.
pub fn write_train_log(
    path: &Path,
    telemetry: &TrainTelemetry,
    partition: &SubspacePartition,
    cfg: &TuneConfig,
) -> Result<()> {
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# raglab-train-log v1").map_err(|e| Error::io("writing train log", e))?;
    writeln!(w, "# delta1 = {}", cfg.delta1).map_err(|e| Error::io("writing train log", e))?;
    writeln!(w, "# gamma_a = {}", partition.gamma_a).map_err(|e| Error::io("writing train log", e))?;
    writeln!(w, "# gamma_r = {}", partition.gamma_r).map_err(|e| Error::io("writing train log", e))?;
    writeln!(
        w,
        "epoch\tloss_adherence\tloss_robustness\tloss_extraction\tgn_entangled\tgn_adherence\tgn_robustness"
    )
    .map_err(|e| Error::io("writing train log", e))?;
    for e in &telemetry.epochs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.epoch,
            e.mean_loss_adherence,
            e.mean_loss_robustness,
            e.mean_loss_extraction.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            e.grad_norm_entangled,
            e.grad_norm_adherence,
            e.grad_norm_robustness,
        )
        .map_err(|e| Error::io("writing train log", e))?;
    }
    w.flush().map_err(|e| Error::io("flushing train log", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::model::{MicroTransformer, ModelConfig, ParameterUnitId};

    fn fixture_model() -> MicroTransformer {
        let cfg = ModelConfig::new(2, 16, 4, 31, 32, 17);
        MicroTransformer::init(&cfg).unwrap()
    }

    use crate::testutil::round_robin_partition as fixture_partition;

    fn constant_grads(model: &MicroTransformer, value: f64) -> GradientMap {
        model
            .unit_ids()
            .into_iter()
            .map(|id| {
                let shape = model.unit(id).unwrap().shape();
                let mut m = Mat::zeros(shape.0, shape.1);
                m.fill(value);
                (id, m)
            })
            .collect()
    }

    fn batch(seed: u64, n: usize) -> Vec<TrainExample> {
        use rand::Rng;
        let mut rng = crate::util::derive_rng(seed, "tune-test-batch");
        (0..n)
            .map(|_| {
                let len = rng.gen_range(5..12usize);
                let tokens = (0..len).map(|_| rng.gen_range(0..31u32)).collect();
                TrainExample::new(tokens, rng.gen_range(1..len))
            })
            .collect()
    }

    #[test]
    fn entangled_blend_matches_direct_substitution() {
        let model = fixture_model();
        let partition = fixture_partition(&model);
        let ga = constant_grads(&model, 1.0);
        let gr = constant_grads(&model, 10.0);
        let gc = constant_grads(&model, 100.0);
        let composite =
            composite_gradient(&ga, &gr, Some(&gc), &partition, 0.5, AblationFlags::default())
                .unwrap();
        for id in &partition.entangled {
            // 0.25·1 + 0.25·10 + 0.5·100 = 52.75
            assert!(composite[id].data().iter().all(|&v| (v - 52.75).abs() < 1e-12));
        }
        for id in &partition.adherence {
            // 0.5·1 + 0.5·100 = 50.5
            assert!(composite[id].data().iter().all(|&v| (v - 50.5).abs() < 1e-12));
        }
        for id in &partition.robustness {
            // 0.5·10 + 0.5·100 = 55
            assert!(composite[id].data().iter().all(|&v| (v - 55.0).abs() < 1e-12));
        }
        for id in &partition.other {
            assert!(composite[id].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn near_one_delta_recovers_the_behavior_gradient() {
        let model = fixture_model();
        let partition = fixture_partition(&model);
        let ga = constant_grads(&model, 1.0);
        let gr = constant_grads(&model, 0.0);
        let gc = constant_grads(&model, 1.0);
        let composite =
            composite_gradient(&ga, &gr, Some(&gc), &partition, 0.999, AblationFlags::default())
                .unwrap();
        for id in &partition.adherence {
            let v = composite[id].data()[0];
            assert!((v - 1.0).abs() < 2e-3, "0.999·1 + 0.001·1 = 1, got {v}");
        }
    }

    #[test]
    fn composite_is_linear_in_each_input() {
        let model = fixture_model();
        let partition = fixture_partition(&model);
        let ga = constant_grads(&model, 3.0);
        let gr = constant_grads(&model, 5.0);
        let gc = constant_grads(&model, 7.0);
        let base =
            composite_gradient(&ga, &gr, Some(&gc), &partition, 0.4, AblationFlags::default())
                .unwrap();
        let ga2 = constant_grads(&model, 6.0);
        let doubled_a =
            composite_gradient(&ga2, &gr, Some(&gc), &partition, 0.4, AblationFlags::default())
                .unwrap();
        let direct_a =
            composite_gradient(&ga, &constant_grads(&model, 0.0), Some(&constant_grads(&model, 0.0)), &partition, 0.4, AblationFlags::default())
                .unwrap();
        for id in model.unit_ids() {
            for i in 0..4 {
                let lhs = doubled_a[&id].data()[i] - base[&id].data()[i];
                let rhs = direct_a[&id].data()[i];
                assert!((lhs - rhs).abs() < 1e-12, "linearity violated at {id}");
            }
        }
    }

    #[test]
    fn zero_gradient_fixtures_isolate_signals() {
        let model = fixture_model();
        let partition = fixture_partition(&model);
        let zero = constant_grads(&model, 0.0);
        let gr = constant_grads(&model, 2.0);
        let gc = constant_grads(&model, 4.0);

        // with g_a = 0, the adherence subspace receives only (1−δ1)·g_c
        let composite =
            composite_gradient(&zero, &gr, Some(&gc), &partition, 0.5, AblationFlags::default())
                .unwrap();
        for id in &partition.adherence {
            assert!(composite[id].data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        }
        // with g_r = 0, the robustness subspace receives only (1−δ1)·g_c
        let composite =
            composite_gradient(&constant_grads(&model, 2.0), &zero, Some(&gc), &partition, 0.5, AblationFlags::default())
                .unwrap();
        for id in &partition.robustness {
            assert!(composite[id].data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        }
    }

    #[test]
    fn robustness_only_step_moves_only_entangled_and_robustness() {
        let mut model = fixture_model();
        let partition = fixture_partition(&model);
        let zero = constant_grads(&model, 0.0);
        let (_, gr) = model.loss_and_grads(&batch(3, 4)).unwrap();
        let composite =
            composite_gradient(&zero, &gr, Some(&zero), &partition, 0.5, AblationFlags::default())
                .unwrap();
        let before: BTreeMap<ParameterUnitId, String> = model
            .unit_ids()
            .into_iter()
            .map(|id| (id, model.unit_checksum(id).unwrap()))
            .collect();
        model.masked_update(&composite, &partition.trainable(), 0.1).unwrap();
        for (id, checksum) in &before {
            let now = model.unit_checksum(*id).unwrap();
            let sub = partition.assignment(*id).unwrap();
            match sub {
                Subspace::Entangled | Subspace::Robustness => {
                    assert_ne!(&now, checksum, "{id} in {sub:?} should move")
                }
                Subspace::Adherence | Subspace::Other => {
                    assert_eq!(&now, checksum, "{id} in {sub:?} must stay frozen")
                }
            }
        }
    }

    #[test]
    fn no_boundary_routes_the_entangled_blend_everywhere() {
        let model = fixture_model();
        let partition = fixture_partition(&model);
        let ga = constant_grads(&model, 1.0);
        let gr = constant_grads(&model, 10.0);
        let gc = constant_grads(&model, 100.0);
        let flags = AblationFlags { no_boundary: true, ..AblationFlags::default() };
        let composite = composite_gradient(&ga, &gr, Some(&gc), &partition, 0.5, flags).unwrap();
        for id in partition.trainable() {
            assert!(composite[&id].data().iter().all(|&v| (v - 52.75).abs() < 1e-12));
        }
        for id in &partition.other {
            assert!(composite[id].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn no_extraction_renormalizes_coefficients() {
        let model = fixture_model();
        let partition = fixture_partition(&model);
        let ga = constant_grads(&model, 1.0);
        let gr = constant_grads(&model, 10.0);
        let flags = AblationFlags { no_extraction: true, ..AblationFlags::default() };
        let composite = composite_gradient(&ga, &gr, None, &partition, 0.5, flags).unwrap();
        for id in &partition.adherence {
            // renormalized: exactly g_a
            assert!(composite[id].data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
        for id in &partition.robustness {
            assert!(composite[id].data().iter().all(|&v| (v - 10.0).abs() < 1e-12));
        }
        for id in &partition.entangled {
            // γ_a·g_a + γ_r·g_r with γ = (0.5, 0.5)
            assert!(composite[id].data().iter().all(|&v| (v - 5.5).abs() < 1e-12));
        }
    }

    #[test]
    fn missing_extraction_batch_is_an_input_error() {
        let mut model = fixture_model();
        let partition = fixture_partition(&model);
        let cfg = TuneConfig { seed: 5, ..TuneConfig::default() };
        let mut opt = TuneOptimizer::new(cfg.optimizer);
        let result = tuning_step(
            &mut model,
            &batch(1, 3),
            &batch(2, 3),
            None,
            &partition,
            &cfg,
            &mut opt,
        );
        assert!(matches!(result, Err(Error::Input(_))));
    }

    #[test]
    fn step_freezes_other_subspace_and_frozen_tensors() {
        let mut model = fixture_model();
        let partition = fixture_partition(&model);
        let frozen_before = model.frozen_checksum();
        let other_before: Vec<String> = partition
            .other
            .iter()
            .map(|&id| model.unit_checksum(id).unwrap())
            .collect();
        let cfg = TuneConfig { seed: 7, ..TuneConfig::default() };
        let mut opt = TuneOptimizer::new(cfg.optimizer);
        for step in 0..3 {
            tuning_step(
                &mut model,
                &batch(10 + step, 4),
                &batch(20 + step, 4),
                Some(&batch(30 + step, 4)),
                &partition,
                &cfg,
                &mut opt,
            )
            .unwrap();
        }
        assert_eq!(model.frozen_checksum(), frozen_before);
        for (id, before) in partition.other.iter().zip(&other_before) {
            assert_eq!(&model.unit_checksum(*id).unwrap(), before);
        }
    }

    #[test]
    fn composite_losses_satisfy_the_linear_forms() {
        let model = fixture_model();
        let mut partition = fixture_partition(&model);
        partition.gamma_a = 0.7310585786300049;
        partition.gamma_r = 1.0 - partition.gamma_a;
        let delta1 = 0.37;
        let (la, lr, lc) = (1.25, 0.75, 2.5);
        let b = composite_losses(la, lr, Some(lc), &partition, delta1, AblationFlags::default());
        let expected_cx = delta1 * (partition.gamma_a * la + partition.gamma_r * lr) + (1.0 - delta1) * lc;
        assert!((b.composite_entangled - expected_cx).abs() < 1e-12);
        assert!((b.composite_adherence - (delta1 * la + (1.0 - delta1) * lc)).abs() < 1e-12);
        assert!((b.composite_robustness - (delta1 * lr + (1.0 - delta1) * lc)).abs() < 1e-12);
    }

    use crate::testutil::tiny_bundle;

    #[test]
    fn training_is_deterministic_and_zero_lr_is_identity() {
        let (bundle, model_cfg) = tiny_bundle(41);
        let cfg = TuneConfig { epochs: 1, batch_size: 8, seed: 2, ..TuneConfig::default() };

        let mut m1 = MicroTransformer::init(&model_cfg).unwrap();
        let partition = fixture_partition(&m1);
        let t1 = train(&mut m1, &bundle, &partition, &cfg).unwrap();
        let mut m2 = MicroTransformer::init(&model_cfg).unwrap();
        let t2 = train(&mut m2, &bundle, &partition, &cfg).unwrap();
        assert_eq!(m1.checksum(), m2.checksum());
        assert_eq!(t1.steps, t2.steps);
        assert!(!t1.steps.is_empty());

        let mut frozen = MicroTransformer::init(&model_cfg).unwrap();
        let initial = frozen.checksum();
        let zero_lr = TuneConfig { learning_rate: 0.0, ..cfg };
        train(&mut frozen, &bundle, &partition, &zero_lr).unwrap();
        assert_eq!(frozen.checksum(), initial);
    }

    #[test]
    fn sequential_variant_runs_and_respects_freezing() {
        let (bundle, model_cfg) = tiny_bundle(43);
        let mut model = MicroTransformer::init(&model_cfg).unwrap();
        let partition = fixture_partition(&model);
        let frozen_before = model.frozen_checksum();
        let cfg = TuneConfig {
            epochs: 1,
            batch_size: 8,
            sequential_updates: true,
            seed: 3,
            ..TuneConfig::default()
        };
        let telemetry = train(&mut model, &bundle, &partition, &cfg).unwrap();
        assert!(!telemetry.steps.is_empty());
        assert_eq!(model.frozen_checksum(), frozen_before);
        for id in &partition.other {
            let reference = MicroTransformer::init(&model_cfg).unwrap();
            assert_eq!(
                model.unit_checksum(*id).unwrap(),
                reference.unit_checksum(*id).unwrap()
            );
        }
    }

    #[test]
    fn train_log_roundtrips_the_mixing_constants() {
        let (bundle, model_cfg) = tiny_bundle(44);
        let mut model = MicroTransformer::init(&model_cfg).unwrap();
        let partition = fixture_partition(&model);
        let cfg = TuneConfig { epochs: 2, batch_size: 8, seed: 4, ..TuneConfig::default() };
        let telemetry = train(&mut model, &bundle, &partition, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train_log.tsv");
        write_train_log(&path, &telemetry, &partition, &cfg).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.contains("# delta1 = 0.5"));
        assert_eq!(body.lines().filter(|l| !l.starts_with('#') && !l.starts_with("epoch")).count(), 2);
    }
}
