//! Parameter-importance mining.
//!
//! Importance combines a forward signal with a backward signal. The forward
//! signal is the per-layer probability that a feed-forward gate fires on the
//! behavior's inputs, softmax-normalized across layers into layer weights.
//! The backward signal is |weight × gradient| per parameter, smoothed over
//! probing iterations with an exponential moving average together with an
//! EMA of its deviation (the uncertainty). The final per-parameter score is
//! `layer_weight × smoothed × uncertainty`, averaged per unit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::LabelKind;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::model::{GradientMap, MicroTransformer, ParameterUnitId, TokenId, TrainExample, UnitKind};
use crate::util::{derive_rng, BatchStream};

/// Per-layer activation statistics for one behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    /// Mean positive-activation probability of each layer's gate neurons.
    pub layer_mean: Vec<f64>,
    /// Softmax of `layer_mean` across layers.
    pub layer_weight: Vec<f64>,
}

/// Probing hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig {
    /// Sensitivity smoothing factor, in (0, 1).
    pub alpha1: f64,
    /// Uncertainty smoothing factor, in (0, 1).
    pub alpha2: f64,
    /// Probing iterations; 0 means one pass over the probing set.
    pub iterations: usize,
    pub batch_size: usize,
    /// Step size for the weight-updating probe variant; ignored when
    /// `update_weights` is off (the default, which probes frozen weights).
    pub learning_rate: f64,
    /// Update a scratch copy of the weights between probing iterations.
    pub update_weights: bool,
    /// Multiply scores by the per-layer activation weight (on by default;
    /// switching it off drops the forward clue from the importance score).
    pub use_layer_clue: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            alpha1: 0.85,
            alpha2: 0.85,
            iterations: 0,
            batch_size: 16,
            learning_rate: 1e-4,
            update_weights: false,
            use_layer_clue: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha1 && self.alpha1 < 1.0) {
            return Err(Error::Config("alpha1 must lie in (0, 1)".into()));
        }
        if !(0.0 < self.alpha2 && self.alpha2 < 1.0) {
            return Err(Error::Config("alpha2 must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch_size must be positive".into()));
        }
        Ok(())
    }

    fn effective_iterations(&self, set_len: usize) -> usize {
        if self.iterations > 0 {
            self.iterations
        } else {
            set_len.div_ceil(self.batch_size)
        }
    }
}

/// Fraction of (example, position) pairs with a positive gate pre-activation,
/// averaged over each layer's neurons, plus the softmax across layers.
pub fn activation_probabilities(
    model: &MicroTransformer,
    inputs: &[Vec<TokenId>],
) -> Result<ActivationProfile> {
    if inputs.is_empty() {
        return Err(Error::Input("activation probing needs at least one input".into()));
    }
    let record = model.record_activations(inputs)?;
    let layer_mean: Vec<f64> =
        (0..record.num_layers()).map(|l| record.layer_mean(l)).collect();
    let mut layer_weight = layer_mean.clone();
    crate::matrix::softmax_inplace(&mut layer_weight);
    Ok(ActivationProfile { layer_mean, layer_weight })
}

/// |weight × gradient|: first-order estimate of the loss impact of zeroing
/// the parameter.
#[inline]
pub fn sensitivity(weight: f64, grad: f64) -> f64 {
    (weight * grad).abs()
}

/// One smoothing step. Returns the updated (smoothed, uncertainty) pair; the
/// deviation term uses the freshly updated smoothed value.
#[inline]
pub fn ema_update(
    smoothed: f64,
    uncertainty: f64,
    observed: f64,
    alpha1: f64,
    alpha2: f64,
) -> (f64, f64) {
    let new_smoothed = alpha1 * smoothed + (1.0 - alpha1) * observed;
    let new_uncertainty = alpha2 * uncertainty + (1.0 - alpha2) * (observed - new_smoothed).abs();
    (new_smoothed, new_uncertainty)
}

/// Final per-parameter score: layer weight × smoothed sensitivity × uncertainty.
#[inline]
pub fn importance_score(layer_weight: f64, smoothed: f64, uncertainty: f64) -> f64 {
    layer_weight * smoothed * uncertainty
}

/// Per-parameter scores, one matrix per unit.
pub type ScoreMap = BTreeMap<ParameterUnitId, Mat>;

/// Run the probing loop for one behavior: compute the activation profile from
/// the input-only set once, then iterate mini-batches of the supervised set,
/// feeding |w·g| through the smoothing state. The model is left untouched;
/// with `update_weights` a scratch copy takes plain gradient steps instead.
pub fn run_probe(
    model: &MicroTransformer,
    examples: &[TrainExample],
    probe_inputs: &[Vec<TokenId>],
    cfg: &ProbeConfig,
    behavior: LabelKind,
) -> Result<ScoreMap> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("probing needs a nonempty supervised set".into()));
    }
    let profile = activation_probabilities(model, probe_inputs)?;
    let iterations = cfg.effective_iterations(examples.len());
    if iterations == 0 {
        return Err(Error::Config("probing needs at least one iteration".into()));
    }

    let unit_ids = model.unit_ids();
    let mut smoothed: ScoreMap = ScoreMap::new();
    let mut uncertainty: ScoreMap = ScoreMap::new();
    for &id in &unit_ids {
        let shape = model.unit(id)?.shape();
        smoothed.insert(id, Mat::zeros(shape.0, shape.1));
        uncertainty.insert(id, Mat::zeros(shape.0, shape.1));
    }

    let mut stream =
        BatchStream::new(examples.len(), derive_rng(cfg.seed, &format!("probe-{}", behavior.name())));
    let mut scratch = cfg.update_weights.then(|| model.clone());
    for _ in 0..iterations {
        let batch: Vec<TrainExample> =
            stream.next_batch(cfg.batch_size).into_iter().map(|i| examples[i].clone()).collect();
        let subject: &MicroTransformer = scratch.as_ref().unwrap_or(model);
        let (_, grads) = subject.loss_and_grads(&batch)?;
        for &id in &unit_ids {
            let weights = subject.unit(id)?;
            let grad = &grads[&id];
            let s = smoothed.get_mut(&id).unwrap();
            let u = uncertainty.get_mut(&id).unwrap();
            for (((sv, uv), &w), &g) in s
                .data_mut()
                .iter_mut()
                .zip(u.data_mut())
                .zip(weights.data())
                .zip(grad.data())
            {
                let observed = sensitivity(w, g);
                let (ns, nu) = ema_update(*sv, *uv, observed, cfg.alpha1, cfg.alpha2);
                *sv = ns;
                *uv = nu;
            }
        }
        if let Some(scratch_model) = scratch.as_mut() {
            let mask = unit_ids.iter().copied().collect();
            scratch_model.masked_update(&grads, &mask, cfg.learning_rate)?;
        }
    }

    let mut scores = ScoreMap::new();
    for &id in &unit_ids {
        let s = &smoothed[&id];
        let u = &uncertainty[&id];
        let weight = if cfg.use_layer_clue { profile.layer_weight[id.layer - 1] } else { 1.0 };
        let mut out = Mat::zeros(s.rows(), s.cols());
        for ((o, &sv), &uv) in out.data_mut().iter_mut().zip(s.data()).zip(u.data()) {
            *o = importance_score(weight, sv, uv);
        }
        scores.insert(id, out);
    }
    Ok(scores)
}

/// Mean per-parameter score of each unit. The score map must cover exactly
/// the model's unit universe.
pub fn aggregate_units(
    model: &MicroTransformer,
    scores: &ScoreMap,
) -> Result<BTreeMap<ParameterUnitId, f64>> {
    let ids = model.unit_ids();
    if scores.len() != ids.len() || ids.iter().any(|id| !scores.contains_key(id)) {
        return Err(Error::Internal(
            "score map does not cover the model's parameter-unit universe".into(),
        ));
    }
    Ok(ids.into_iter().map(|id| (id, scores[&id].mean())).collect())
}

/// Unit importance for both behaviors.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceDistribution {
    pub adherence: BTreeMap<ParameterUnitId, f64>,
    pub robustness: BTreeMap<ParameterUnitId, f64>,
}

impl ImportanceDistribution {
    pub fn by_behavior(&self, kind: LabelKind) -> &BTreeMap<ParameterUnitId, f64> {
        match kind {
            LabelKind::Adherence => &self.adherence,
            _ => &self.robustness,
        }
    }

    /// Tab-separated persistence: `behavior, layer, kind, value` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# raglab-importance v1").map_err(|e| Error::io("writing importance", e))?;
        writeln!(w, "behavior\tlayer\tkind\tvalue").map_err(|e| Error::io("writing importance", e))?;
        for (name, map) in [("adherence", &self.adherence), ("robustness", &self.robustness)] {
            for (id, value) in map {
                writeln!(w, "{name}\t{}\t{}\t{value}", id.layer, id.kind.label())
                    .map_err(|e| Error::io("writing importance", e))?;
            }
        }
        w.flush().map_err(|e| Error::io("flushing importance", e))
    }

    pub fn load(path: &Path) -> Result<ImportanceDistribution> {
        let body = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut adherence = BTreeMap::new();
        let mut robustness = BTreeMap::new();
        for (n, line) in body.lines().enumerate() {
            if line.starts_with('#') || line.starts_with("behavior") || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!(
                    "bad importance record on line {} of {}",
                    n + 1,
                    path.display()
                )));
            }
            let layer: usize = fields[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad layer on line {}", n + 1)))?;
            let kind = UnitKind::parse(fields[2])
                .ok_or_else(|| Error::Format(format!("bad unit kind on line {}", n + 1)))?;
            let value: f64 = fields[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad value on line {}", n + 1)))?;
            let id = ParameterUnitId::new(layer, kind);
            match fields[0] {
                "adherence" => adherence.insert(id, value),
                "robustness" => robustness.insert(id, value),
                other => {
                    return Err(Error::Format(format!("unknown behavior `{other}` on line {}", n + 1)))
                }
            };
        }
        Ok(ImportanceDistribution { adherence, robustness })
    }
}

/// Convenience: gradient norms per unit, used in telemetry.
pub fn grad_norm(grads: &GradientMap, ids: &[ParameterUnitId]) -> f64 {
    ids.iter()
        .filter_map(|id| grads.get(id))
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, UnitKind};

    #[test]
    fn sensitivity_is_abs_product() {
        assert_eq!(sensitivity(2.0, -3.0), 6.0);
        assert_eq!(sensitivity(0.0, 5.0), 0.0);
        assert_eq!(sensitivity(4.0, 0.0), 0.0);
    }

    #[test]
    fn ema_first_step_hand_values() {
        let (s, u) = ema_update(0.0, 0.0, 1.0, 0.85, 0.85);
        assert!((s - 0.15).abs() < 1e-15);
        assert!((u - 0.1275).abs() < 1e-15, "|1 - 0.15| * 0.15 = 0.1275, got {u}");
    }

    #[test]
    fn ema_constant_input_matches_closed_form() {
        let c = 0.7;
        let mut s = 0.0;
        let mut u = 0.0;
        for t in 1..=10 {
            let (ns, nu) = ema_update(s, u, c, 0.85, 0.85);
            s = ns;
            u = nu;
            let expected = c * (1.0 - 0.85f64.powi(t));
            assert!((s - expected).abs() < 1e-12, "t={t}: {s} vs {expected}");
        }
    }

    #[test]
    fn importance_score_is_a_product() {
        assert!((importance_score(0.5, 0.2, 0.1) - 0.01).abs() < 1e-15);
        assert_eq!(importance_score(0.0, 0.2, 0.1), 0.0);
    }

    #[test]
    fn layer_softmax_examples() {
        // equal means give equal weights
        let mut w = vec![0.5, 0.5];
        crate::matrix::softmax_inplace(&mut w);
        assert!((w[0] - 0.5).abs() < 1e-12);
        // hand-evaluated two-layer softmax
        let mut w = vec![0.4, 0.6];
        crate::matrix::softmax_inplace(&mut w);
        assert!((w[0] - 0.45017).abs() < 1e-5);
        assert!((w[1] - 0.54983).abs() < 1e-5);
    }

    fn probe_fixture() -> (MicroTransformer, Vec<TrainExample>, Vec<Vec<TokenId>>) {
        let cfg = ModelConfig::new(2, 16, 4, 19, 24, 3);
        let model = MicroTransformer::init(&cfg).unwrap();
        let examples: Vec<TrainExample> = (0..8)
            .map(|i| TrainExample::new(vec![1 + i, 2, 3, 4 + i, 5], 3))
            .collect();
        let inputs: Vec<Vec<TokenId>> = examples.iter().map(|e| e.tokens[..3].to_vec()).collect();
        (model, examples, inputs)
    }

    #[test]
    fn profile_weights_sum_to_one_and_probs_bounded() {
        let (model, _, inputs) = probe_fixture();
        let profile = activation_probabilities(&model, &inputs).unwrap();
        let total: f64 = profile.layer_weight.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(profile.layer_mean.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(profile.layer_weight.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn probing_is_deterministic_and_leaves_model_untouched() {
        let (model, examples, inputs) = probe_fixture();
        let cfg = ProbeConfig { iterations: 4, batch_size: 4, seed: 9, ..ProbeConfig::default() };
        let before = model.checksum();
        let a = run_probe(&model, &examples, &inputs, &cfg, LabelKind::Adherence).unwrap();
        let b = run_probe(&model, &examples, &inputs, &cfg, LabelKind::Adherence).unwrap();
        assert_eq!(model.checksum(), before);
        assert_eq!(a, b);
        for mat in a.values() {
            assert!(mat.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn constant_gradient_probe_matches_closed_form() {
        // a single repeated example makes every probing batch identical, so
        // the per-parameter sensitivity is constant across iterations
        let cfg = ModelConfig::new(2, 16, 4, 19, 24, 5);
        let model = MicroTransformer::init(&cfg).unwrap();
        let example = TrainExample::new(vec![1, 2, 3, 4, 5], 3);
        let examples = vec![example.clone(); 4];
        let inputs = vec![example.tokens[..3].to_vec(); 4];
        let t = 6;
        let probe_cfg = ProbeConfig {
            iterations: t,
            batch_size: 4,
            seed: 1,
            ..ProbeConfig::default()
        };
        let scores =
            run_probe(&model, &examples, &inputs, &probe_cfg, LabelKind::Robustness).unwrap();

        let profile = activation_probabilities(&model, &inputs).unwrap();
        let (_, grads) = model.loss_and_grads(&[example]).unwrap();
        let a1 = probe_cfg.alpha1;
        let a2 = probe_cfg.alpha2;
        // closed forms for constant observations c:
        //   smoothed_t = c (1 - a1^t)
        //   uncertainty_t = (1 - a2) c Σ_{s=1..t} a2^{t-s} a1^s
        let id = ParameterUnitId::new(1, UnitKind::Wq);
        let w = model.unit(id).unwrap();
        let g = &grads[&id];
        let s_mat = &scores[&id];
        for idx in [0usize, 7, 33] {
            let c = sensitivity(w.data()[idx], g.data()[idx]);
            let smoothed = c * (1.0 - a1.powi(t as i32));
            let mut unc = 0.0;
            for s in 1..=t {
                unc += a2.powi((t - s) as i32) * a1.powi(s as i32);
            }
            unc *= (1.0 - a2) * c;
            let expected = profile.layer_weight[0] * smoothed * unc;
            let got = s_mat.data()[idx];
            assert!(
                (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                "idx {idx}: got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn no_layer_clue_drops_the_forward_factor() {
        let (model, examples, inputs) = probe_fixture();
        let cfg = ProbeConfig { iterations: 3, batch_size: 4, seed: 2, ..ProbeConfig::default() };
        let with = run_probe(&model, &examples, &inputs, &cfg, LabelKind::Adherence).unwrap();
        let without_cfg = ProbeConfig { use_layer_clue: false, ..cfg };
        let without =
            run_probe(&model, &examples, &inputs, &without_cfg, LabelKind::Adherence).unwrap();
        let profile = activation_probabilities(&model, &inputs).unwrap();
        for (id, mat) in &with {
            let weight = profile.layer_weight[id.layer - 1];
            let bare = &without[id];
            for (a, b) in mat.data().iter().zip(bare.data()) {
                assert!((a - weight * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_is_the_unit_mean() {
        let cfg = ModelConfig::new(1, 8, 2, 11, 12, 7);
        let model = MicroTransformer::init(&cfg).unwrap();
        let mut scores = ScoreMap::new();
        for id in model.unit_ids() {
            let shape = model.unit(id).unwrap().shape();
            let mut m = Mat::zeros(shape.0, shape.1);
            m.fill(0.25);
            scores.insert(id, m);
        }
        // a constant field aggregates to that constant for every unit
        let agg = aggregate_units(&model, &scores).unwrap();
        assert!(agg.values().all(|&v| (v - 0.25).abs() < 1e-15));

        // hand-set 2×2-style check on one unit
        let id = ParameterUnitId::new(1, UnitKind::Wq);
        let m = scores.get_mut(&id).unwrap();
        m.fill(0.0);
        m.data_mut()[0] = 0.1;
        m.data_mut()[1] = 0.2;
        m.data_mut()[2] = 0.3;
        m.data_mut()[3] = 0.4;
        let agg = aggregate_units(&model, &scores).unwrap();
        assert!((agg[&id] - 1.0 / 64.0).abs() < 1e-15);

        // missing a unit is an internal error
        scores.remove(&id);
        assert!(matches!(
            aggregate_units(&model, &scores),
            Err(crate::error::Error::Internal(_))
        ));
    }

    #[test]
    fn importance_file_roundtrip() {
        let cfg = ModelConfig::new(2, 8, 2, 11, 12, 7);
        let model = MicroTransformer::init(&cfg).unwrap();
        let mut adherence = BTreeMap::new();
        let mut robustness = BTreeMap::new();
        for (i, id) in model.unit_ids().into_iter().enumerate() {
            adherence.insert(id, 0.001 * i as f64);
            robustness.insert(id, 1.0 / (i + 1) as f64);
        }
        let dist = ImportanceDistribution { adherence, robustness };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("importance.tsv");
        dist.save(&path).unwrap();
        let loaded = ImportanceDistribution::load(&path).unwrap();
        assert_eq!(loaded, dist);
    }
}
