//! Scoring, auxiliary analyses, and exports.
//!
//! Adherence is the fraction of conflicting-context decodes that exactly
//! match the substituted evidence value; robustness is the fraction of
//! noise-context decodes that reproduce the recorded parametric answer
//! (the no-clue marker may precede it). A looser robustness column counts
//! decodes that at least avoid every context document's value. All scoring
//! is read-only and exact-match at the token level.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    assemble_prompt, closed_book_prompt, DatasetBundle, LabelKind, NoiseProbe, ProbeExample, Vocab,
};
use crate::error::{Error, Result};
use crate::model::{MicroTransformer, TokenId, UnitKind};
use crate::probe::ImportanceDistribution;
use crate::subspace::SubspacePartition;
use crate::tuning::{train_on_examples, AblationFlags, TuneConfig};
use crate::util::derive_rng;

/// Successes over a total; the total is always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateStat {
    pub successes: usize,
    pub total: usize,
}

impl RateStat {
    pub fn new(successes: usize, total: usize) -> Result<RateStat> {
        if total == 0 {
            return Err(Error::Input("rate over an empty set".into()));
        }
        Ok(RateStat { successes, total })
    }

    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.total as f64
    }
}

/// Strict and loose robustness in one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessScore {
    /// Decode equals the parametric answer (no-clue marker optional).
    pub strict: RateStat,
    /// Decode avoids every context document's value token.
    pub loose: RateStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub adherence: RateStat,
    pub robustness_strict: RateStat,
    pub robustness_loose: RateStat,
    pub noise_accuracy: RateStat,
    pub memorization: RateStat,
}

fn decode_len(items: &[ProbeExample]) -> usize {
    items.iter().map(|ex| ex.answer.len()).max().unwrap_or(1) + 2
}

/// Fraction of conflicting-context items whose greedy decode exactly matches
/// the substituted evidence value.
pub fn eval_adherence(
    model: &MicroTransformer,
    vocab: &Vocab,
    items: &[ProbeExample],
) -> Result<RateStat> {
    if items.is_empty() {
        return Err(Error::Input("adherence evaluation over an empty set".into()));
    }
    let max_new = decode_len(items);
    let hits: Vec<Result<bool>> = items
        .par_iter()
        .map(|ex| {
            let decoded =
                model.decode_greedy(&ex.prompt_tokens(vocab), max_new, vocab.specials.eos)?;
            Ok(decoded == ex.answer)
        })
        .collect();
    let mut successes = 0;
    for h in hits {
        if h? {
            successes += 1;
        }
    }
    RateStat::new(successes, items.len())
}

/// Robustness over irrelevant contexts; see the module docs for the strict
/// and loose definitions.
pub fn eval_robustness(
    model: &MicroTransformer,
    vocab: &Vocab,
    items: &[ProbeExample],
) -> Result<RobustnessScore> {
    if items.is_empty() {
        return Err(Error::Input("robustness evaluation over an empty set".into()));
    }
    let max_new = decode_len(items);
    let outcomes: Vec<Result<(bool, bool)>> = items
        .par_iter()
        .map(|ex| {
            let decoded =
                model.decode_greedy(&ex.prompt_tokens(vocab), max_new, vocab.specials.eos)?;
            let strict = decoded == ex.parametric
                || (decoded.first() == Some(&vocab.specials.no_clue) && decoded[1..] == ex.parametric[..]);
            // every statement template puts the asserted value last
            let doc_values: Vec<TokenId> =
                ex.documents.iter().filter_map(|d| d.tokens.last().copied()).collect();
            let loose = !decoded.iter().any(|t| doc_values.contains(t));
            Ok((strict, loose))
        })
        .collect();
    let mut strict = 0;
    let mut loose = 0;
    for o in outcomes {
        let (s, l) = o?;
        strict += s as usize;
        loose += l as usize;
    }
    Ok(RobustnessScore {
        strict: RateStat::new(strict, items.len())?,
        loose: RateStat::new(loose, items.len())?,
    })
}

/// Single-document classification accuracy. The model is prompted with the
/// document-extraction marker; a leading relevant-label token counts as an
/// "evidence" call, a same-topic or off-topic label as a "noise" call, and
/// anything else is wrong.
pub fn noise_recognition(
    model: &MicroTransformer,
    vocab: &Vocab,
    probes: &[NoiseProbe],
) -> Result<RateStat> {
    if probes.is_empty() {
        return Err(Error::Input("noise recognition over an empty set".into()));
    }
    let hits: Vec<Result<bool>> = probes
        .par_iter()
        .map(|probe| {
            let prompt = assemble_prompt(
                vocab,
                std::slice::from_ref(&probe.document),
                &probe.question,
                vocab.specials.extract,
            );
            let decoded = model.decode_greedy(&prompt, 1, vocab.specials.eos)?;
            let s = vocab.specials;
            Ok(match decoded.first() {
                Some(&t) if t == s.label_relevant => probe.is_evidence,
                Some(&t) if t == s.label_same_topic || t == s.label_off_topic => !probe.is_evidence,
                _ => false,
            })
        })
        .collect();
    let mut successes = 0;
    for h in hits {
        if h? {
            successes += 1;
        }
    }
    RateStat::new(successes, probes.len())
}

/// How often the tuned model reproduces the conflicting training answers
/// closed-book — leakage of fictional values into parametric memory.
pub fn memorization_rate(
    model: &MicroTransformer,
    vocab: &Vocab,
    adherence_set: &[ProbeExample],
) -> Result<RateStat> {
    if adherence_set.is_empty() {
        return Err(Error::Input("memorization check over an empty set".into()));
    }
    let hits: Vec<Result<bool>> = adherence_set
        .par_iter()
        .map(|ex| {
            let prompt = closed_book_prompt(vocab, &ex.question);
            let decoded = model.decode_greedy(&prompt, ex.answer.len() + 1, vocab.specials.eos)?;
            Ok(decoded == ex.answer)
        })
        .collect();
    let mut successes = 0;
    for h in hits {
        if h? {
            successes += 1;
        }
    }
    RateStat::new(successes, adherence_set.len())
}

/// All metrics against one model.
pub fn evaluate(
    model: &MicroTransformer,
    bundle: &DatasetBundle,
    noise_probes: &[NoiseProbe],
) -> Result<EvalReport> {
    let adherence = eval_adherence(model, &bundle.vocab, &bundle.eval_conflicting)?;
    let robustness = eval_robustness(model, &bundle.vocab, &bundle.eval_irrelevant)?;
    let noise_accuracy = noise_recognition(model, &bundle.vocab, noise_probes)?;
    let memorization = memorization_rate(model, &bundle.vocab, &bundle.adherence)?;
    Ok(EvalReport {
        adherence,
        robustness_strict: robustness.strict,
        robustness_loose: robustness.loose,
        noise_accuracy,
        memorization,
    })
}

/// Long-format report: one line per (model, metric).
pub fn write_report(path: &Path, reports: &[(&str, &EvalReport)]) -> Result<()> {
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# raglab-report v1").map_err(|e| Error::io("writing report", e))?;
    writeln!(w, "model\tmetric\tsuccesses\ttotal\trate").map_err(|e| Error::io("writing report", e))?;
    for (name, report) in reports {
        for (metric, stat) in [
            ("adherence", report.adherence),
            ("robustness_strict", report.robustness_strict),
            ("robustness_loose", report.robustness_loose),
            ("noise_accuracy", report.noise_accuracy),
            ("memorization", report.memorization),
        ] {
            writeln!(w, "{name}\t{metric}\t{}\t{}\t{}", stat.successes, stat.total, stat.rate())
                .map_err(|e| Error::io("writing report", e))?;
        }
    }
    w.flush().map_err(|e| Error::io("flushing report", e))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |values: &[f64]| -> Vec<f64> {
        let n = values.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                ranks[idx[k]] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Which tuning recipe a sweep cell uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    /// Boundary-controlled tuning as configured.
    Tailored,
    /// The no-boundary ablation: every trainable subspace sees all signals.
    NoBoundary,
}

impl SweepMethod {
    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::Tailored => "tailored",
            SweepMethod::NoBoundary => "no_boundary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Signal ratios |S_a'|/|S_r'|; must contain 1.
    pub ratios: Vec<f64>,
    /// Base subset size; defaults to half the adherence set.
    pub base_size: Option<usize>,
    pub methods: Vec<SweepMethod>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ratios: vec![0.2, 1.0 / 3.0, 1.0, 3.0, 5.0],
            base_size: None,
            methods: vec![SweepMethod::Tailored, SweepMethod::NoBoundary],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub ratio: f64,
    pub adherence: f64,
    pub robustness: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn rows_for(&self, method: SweepMethod) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.method == method.name()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# raglab-sweep v1").map_err(|e| Error::io("writing sweep", e))?;
        writeln!(w, "method\tratio\tadherence\trobustness").map_err(|e| Error::io("writing sweep", e))?;
        for row in &self.rows {
            writeln!(w, "{}\t{}\t{}\t{}", row.method, row.ratio, row.adherence, row.robustness)
                .map_err(|e| Error::io("writing sweep", e))?;
        }
        w.flush().map_err(|e| Error::io("flushing sweep", e))
    }
}

/// Deterministically draw `n` examples, reshuffling and cycling the pool when
/// `n` exceeds it (oversampling keeps large ratios constructible).
fn subset_cycled<T: Clone>(pool: &[T], n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<T> {
    use rand::seq::SliceRandom;
    let mut out = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    while out.len() < n {
        order.shuffle(rng);
        for &i in &order {
            if out.len() == n {
                break;
            }
            out.push(pool[i].clone());
        }
    }
    out
}

/// Retrain from the pretrained checkpoint under varying adherence/robustness
/// data ratios, for each method, and score each cell on the shared held-out
/// contexts. Every cell starts from a clone of the same pretrained weights
/// (checksum-verified).
pub fn ratio_sweep(
    pretrained: &MicroTransformer,
    bundle: &DatasetBundle,
    partition: &SubspacePartition,
    tune_cfg: &TuneConfig,
    sweep: &SweepConfig,
) -> Result<SweepTable> {
    if !sweep.ratios.iter().any(|&r| (r - 1.0).abs() < 1e-12) {
        return Err(Error::Config("sweep ratios must include 1".into()));
    }
    if sweep.ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::Config("sweep ratios must be positive".into()));
    }
    let base = sweep.base_size.unwrap_or(bundle.adherence.len() / 2);
    if base == 0 {
        return Err(Error::Config("sweep base size must be positive".into()));
    }
    if base > bundle.adherence.len() || base > bundle.robustness.len() {
        return Err(Error::Config(format!(
            "sweep base size {base} exceeds the supervised sets ({} / {})",
            bundle.adherence.len(),
            bundle.robustness.len()
        )));
    }

    let examples_a = bundle.train_examples(LabelKind::Adherence);
    let examples_r = bundle.train_examples(LabelKind::Robustness);
    let examples_c = bundle.train_examples(LabelKind::Extraction);
    let reference = pretrained.checksum();

    let mut ratios = sweep.ratios.clone();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();

    let mut table = SweepTable::default();
    for &method in &sweep.methods {
        for &ratio in &ratios {
            let (n_a, n_r) = if ratio >= 1.0 {
                ((ratio * base as f64).round() as usize, base)
            } else {
                (base, (base as f64 / ratio).round() as usize)
            };
            let mut rng =
                derive_rng(tune_cfg.seed, &format!("sweep-{}-{ratio}", method.name()));
            let sub_a = subset_cycled(&examples_a, n_a, &mut rng);
            let sub_r = subset_cycled(&examples_r, n_r, &mut rng);
            let sub_c = subset_cycled(&examples_c, n_a + n_r, &mut rng);

            let mut model = pretrained.clone();
            debug_assert_eq!(model.checksum(), reference);
            let cfg = TuneConfig {
                ablation: AblationFlags {
                    no_boundary: method == SweepMethod::NoBoundary
                        || tune_cfg.ablation.no_boundary,
                    ..tune_cfg.ablation
                },
                ..tune_cfg.clone()
            };
            train_on_examples(&mut model, &sub_a, &sub_r, &sub_c, partition, &cfg)?;

            let adherence = eval_adherence(&model, &bundle.vocab, &bundle.eval_conflicting)?;
            let robustness = eval_robustness(&model, &bundle.vocab, &bundle.eval_irrelevant)?;
            table.rows.push(SweepRow {
                method: method.name().into(),
                ratio,
                adherence: adherence.rate(),
                robustness: robustness.strict.rate(),
            });
        }
    }
    Ok(table)
}

/// Write importance grids (rows = layers, columns = unit kinds, one file per
/// behavior) plus a companion grid of subspace assignments. Returns the paths
/// written.
pub fn export_heatmap(
    dists: &ImportanceDistribution,
    partition: Option<&SubspacePartition>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let keys: Vec<_> = dists.adherence.keys().copied().collect();
    if keys.is_empty() {
        return Err(Error::Input("importance distribution is empty".into()));
    }
    let num_layers = keys.iter().map(|id| id.layer).max().unwrap();
    let mut kinds: Vec<UnitKind> = Vec::new();
    for id in &keys {
        if !kinds.contains(&id.kind) {
            kinds.push(id.kind);
        }
    }
    kinds.sort();

    let grid = |map: &BTreeMap<crate::model::ParameterUnitId, f64>,
                path: &Path|
     -> Result<()> {
        let file = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        write!(w, "layer").map_err(|e| Error::io("writing heatmap", e))?;
        for kind in &kinds {
            write!(w, "\t{}", kind.label()).map_err(|e| Error::io("writing heatmap", e))?;
        }
        writeln!(w).map_err(|e| Error::io("writing heatmap", e))?;
        for layer in 1..=num_layers {
            write!(w, "{layer}").map_err(|e| Error::io("writing heatmap", e))?;
            for kind in &kinds {
                let id = crate::model::ParameterUnitId::new(layer, *kind);
                let v = map
                    .get(&id)
                    .ok_or_else(|| Error::Internal(format!("heatmap cell {id} missing")))?;
                write!(w, "\t{v}").map_err(|e| Error::io("writing heatmap", e))?;
            }
            writeln!(w).map_err(|e| Error::io("writing heatmap", e))?;
        }
        w.flush().map_err(|e| Error::io("flushing heatmap", e))
    };

    let mut written = Vec::new();
    let path_a = dir.join("heatmap_adherence.tsv");
    grid(&dists.adherence, &path_a)?;
    written.push(path_a);
    let path_r = dir.join("heatmap_robustness.tsv");
    grid(&dists.robustness, &path_r)?;
    written.push(path_r);

    if let Some(partition) = partition {
        let path_s = dir.join("heatmap_subspace.tsv");
        let file = fs::File::create(&path_s)
            .map_err(|e| Error::io(format!("creating {}", path_s.display()), e))?;
        let mut w = BufWriter::new(file);
        write!(w, "layer").map_err(|e| Error::io("writing heatmap", e))?;
        for kind in &kinds {
            write!(w, "\t{}", kind.label()).map_err(|e| Error::io("writing heatmap", e))?;
        }
        writeln!(w).map_err(|e| Error::io("writing heatmap", e))?;
        for layer in 1..=num_layers {
            write!(w, "{layer}").map_err(|e| Error::io("writing heatmap", e))?;
            for kind in &kinds {
                let id = crate::model::ParameterUnitId::new(layer, *kind);
                let name = partition.assignment(id).map(|s| s.name()).unwrap_or("-");
                write!(w, "\t{name}").map_err(|e| Error::io("writing heatmap", e))?;
            }
            writeln!(w).map_err(|e| Error::io("writing heatmap", e))?;
        }
        w.flush().map_err(|e| Error::io("flushing heatmap", e))?;
        written.push(path_s);
    }
    Ok(written)
}

#[cfg(test)]
mod tests;
