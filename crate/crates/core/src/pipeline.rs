//! The end-to-end pipeline: staged artifacts on disk with a checksum
//! manifest.
//!
//! Stages write their outputs into one run directory and record every file's
//! SHA-256 in `manifest.json`. A stage refuses to run until its
//! predecessors' artifacts are present and match the recorded checksums, so
//! partial runs are restartable and every artifact is independently
//! inspectable. The manifest carries the effective configuration and the
//! tool version but no wall-clock timestamps — re-running a stage with
//! unchanged inputs reproduces it byte for byte. Timing goes to
//! `run_log.txt`, which is not an artifact.
//!
//! Stage order: `gen-data` (world, vocabulary, pretraining corpus) →
//! `pretrain` (base checkpoint, then the parametric-knowledge map and the
//! supervised sets, which need a trained model) → `probe` → `localize` →
//! `tune` → `eval`, plus `sweep` and `heatmap` as analyses.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{
    self, build_noise_recognition_set, DatasetBundle, FactBase, FactConfig, LabelKind, Vocab,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, evaluate, export_heatmap, ratio_sweep, write_report, SweepConfig, SweepMethod,
};
use crate::model::{AdapterMode, MicroTransformer, ModelConfig};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::probe::{aggregate_units, run_probe, ImportanceDistribution, ProbeConfig};
use crate::subspace::{localize, zscores, SubspacePartition};
use crate::tuning::{train, write_train_log, AblationFlags, OptimizerKind, TuneConfig};
use crate::util::sha256_hex;

/// Effective configuration of one run. One seed governs everything; every
/// consumer derives its own named stream from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,

    // model shape
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    /// 0 means the default 4 × model_dim.
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub adapter_mode: AdapterMode,
    pub adapter_rank: usize,
    /// Optional cap; the vocabulary is derived from the world and must fit.
    pub vocab_size: Option<usize>,

    // fact world
    pub num_entities: usize,
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    pub num_topics: usize,
    pub eval_fraction: f64,

    // dataset sizes
    pub m_a: usize,
    pub m_r: usize,
    pub m_c: usize,
    pub eval_conflicting: usize,
    pub eval_irrelevant: usize,
    pub context_docs: usize,
    pub noise_probes: usize,

    // pretraining
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_size: usize,
    pub pretrain_max_epochs: usize,
    pub pretrain_target_accuracy: f64,
    pub pretrain_check_every: usize,
    pub pretrain_coverage: usize,

    // probing
    pub alpha1: f64,
    pub alpha2: f64,
    pub probe_iterations: usize,
    pub probe_batch_size: usize,
    pub probe_learning_rate: f64,
    pub probe_update_weights: bool,

    // localization
    pub tau: f64,

    // tuning
    pub delta1: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub no_layer_clue: bool,
    pub no_boundary: bool,
    pub no_extraction: bool,
    pub sequential_updates: bool,
    pub optimizer: OptimizerKind,

    // ratio sweep
    pub sweep_ratios: Vec<f64>,
    pub sweep_base_size: Option<usize>,
    pub sweep_epochs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 0,
            max_seq_len: 64,
            adapter_mode: AdapterMode::Full,
            adapter_rank: 8,
            vocab_size: None,
            num_entities: 50,
            num_attributes: 4,
            values_per_attribute: 6,
            num_topics: 5,
            eval_fraction: 0.25,
            m_a: 2000,
            m_r: 2000,
            m_c: 4000,
            eval_conflicting: 100,
            eval_irrelevant: 100,
            context_docs: 4,
            noise_probes: 100,
            pretrain_learning_rate: 2e-3,
            pretrain_batch_size: 32,
            pretrain_max_epochs: 400,
            pretrain_target_accuracy: 0.98,
            pretrain_check_every: 5,
            pretrain_coverage: 1,
            alpha1: 0.85,
            alpha2: 0.85,
            probe_iterations: 0,
            probe_batch_size: 16,
            probe_learning_rate: 1e-4,
            probe_update_weights: false,
            tau: 1.0,
            delta1: 0.5,
            learning_rate: 0.15,
            epochs: 3,
            batch_size: 16,
            no_layer_clue: false,
            no_boundary: false,
            no_extraction: false,
            sequential_updates: false,
            optimizer: OptimizerKind::Sgd,
            sweep_ratios: vec![0.2, 1.0 / 3.0, 1.0, 3.0, 5.0],
            sweep_base_size: None,
            sweep_epochs: None,
        }
    }
}

impl RunConfig {
    pub fn effective_ffn_dim(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.model_dim
        } else {
            self.ffn_dim
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.effective_ffn_dim(),
            vocab_size,
            max_seq_len: self.max_seq_len,
            adapter_mode: self.adapter_mode,
            adapter_rank: self.adapter_rank,
            seed: self.seed,
        }
    }

    pub fn fact_config(&self) -> FactConfig {
        FactConfig {
            num_entities: self.num_entities,
            num_attributes: self.num_attributes,
            values_per_attribute: self.values_per_attribute,
            num_topics: self.num_topics,
            eval_fraction: self.eval_fraction,
            seed: self.seed,
        }
    }

    pub fn bundle_config(&self) -> data::BundleConfig {
        data::BundleConfig {
            m_a: self.m_a,
            m_r: self.m_r,
            m_c: self.m_c,
            n_conflicting: self.eval_conflicting,
            n_irrelevant: self.eval_irrelevant,
            context_docs: self.context_docs,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            learning_rate: self.pretrain_learning_rate,
            batch_size: self.pretrain_batch_size,
            max_epochs: self.pretrain_max_epochs,
            target_accuracy: self.pretrain_target_accuracy,
            check_every: self.pretrain_check_every,
            coverage: self.pretrain_coverage,
            seed: self.seed,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            iterations: self.probe_iterations,
            batch_size: self.probe_batch_size,
            learning_rate: self.probe_learning_rate,
            update_weights: self.probe_update_weights,
            use_layer_clue: !self.no_layer_clue,
            seed: self.seed,
        }
    }

    pub fn tune_config(&self) -> TuneConfig {
        TuneConfig {
            delta1: self.delta1,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            ablation: AblationFlags {
                no_layer_clue: self.no_layer_clue,
                no_boundary: self.no_boundary,
                no_extraction: self.no_extraction,
            },
            sequential_updates: self.sequential_updates,
            optimizer: self.optimizer,
            seed: self.seed,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            ratios: self.sweep_ratios.clone(),
            base_size: self.sweep_base_size,
            methods: vec![SweepMethod::Tailored, SweepMethod::NoBoundary],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(self.vocab_size.unwrap_or(1)).validate()?;
        self.fact_config().validate()?;
        self.pretrain_config().validate()?;
        self.probe_config().validate()?;
        self.tune_config().validate()?;
        if self.m_a == 0 || self.m_r == 0 || self.m_c == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.eval_conflicting == 0 || self.eval_irrelevant == 0 || self.noise_probes == 0 {
            return Err(Error::Config("evaluation set sizes must be positive".into()));
        }
        if self.context_docs < 3 {
            return Err(Error::Config("context_docs must be at least 3".into()));
        }
        Ok(())
    }

    /// Apply one `key = value` pair; unknown keys and out-of-range values are
    /// configuration errors naming the key.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "model_dim" => self.model_dim = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "adapter_mode" => {
                self.adapter_mode = AdapterMode::parse(value).ok_or_else(|| {
                    Error::Config(format!("bad value `{value}` for key `adapter_mode`"))
                })?
            }
            "adapter_rank" => self.adapter_rank = parse(key, value)?,
            "vocab_size" => self.vocab_size = Some(parse(key, value)?),
            "num_entities" => self.num_entities = parse(key, value)?,
            "num_attributes" => self.num_attributes = parse(key, value)?,
            "values_per_attribute" => self.values_per_attribute = parse(key, value)?,
            "num_topics" => self.num_topics = parse(key, value)?,
            "eval_fraction" => self.eval_fraction = parse(key, value)?,
            "m_a" => self.m_a = parse(key, value)?,
            "m_r" => self.m_r = parse(key, value)?,
            "m_c" => self.m_c = parse(key, value)?,
            "eval_conflicting" => self.eval_conflicting = parse(key, value)?,
            "eval_irrelevant" => self.eval_irrelevant = parse(key, value)?,
            "context_docs" => self.context_docs = parse(key, value)?,
            "noise_probes" => self.noise_probes = parse(key, value)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = parse(key, value)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse(key, value)?,
            "pretrain_max_epochs" => self.pretrain_max_epochs = parse(key, value)?,
            "pretrain_target_accuracy" => self.pretrain_target_accuracy = parse(key, value)?,
            "pretrain_check_every" => self.pretrain_check_every = parse(key, value)?,
            "pretrain_coverage" => self.pretrain_coverage = parse(key, value)?,
            "alpha1" => self.alpha1 = parse(key, value)?,
            "alpha2" => self.alpha2 = parse(key, value)?,
            "probe_iterations" => self.probe_iterations = parse(key, value)?,
            "probe_batch_size" => self.probe_batch_size = parse(key, value)?,
            "probe_learning_rate" => self.probe_learning_rate = parse(key, value)?,
            "probe_update_weights" => self.probe_update_weights = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "delta1" => {
                let v: f64 = parse(key, value)?;
                if !(0.0 < v && v < 1.0) {
                    return Err(Error::Config(format!(
                        "key `delta1` must lie in (0, 1), got {v}"
                    )));
                }
                self.delta1 = v;
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "no_layer_clue" => self.no_layer_clue = parse(key, value)?,
            "no_boundary" => self.no_boundary = parse(key, value)?,
            "no_extraction" => self.no_extraction = parse(key, value)?,
            "sequential_updates" => self.sequential_updates = parse(key, value)?,
            "optimizer" => {
                self.optimizer = OptimizerKind::parse(value).ok_or_else(|| {
                    Error::Config(format!("bad value `{value}` for key `optimizer`"))
                })?
            }
            "sweep_ratios" => {
                let ratios: Result<Vec<f64>> =
                    value.split(',').map(|p| parse("sweep_ratios", p.trim())).collect();
                self.sweep_ratios = ratios?;
            }
            "sweep_base_size" => self.sweep_base_size = Some(parse(key, value)?),
            "sweep_epochs" => self.sweep_epochs = Some(parse(key, value)?),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a `key = value` config file (`#` starts a comment).
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {} is not `key = value`: `{raw}`", n + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Pretrain,
    Probe,
    Localize,
    Tune,
    Eval,
    Sweep,
    Heatmap,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::Probe => "probe",
            Stage::Localize => "localize",
            Stage::Tune => "tune",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Heatmap => "heatmap",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageEntry {
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageEntry>,
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

impl RunManifest {
    fn new(cfg: &RunConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            stages: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = manifest_path(dir);
        let body = fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&body)
            .map_err(|e| Error::Format(format!("bad manifest {}: {e}", path.display())))
    }

    /// Load the manifest, or start a fresh one. A run directory belongs to
    /// one configuration; mismatches are configuration errors.
    fn load_or_new(cfg: &RunConfig, dir: &Path) -> Result<RunManifest> {
        if manifest_path(dir).exists() {
            let manifest = RunManifest::load(dir)?;
            if manifest.config != *cfg {
                return Err(Error::Config(
                    "run directory was produced under a different configuration; \
                     use a fresh directory or matching flags"
                        .into(),
                ));
            }
            Ok(manifest)
        } else {
            Ok(RunManifest::new(cfg))
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = manifest_path(dir);
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("manifest serialization failed: {e}")))?;
        fs::write(&path, body + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Verify that `needed` ran and its artifacts still match the recorded
    /// checksums.
    fn require(&self, current: Stage, needed: Stage, dir: &Path) -> Result<()> {
        let entry = self.stages.get(needed.name()).ok_or_else(|| Error::StageDependency {
            stage: current.name().into(),
            missing: needed.name().into(),
        })?;
        for (file, recorded) in &entry.artifacts {
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|_| Error::StageDependency {
                stage: current.name().into(),
                missing: needed.name().into(),
            })?;
            if sha256_hex(&bytes) != *recorded {
                return Err(Error::StageDependency {
                    stage: current.name().into(),
                    missing: needed.name().into(),
                });
            }
        }
        Ok(())
    }

    fn record(&mut self, stage: Stage, files: &[PathBuf], dir: &Path) -> Result<()> {
        let mut entry = StageEntry::default();
        for path in files {
            let bytes = fs::read(path)
                .map_err(|e| Error::io(format!("checksumming {}", path.display()), e))?;
            let name = path
                .strip_prefix(dir)
                .map_err(|_| Error::Internal("artifact outside run directory".into()))?
                .to_string_lossy()
                .into_owned();
            entry.artifacts.insert(name, sha256_hex(&bytes));
        }
        self.stages.insert(stage.name().into(), entry);
        self.save(dir)
    }
}

fn append_run_log(dir: &Path, stage: Stage, seconds: f64) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(dir.join("run_log.txt"))
    {
        let _ = writeln!(f, "stage={} elapsed_s={seconds:.1} finished_unix={ts}", stage.name());
    }
}

// Artifact file names.
const FACTS_FILE: &str = "facts.json";
const VOCAB_FILE: &str = "vocab.txt";
const CORPUS_FILE: &str = "corpus.txt";
const PRETRAINED_FILE: &str = "pretrained.ckpt";
const PRETRAIN_STATS_FILE: &str = "pretrain_stats.json";
const ALPHA_FILE: &str = "alpha.jsonl";
const TRAIN_A_FILE: &str = "train_adherence.jsonl";
const TRAIN_R_FILE: &str = "train_robustness.jsonl";
const TRAIN_C_FILE: &str = "train_extraction.jsonl";
const EVAL_CONF_FILE: &str = "eval_conflicting.jsonl";
const EVAL_IRR_FILE: &str = "eval_irrelevant.jsonl";
const IMPORTANCE_FILE: &str = "importance.tsv";
const PARTITION_FILE: &str = "partition.tsv";
const TUNED_FILE: &str = "tuned.ckpt";
const TRAIN_LOG_FILE: &str = "train_log.tsv";
const REPORT_FILE: &str = "report.tsv";
const SWEEP_FILE: &str = "sweep.tsv";

fn load_facts(dir: &Path) -> Result<FactBase> {
    let path = dir.join(FACTS_FILE);
    let body =
        fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&body).map_err(|e| Error::Format(format!("bad facts file: {e}")))
}

fn load_world(dir: &Path) -> Result<(FactBase, Vocab)> {
    Ok((load_facts(dir)?, Vocab::load(&dir.join(VOCAB_FILE))?))
}

/// Reassemble the dataset bundle from stage artifacts.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let (facts, vocab) = load_world(dir)?;
    let alpha = data::file::read_alpha(&dir.join(ALPHA_FILE), &vocab)?;
    let adherence = data::file::read_examples(&dir.join(TRAIN_A_FILE), &vocab)?;
    let robustness = data::file::read_examples(&dir.join(TRAIN_R_FILE), &vocab)?;
    let extraction = data::file::read_examples(&dir.join(TRAIN_C_FILE), &vocab)?;
    let eval_conflicting = data::file::read_examples(&dir.join(EVAL_CONF_FILE), &vocab)?;
    let eval_irrelevant = data::file::read_examples(&dir.join(EVAL_IRR_FILE), &vocab)?;
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

fn load_pretrained(cfg: &RunConfig, dir: &Path) -> Result<(MicroTransformer, Vocab)> {
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let model =
        MicroTransformer::load_expected(&dir.join(PRETRAINED_FILE), &cfg.model_config(vocab.len()))?;
    Ok((model, vocab))
}

pub fn stage_gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut manifest = RunManifest::load_or_new(cfg, dir)?;
    let start = std::time::Instant::now();

    let facts = FactBase::generate(&cfg.fact_config())?;
    let vocab = Vocab::build(facts.vocabulary_words())?;
    if let Some(cap) = cfg.vocab_size {
        if vocab.len() > cap {
            return Err(Error::Config(format!(
                "world needs {} tokens but vocab_size caps it at {cap}",
                vocab.len()
            )));
        }
    }
    let facts_path = dir.join(FACTS_FILE);
    let body = serde_json::to_string_pretty(&facts)
        .map_err(|e| Error::Internal(format!("facts serialization failed: {e}")))?;
    fs::write(&facts_path, body + "\n")
        .map_err(|e| Error::io(format!("writing {}", facts_path.display()), e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;

    let corpus = data::render_pretrain_corpus(&facts, &vocab, cfg.pretrain_coverage)?;
    let corpus_path = dir.join(CORPUS_FILE);
    let mut lines = String::new();
    for ex in &corpus {
        lines.push_str(&vocab.decode(&ex.tokens).join(" "));
        lines.push('\n');
    }
    fs::write(&corpus_path, lines)
        .map_err(|e| Error::io(format!("writing {}", corpus_path.display()), e))?;

    manifest.record(Stage::GenData, &[facts_path, vocab_path, corpus_path], dir)?;
    append_run_log(dir, Stage::GenData, start.elapsed().as_secs_f64());
    Ok(())
}

pub fn stage_pretrain(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let mut manifest = RunManifest::load_or_new(cfg, dir)?;
    manifest.require(Stage::Pretrain, Stage::GenData, dir)?;
    let start = std::time::Instant::now();

    let (facts, vocab) = load_world(dir)?;
    let mut model = MicroTransformer::init(&cfg.model_config(vocab.len()))?;
    let outcome = pretrain(&mut model, &facts, &vocab, &cfg.pretrain_config())?;
    log::info!(
        "pretrained for {} epochs, closed-book accuracy {:.3}",
        outcome.epochs,
        outcome.closed_book_accuracy
    );
    let ckpt_path = dir.join(PRETRAINED_FILE);
    model.save(&ckpt_path)?;
    let stats_path = dir.join(PRETRAIN_STATS_FILE);
    let stats = serde_json::to_string_pretty(&outcome)
        .map_err(|e| Error::Internal(format!("stats serialization failed: {e}")))?;
    fs::write(&stats_path, stats + "\n")
        .map_err(|e| Error::io(format!("writing {}", stats_path.display()), e))?;

    // dataset construction needs the model's parametric knowledge, so the
    // supervised sets are finalized here rather than in gen-data
    let bundle = DatasetBundle::build(&model, facts, vocab, &cfg.bundle_config())?;
    let alpha_path = dir.join(ALPHA_FILE);
    data::file::write_alpha(&alpha_path, &bundle.alpha, &bundle.vocab)?;
    let a_path = dir.join(TRAIN_A_FILE);
    data::file::write_examples(&a_path, "adherence", &bundle.adherence, &bundle.vocab)?;
    let r_path = dir.join(TRAIN_R_FILE);
    data::file::write_examples(&r_path, "robustness", &bundle.robustness, &bundle.vocab)?;
    let c_path = dir.join(TRAIN_C_FILE);
    data::file::write_examples(&c_path, "extraction", &bundle.extraction, &bundle.vocab)?;
    let ec_path = dir.join(EVAL_CONF_FILE);
    data::file::write_examples(&ec_path, "eval_conflicting", &bundle.eval_conflicting, &bundle.vocab)?;
    let ei_path = dir.join(EVAL_IRR_FILE);
    data::file::write_examples(&ei_path, "eval_irrelevant", &bundle.eval_irrelevant, &bundle.vocab)?;

    manifest.record(
        Stage::Pretrain,
        &[ckpt_path, stats_path, alpha_path, a_path, r_path, c_path, ec_path, ei_path],
        dir,
    )?;
    append_run_log(dir, Stage::Pretrain, start.elapsed().as_secs_f64());
    Ok(())
}

pub fn stage_probe(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let mut manifest = RunManifest::load_or_new(cfg, dir)?;
    manifest.require(Stage::Probe, Stage::GenData, dir)?;
    manifest.require(Stage::Probe, Stage::Pretrain, dir)?;
    let start = std::time::Instant::now();

    let (model, _) = load_pretrained(cfg, dir)?;
    let bundle = load_bundle(dir)?;
    let probe_cfg = cfg.probe_config();

    let mut dist = ImportanceDistribution {
        adherence: BTreeMap::new(),
        robustness: BTreeMap::new(),
    };
    for kind in [LabelKind::Adherence, LabelKind::Robustness] {
        let examples = bundle.train_examples(kind);
        let inputs = bundle.probe_inputs(kind);
        let scores = run_probe(&model, &examples, &inputs, &probe_cfg, kind)?;
        let aggregated = aggregate_units(&model, &scores)?;
        match kind {
            LabelKind::Adherence => dist.adherence = aggregated,
            _ => dist.robustness = aggregated,
        }
    }
    let path = dir.join(IMPORTANCE_FILE);
    dist.save(&path)?;
    manifest.record(Stage::Probe, &[path], dir)?;
    append_run_log(dir, Stage::Probe, start.elapsed().as_secs_f64());
    Ok(())
}

pub fn stage_localize(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let mut manifest = RunManifest::load_or_new(cfg, dir)?;
    manifest.require(Stage::Localize, Stage::Probe, dir)?;
    let start = std::time::Instant::now();

    let dist = ImportanceDistribution::load(&dir.join(IMPORTANCE_FILE))?;
    let z_a = zscores(&dist.adherence)?;
    let z_r = zscores(&dist.robustness)?;
    let partition = localize(&z_a, &z_r, cfg.tau)?;
    log::info!(
        "partition: {} entangled, {} adherence, {} robustness, {} other (gamma_a = {:.4})",
        partition.entangled.len(),
        partition.adherence.len(),
        partition.robustness.len(),
        partition.other.len(),
        partition.gamma_a
    );
    let path = dir.join(PARTITION_FILE);
    partition.save(&path)?;
    manifest.record(Stage::Localize, &[path], dir)?;
    append_run_log(dir, Stage::Localize, start.elapsed().as_secs_f64());
    Ok(())
}

pub fn stage_tune(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let mut manifest = RunManifest::load_or_new(cfg, dir)?;
    manifest.require(Stage::Tune, Stage::Pretrain, dir)?;
    manifest.require(Stage::Tune, Stage::Localize, dir)?;
    let start = std::time::Instant::now();

    let (mut model, _) = load_pretrained(cfg, dir)?;
    let bundle = load_bundle(dir)?;
    let partition = SubspacePartition::load(&dir.join(PARTITION_FILE))?;
    let tune_cfg = cfg.tune_config();
    let telemetry = train(&mut model, &bundle, &partition, &tune_cfg)?;

    let ckpt_path = dir.join(TUNED_FILE);
    model.save(&ckpt_path)?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    write_train_log(&log_path, &telemetry, &partition, &tune_cfg)?;
    manifest.record(Stage::Tune, &[ckpt_path, log_path], dir)?;
    append_run_log(dir, Stage::Tune, start.elapsed().as_secs_f64());
    Ok(())
}

pub fn stage_eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let mut manifest = RunManifest::load_or_new(cfg, dir)?;
    manifest.require(Stage::Eval, Stage::Pretrain, dir)?;
    manifest.require(Stage::Eval, Stage::Tune, dir)?;
    let start = std::time::Instant::now();

    let (pretrained, vocab) = load_pretrained(cfg, dir)?;
    let tuned =
        MicroTransformer::load_expected(&dir.join(TUNED_FILE), &cfg.model_config(vocab.len()))?;
    let bundle = load_bundle(dir)?;
    let probes = build_noise_recognition_set(
        &bundle.facts,
        &bundle.vocab,
        &bundle.alpha,
        cfg.noise_probes,
        cfg.seed,
    )?;
    let report_pre = evaluate(&pretrained, &bundle, &probes)?;
    let report_tuned = evaluate(&tuned, &bundle, &probes)?;
    log::info!(
        "adherence {:.3} -> {:.3}, robustness {:.3} -> {:.3}",
        report_pre.adherence.rate(),
        report_tuned.adherence.rate(),
        report_pre.robustness_strict.rate(),
        report_tuned.robustness_strict.rate()
    );
    let path = dir.join(REPORT_FILE);
    write_report(&path, &[("pretrained", &report_pre), ("tuned", &report_tuned)])?;
    manifest.record(Stage::Eval, &[path], dir)?;
    append_run_log(dir, Stage::Eval, start.elapsed().as_secs_f64());
    Ok(())
}

pub fn stage_sweep(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let mut manifest = RunManifest::load_or_new(cfg, dir)?;
    manifest.require(Stage::Sweep, Stage::Pretrain, dir)?;
    manifest.require(Stage::Sweep, Stage::Localize, dir)?;
    let start = std::time::Instant::now();

    let (pretrained, _) = load_pretrained(cfg, dir)?;
    let bundle = load_bundle(dir)?;
    let partition = SubspacePartition::load(&dir.join(PARTITION_FILE))?;
    let mut tune_cfg = cfg.tune_config();
    if let Some(epochs) = cfg.sweep_epochs {
        tune_cfg.epochs = epochs;
    }
    let table = ratio_sweep(&pretrained, &bundle, &partition, &tune_cfg, &cfg.sweep_config())?;
    let path = dir.join(SWEEP_FILE);
    table.save(&path)?;
    manifest.record(Stage::Sweep, &[path], dir)?;
    append_run_log(dir, Stage::Sweep, start.elapsed().as_secs_f64());
    Ok(())
}

pub fn stage_heatmap(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let mut manifest = RunManifest::load_or_new(cfg, dir)?;
    manifest.require(Stage::Heatmap, Stage::Probe, dir)?;
    manifest.require(Stage::Heatmap, Stage::Localize, dir)?;
    let start = std::time::Instant::now();

    let dist = ImportanceDistribution::load(&dir.join(IMPORTANCE_FILE))?;
    let partition = SubspacePartition::load(&dir.join(PARTITION_FILE))?;
    let written = export_heatmap(&dist, Some(&partition), dir)?;
    manifest.record(Stage::Heatmap, &written, dir)?;
    append_run_log(dir, Stage::Heatmap, start.elapsed().as_secs_f64());
    Ok(())
}

/// The full pipeline except the (expensive) ratio sweep, which stays an
/// explicit analysis stage.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<()> {
    stage_gen_data(cfg, dir)?;
    stage_pretrain(cfg, dir)?;
    stage_probe(cfg, dir)?;
    stage_localize(cfg, dir)?;
    stage_tune(cfg, dir)?;
    stage_eval(cfg, dir)?;
    stage_heatmap(cfg, dir)?;
    Ok(())
}

/// Dispatch a stage by name.
pub fn run_stage(cfg: &RunConfig, dir: &Path, stage: Stage) -> Result<()> {
    match stage {
        Stage::GenData => stage_gen_data(cfg, dir),
        Stage::Pretrain => stage_pretrain(cfg, dir),
        Stage::Probe => stage_probe(cfg, dir),
        Stage::Localize => stage_localize(cfg, dir),
        Stage::Tune => stage_tune(cfg, dir),
        Stage::Eval => stage_eval(cfg, dir),
        Stage::Sweep => stage_sweep(cfg, dir),
        Stage::Heatmap => stage_heatmap(cfg, dir),
        Stage::All => run_all(cfg, dir),
    }
}

/// Parsed long-format report, keyed by (model, metric) → rate.
pub fn read_report(path: &Path) -> Result<BTreeMap<(String, String), f64>> {
    let body =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = BTreeMap::new();
    for line in body.lines() {
        if line.starts_with('#') || line.starts_with("model") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!("bad report line: {line}")));
        }
        let rate: f64 = fields[4]
            .parse()
            .map_err(|_| Error::Format(format!("bad rate in report line: {line}")))?;
        out.insert((fields[0].to_string(), fields[1].to_string()), rate);
    }
    Ok(out)
}

pub use evaluation::EvalReport;

#[cfg(test)]
mod tests {
    use super::*;

    fn small_run_config(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            num_layers: 2,
            model_dim: 16,
            num_heads: 4,
            max_seq_len: 48,
            num_entities: 16,
            num_attributes: 3,
            values_per_attribute: 5,
            num_topics: 2,
            m_a: 24,
            m_r: 24,
            m_c: 32,
            eval_conflicting: 8,
            eval_irrelevant: 8,
            noise_probes: 8,
            pretrain_max_epochs: 2,
            pretrain_target_accuracy: 0.05,
            pretrain_check_every: 2,
            epochs: 1,
            batch_size: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_file_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_file("# comment\n delta1 = 0.4\n tau = 1.2 # trailing\n\nseed = 9\n").unwrap();
        assert_eq!(cfg.delta1, 0.4);
        assert_eq!(cfg.tau, 1.2);
        assert_eq!(cfg.seed, 9);
        // flags override file values
        cfg.apply_kv("delta1", "0.3").unwrap();
        assert_eq!(cfg.delta1, 0.3);
    }

    #[test]
    fn unknown_and_out_of_range_keys_are_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_kv("no_such_key", "1").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
        let err = cfg.apply_kv("delta1", "1.5").unwrap_err();
        assert!(err.to_string().contains("delta1"));
        let err = cfg.apply_kv("tau", "abc").unwrap_err();
        assert!(err.to_string().contains("tau"));
    }

    #[test]
    fn defaults_match_the_documented_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.alpha1, 0.85);
        assert_eq!(cfg.alpha2, 0.85);
        assert_eq!(cfg.delta1, 0.5);
        assert_eq!(cfg.tau, 1.0);
        assert_eq!(cfg.context_docs, 4);
        assert_eq!((cfg.m_a, cfg.m_r, cfg.m_c), (2000, 2000, 4000));
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn stages_enforce_dependencies() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run_config(3);
        let err = stage_tune(&cfg, dir.path()).unwrap_err();
        match err {
            Error::StageDependency { stage, missing } => {
                assert_eq!(stage, "tune");
                assert_eq!(missing, "pretrain");
            }
            other => panic!("expected stage dependency error, got {other}"),
        }
    }

    #[test]
    fn gen_data_is_idempotent_and_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run_config(4);
        stage_gen_data(&cfg, dir.path()).unwrap();
        let facts_a = fs::read(dir.path().join(FACTS_FILE)).unwrap();
        let manifest_a = fs::read_to_string(manifest_path(dir.path())).unwrap();
        stage_gen_data(&cfg, dir.path()).unwrap();
        let facts_b = fs::read(dir.path().join(FACTS_FILE)).unwrap();
        let manifest_b = fs::read_to_string(manifest_path(dir.path())).unwrap();
        assert_eq!(facts_a, facts_b);
        assert_eq!(manifest_a, manifest_b);

        let manifest = RunManifest::load(dir.path()).unwrap();
        let entry = &manifest.stages["gen-data"];
        assert_eq!(entry.artifacts.len(), 3);
        assert!(entry.artifacts.contains_key(VOCAB_FILE));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run_config(5);
        stage_gen_data(&cfg, dir.path()).unwrap();
        let other = RunConfig { seed: 6, ..small_run_config(5) };
        assert!(matches!(stage_gen_data(&other, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn tampered_artifacts_fail_the_dependency_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run_config(7);
        stage_gen_data(&cfg, dir.path()).unwrap();
        fs::write(dir.path().join(VOCAB_FILE), "tampered\n").unwrap();
        assert!(matches!(
            stage_pretrain(&cfg, dir.path()),
            Err(Error::StageDependency { .. })
        ));
    }

    #[test]
    fn vocab_cap_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { vocab_size: Some(10), ..small_run_config(8) };
        assert!(matches!(stage_gen_data(&cfg, dir.path()), Err(Error::Config(_))));
    }
}
