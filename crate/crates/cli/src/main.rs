//! `raglab` — staged pipeline driver.
//!
//! Configuration is resolved in three layers: built-in defaults, then an
//! optional `key = value` config file, then command-line flags. The effective
//! configuration is echoed into the run manifest. The output directory
//! defaults to `<root>/run-seed<seed>` where the root is `./runs` or the
//! `RAGLAB_OUT` environment variable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use raglab_core::pipeline::{run_stage, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "raglab", version, about = "Adherence/robustness subspace lab", long_about = None)]
struct Cli {
    /// Config file in `key = value` form; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory (overrides the default `<root>/run-seed<seed>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// One optional flag per configuration key.
#[derive(clap::Args)]
struct Overrides {
    /// Master seed governing the whole run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    // model shape
    #[arg(long, global = true)]
    num_layers: Option<usize>,
    #[arg(long, global = true)]
    model_dim: Option<usize>,
    #[arg(long, global = true)]
    num_heads: Option<usize>,
    /// Feed-forward width; 0 selects the default 4 × model_dim.
    #[arg(long, global = true)]
    ffn_dim: Option<usize>,
    #[arg(long, global = true)]
    max_seq_len: Option<usize>,
    /// `full` or `low-rank`.
    #[arg(long, global = true)]
    adapter_mode: Option<String>,
    #[arg(long, global = true)]
    adapter_rank: Option<usize>,
    /// Cap on the derived vocabulary size.
    #[arg(long, global = true)]
    vocab_size: Option<usize>,

    // fact world
    #[arg(long, global = true)]
    num_entities: Option<usize>,
    #[arg(long, global = true)]
    num_attributes: Option<usize>,
    #[arg(long, global = true)]
    values_per_attribute: Option<usize>,
    #[arg(long, global = true)]
    num_topics: Option<usize>,
    #[arg(long, global = true)]
    eval_fraction: Option<f64>,

    // dataset sizes
    #[arg(long, global = true)]
    m_a: Option<usize>,
    #[arg(long, global = true)]
    m_r: Option<usize>,
    #[arg(long, global = true)]
    m_c: Option<usize>,
    #[arg(long, global = true)]
    eval_conflicting: Option<usize>,
    #[arg(long, global = true)]
    eval_irrelevant: Option<usize>,
    #[arg(long, global = true)]
    context_docs: Option<usize>,
    #[arg(long, global = true)]
    noise_probes: Option<usize>,

    // pretraining
    #[arg(long, global = true)]
    pretrain_learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pretrain_batch_size: Option<usize>,
    #[arg(long, global = true)]
    pretrain_max_epochs: Option<usize>,
    #[arg(long, global = true)]
    pretrain_target_accuracy: Option<f64>,
    #[arg(long, global = true)]
    pretrain_check_every: Option<usize>,
    #[arg(long, global = true)]
    pretrain_coverage: Option<usize>,

    // probing
    #[arg(long, global = true)]
    alpha1: Option<f64>,
    #[arg(long, global = true)]
    alpha2: Option<f64>,
    /// 0 means one pass over the probing set.
    #[arg(long, global = true)]
    probe_iterations: Option<usize>,
    #[arg(long, global = true)]
    probe_batch_size: Option<usize>,
    #[arg(long, global = true)]
    probe_learning_rate: Option<f64>,
    #[arg(long, global = true)]
    probe_update_weights: Option<bool>,

    // localization
    #[arg(long, global = true)]
    tau: Option<f64>,

    // tuning
    #[arg(long, global = true)]
    delta1: Option<f64>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    no_layer_clue: Option<bool>,
    #[arg(long, global = true)]
    no_boundary: Option<bool>,
    #[arg(long, global = true)]
    no_extraction: Option<bool>,
    #[arg(long, global = true)]
    sequential_updates: Option<bool>,
    /// `sgd` or `adam`.
    #[arg(long, global = true)]
    optimizer: Option<String>,

    // ratio sweep
    /// Comma-separated ratio list, e.g. `0.2,0.333,1,3,5`.
    #[arg(long, global = true)]
    sweep_ratios: Option<String>,
    #[arg(long, global = true)]
    sweep_base_size: Option<usize>,
    #[arg(long, global = true)]
    sweep_epochs: Option<usize>,
}

impl Overrides {
    /// Flags override the config file; application order is fixed.
    fn apply(&self, cfg: &mut RunConfig) -> raglab_core::Result<()> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.apply_kv(stringify!($field), &v.to_string())?;
                }
            };
        }
        set!(seed);
        set!(num_layers);
        set!(model_dim);
        set!(num_heads);
        set!(ffn_dim);
        set!(max_seq_len);
        set!(adapter_mode);
        set!(adapter_rank);
        set!(vocab_size);
        set!(num_entities);
        set!(num_attributes);
        set!(values_per_attribute);
        set!(num_topics);
        set!(eval_fraction);
        set!(m_a);
        set!(m_r);
        set!(m_c);
        set!(eval_conflicting);
        set!(eval_irrelevant);
        set!(context_docs);
        set!(noise_probes);
        set!(pretrain_learning_rate);
        set!(pretrain_batch_size);
        set!(pretrain_max_epochs);
        set!(pretrain_target_accuracy);
        set!(pretrain_check_every);
        set!(pretrain_coverage);
        set!(alpha1);
        set!(alpha2);
        set!(probe_iterations);
        set!(probe_batch_size);
        set!(probe_learning_rate);
        set!(probe_update_weights);
        set!(tau);
        set!(delta1);
        set!(learning_rate);
        set!(epochs);
        set!(batch_size);
        set!(no_layer_clue);
        set!(no_boundary);
        set!(no_extraction);
        set!(sequential_updates);
        set!(optimizer);
        set!(sweep_ratios);
        set!(sweep_base_size);
        set!(sweep_epochs);
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fact world, vocabulary, and pretraining corpus.
    GenData,
    /// Pretrain the base model; then record parametric knowledge and build
    /// the supervised and evaluation sets (they need the trained model).
    Pretrain,
    /// Mine per-unit importance for both behaviors.
    Probe,
    /// Standardize importance and partition the unit universe.
    Localize,
    /// Boundary-controlled tuning from the pretrained checkpoint.
    Tune,
    /// Score the pretrained and tuned checkpoints.
    Eval,
    /// Retrain under varying adherence/robustness data ratios.
    Sweep,
    /// Export importance grids and the subspace assignment grid.
    Heatmap,
    /// Everything except the sweep, in order.
    All,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::GenData => Stage::GenData,
            Command::Pretrain => Stage::Pretrain,
            Command::Probe => Stage::Probe,
            Command::Localize => Stage::Localize,
            Command::Tune => Stage::Tune,
            Command::Eval => Stage::Eval,
            Command::Sweep => Stage::Sweep,
            Command::Heatmap => Stage::Heatmap,
            Command::All => Stage::All,
        }
    }
}

fn build_config(cli: &Cli) -> raglab_core::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            raglab_core::Error::io(format!("reading config {}", path.display()), e)
        })?;
        cfg.apply_file(&text)?;
    }
    cli.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let root = std::env::var_os("RAGLAB_OUT").map(PathBuf::from).unwrap_or_else(|| "runs".into());
    root.join(format!("run-seed{}", cfg.seed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let dir = out_dir(&cli, &cfg);
    let stage = cli.command.stage();
    log::info!("stage `{}` -> {}", stage.name(), dir.display());
    match run_stage(&cfg, &dir, stage) {
        Ok(()) => {
            log::info!("stage `{}` complete", stage.name());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
