use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use moscl::conflict::conflict_loss_monotonicity;
use moscl::datagen::{generate, quadrant_recovery_rate, Dataset, GenSpec};
use moscl::difficulty::{quadrant_classify, score_entries, write_difficulty_csv, write_scores_json, DifficultySource, QuadrantRule};
use moscl::experiment::{
    compare_with, export_scatter_file, score_dataset, train, train_to_convergence, ExperimentConfig, ScatterMode,
    SchedulerKind,
};
use moscl::math::{EntropyMode, LossKind};
use moscl::model::{Activation, Head, Mlp};
use moscl::uncertainty::UncertaintyConfig;

#[derive(Parser)]
#[command(name = "moscl", version, about = "Mixed-order batch scheduling experiments")]
struct Cli {
    /// Root for output directories not given explicitly.
    #[arg(long, env = "MOSCL_OUTPUT_ROOT", default_value = "runs", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic imbalanced dataset.
    GenData(GenArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a dataset with a saved checkpoint.
    Score(ScoreArgs),
    /// Run several configs over several seeds.
    Compare(CompareArgs),
    /// Turn a scores file into scatter-plot CSV.
    ExportScatter(ScatterArgs),
    /// Correlate pairwise gradient conflict with pair loss.
    AnalyzeConflicts(ConflictArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output CSV path; a `.spec.json` sidecar is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    n_total: usize,
    #[arg(long, default_value_t = 0.1)]
    minority_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    label_noise_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    feature_noise_rate: f64,
    #[arg(long, default_value_t = 3.0)]
    cluster_separation: f64,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Overrides applied on top of a TOML config (or the defaults).
#[derive(Args, Default)]
struct ConfigOverrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    scheduler: Option<SchedulerKind>,
    #[arg(long)]
    difficulty_source: Option<DifficultySource>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    total_epochs: Option<usize>,
    #[arg(long)]
    rescore_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    head: Option<Head>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    uncertainty_draws: Option<usize>,
    #[arg(long)]
    perturbation_half_range: Option<f64>,
    #[arg(long)]
    entropy_mode: Option<EntropyMode>,
    #[arg(long)]
    sp_age: Option<f64>,
    #[arg(long)]
    sp_age_growth: Option<f64>,
    #[arg(long)]
    ohem_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { cfg.$f = v.clone(); } )* };
        }
        set!(
            dataset, scheduler, difficulty_source, warmup_epochs, total_epochs, rescore_every, batch_size,
            learning_rate, hidden_dim, activation, head, loss, uncertainty_draws, perturbation_half_range,
            entropy_mode, sp_age, sp_age_growth, ohem_ratio, seed
        );
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "mse")]
    loss: LossKind,
    #[arg(long, default_value = "both")]
    difficulty_source: DifficultySource,
    #[arg(long, default_value_t = 8)]
    uncertainty_draws: usize,
    #[arg(long, default_value_t = 0.3)]
    perturbation_half_range: f64,
    #[arg(long, default_value = "one_sided")]
    entropy_mode: EntropyMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// TOML configs to compare; the label is the file stem.
    #[arg(long = "config", required = true, num_args = 1..)]
    configs: Vec<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Generate a fresh default dataset per seed instead of reading each
    /// config's dataset file.
    #[arg(long)]
    generate: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScatterArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value = "value")]
    mode: ScatterMode,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConflictArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Analyse this checkpoint instead of training to convergence.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, default_value = "mse")]
    loss: LossKind,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 8)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(explicit: &Option<PathBuf>, root: &Path, default: String) -> PathBuf {
    explicit.clone().unwrap_or_else(|| root.join(default))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(args: GenArgs, root: &Path) -> Result<serde_json::Value> {
    let spec = GenSpec {
        n_total: args.n_total,
        minority_fraction: args.minority_fraction,
        label_noise_rate: args.label_noise_rate,
        feature_noise_rate: args.feature_noise_rate,
        cluster_separation: args.cluster_separation,
        dim: args.dim,
        seed: args.seed,
    };
    let data = generate(&spec)?;
    let path = out_dir(&args.out, root, format!("data-seed{}.csv", args.seed));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    data.save(&path)?;
    let sidecar = path.with_extension("spec.json");
    fs::write(&sidecar, serde_json::to_string_pretty(&spec)?)?;
    Ok(json!({ "dataset": path, "spec": sidecar, "samples": data.len() }))
}

fn train_cmd(args: TrainArgs, root: &Path) -> Result<serde_json::Value> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.output_dir = out_dir(&args.out, root, format!("train-{}-seed{}", cfg.scheduler, cfg.seed));
    cfg.validate()?;
    let data = Dataset::load(&cfg.dataset)?;
    let run = train(&cfg, &data)?;
    run.write_to(&cfg.output_dir)?;
    let last = run.last();
    Ok(json!({
        "output_dir": cfg.output_dir,
        "epochs": run.metrics.len(),
        "final_mean_loss": last.mean_loss,
        "final_minority_recall": last.minority_recall,
    }))
}

fn score_cmd(args: ScoreArgs, root: &Path) -> Result<serde_json::Value> {
    let model: Mlp<f64> = Mlp::load_json(&args.checkpoint)?;
    let data = Dataset::load(&args.dataset)?;
    let ucfg = UncertaintyConfig {
        draws: args.uncertainty_draws,
        half_range: args.perturbation_half_range,
        seed: args.seed,
        entropy_mode: args.entropy_mode,
    };
    let records = score_dataset(&model, &data, args.loss, &ucfg, args.difficulty_source, 0)?;
    let quadrants = quadrant_classify(&records, QuadrantRule::Median)?;
    let dir = out_dir(&args.out, root, "score".into());
    create_dir(&dir)?;
    write_scores_json(&dir.join("scores.json"), &score_entries(&records))?;
    let csv = fs::File::create(dir.join("difficulty.csv"))?;
    write_difficulty_csv(io::BufWriter::new(csv), &records, &quadrants)?;
    let recovery: serde_json::Map<String, serde_json::Value> = quadrant_recovery_rate(&data, &quadrants)?
        .into_iter()
        .map(|(q, r)| (q.to_string(), json!(r)))
        .collect();
    fs::write(dir.join("recovery.json"), serde_json::to_string_pretty(&recovery)?)?;
    Ok(json!({ "output_dir": dir, "samples": records.len(), "quadrant_recovery": recovery }))
}

fn compare_cmd(args: CompareArgs, root: &Path) -> Result<serde_json::Value> {
    let configs = args
        .configs
        .iter()
        .map(|p| {
            let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((label, ExperimentConfig::load(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir(&args.out, root, "compare".into());
    create_dir(&dir)?;
    let generate_fresh = args.generate;
    let table = compare_with(
        &configs,
        &args.seeds,
        |cfg, seed| {
            if generate_fresh {
                generate(&GenSpec { seed, ..GenSpec::default() })
            } else {
                Dataset::load(&cfg.dataset)
            }
        },
        Some(&dir),
    )?;
    let csv = fs::File::create(dir.join("comparison.csv"))?;
    table.write_csv(io::BufWriter::new(csv))?;
    fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&table)?)?;
    Ok(json!({ "output_dir": dir, "rows": table.rows }))
}

fn scatter_cmd(args: ScatterArgs) -> Result<Option<serde_json::Value>> {
    match &args.out {
        Some(path) => {
            let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            export_scatter_file(&args.scores, args.mode, io::BufWriter::new(f))?;
            Ok(Some(json!({ "scatter": path })))
        }
        None => {
            export_scatter_file(&args.scores, args.mode, io::stdout().lock())?;
            Ok(None)
        }
    }
}

fn conflict_cmd(args: ConflictArgs, root: &Path) -> Result<serde_json::Value> {
    let data = Dataset::load(&args.dataset)?;
    let (model, tag, training) = match &args.checkpoint {
        Some(p) => (Mlp::load_json(p)?, p.display().to_string(), json!(null)),
        None => {
            let cfg = ExperimentConfig {
                seed: args.seed,
                loss: args.loss,
                learning_rate: args.learning_rate,
                hidden_dim: args.hidden_dim,
                batch_size: args.batch_size,
                ..ExperimentConfig::default()
            };
            let c = train_to_convergence(&cfg, &data, args.max_epochs)?;
            let info = json!({ "epochs": c.epochs, "converged": c.converged, "final_loss": c.final_loss });
            (c.model, format!("random-seed{}-epoch{}", args.seed, c.epochs), info)
        }
    };
    let samples: Vec<(u64, &[f64], usize)> = data.samples.iter().map(|s| (s.id, &s.x[..], s.y)).collect();
    let report = conflict_loss_monotonicity(&model, &samples, args.loss, &tag, args.seed)?;
    let dir = out_dir(&args.out, root, format!("conflicts-seed{}", args.seed));
    create_dir(&dir)?;
    report.write_json(&dir.join("conflict_report.json"))?;
    let csv = fs::File::create(dir.join("conflict_pairs.csv"))?;
    report.write_pairs_csv(io::BufWriter::new(csv))?;
    Ok(json!({
        "output_dir": dir,
        "pairs": report.pairs.len(),
        "skipped_pairs": report.skipped_pairs,
        "spearman_rho": report.spearman_rho,
        "degenerate": report.is_degenerate(),
        "training": training,
    }))
}

fn dispatch(cli: Cli) -> Result<Option<serde_json::Value>> {
    let root = cli.output_root;
    Ok(match cli.command {
        Command::GenData(a) => Some(gen_data(a, &root)?),
        Command::Train(a) => Some(train_cmd(a, &root)?),
        Command::Score(a) => Some(score_cmd(a, &root)?),
        Command::Compare(a) => Some(compare_cmd(a, &root)?),
        Command::ExportScatter(a) => scatter_cmd(a)?,
        Command::AnalyzeConflicts(a) => Some(conflict_cmd(a, &root)?),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(Some(summary)) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, message) = match e.downcast_ref::<moscl::Error>() {
                Some(inner) => (inner.kind(), inner.to_string()),
                None => ("cli", format!("{e:#}")),
            };
            let body = json!({ "error": kind, "message": message });
            let _ = writeln!(io::stderr(), "{body}");
            ExitCode::FAILURE
        }
    }
}
