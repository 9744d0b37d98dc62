//! Training harness.
//!
//! A run warms up with uniformly shuffled batches for `warmup_epochs`. After
//! that, at every rescore boundary, all samples are scored by loss and
//! perturbation uncertainty, ranks are fused into `d`, and the configured
//! scheduler builds the batches for the following epochs. Self-paced
//! baselines keep random batches and scale each sample's gradient by its SP
//! weight instead.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose,
//! epoch)`, so a run is a pure function of its config and dataset, and a
//! mixed-order run shares its warm-up epochs bit-for-bit with a random run
//! of the same seed.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::difficulty::{
    self, rank_descending, score_entries, DifficultyRecord, DifficultySource, ScoreEntry,
};
use crate::math::{EntropyMode, LossKind};
use crate::model::{Activation, Head, Mlp};
use crate::scheduler::{
    anti_mixed_plan, mixed_order_plan, ohem_plan, random_plan, sp_weight, BatchPlan, SpConfig,
    SpRegularizer,
};
use crate::uncertainty::{batch_score_uncertainty, UncertaintyConfig};
use crate::{Error, Result, SampleId};

const INIT_STREAM: u64 = 0x1;
const PLAN_DOMAIN: u64 = 0x504c_414e;
const SCORE_DOMAIN: u64 = 0x5343_4f52;
const METRIC_DOMAIN: u64 = 0x4d45_5452;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Random,
    Mixed,
    AntiMixed,
    SpHard,
    SpLinear,
    Ohem,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 6] = [
        SchedulerKind::Random,
        SchedulerKind::Mixed,
        SchedulerKind::AntiMixed,
        SchedulerKind::SpHard,
        SchedulerKind::SpLinear,
        SchedulerKind::Ohem,
    ];

    fn sp_regularizer(self) -> Option<SpRegularizer> {
        match self {
            SchedulerKind::SpHard => Some(SpRegularizer::Hard),
            SchedulerKind::SpLinear => Some(SpRegularizer::Linear),
            _ => None,
        }
    }

    fn uses_difficulty(self) -> bool {
        matches!(self, SchedulerKind::Mixed | SchedulerKind::AntiMixed)
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerKind::Random => "random",
            SchedulerKind::Mixed => "mixed",
            SchedulerKind::AntiMixed => "anti_mixed",
            SchedulerKind::SpHard => "sp_hard",
            SchedulerKind::SpLinear => "sp_linear",
            SchedulerKind::Ohem => "ohem",
        })
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown scheduler `{s}`")))
    }
}

/// Flat run configuration; serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub scheduler: SchedulerKind,
    pub difficulty_source: DifficultySource,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub rescore_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub head: Head,
    pub loss: LossKind,
    pub uncertainty_draws: usize,
    pub perturbation_half_range: f64,
    pub entropy_mode: EntropyMode,
    pub sp_age: f64,
    pub sp_age_growth: f64,
    pub ohem_ratio: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data.csv"),
            scheduler: SchedulerKind::Random,
            difficulty_source: DifficultySource::Both,
            warmup_epochs: 10,
            total_epochs: 60,
            rescore_every: 1,
            batch_size: 2,
            learning_rate: 0.1,
            hidden_dim: 8,
            activation: Activation::Tanh,
            head: Head::Sigmoid,
            loss: LossKind::Mse,
            uncertainty_draws: 8,
            perturbation_half_range: 0.3,
            entropy_mode: EntropyMode::OneSided,
            sp_age: 0.25,
            sp_age_growth: 0.005,
            ohem_ratio: 0.25,
            seed: 0,
            output_dir: PathBuf::from("runs/run"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_epochs == 0 {
            return fail("total_epochs must be ≥ 1".into());
        }
        if self.warmup_epochs >= self.total_epochs {
            return fail(format!(
                "warmup_epochs ({}) must be < total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.rescore_every == 0 {
            return fail("rescore_every must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if self.scheduler == SchedulerKind::Mixed && self.batch_size < 2 {
            return fail("mixed-order batches need batch_size ≥ 2".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.hidden_dim == 0 {
            return fail("hidden_dim must be ≥ 1".into());
        }
        if self.scheduler == SchedulerKind::Ohem && !(self.ohem_ratio > 0.0 && self.ohem_ratio <= 1.0) {
            return fail(format!("ohem_ratio must lie in (0, 1], got {}", self.ohem_ratio));
        }
        self.uncertainty().validate()?;
        if self.scheduler.sp_regularizer().is_some() {
            self.sp().validate()?;
        }
        Ok(())
    }

    pub fn uncertainty(&self) -> UncertaintyConfig<f64> {
        UncertaintyConfig {
            draws: self.uncertainty_draws,
            half_range: self.perturbation_half_range,
            seed: self.seed ^ SCORE_DOMAIN,
            entropy_mode: self.entropy_mode,
        }
    }

    pub fn sp(&self) -> SpConfig<f64> {
        SpConfig {
            regularizer: self.scheduler.sp_regularizer().unwrap_or_default(),
            age: self.sp_age,
            growth: self.sp_age_growth,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Whether `epoch` starts with a fresh scoring pass.
    pub fn is_rescore_epoch(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs && (epoch - self.warmup_epochs) % self.rescore_every == 0
    }

    fn needs_scores(&self) -> bool {
        self.scheduler.uses_difficulty() || self.scheduler == SchedulerKind::Ohem
    }
}

/// Per-epoch training record. Recalls are measured against clean labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub scheduler: SchedulerKind,
    pub mean_loss: f64,
    pub recall_class0: f64,
    pub recall_class1: f64,
    pub minority_recall: f64,
    pub mean_uncertainty: f64,
    /// Max minus min batch d-sum of this epoch's plan, when it was built
    /// from difficulty scores.
    pub d_sum_spread: Option<usize>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "scheduler",
    "mean_loss",
    "recall_class0",
    "recall_class1",
    "minority_recall",
    "mean_uncertainty",
    "d_sum_spread",
];

pub fn write_metrics_csv<W: Write>(out: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.scheduler.to_string(),
            m.mean_loss.to_string(),
            m.recall_class0.to_string(),
            m.recall_class1.to_string(),
            m.minority_recall.to_string(),
            m.mean_uncertainty.to_string(),
            m.d_sum_spread.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

/// Scores taken at the start of a rescore epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSnapshot {
    pub epoch: usize,
    pub records: Vec<DifficultyRecord<f64>>,
}

impl ScoreSnapshot {
    pub fn entries(&self) -> Vec<ScoreEntry> {
        score_entries(&self.records)
    }

    pub fn d_map(&self) -> BTreeMap<SampleId, usize> {
        self.records.iter().map(|r| (r.sample_id, r.d)).collect()
    }
}

/// Everything a run produces, before anything touches disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub metrics: Vec<EpochMetrics>,
    pub snapshots: Vec<ScoreSnapshot>,
    pub plans: Vec<BatchPlan>,
    pub model: Mlp<f64>,
    /// Loss/uncertainty of every sample under the final model.
    pub final_scores: ScoreSnapshot,
}

fn epoch_rng(seed: u64, domain: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(epoch as u64);
    rng
}

/// Initial model for a dataset and config.
pub fn init_model(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Mlp<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    Mlp::init(dataset.dim(), cfg.hidden_dim, 2, cfg.activation, cfg.head, &mut rng)
}

/// Per-sample losses under `model`, keyed by id.
pub fn score_losses(model: &Mlp<f64>, dataset: &Dataset, kind: LossKind) -> Result<BTreeMap<SampleId, f64>> {
    dataset
        .samples
        .par_iter()
        .map(|s| model.sample_loss(&s.x, s.y, kind).map(|l| (s.id, l)))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Loss and uncertainty of every sample, with ranks fused per `source`.
pub fn score_dataset(
    model: &Mlp<f64>,
    dataset: &Dataset,
    kind: LossKind,
    ucfg: &UncertaintyConfig<f64>,
    source: DifficultySource,
    round: u64,
) -> Result<Vec<DifficultyRecord<f64>>> {
    let losses = score_losses(model, dataset, kind)?;
    let uncertainties =
        batch_score_uncertainty(model, dataset.samples.iter().map(|s| (s.id, &s.x[..])), ucfg, round)?;
    difficulty::score_records(&losses, &uncertainties, source)
}

/// Batch composition for one epoch under a difficulty-driven scheduler.
pub fn difficulty_plan(
    kind: SchedulerKind,
    records: &[DifficultyRecord<f64>],
    batch_size: usize,
    epoch: usize,
) -> Result<BatchPlan> {
    match kind {
        SchedulerKind::Mixed => mixed_order_plan(records, batch_size, epoch),
        SchedulerKind::AntiMixed => anti_mixed_plan(records, batch_size, epoch),
        other => Err(Error::Config(format!("{other} does not build plans from difficulty"))),
    }
}

struct Evaluation {
    mean_loss: f64,
    recall: [f64; 2],
    minority_recall: f64,
}

fn evaluate(model: &Mlp<f64>, dataset: &Dataset, kind: LossKind) -> Result<Evaluation> {
    let per: Vec<(f64, usize, usize)> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let trace = model.forward(&s.x, None)?;
            Ok((model.loss_of(&trace, s.y, kind)?, trace.predicted_class(), s.clean_label))
        })
        .collect::<Result<_>>()?;
    let mean_loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for &(_, pred, clean) in &per {
        totals[clean] += 1;
        if pred == clean {
            hits[clean] += 1;
        }
    }
    let recall = [0, 1].map(|c| if totals[c] == 0 { 0.0 } else { hits[c] as f64 / totals[c] as f64 });
    // Fewer clean samples wins; ties go to class 1.
    let minority = if totals[0] < totals[1] { 0 } else { 1 };
    Ok(Evaluation {
        mean_loss,
        recall,
        minority_recall: recall[minority],
    })
}

/// Trains one model per `cfg` on `dataset`, entirely in memory.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    dataset.validate()?;
    let mut model = init_model(cfg, dataset)?;
    let by_id = dataset.by_id();
    let ids = dataset.ids();
    let ucfg = cfg.uncertainty();
    let metric_ucfg = UncertaintyConfig { seed: cfg.seed ^ METRIC_DOMAIN, ..ucfg };
    let sp = cfg.sp();

    let mut metrics = Vec::with_capacity(cfg.total_epochs);
    let mut snapshots = Vec::new();
    let mut plans = Vec::with_capacity(cfg.total_epochs);
    let mut current: Option<ScoreSnapshot> = None;

    for epoch in 0..cfg.total_epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, PLAN_DOMAIN, epoch);
        let warm = epoch < cfg.warmup_epochs;

        if !warm && cfg.needs_scores() && cfg.is_rescore_epoch(epoch) {
            let records =
                score_dataset(&model, dataset, cfg.loss, &ucfg, cfg.difficulty_source, epoch as u64)?;
            let snap = ScoreSnapshot { epoch, records };
            snapshots.push(snap.clone());
            current = Some(snap);
        }

        let (plan, spread) = match (warm, cfg.scheduler, &current) {
            (false, kind, Some(snap)) if kind.uses_difficulty() => {
                let mut plan = difficulty_plan(kind, &snap.records, cfg.batch_size, epoch)?;
                let spread = plan.d_sum_spread(&snap.d_map())?;
                plan.shuffle_batch_order(&mut rng);
                (plan, spread)
            }
            (false, SchedulerKind::Ohem, Some(snap)) => {
                let losses: BTreeMap<SampleId, f64> =
                    snap.records.iter().map(|r| (r.sample_id, r.loss)).collect();
                (ohem_plan(&losses, cfg.batch_size, cfg.ohem_ratio, epoch, &mut rng)?, None)
            }
            _ => (random_plan(&ids, cfg.batch_size, epoch, &mut rng)?, None),
        };

        let sp_now = match cfg.scheduler.sp_regularizer() {
            Some(_) if !warm => Some(sp.at_epoch(epoch - cfg.warmup_epochs)),
            _ => None,
        };

        for batch in &plan.batches {
            let grads = batch
                .iter()
                .map(|id| {
                    let s = by_id.get(id).ok_or(Error::MissingScore(*id))?;
                    let g = model.per_sample_gradient(&s.x, s.y, cfg.loss)?;
                    Ok(match &sp_now {
                        Some(spc) => {
                            let l = model.sample_loss(&s.x, s.y, cfg.loss)?;
                            g.scaled(sp_weight(l, spc))
                        }
                        None => g,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            model.sgd_step(&grads, cfg.learning_rate)?;
        }

        let eval = evaluate(&model, dataset, cfg.loss)?;
        if !eval.mean_loss.is_finite() || !model.is_finite() {
            return Err(Error::NonFinite(format!(
                "training diverged at epoch {epoch}: mean loss {} (learning rate {})",
                eval.mean_loss, cfg.learning_rate
            )));
        }
        let us = batch_score_uncertainty(
            &model,
            dataset.samples.iter().map(|s| (s.id, &s.x[..])),
            &metric_ucfg,
            epoch as u64,
        )?;
        let mean_uncertainty = us.values().sum::<f64>() / us.len() as f64;

        metrics.push(EpochMetrics {
            epoch,
            scheduler: cfg.scheduler,
            mean_loss: eval.mean_loss,
            recall_class0: eval.recall[0],
            recall_class1: eval.recall[1],
            minority_recall: eval.minority_recall,
            mean_uncertainty,
            d_sum_spread: spread,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        plans.push(plan);
    }

    let final_records = score_dataset(
        &model,
        dataset,
        cfg.loss,
        &ucfg,
        cfg.difficulty_source,
        cfg.total_epochs as u64,
    )?;
    Ok(RunOutput {
        config: cfg.clone(),
        metrics,
        snapshots,
        plans,
        model,
        final_scores: ScoreSnapshot {
            epoch: cfg.total_epochs,
            records: final_records,
        },
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl RunOutput {
    /// Writes `metrics.csv`, `timing.csv`, `scores_epoch{N}.json` per
    /// rescore, `scores_final.json`, `checkpoint.json`, `plans.json` and the
    /// resolved `config.toml`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &self.metrics)?;
        write_file(&dir.join("metrics.csv"), &buf)?;

        let mut timing = String::from("epoch,wall_time_secs\n");
        for m in &self.metrics {
            timing.push_str(&format!("{},{}\n", m.epoch, m.wall_time_secs));
        }
        write_file(&dir.join("timing.csv"), timing.as_bytes())?;

        for snap in &self.snapshots {
            difficulty::write_scores_json(&dir.join(format!("scores_epoch{}.json", snap.epoch)), &snap.entries())?;
        }
        difficulty::write_scores_json(&dir.join("scores_final.json"), &self.final_scores.entries())?;
        self.model.save_json(&dir.join("checkpoint.json"))?;
        write_file(&dir.join("plans.json"), serde_json::to_string(&self.plans)?.as_bytes())?;
        write_file(&dir.join("config.toml"), self.config.to_toml_string()?.as_bytes())?;
        Ok(())
    }

    pub fn last(&self) -> &EpochMetrics {
        self.metrics.last().expect("total_epochs ≥ 1")
    }
}

/// Loads the configured dataset, trains, and writes the run directory.
pub fn run(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let out = train(cfg, &dataset)?;
    out.write_to(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

/// Declares convergence once the mean epoch loss has improved by less than
/// `rel_tol` (relative) for `window` consecutive epochs.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    pub rel_tol: f64,
    pub window: usize,
    previous: Option<f64>,
    streak: usize,
}

impl Default for ConvergenceMonitor {
    fn default() -> Self {
        Self::new(1e-4, 5)
    }
}

impl ConvergenceMonitor {
    pub fn new(rel_tol: f64, window: usize) -> Self {
        Self { rel_tol, window, previous: None, streak: 0 }
    }

    /// Feeds one epoch's mean loss; returns whether the run has converged.
    pub fn observe(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.previous {
            let improvement = if prev > 0.0 { (prev - loss) / prev } else { 0.0 };
            if improvement < self.rel_tol {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.previous = Some(loss);
        self.streak >= self.window
    }
}

/// Outcome of [`train_to_convergence`].
#[derive(Debug, Clone)]
pub struct ConvergedModel {
    pub model: Mlp<f64>,
    pub epochs: usize,
    pub converged: bool,
    pub final_loss: f64,
}

/// Plain random-batch SGD until [`ConvergenceMonitor`] fires or
/// `max_epochs` passes.
pub fn train_to_convergence(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    max_epochs: usize,
) -> Result<ConvergedModel> {
    dataset.validate()?;
    let mut model = init_model(cfg, dataset)?;
    let by_id = dataset.by_id();
    let ids = dataset.ids();
    let mut monitor = ConvergenceMonitor::default();
    let mut final_loss = f64::NAN;
    for epoch in 0..max_epochs {
        let mut rng = epoch_rng(cfg.seed, PLAN_DOMAIN, epoch);
        let plan = random_plan(&ids, cfg.batch_size, epoch, &mut rng)?;
        for batch in &plan.batches {
            let grads = batch
                .iter()
                .map(|id| {
                    let s = by_id[id];
                    model.per_sample_gradient(&s.x, s.y, cfg.loss)
                })
                .collect::<Result<Vec<_>>>()?;
            model.sgd_step(&grads, cfg.learning_rate)?;
        }
        final_loss = evaluate(&model, dataset, cfg.loss)?.mean_loss;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at epoch {epoch}")));
        }
        if monitor.observe(final_loss) {
            return Ok(ConvergedModel { model, epochs: epoch + 1, converged: true, final_loss });
        }
    }
    Ok(ConvergedModel { model, epochs: max_epochs, converged: false, final_loss })
}

/// One `(config, seed)` cell of a comparison grid.
#[derive(Debug, Clone, Serialize)]
pub struct CompareCell {
    pub label: String,
    pub seed: u64,
    pub final_metrics: Option<EpochMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two successful seeds.
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub scheduler: SchedulerKind,
    pub succeeded: usize,
    pub failed: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Seeds where this row's minority recall beat / tied / trailed the
    /// baseline (the first random-scheduler config).
    pub minority_wins: usize,
    pub minority_ties: usize,
    pub minority_losses: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub baseline: Option<String>,
    pub rows: Vec<ComparisonRow>,
    pub cells: Vec<CompareCell>,
}

fn summarize(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let spread = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some(MetricSummary { mean, spread })
}

/// Runs every labelled config under every seed. `data` supplies the dataset
/// for each `(config, seed)`; each cell's config gets `seed` as its seed.
pub fn compare_with<F>(
    configs: &[(String, ExperimentConfig)],
    seeds: &[u64],
    data: F,
    out_dir: Option<&Path>,
) -> Result<ComparisonTable>
where
    F: Fn(&ExperimentConfig, u64) -> Result<Dataset> + Sync,
{
    if configs.len() < 2 {
        return Err(Error::Config("compare needs at least two configs".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let grid: Vec<(usize, u64)> =
        (0..configs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let cells: Vec<CompareCell> = grid
        .par_iter()
        .map(|&(c, seed)| {
            let (label, base) = &configs[c];
            let mut cfg = base.clone();
            cfg.seed = seed;
            let result = data(&cfg, seed).and_then(|ds| train(&cfg, &ds)).and_then(|out| {
                if let Some(dir) = out_dir {
                    out.write_to(&dir.join(label).join(format!("seed{seed}")))?;
                }
                Ok(out.last().clone())
            });
            match result {
                Ok(m) => CompareCell { label: label.clone(), seed, final_metrics: Some(m), error: None },
                Err(e) => CompareCell { label: label.clone(), seed, final_metrics: None, error: Some(e.to_string()) },
            }
        })
        .collect();

    let baseline = configs
        .iter()
        .find(|(_, c)| c.scheduler == SchedulerKind::Random)
        .map(|(l, _)| l.clone());
    let cell = |label: &str, seed: u64| {
        cells
            .iter()
            .find(|c| c.label == label && c.seed == seed)
            .and_then(|c| c.final_metrics.as_ref())
    };

    let rows = configs
        .iter()
        .map(|(label, cfg)| {
            let ok: Vec<&EpochMetrics> = seeds.iter().filter_map(|&s| cell(label, s)).collect();
            let mut metrics = BTreeMap::new();
            let columns: [(&str, fn(&EpochMetrics) -> f64); 5] = [
                ("minority_recall", |m| m.minority_recall),
                ("recall_class0", |m| m.recall_class0),
                ("recall_class1", |m| m.recall_class1),
                ("mean_loss", |m| m.mean_loss),
                ("mean_uncertainty", |m| m.mean_uncertainty),
            ];
            for (name, get) in columns {
                let values: Vec<f64> = ok.iter().map(|m| get(m)).collect();
                if let Some(s) = summarize(&values) {
                    metrics.insert(name.to_string(), s);
                }
            }
            let (mut wins, mut ties, mut losses) = (0, 0, 0);
            if let Some(base) = &baseline {
                for &s in seeds {
                    if let (Some(mine), Some(theirs)) = (cell(label, s), cell(base, s)) {
                        match mine.minority_recall.partial_cmp(&theirs.minority_recall) {
                            Some(std::cmp::Ordering::Greater) => wins += 1,
                            Some(std::cmp::Ordering::Equal) => ties += 1,
                            _ => losses += 1,
                        }
                    }
                }
            }
            ComparisonRow {
                label: label.clone(),
                scheduler: cfg.scheduler,
                succeeded: ok.len(),
                failed: seeds.len() - ok.len(),
                metrics,
                minority_wins: wins,
                minority_ties: ties,
                minority_losses: losses,
            }
        })
        .collect();

    Ok(ComparisonTable { seeds: seeds.to_vec(), baseline, rows, cells })
}

/// [`compare_with`] reading each config's own dataset file.
pub fn compare(
    configs: &[(String, ExperimentConfig)],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<ComparisonTable> {
    compare_with(configs, seeds, |cfg, _| Dataset::load(&cfg.dataset), out_dir)
}

impl ComparisonTable {
    /// `label,scheduler,metric,mean,spread,succeeded,failed` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "scheduler", "metric", "mean", "spread", "succeeded", "failed"])?;
        for row in &self.rows {
            for (name, s) in &row.metrics {
                w.write_record([
                    row.label.clone(),
                    row.scheduler.to_string(),
                    name.clone(),
                    s.mean.to_string(),
                    s.spread.map(|v| v.to_string()).unwrap_or_default(),
                    row.succeeded.to_string(),
                    row.failed.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<comparison csv>", e))?;
        Ok(())
    }

    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScatterMode {
    /// Raw loss and uncertainty values.
    Value,
    /// Descending rank indices of loss and uncertainty.
    Index,
}

impl FromStr for ScatterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "value" => Ok(ScatterMode::Value),
            "index" => Ok(ScatterMode::Index),
            other => Err(Error::Config(format!("unknown scatter mode `{other}`"))),
        }
    }
}

/// `(sample_id, loss, uncertainty)` rows, either raw or as rank indices.
pub fn scatter_rows(entries: &[ScoreEntry], mode: ScatterMode) -> Result<Vec<(SampleId, f64, f64)>> {
    match mode {
        ScatterMode::Value => Ok(entries.iter().map(|e| (e.sample_id, e.loss, e.uncertainty)).collect()),
        ScatterMode::Index => {
            let ids: Vec<SampleId> = entries.iter().map(|e| e.sample_id).collect();
            let losses: Vec<f64> = entries.iter().map(|e| e.loss).collect();
            let us: Vec<f64> = entries.iter().map(|e| e.uncertainty).collect();
            let rl = rank_descending(&losses, &ids)?;
            let ru = rank_descending(&us, &ids)?;
            Ok(ids
                .into_iter()
                .zip(rl.into_iter().zip(ru))
                .map(|(id, (l, u))| (id, l as f64, u as f64))
                .collect())
        }
    }
}

/// Writes `sample_id,loss,uncertainty` for a scatter plot.
pub fn export_scatter<W: Write>(entries: &[ScoreEntry], mode: ScatterMode, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "loss", "uncertainty"])?;
    for (id, l, u) in scatter_rows(entries, mode)? {
        w.write_record([id.to_string(), l.to_string(), u.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<scatter csv>", e))?;
    Ok(())
}

/// [`export_scatter`] reading a scores JSON file.
pub fn export_scatter_file<W: Write>(scores: &Path, mode: ScatterMode, out: W) -> Result<()> {
    let entries = difficulty::read_scores_json(scores)?;
    export_scatter(&entries, mode, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenSpec};

    fn small_data(seed: u64) -> Dataset {
        generate(&GenSpec { n_total: 40, seed, ..GenSpec::default() }).unwrap()
    }

    fn quick(scheduler: SchedulerKind) -> ExperimentConfig {
        ExperimentConfig { scheduler, warmup_epochs: 2, total_epochs: 5, ..ExperimentConfig::default() }
    }

    #[test]
    fn scheduler_names_round_trip() {
        for k in SchedulerKind::ALL {
            assert_eq!(k.to_string().parse::<SchedulerKind>().unwrap(), k);
        }
        assert_eq!("anti-mixed".parse::<SchedulerKind>().unwrap(), SchedulerKind::AntiMixed);
        assert!("bogus".parse::<SchedulerKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::default();
        assert!(ok.validate().is_ok());
        assert!(ExperimentConfig { warmup_epochs: 60, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { rescore_every: 0, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { perturbation_half_range: -1.0, ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { scheduler: SchedulerKind::SpHard, sp_age: 0.0, ..ok.clone() }
            .validate()
            .is_err());
        assert!(ExperimentConfig { scheduler: SchedulerKind::Mixed, batch_size: 1, ..ok }.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig { scheduler: SchedulerKind::SpLinear, seed: 9, ..Default::default() };
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("scheduler = \"sp_linear\""));
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml_str("scheduler = \"mixed\"\nseed = 3\n").unwrap();
        assert_eq!(partial.scheduler, SchedulerKind::Mixed);
        assert_eq!(partial.total_epochs, 60);
        assert!(ExperimentConfig::from_toml_str("not_a_field = 1").is_err());
    }

    #[test]
    fn random_run_produces_well_formed_metrics() {
        let out = train(&quick(SchedulerKind::Random), &small_data(1)).unwrap();
        assert_eq!(out.metrics.len(), 5);
        assert!(out.snapshots.is_empty());
        for m in &out.metrics {
            assert!(m.mean_loss.is_finite());
            for r in [m.recall_class0, m.recall_class1, m.minority_recall] {
                assert!((0.0..=1.0).contains(&r));
            }
            assert!(m.d_sum_spread.is_none());
        }
        assert_eq!(out.final_scores.records.len(), 40);
    }

    #[test]
    fn every_scheduler_runs() {
        let data = small_data(2);
        for k in SchedulerKind::ALL {
            let out = train(&quick(k), &data).unwrap();
            assert_eq!(out.metrics.len(), 5, "{k}");
            let ids = data.ids();
            for plan in &out.plans {
                if k == SchedulerKind::Ohem && plan.epoch >= 2 {
                    assert!(plan.has_duplicates);
                } else {
                    assert!(plan.covers_exactly(&ids), "{k} epoch {}", plan.epoch);
                }
            }
        }
    }

    #[test]
    fn warmup_plans_match_random_run() {
        let data = small_data(3);
        let random = train(&quick(SchedulerKind::Random), &data).unwrap();
        let mixed = train(&quick(SchedulerKind::Mixed), &data).unwrap();
        assert_eq!(random.plans[..2], mixed.plans[..2]);
        for (r, m) in random.metrics[..2].iter().zip(&mixed.metrics[..2]) {
            assert_eq!((r.mean_loss, r.minority_recall, r.mean_uncertainty), (m.mean_loss, m.minority_recall, m.mean_uncertainty));
        }
        assert_ne!(random.plans[2], mixed.plans[2]);
        assert_eq!(mixed.snapshots.len(), 3);
    }

    #[test]
    fn rescore_every_controls_snapshots() {
        let cfg = ExperimentConfig { rescore_every: 2, ..quick(SchedulerKind::Mixed) };
        let out = train(&cfg, &small_data(4)).unwrap();
        let epochs: Vec<usize> = out.snapshots.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![2, 4]);
    }

    #[test]
    fn mixed_spread_not_above_anti_mixed() {
        let data = small_data(5);
        let mixed = train(&quick(SchedulerKind::Mixed), &data).unwrap();
        for snap in &mixed.snapshots {
            let d = snap.d_map();
            let m = difficulty_plan(SchedulerKind::Mixed, &snap.records, 2, 0).unwrap();
            let a = difficulty_plan(SchedulerKind::AntiMixed, &snap.records, 2, 0).unwrap();
            assert!(m.d_sum_spread(&d).unwrap() <= a.d_sum_spread(&d).unwrap());
        }
        for m in &mixed.metrics[2..] {
            assert!(m.d_sum_spread.is_some());
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = ExperimentConfig { learning_rate: 1e300, loss: LossKind::Ce, ..quick(SchedulerKind::Random) };
        let err = train(&cfg, &small_data(6));
        assert!(err.is_err());
    }

    #[test]
    fn metrics_csv_header_is_fixed() {
        let out = train(&quick(SchedulerKind::Mixed), &small_data(7)).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &out.metrics).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn convergence_monitor_needs_full_window() {
        let mut m = ConvergenceMonitor::new(1e-4, 3);
        assert!(!m.observe(1.0));
        assert!(!m.observe(0.5));
        assert!(!m.observe(0.5));
        assert!(!m.observe(0.5));
        assert!(m.observe(0.50001));
        let mut m = ConvergenceMonitor::new(1e-4, 2);
        for v in [1.0, 1.0, 0.5, 0.5] {
            assert!(!m.observe(v));
        }
        assert!(m.observe(0.5));
    }

    #[test]
    fn compare_needs_two_configs() {
        let cfg = quick(SchedulerKind::Random);
        let res = compare_with(&[("a".into(), cfg)], &[0], |_, s| Ok(small_data(s)), None);
        assert!(res.is_err());
    }

    #[test]
    fn compare_against_itself_gives_identical_rows() {
        let cfg = quick(SchedulerKind::Random);
        let table = compare_with(
            &[("a".into(), cfg.clone()), ("b".into(), cfg)],
            &[1, 2],
            |_, s| Ok(small_data(s)),
            None,
        )
        .unwrap();
        let (a, b) = (table.row("a").unwrap(), table.row("b").unwrap());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(b.minority_ties, 2);
        assert_eq!(table.baseline.as_deref(), Some("a"));
    }

    #[test]
    fn compare_single_seed_has_no_spread_and_marks_failures() {
        let good = quick(SchedulerKind::Random);
        let table = compare_with(
            &[("ok".into(), good.clone()), ("mixed".into(), quick(SchedulerKind::Mixed))],
            &[3],
            |cfg, s| {
                if cfg.scheduler == SchedulerKind::Mixed {
                    Err(Error::Data("boom".into()))
                } else {
                    Ok(small_data(s))
                }
            },
            None,
        )
        .unwrap();
        let ok = table.row("ok").unwrap();
        assert!(ok.metrics.values().all(|s| s.spread.is_none()));
        let bad = table.row("mixed").unwrap();
        assert_eq!((bad.succeeded, bad.failed), (0, 1));
        assert!(table.cells.iter().any(|c| c.error.as_deref().is_some_and(|e| e.contains("boom"))));
    }

    #[test]
    fn scatter_modes() {
        let entries = vec![
            ScoreEntry { sample_id: 0, loss: 0.1, uncertainty: 0.3 },
            ScoreEntry { sample_id: 1, loss: 1e9, uncertainty: 0.2 },
            ScoreEntry { sample_id: 2, loss: 0.5, uncertainty: 0.9 },
        ];
        let rows = scatter_rows(&entries, ScatterMode::Index).unwrap();
        assert_eq!(rows, vec![(0, 2.0, 1.0), (1, 0.0, 2.0), (2, 1.0, 0.0)]);
        let rows = scatter_rows(&entries, ScatterMode::Value).unwrap();
        assert_eq!(rows[1], (1, 1e9, 0.2));
        let mut buf = Vec::new();
        export_scatter(&entries, ScatterMode::Value, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().next(), Some("sample_id,loss,uncertainty"));
    }
}
