//! Mini-batch plans: uniform shuffling, mixed-order (hard paired with easy),
//! anti-mixed (contiguous hardness chunks), OHEM oversampling, and the
//! self-paced loss weights used by the deweighting baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::difficulty::DifficultyRecord;
use crate::{Error, Result, SampleId, Scalar};

/// One epoch's ordered partition of sample ids into mini-batches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub epoch: usize,
    pub batch_size: usize,
    pub batches: Vec<Vec<SampleId>>,
    /// Set when ids may repeat within the epoch (OHEM).
    #[serde(default)]
    pub has_duplicates: bool,
}

impl BatchPlan {
    fn chunked(epoch: usize, batch_size: usize, order: &[SampleId]) -> Self {
        Self {
            epoch,
            batch_size,
            batches: order.chunks(batch_size).map(<[SampleId]>::to_vec).collect(),
            has_duplicates: false,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Checks that each id in `ids` appears exactly once and nothing else does.
    pub fn covers_exactly(&self, ids: &[SampleId]) -> bool {
        let mut seen = BTreeSet::new();
        for &id in self.batches.iter().flatten() {
            if !seen.insert(id) {
                return false;
            }
        }
        let expected: BTreeSet<_> = ids.iter().copied().collect();
        seen == expected && ids.len() == expected.len()
    }

    /// Sum of `d` within each batch.
    pub fn batch_d_sums(&self, d: &BTreeMap<SampleId, usize>) -> Result<Vec<usize>> {
        self.batches
            .iter()
            .map(|batch| {
                batch
                    .iter()
                    .map(|id| d.get(id).copied().ok_or(Error::MissingScore(*id)))
                    .sum()
            })
            .collect()
    }

    /// `max − min` of batch d-sums over full-size batches.
    pub fn d_sum_spread(&self, d: &BTreeMap<SampleId, usize>) -> Result<Option<usize>> {
        let sums: Vec<usize> = self
            .batches
            .iter()
            .zip(self.batch_d_sums(d)?)
            .filter(|(b, _)| b.len() == self.batch_size)
            .map(|(_, s)| s)
            .collect();
        Ok(match (sums.iter().max(), sums.iter().min()) {
            (Some(max), Some(min)) => Some(max - min),
            _ => None,
        })
    }

    /// Randomizes the order in which batches are visited, keeping composition.
    pub fn shuffle_batch_order<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.batches.shuffle(rng);
    }
}

fn check_batch_size(b: usize) -> Result<()> {
    if b == 0 {
        Err(Error::Config("batch size must be ≥ 1".into()))
    } else {
        Ok(())
    }
}

fn check_ids(ids: &[SampleId]) -> Result<()> {
    if ids.is_empty() {
        Err(Error::Data("cannot plan an empty id set".into()))
    } else {
        Ok(())
    }
}

/// Uniform shuffle chunked into batches of `b`.
pub fn random_plan<R: Rng + ?Sized>(
    ids: &[SampleId],
    b: usize,
    epoch: usize,
    rng: &mut R,
) -> Result<BatchPlan> {
    check_ids(ids)?;
    check_batch_size(b)?;
    let mut order = ids.to_vec();
    order.shuffle(rng);
    Ok(BatchPlan::chunked(epoch, b, &order))
}

/// Ids sorted hardest first: ascending `d`, ties by ascending id.
pub fn hardness_order<T>(records: &[DifficultyRecord<T>]) -> Vec<SampleId> {
    let mut keyed: Vec<(usize, SampleId)> = records.iter().map(|r| (r.d, r.sample_id)).collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, id)| id).collect()
}

fn check_records<T>(records: &[DifficultyRecord<T>]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("no difficulty records".into()));
    }
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.sample_id) {
            return Err(Error::Data(format!("duplicate record for sample {}", r.sample_id)));
        }
    }
    Ok(())
}

/// Mixed-order plan.
///
/// Picks alternate between the hard end and the easy end of the hardness
/// order, and the pick sequence is cut into batches of `b`. With `b = 2` this
/// pairs position `k` with position `N − 1 − k`; with odd `N` the
/// median-difficulty sample lands alone in the final batch.
pub fn mixed_order_plan<T>(records: &[DifficultyRecord<T>], b: usize, epoch: usize) -> Result<BatchPlan> {
    check_records(records)?;
    check_batch_size(b)?;
    let sorted = hardness_order(records);
    let (mut lo, mut hi) = (0usize, sorted.len());
    let mut picks = Vec::with_capacity(sorted.len());
    let mut from_hard = true;
    while lo < hi {
        if from_hard {
            picks.push(sorted[lo]);
            lo += 1;
        } else {
            hi -= 1;
            picks.push(sorted[hi]);
        }
        from_hard = !from_hard;
    }
    Ok(BatchPlan::chunked(epoch, b, &picks))
}

/// Anti-mixed plan: contiguous chunks of the hardness order (hard with hard).
pub fn anti_mixed_plan<T>(records: &[DifficultyRecord<T>], b: usize, epoch: usize) -> Result<BatchPlan> {
    check_records(records)?;
    check_batch_size(b)?;
    Ok(BatchPlan::chunked(epoch, b, &hardness_order(records)))
}

/// Online hard example mining: the top `ceil(ratio · N)` samples by loss are
/// entered twice, everything is shuffled, then chunked.
pub fn ohem_plan<T: Scalar, R: Rng + ?Sized>(
    losses: &BTreeMap<SampleId, T>,
    b: usize,
    ratio: f64,
    epoch: usize,
    rng: &mut R,
) -> Result<BatchPlan> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("OHEM ratio must lie in (0, 1], got {ratio}")));
    }
    check_batch_size(b)?;
    if losses.is_empty() {
        return Err(Error::Data("cannot plan an empty id set".into()));
    }
    if let Some((id, _)) = losses.iter().find(|(_, l)| l.is_nan()) {
        return Err(Error::NonFinite(format!("loss of sample {id}")));
    }
    let mut by_loss: Vec<(SampleId, T)> = losses.iter().map(|(&id, &l)| (id, l)).collect();
    by_loss.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("not NaN").then(a.0.cmp(&b.0)));
    let k = ((ratio * by_loss.len() as f64).ceil() as usize).clamp(1, by_loss.len());

    let mut slots: Vec<SampleId> = losses.keys().copied().collect();
    slots.extend(by_loss.iter().take(k).map(|(id, _)| *id));
    slots.shuffle(rng);
    let mut plan = BatchPlan::chunked(epoch, b, &slots);
    plan.has_duplicates = true;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpRegularizer {
    Hard,
    #[default]
    Linear,
}

impl fmt::Display for SpRegularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpRegularizer::Hard => "hard",
            SpRegularizer::Linear => "linear",
        })
    }
}

impl FromStr for SpRegularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(SpRegularizer::Hard),
            "linear" => Ok(SpRegularizer::Linear),
            other => Err(Error::Config(format!("unknown SP regularizer `{other}`"))),
        }
    }
}

/// Self-paced weighting with a linearly growing age `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpConfig<T> {
    pub regularizer: SpRegularizer,
    /// Age at epoch 0.
    pub age: T,
    /// Age added per epoch.
    pub growth: T,
}

impl<T: Scalar> SpConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.age > T::zero()) || !self.age.is_finite() {
            return Err(Error::Config(format!("SP age must be positive, got {}", self.age)));
        }
        if !(self.growth >= T::zero()) || !self.growth.is_finite() {
            return Err(Error::Config(format!("SP age growth must be ≥ 0, got {}", self.growth)));
        }
        Ok(())
    }

    /// Copy of this config with the age for `epoch` filled in.
    pub fn at_epoch(&self, epoch: usize) -> Self {
        Self {
            age: age_schedule(epoch, self),
            ..*self
        }
    }
}

/// `λ = λ₀ + growth · epoch`.
pub fn age_schedule<T: Scalar>(epoch: usize, cfg: &SpConfig<T>) -> T {
    cfg.age + cfg.growth * T::from_usize_lossy(epoch)
}

/// Per-sample loss weight `v ∈ [0, 1]` at the config's current age.
///
/// Hard: `v = 1` if `l < λ`, else 0. Linear: `v = max(0, 1 − l/λ)`.
pub fn sp_weight<T: Scalar>(l: T, cfg: &SpConfig<T>) -> T {
    let lambda = cfg.age;
    match cfg.regularizer {
        SpRegularizer::Hard => {
            if l < lambda {
                T::one()
            } else {
                T::zero()
            }
        }
        SpRegularizer::Linear => (T::one() - l / lambda).max(T::zero()).min(T::one()),
    }
}
