//! Rank-fused difficulty.
//!
//! Samples are sorted by loss and by uncertainty, each in descending order,
//! and a sample's difficulty `d` is the sum of its two positions. Index 0 is
//! the largest value, so a smaller `d` means a harder sample. Only ranks enter
//! `d`, which makes it insensitive to the scale of either score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::math::median;
use crate::{Error, Result, SampleId, Scalar};

/// Rank index per sample id.
pub type Ranking = BTreeMap<SampleId, usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DifficultySource {
    Loss,
    Uncertainty,
    #[default]
    Both,
}

impl DifficultySource {
    pub fn needs_uncertainty(self) -> bool {
        !matches!(self, DifficultySource::Loss)
    }
}

impl FromStr for DifficultySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loss" => Ok(DifficultySource::Loss),
            "uncertainty" => Ok(DifficultySource::Uncertainty),
            "both" => Ok(DifficultySource::Both),
            other => Err(Error::Config(format!("unknown difficulty source `{other}`"))),
        }
    }
}

/// Four-way loss × uncertainty taxonomy. The first letter is uncertainty,
/// the second is loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    /// High uncertainty, high loss: under-represented data.
    HH,
    /// Low uncertainty, high loss: mislabeled data.
    LH,
    /// Low uncertainty, low loss: majority data.
    LL,
    /// High uncertainty, low loss: noisy or overfitted data.
    HL,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::HH, Quadrant::LH, Quadrant::LL, Quadrant::HL];

    pub fn from_levels(high_uncertainty: bool, high_loss: bool) -> Self {
        match (high_uncertainty, high_loss) {
            (true, true) => Quadrant::HH,
            (false, true) => Quadrant::LH,
            (false, false) => Quadrant::LL,
            (true, false) => Quadrant::HL,
        }
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Quadrant::HH => "HH",
            Quadrant::LH => "LH",
            Quadrant::LL => "LL",
            Quadrant::HL => "HL",
        };
        f.write_str(s)
    }
}

impl FromStr for Quadrant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HH" => Ok(Quadrant::HH),
            "LH" => Ok(Quadrant::LH),
            "LL" => Ok(Quadrant::LL),
            "HL" => Ok(Quadrant::HL),
            other => Err(Error::Data(format!("unknown quadrant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyRecord<T> {
    pub sample_id: SampleId,
    pub loss: T,
    pub uncertainty: T,
    pub rank_l: usize,
    pub rank_u: usize,
    pub d: usize,
}

/// Descending rank of each value, aligned with the input. Ties go to the
/// smaller id first.
pub fn rank_descending<T: Scalar>(values: &[T], ids: &[SampleId]) -> Result<Vec<usize>> {
    if values.len() != ids.len() {
        return Err(Error::DimensionMismatch {
            what: "ids",
            expected: values.len(),
            actual: ids.len(),
        });
    }
    if values.is_empty() {
        return Err(Error::Data("cannot rank an empty list".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cannot rank {v}")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("finite")
            .then(ids[a].cmp(&ids[b]))
    });
    let mut ranks = vec![0; values.len()];
    for (rank, &pos) in order.iter().enumerate() {
        ranks[pos] = rank;
    }
    Ok(ranks)
}

/// Descending ranking keyed by id.
pub fn ranking<T: Scalar>(scores: &BTreeMap<SampleId, T>) -> Result<Ranking> {
    let ids: Vec<SampleId> = scores.keys().copied().collect();
    let values: Vec<T> = scores.values().copied().collect();
    let ranks = rank_descending(&values, &ids)?;
    Ok(ids.into_iter().zip(ranks).collect())
}

/// `d = rank_u + rank_l` per id.
pub fn fuse_ranks(rank_u: &Ranking, rank_l: &Ranking) -> Result<BTreeMap<SampleId, usize>> {
    if rank_u.len() != rank_l.len() || rank_u.keys().ne(rank_l.keys()) {
        let u: BTreeSet<_> = rank_u.keys().collect();
        let l: BTreeSet<_> = rank_l.keys().collect();
        let diff: Vec<_> = u.symmetric_difference(&l).take(5).collect();
        return Err(Error::IdMismatch(format!(
            "uncertainty and loss rankings differ on ids {diff:?}"
        )));
    }
    Ok(rank_u
        .iter()
        .map(|(&id, &ru)| (id, ru + rank_l[&id]))
        .collect())
}

/// Builds a record per sample. `d` follows `source`: the loss rank, the
/// uncertainty rank, or their sum.
pub fn score_records<T: Scalar>(
    losses: &BTreeMap<SampleId, T>,
    uncertainties: &BTreeMap<SampleId, T>,
    source: DifficultySource,
) -> Result<Vec<DifficultyRecord<T>>> {
    let rank_l = ranking(losses)?;
    let rank_u = ranking(uncertainties)?;
    let fused = fuse_ranks(&rank_u, &rank_l)?;
    Ok(fused
        .into_iter()
        .map(|(id, sum)| {
            let (rl, ru) = (rank_l[&id], rank_u[&id]);
            DifficultyRecord {
                sample_id: id,
                loss: losses[&id],
                uncertainty: uncertainties[&id],
                rank_l: rl,
                rank_u: ru,
                d: match source {
                    DifficultySource::Loss => rl,
                    DifficultySource::Uncertainty => ru,
                    DifficultySource::Both => sum,
                },
            }
        })
        .collect())
}

/// Loss-only records; the uncertainty column is zero and unranked.
pub fn loss_records<T: Scalar>(losses: &BTreeMap<SampleId, T>) -> Result<Vec<DifficultyRecord<T>>> {
    let rank_l = ranking(losses)?;
    Ok(rank_l
        .into_iter()
        .map(|(id, rl)| DifficultyRecord {
            sample_id: id,
            loss: losses[&id],
            uncertainty: T::zero(),
            rank_l: rl,
            rank_u: 0,
            d: rl,
        })
        .collect())
}

/// How quadrant boundaries are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadrantRule<T> {
    /// Dataset medians; a score is high only when strictly above the median.
    Median,
    /// Fixed splits; a score is high when it is at or above the split.
    Explicit { u_split: T, l_split: T },
}

pub fn quadrant_classify<T: Scalar>(
    records: &[DifficultyRecord<T>],
    rule: QuadrantRule<T>,
) -> Result<BTreeMap<SampleId, Quadrant>> {
    if records.is_empty() {
        return Ok(BTreeMap::new());
    }
    let (u_split, l_split, strict) = match rule {
        QuadrantRule::Median => {
            let us: Vec<T> = records.iter().map(|r| r.uncertainty).collect();
            let ls: Vec<T> = records.iter().map(|r| r.loss).collect();
            (median(&us).expect("non-empty"), median(&ls).expect("non-empty"), true)
        }
        QuadrantRule::Explicit { u_split, l_split } => {
            if !u_split.is_finite() || !l_split.is_finite() {
                return Err(Error::NonFinite("quadrant thresholds".into()));
            }
            (u_split, l_split, false)
        }
    };
    let high = |v: T, split: T| if strict { v > split } else { v >= split };
    Ok(records
        .iter()
        .map(|r| {
            (
                r.sample_id,
                Quadrant::from_levels(high(r.uncertainty, u_split), high(r.loss, l_split)),
            )
        })
        .collect())
}

/// One row of the JSON score dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: SampleId,
    pub loss: f64,
    pub uncertainty: f64,
}

pub fn score_entries<T: Scalar>(records: &[DifficultyRecord<T>]) -> Vec<ScoreEntry> {
    records
        .iter()
        .map(|r| ScoreEntry {
            sample_id: r.sample_id,
            loss: r.loss.to_f64_lossy(),
            uncertainty: r.uncertainty.to_f64_lossy(),
        })
        .collect()
}

pub fn write_scores_json(path: &Path, entries: &[ScoreEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_scores_json(path: &Path) -> Result<Vec<ScoreEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// CSV with header `sample_id,loss,uncertainty,rank_l,rank_u,d,quadrant`.
pub fn write_difficulty_csv<T: Scalar, W: Write>(
    out: W,
    records: &[DifficultyRecord<T>],
    quadrants: &BTreeMap<SampleId, Quadrant>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "loss", "uncertainty", "rank_l", "rank_u", "d", "quadrant"])?;
    for r in records {
        let q = quadrants
            .get(&r.sample_id)
            .ok_or(Error::MissingScore(r.sample_id))?;
        w.write_record([
            r.sample_id.to_string(),
            r.loss.to_f64_lossy().to_string(),
            r.uncertainty.to_f64_lossy().to_string(),
            r.rank_l.to_string(),
            r.rank_u.to_string(),
            r.d.to_string(),
            q.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<difficulty csv>", e))?;
    Ok(())
}
