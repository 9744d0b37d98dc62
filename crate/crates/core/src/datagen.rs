//! Seeded two-class Gaussian mixtures whose samples are tagged with the
//! loss/uncertainty quadrant they were built to land in:
//!
//! * `HH`: minority-class cluster (too few examples);
//! * `LH`: majority points whose label was flipped;
//! * `HL`: majority points with heavy feature jitter (label kept);
//! * `LL`: everything else.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::difficulty::Quadrant;
use crate::{Error, Result, SampleId};

/// Class of the large cluster.
pub const MAJORITY_LABEL: usize = 0;
/// Class of the small cluster.
pub const MINORITY_LABEL: usize = 1;
/// Jitter applied to `HL` points, in cluster standard deviations.
pub const JITTER_SCALE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub x: Vec<f64>,
    pub y: usize,
    pub clean_label: usize,
    pub true_quadrant: Quadrant,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn by_id(&self) -> BTreeMap<SampleId, &Sample> {
        self.samples.iter().map(|s| (s.id, s)).collect()
    }

    pub fn count(&self, quadrant: Quadrant) -> usize {
        self.samples.iter().filter(|s| s.true_quadrant == quadrant).count()
    }

    /// Writes `id,y,clean_label,true_quadrant,x0,x1,…`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["id", "y", "clean_label", "true_quadrant"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..self.dim()).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![
                s.id.to_string(),
                s.y.to_string(),
                s.clean_label.to_string(),
                s.true_quadrant.to_string(),
            ];
            row.extend(s.x.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<dataset csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let fixed = ["id", "y", "clean_label", "true_quadrant"];
        if header.len() < fixed.len() + 1 || header.iter().take(4).ne(fixed.iter().copied()) {
            return Err(Error::Data(format!("unexpected dataset header {header:?}")));
        }
        for (k, name) in header.iter().skip(4).enumerate() {
            if name != format!("x{k}") {
                return Err(Error::Data(format!("unexpected feature column `{name}`")));
            }
        }
        let parse_err = |what: &str, v: &str| Error::Data(format!("bad {what} `{v}`"));
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let id = field(0).parse().map_err(|_| parse_err("id", field(0)))?;
            let y = field(1).parse().map_err(|_| parse_err("label", field(1)))?;
            let clean_label = field(2).parse().map_err(|_| parse_err("clean label", field(2)))?;
            let true_quadrant = field(3).parse()?;
            let x = (4..rec.len())
                .map(|i| field(i).parse::<f64>().map_err(|_| parse_err("feature", field(i))))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample { id, x, y, clean_label, true_quadrant });
        }
        let ds = Dataset { samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        let dim = self.dim();
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            if s.x.len() != dim {
                return Err(Error::DimensionMismatch { what: "sample features", expected: dim, actual: s.x.len() });
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of sample {}", s.id)));
            }
            if s.y > 1 || s.clean_label > 1 {
                return Err(Error::Data(format!("sample {} has a non-binary label", s.id)));
            }
        }
        Ok(())
    }
}

/// Generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_total: usize,
    pub minority_fraction: f64,
    /// Fraction of majority samples whose label is flipped.
    pub label_noise_rate: f64,
    /// Fraction of majority samples given heavy feature jitter.
    pub feature_noise_rate: f64,
    /// Distance between cluster means, in cluster standard deviations.
    pub cluster_separation: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_total: 400,
            minority_fraction: 0.1,
            label_noise_rate: 0.1,
            feature_noise_rate: 0.05,
            cluster_separation: 3.0,
            dim: 2,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_total < 4 {
            return Err(Error::Config(format!("n_total must be ≥ 4, got {}", self.n_total)));
        }
        for (name, v) in [
            ("minority_fraction", self.minority_fraction),
            ("label_noise_rate", self.label_noise_rate),
            ("feature_noise_rate", self.feature_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.label_noise_rate + self.feature_noise_rate > 1.0 {
            return Err(Error::Config(format!(
                "label and feature noise rates sum to {} > 1",
                self.label_noise_rate + self.feature_noise_rate
            )));
        }
        if !(2..=8).contains(&self.dim) {
            return Err(Error::Config(format!("dim must lie in 2..=8, got {}", self.dim)));
        }
        if !(self.cluster_separation >= 0.0) || !self.cluster_separation.is_finite() {
            return Err(Error::Config("cluster_separation must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// `(HH, LH, HL, LL)` counts.
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        let minority = (self.minority_fraction * self.n_total as f64).round() as usize;
        let majority = self.n_total - minority.min(self.n_total);
        let lh = (self.label_noise_rate * majority as f64).round() as usize;
        let hl = ((self.feature_noise_rate * majority as f64).round() as usize).min(majority - lh.min(majority));
        (minority, lh, hl, majority - lh - hl)
    }
}

/// Draws a dataset. Same spec, same bytes.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n_hh, n_lh, n_hl, n_ll) = spec.counts();

    // Majority cluster at the origin, minority along the unit diagonal.
    let axis = 1.0 / (spec.dim as f64).sqrt();
    let minority_mean: Vec<f64> = vec![spec.cluster_separation * axis; spec.dim];
    let majority_mean = vec![0.0; spec.dim];

    let mut tags: Vec<Quadrant> = std::iter::repeat(Quadrant::HH)
        .take(n_hh)
        .chain(std::iter::repeat(Quadrant::LH).take(n_lh))
        .chain(std::iter::repeat(Quadrant::HL).take(n_hl))
        .chain(std::iter::repeat(Quadrant::LL).take(n_ll))
        .collect();
    tags.shuffle(&mut rng);

    let mut gauss = |mean: &[f64], scale: f64| -> Vec<f64> {
        mean.iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + scale * z
            })
            .collect()
    };

    let samples = tags
        .into_iter()
        .enumerate()
        .map(|(i, tag)| {
            let (x, clean_label, y) = match tag {
                Quadrant::HH => (gauss(&minority_mean, 1.0), MINORITY_LABEL, MINORITY_LABEL),
                Quadrant::LH => (gauss(&majority_mean, 1.0), MAJORITY_LABEL, MINORITY_LABEL),
                Quadrant::HL => {
                    let base = gauss(&majority_mean, 1.0);
                    let jitter = gauss(&vec![0.0; spec.dim], JITTER_SCALE);
                    (base.iter().zip(&jitter).map(|(a, b)| a + b).collect(), MAJORITY_LABEL, MAJORITY_LABEL)
                }
                Quadrant::LL => (gauss(&majority_mean, 1.0), MAJORITY_LABEL, MAJORITY_LABEL),
            };
            Sample { id: i as SampleId, x, y, clean_label, true_quadrant: tag }
        })
        .collect();
    Ok(Dataset { samples })
}

/// Per generation tag, the fraction of samples whose measured quadrant
/// matches. Tags absent from the dataset map to `None`.
pub fn quadrant_recovery_rate(
    dataset: &Dataset,
    measured: &BTreeMap<SampleId, Quadrant>,
) -> Result<BTreeMap<Quadrant, Option<f64>>> {
    let mut hits: BTreeMap<Quadrant, (usize, usize)> = BTreeMap::new();
    for s in &dataset.samples {
        let q = measured.get(&s.id).ok_or(Error::MissingScore(s.id))?;
        let e = hits.entry(s.true_quadrant).or_default();
        e.1 += 1;
        if *q == s.true_quadrant {
            e.0 += 1;
        }
    }
    Ok(Quadrant::ALL
        .iter()
        .map(|&q| (q, hits.get(&q).map(|&(h, n)| h as f64 / n as f64)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difficulty::{quadrant_classify, DifficultyRecord, QuadrantRule};
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(n: usize, minority: f64, label: f64, feature: f64, seed: u64) -> GenSpec {
        GenSpec {
            n_total: n,
            minority_fraction: minority,
            label_noise_rate: label,
            feature_noise_rate: feature,
            seed,
            ..GenSpec::default()
        }
    }

    #[test]
    fn clean_spec_is_all_ll() {
        let ds = generate(&spec(50, 0.0, 0.0, 0.0, 1)).unwrap();
        assert!(ds.samples.iter().all(|s| s.true_quadrant == Quadrant::LL));
    }

    #[test]
    fn minority_count() {
        let ds = generate(&spec(100, 0.1, 0.0, 0.0, 1)).unwrap();
        assert_eq!(ds.count(Quadrant::HH), 10);
        assert!(ds.samples.iter().filter(|s| s.true_quadrant == Quadrant::HH).all(|s| s.y == MINORITY_LABEL));
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = spec(120, 0.1, 0.1, 0.05, 7);
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate(&s).unwrap().write_csv(&mut a).unwrap();
        generate(&s).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        generate(&GenSpec { seed: 8, ..s }).unwrap().write_csv(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = generate(&spec(40, 0.2, 0.1, 0.1, 3)).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("id,y,clean_label,true_quadrant,x0,x1\n"));
        assert_eq!(Dataset::read_csv(&buf[..]).unwrap(), ds);
    }

    #[test]
    fn infeasible_specs_rejected() {
        assert!(generate(&spec(100, 0.1, 0.7, 0.5, 0)).is_err());
        assert!(generate(&spec(3, 0.1, 0.0, 0.0, 0)).is_err());
        assert!(generate(&spec(10, 1.5, 0.0, 0.0, 0)).is_err());
        assert!(generate(&GenSpec { dim: 9, ..GenSpec::default() }).is_err());
    }

    #[test]
    fn recovery_with_oracle_scorer_is_perfect() {
        let ds = generate(&spec(80, 0.15, 0.1, 0.1, 2)).unwrap();
        // Encode the tag directly as (u, l) on either side of 0.5.
        let records: Vec<DifficultyRecord<f64>> = ds
            .samples
            .iter()
            .map(|s| {
                let (u, l) = match s.true_quadrant {
                    Quadrant::HH => (1.0, 1.0),
                    Quadrant::LH => (0.0, 1.0),
                    Quadrant::LL => (0.0, 0.0),
                    Quadrant::HL => (1.0, 0.0),
                };
                DifficultyRecord { sample_id: s.id, loss: l, uncertainty: u, rank_l: 0, rank_u: 0, d: 0 }
            })
            .collect();
        let q = quadrant_classify(&records, QuadrantRule::Explicit { u_split: 0.5, l_split: 0.5 }).unwrap();
        let rates = quadrant_recovery_rate(&ds, &q).unwrap();
        assert!(rates.values().all(|r| *r == Some(1.0)));
    }

    #[test]
    fn recovery_with_random_scores_is_near_chance() {
        let ds = generate(&spec(400, 0.25, 0.25, 0.25, 4)).unwrap();
        let mut total: BTreeMap<Quadrant, f64> = BTreeMap::new();
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: BTreeMap<SampleId, Quadrant> =
                ds.ids().into_iter().map(|id| (id, Quadrant::ALL[rng.gen_range(0..4)])).collect();
            for (k, v) in quadrant_recovery_rate(&ds, &q).unwrap() {
                *total.entry(k).or_default() += v.unwrap();
            }
        }
        for v in total.values() {
            assert!((v / seeds as f64 - 0.25).abs() < 0.1);
        }
    }

    #[test]
    fn recovery_reports_absent_quadrants() {
        let ds = generate(&spec(10, 0.0, 0.0, 0.0, 0)).unwrap();
        let q: BTreeMap<_, _> = ds.ids().into_iter().map(|id| (id, Quadrant::LL)).collect();
        let rates = quadrant_recovery_rate(&ds, &q).unwrap();
        assert_eq!(rates[&Quadrant::LL], Some(1.0));
        assert_eq!(rates[&Quadrant::HH], None);
        assert_eq!(rates[&Quadrant::LH], None);
        assert_eq!(rates[&Quadrant::HL], None);
        assert!(quadrant_recovery_rate(&ds, &BTreeMap::new()).is_err());
    }

    proptest! {
        #[test]
        fn tag_bookkeeping(n in 4usize..300, minority in 0.0f64..1.0, label in 0.0f64..0.5, feature in 0.0f64..0.5, seed in 0u64..1000) {
            let ds = generate(&spec(n, minority, label, feature, seed)).unwrap();
            let total: usize = Quadrant::ALL.iter().map(|&q| ds.count(q)).sum();
            prop_assert_eq!(total, n);
            prop_assert_eq!(ds.len(), n);
            for s in &ds.samples {
                if s.true_quadrant == Quadrant::LH {
                    prop_assert_ne!(s.y, s.clean_label);
                } else {
                    prop_assert_eq!(s.y, s.clean_label);
                }
            }
        }
    }
}
