//! Pairwise gradient conflict measurements.
//!
//! Conflict between two samples is `1 − cos θ`, where `θ` is the angle
//! between their parameter gradients. [`conflict_loss_monotonicity`] relates
//! it to the pair's summed loss through a Spearman rank correlation.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::{check_binary_label, LossKind, Probability};
use crate::model::{Gradient, Mlp};
use crate::{Error, Result, SampleId, Scalar};

/// Above this many samples only a seeded subset of pairs is evaluated.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 64;
pub const MAX_SAMPLED_PAIRS: usize = 2_000;

/// `⟨g_i, g_j⟩ / (‖g_i‖ ‖g_j‖)`.
pub fn gradient_cosine<T: Scalar>(gi: &Gradient<T>, gj: &Gradient<T>) -> Result<T> {
    if gi.len() != gj.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient",
            expected: gi.len(),
            actual: gj.len(),
        });
    }
    let (ni, nj) = (gi.norm(), gj.norm());
    if ni == T::zero() || nj == T::zero() {
        return Err(Error::UndefinedConflict("zero gradient vector".into()));
    }
    let c = gi.dot(gj) / (ni * nj);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Magnitude of the sigmoid/MSE latent gradient written through the loss
/// `l = (ŷ − y)²`: `2ŷl` for `y = 1` and `2ŷ²(1 − √l)` for `y = 0`.
pub fn latent_gradient_scale<T: Scalar>(y: usize, yhat: Probability<T>) -> Result<T> {
    check_binary_label(y)?;
    let p = yhat.value();
    let l = (p - T::from_usize_lossy(y)).powi(2);
    let two = T::lit(2.0);
    Ok(if y == 1 {
        two * p * l
    } else {
        two * p * p * (T::one() - l.sqrt())
    })
}

/// Average ranks (1-based, ties share the mean rank).
fn average_ranks<T: Scalar>(values: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman<T: Scalar>(a: &[T], b: &[T]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub id_i: SampleId,
    pub id_j: SampleId,
    pub cosine: f64,
    pub conflict: f64,
    pub loss_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub model_tag: String,
    pub pairs: Vec<PairRow>,
    /// Spearman ρ between conflict and loss sum; `None` when degenerate.
    pub spearman_rho: Option<f64>,
    /// Pairs dropped because one gradient was exactly zero.
    pub skipped_pairs: usize,
}

impl ConflictReport {
    pub fn is_degenerate(&self) -> bool {
        self.spearman_rho.is_none()
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_pairs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.pairs {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<pairs csv>", e))?;
        Ok(())
    }
}

/// Computes all pairwise conflicts (or a seeded sample of pairs for large
/// sets) and their Spearman correlation with the pair loss sum.
///
/// The result depends only on the model and the set of `(id, x, y)` samples,
/// not on their order.
pub fn conflict_loss_monotonicity<T: Scalar>(
    model: &Mlp<T>,
    samples: &[(SampleId, &[T], usize)],
    loss_kind: LossKind,
    model_tag: &str,
    pair_seed: u64,
) -> Result<ConflictReport> {
    if samples.len() < 3 {
        return Err(Error::Data(format!(
            "conflict analysis needs ≥ 3 samples, got {}",
            samples.len()
        )));
    }
    let mut sorted: Vec<(SampleId, &[T], usize)> = samples.to_vec();
    sorted.sort_by_key(|s| s.0);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Data("duplicate sample id".into()));
    }

    let per_sample: Vec<(Gradient<T>, T)> = sorted
        .par_iter()
        .map(|&(_, x, y)| {
            let g = model.per_sample_gradient(x, y, loss_kind)?;
            let l = model.sample_loss(x, y, loss_kind)?;
            Ok((g, l))
        })
        .collect::<Result<_>>()?;

    let n = sorted.len();
    let total_pairs = n * (n - 1) / 2;
    let pair_index = |k: usize| -> (usize, usize) {
        // k-th pair in lexicographic (i < j) order
        let mut i = 0;
        let mut rem = k;
        while rem >= n - 1 - i {
            rem -= n - 1 - i;
            i += 1;
        }
        (i, i + 1 + rem)
    };
    let pairs: Vec<(usize, usize)> = if n > EXHAUSTIVE_PAIR_LIMIT && total_pairs > MAX_SAMPLED_PAIRS {
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let mut picked = sample_indices(&mut rng, total_pairs, MAX_SAMPLED_PAIRS).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(pair_index).collect()
    } else {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    };

    let mut rows = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (i, j) in pairs {
        let (gi, li) = &per_sample[i];
        let (gj, lj) = &per_sample[j];
        match gradient_cosine(gi, gj) {
            Ok(c) => {
                let c = c.to_f64_lossy();
                rows.push(PairRow {
                    id_i: sorted[i].0,
                    id_j: sorted[j].0,
                    cosine: c,
                    conflict: 1.0 - c,
                    loss_sum: (*li + *lj).to_f64_lossy(),
                });
            }
            Err(Error::UndefinedConflict(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let conflicts: Vec<f64> = rows.iter().map(|r| r.conflict).collect();
    let loss_sums: Vec<f64> = rows.iter().map(|r| r.loss_sum).collect();
    Ok(ConflictReport {
        model_tag: model_tag.to_string(),
        spearman_rho: spearman(&conflicts, &loss_sums),
        pairs: rows,
        skipped_pairs: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{grad_wrt_latent, Activation, Head};

    fn p(v: f64) -> Probability<f64> {
        Probability::new(v).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let g = Gradient::from_vec(vec![1.0_f64, -2.0, 0.5]);
        assert!((gradient_cosine(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        let neg = g.clone().scaled(-1.0);
        assert!((gradient_cosine(&g, &neg).unwrap() + 1.0).abs() < 1e-15);
        let zero = Gradient::zeros(3);
        assert!(matches!(gradient_cosine(&g, &zero), Err(Error::UndefinedConflict(_))));
        assert!(gradient_cosine(&g, &Gradient::zeros(2)).is_err());
    }

    #[test]
    fn cosine_symmetric_and_scale_free() {
        let a = Gradient::from_vec(vec![0.3_f64, 0.1, -0.7, 2.0]);
        let b = Gradient::from_vec(vec![-1.0, 0.4, 0.2, 0.9]);
        let c = gradient_cosine(&a, &b).unwrap();
        assert!((c - gradient_cosine(&b, &a).unwrap()).abs() < 1e-15);
        let scaled = gradient_cosine(&a.clone().scaled(7.5), &b.clone().scaled(0.01)).unwrap();
        assert!((c - scaled).abs() < 1e-14);
    }

    #[test]
    fn opposite_residuals_on_bias_free_logistic_conflict_fully() {
        // Hidden bias and output bias are zero; only the weight path carries x.
        let m = Mlp::from_parts(vec![0.8], vec![0.0], vec![1.3], vec![0.0], 1, Activation::Tanh, Head::Sigmoid)
            .unwrap();
        let x = [0.6];
        let mut g1 = m.per_sample_gradient(&x, 1, LossKind::Ce).unwrap().into_vec();
        let mut g0 = m.per_sample_gradient(&x, 0, LossKind::Ce).unwrap().into_vec();
        // Drop the (zero-valued by construction, but trainable) bias slots.
        for g in [&mut g1, &mut g0] {
            g.remove(3);
            g.remove(1);
        }
        let c: f64 = gradient_cosine(&Gradient::from_vec(g1), &Gradient::from_vec(g0)).unwrap();
        assert!((c + 1.0).abs() < 1e-12);
    }

    #[test]
    fn latent_scale_examples() {
        assert_eq!(latent_gradient_scale(1, p(1.0)).unwrap(), 0.0);
        assert_eq!(latent_gradient_scale(1, p(0.5)).unwrap(), 0.25);
        assert_eq!(latent_gradient_scale(0, p(0.5)).unwrap(), 0.25);
        assert!(latent_gradient_scale(2, p(0.5)).is_err());
    }

    #[test]
    fn latent_scale_equals_closed_form_magnitude() {
        for y in 0..=1 {
            for i in 0..=1000 {
                let yhat = p(i as f64 / 1000.0);
                let scale: f64 = latent_gradient_scale(y, yhat).unwrap();
                let g = grad_wrt_latent(Head::Sigmoid, y, yhat).unwrap();
                assert!((scale.abs() - g.abs()).abs() < 1e-12, "y={y} ŷ={}", yhat.value());
            }
        }
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), None);
        // Monotone but non-linear.
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 1000.0]), Some(1.0));
        let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(rho > 0.9 && rho < 1.0);
    }

    fn toy_model() -> Mlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Mlp::init(2, 4, 2, Activation::Tanh, Head::Sigmoid, &mut rng).unwrap()
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let m = toy_model();
        let x = [0.5, -0.5];
        let samples: Vec<(SampleId, &[f64], usize)> = (0..5).map(|i| (i, &x[..], 1)).collect();
        let report = conflict_loss_monotonicity(&m, &samples, LossKind::Mse, "toy", 0).unwrap();
        assert!(report.is_degenerate());
        assert!(report.pairs.iter().all(|r| r.conflict.abs() < 1e-12));
        assert_eq!(report.pairs.len(), 10);
    }

    #[test]
    fn report_is_order_invariant() {
        let m = toy_model();
        let xs: Vec<[f64; 2]> = (0..9).map(|i| [i as f64 * 0.3 - 1.0, (i * i) as f64 * 0.05]).collect();
        let samples: Vec<(SampleId, &[f64], usize)> =
            xs.iter().enumerate().map(|(i, x)| (i as u64 * 2, &x[..], i % 2)).collect();
        let mut shuffled = samples.clone();
        shuffled.reverse();
        shuffled.swap(1, 4);
        let a = conflict_loss_monotonicity(&m, &samples, LossKind::Mse, "t", 1).unwrap();
        let b = conflict_loss_monotonicity(&m, &shuffled, LossKind::Mse, "t", 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs.len(), 36);
    }

    #[test]
    fn large_sets_sample_a_capped_pair_subset() {
        let m = toy_model();
        let xs: Vec<[f64; 2]> = (0..80).map(|i| [(i as f64).sin(), (i as f64 * 0.7).cos()]).collect();
        let samples: Vec<(SampleId, &[f64], usize)> =
            xs.iter().enumerate().map(|(i, x)| (i as u64, &x[..], i % 2)).collect();
        let a = conflict_loss_monotonicity(&m, &samples, LossKind::Mse, "t", 5).unwrap();
        assert_eq!(a.pairs.len() + a.skipped_pairs, MAX_SAMPLED_PAIRS);
        let b = conflict_loss_monotonicity(&m, &samples, LossKind::Mse, "t", 5).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs.iter().all(|r| r.id_i < r.id_j));
    }

    #[test]
    fn too_small_dataset_rejected() {
        let m = toy_model();
        let x = [0.0, 0.0];
        let samples: Vec<(SampleId, &[f64], usize)> = vec![(0, &x[..], 0), (1, &x[..], 1)];
        assert!(conflict_loss_monotonicity(&m, &samples, LossKind::Mse, "t", 0).is_err());
    }
}
