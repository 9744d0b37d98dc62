//! Perturbation uncertainty: the entropy of the mean prediction over `G`
//! multiplicative feature-map perturbations drawn from `U[-γ, γ]`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::math::{self, EntropyMode, Probability};
use crate::model::{Head, Mlp};
use crate::{Error, Result, SampleId, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyConfig<T> {
    /// Number of perturbation draws `G`.
    pub draws: usize,
    /// Perturbation half-range `γ`.
    pub half_range: T,
    pub seed: u64,
    pub entropy_mode: EntropyMode,
}

impl<T: Scalar> Default for UncertaintyConfig<T> {
    fn default() -> Self {
        Self {
            draws: 8,
            half_range: T::lit(0.3),
            seed: 0,
            entropy_mode: EntropyMode::OneSided,
        }
    }
}

impl<T: Scalar> UncertaintyConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::Config("uncertainty draws must be ≥ 1".into()));
        }
        if !(self.half_range >= T::zero()) || !self.half_range.is_finite() {
            return Err(Error::Config(format!(
                "perturbation half-range must be finite and ≥ 0, got {}",
                self.half_range
            )));
        }
        Ok(())
    }
}

/// RNG stream for one sample in one scoring round.
///
/// The key is the pair `(seed, round)`; the sample id selects an independent
/// ChaCha stream, so scores do not depend on scoring order.
pub fn sample_stream(seed: u64, round: u64, id: SampleId) -> ChaCha8Rng {
    let key = seed ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(id);
    rng
}

/// One perturbation vector with entries i.i.d. in `[-γ, γ]`.
pub fn sample_perturbation<T: Scalar, R: Rng + ?Sized>(dim: usize, half_range: T, rng: &mut R) -> Vec<T> {
    (0..dim)
        .map(|_| {
            let u: f64 = rng.gen();
            half_range * T::lit(2.0 * u - 1.0)
        })
        .collect()
}

/// `u = H(mean_g ŷ^g)`; for softmax heads the entropy is summed over classes.
pub fn estimate_uncertainty<T: Scalar, R: Rng + ?Sized>(
    model: &Mlp<T>,
    x: &[T],
    cfg: &UncertaintyConfig<T>,
    rng: &mut R,
) -> Result<T> {
    cfg.validate()?;
    let mut mean = vec![T::zero(); model.out_dim()];
    for _ in 0..cfg.draws {
        let t = sample_perturbation(model.hidden_dim(), cfg.half_range, rng);
        let trace = model.forward(x, Some(&t))?;
        for (m, &p) in mean.iter_mut().zip(&trace.prediction) {
            *m = *m + p;
        }
    }
    let g = T::from_usize_lossy(cfg.draws);
    mean.iter_mut().for_each(|m| *m = *m / g);

    match model.head() {
        Head::Sigmoid => {
            let p = Probability::new(mean[0].max(T::zero()).min(T::one()))?;
            Ok(math::entropy_with(cfg.entropy_mode, p))
        }
        Head::Softmax => math::distribution_entropy(&mean),
    }
}

/// Scores every `(id, features)` pair; output is keyed and ordered by id.
pub fn batch_score_uncertainty<'a, T, I>(
    model: &Mlp<T>,
    samples: I,
    cfg: &UncertaintyConfig<T>,
    round: u64,
) -> Result<BTreeMap<SampleId, T>>
where
    T: Scalar,
    I: IntoIterator<Item = (SampleId, &'a [T])>,
{
    cfg.validate()?;
    let items: Vec<(SampleId, &[T])> = samples.into_iter().collect();
    if items.is_empty() {
        return Err(Error::Data("cannot score an empty dataset".into()));
    }
    let scored: Result<Vec<(SampleId, T)>> = items
        .par_iter()
        .map(|&(id, x)| {
            let mut rng = sample_stream(cfg.seed, round, id);
            estimate_uncertainty(model, x, cfg, &mut rng).map(|u| (id, u))
        })
        .collect();
    let scored = scored?;
    let mut out = BTreeMap::new();
    for (id, u) in scored {
        if out.insert(id, u).is_some() {
            return Err(Error::Data(format!("duplicate sample id {id}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{loss_based_uncertainty, LossKind};
    use crate::model::Activation;

    fn model(seed: u64) -> Mlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::init(3, 6, 2, Activation::Tanh, Head::Sigmoid, &mut rng).unwrap()
    }

    #[test]
    fn zero_range_gives_zero_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_perturbation(5, 0.0_f64, &mut rng);
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn draws_stay_in_range_and_centre_on_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_perturbation(100_000, 0.3_f64, &mut rng);
        assert!(t.iter().all(|&v| (-0.3..=0.3).contains(&v)));
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn zero_range_equals_unperturbed_entropy() {
        let m = model(2);
        let x = [0.4, -0.3, 1.0];
        let yhat = m.forward(&x, None).unwrap().positive_probability();
        for draws in [1, 3, 8, 17] {
            let cfg = UncertaintyConfig { draws, half_range: 0.0, ..Default::default() };
            let u = estimate_uncertainty(&m, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert!((u - math::entropy(yhat)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_range_matches_loss_based_uncertainty() {
        let m = model(4);
        let x = [1.0, 0.5, -0.5];
        let cfg = UncertaintyConfig { half_range: 0.0, ..Default::default() };
        let u = estimate_uncertainty(&m, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for y in 0..=1 {
            let l = m.sample_loss(&x, y, LossKind::Mse).unwrap();
            let lu = loss_based_uncertainty(LossKind::Mse, y, l).unwrap();
            assert!((u - lu).abs() < 1e-10);
        }
    }

    #[test]
    fn output_independent_of_features_ignores_perturbation() {
        let m = Mlp::from_parts(
            vec![0.7, -0.2, 0.1, 0.9],
            vec![0.1, 0.2],
            vec![0.0, 0.0],
            vec![0.4],
            2,
            Activation::Tanh,
            Head::Sigmoid,
        )
        .unwrap();
        let expected = math::entropy(math::sigmoid(0.4_f64));
        for gamma in [0.0, 0.3, 0.9] {
            let cfg = UncertaintyConfig { half_range: gamma, ..Default::default() };
            let u = estimate_uncertainty(&m, &[1.0, 2.0], &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert!((u - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn uncertainty_is_non_negative() {
        let m = model(6);
        let cfg = UncertaintyConfig::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..100 {
            let x = [i as f64 * 0.1 - 5.0, 0.3, -0.2];
            assert!(estimate_uncertainty(&m, &x, &cfg, &mut rng).unwrap() >= 0.0);
        }
    }

    #[test]
    fn softmax_uses_shannon_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m: Mlp<f64> = Mlp::init(2, 3, 2, Activation::Tanh, Head::Softmax, &mut rng).unwrap();
        let x = [0.2, 0.9];
        let cfg = UncertaintyConfig { half_range: 0.0, ..Default::default() };
        let u = estimate_uncertainty(&m, &x, &cfg, &mut rng).unwrap();
        let p = m.forward(&x, None).unwrap().prediction;
        let h: f64 = p.iter().map(|&v| -v * v.ln()).sum();
        assert!((u - h).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        let m = model(0);
        let cfg = UncertaintyConfig { draws: 0, ..Default::default() };
        assert!(estimate_uncertainty(&m, &[0.0; 3], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let cfg = UncertaintyConfig { half_range: -0.1, ..Default::default() };
        assert!(estimate_uncertainty(&m, &[0.0; 3], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn batch_scoring_is_deterministic_and_order_free() {
        let m = model(8);
        let xs: Vec<[f64; 3]> = (0..20).map(|i| [i as f64 * 0.1, -0.2, 0.5]).collect();
        let cfg = UncertaintyConfig { seed: 42, ..Default::default() };
        let forward: Vec<(SampleId, &[f64])> =
            xs.iter().enumerate().map(|(i, x)| (i as u64, &x[..])).collect();
        let mut reversed = forward.clone();
        reversed.reverse();
        let a = batch_score_uncertainty(&m, forward.clone(), &cfg, 0).unwrap();
        let b = batch_score_uncertainty(&m, forward, &cfg, 0).unwrap();
        let c = batch_score_uncertainty(&m, reversed, &cfg, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn singleton_matches_direct_estimate() {
        let m = model(9);
        let x = [0.3, 0.3, 0.3];
        let cfg = UncertaintyConfig { seed: 5, ..Default::default() };
        let map = batch_score_uncertainty(&m, [(17, &x[..])], &cfg, 2).unwrap();
        let direct = estimate_uncertainty(&m, &x, &cfg, &mut sample_stream(5, 2, 17)).unwrap();
        assert_eq!(map[&17], direct);
    }

    #[test]
    fn duplicated_sample_differs_only_through_stream() {
        let m = model(10);
        let x = [0.9, -0.9, 0.1];
        let cfg = UncertaintyConfig { seed: 1, ..Default::default() };
        let map = batch_score_uncertainty(&m, [(0, &x[..]), (1, &x[..])], &cfg, 0).unwrap();
        assert_ne!(map[&0], map[&1]);
        let shared_a = estimate_uncertainty(&m, &x, &cfg, &mut sample_stream(1, 0, 0)).unwrap();
        let shared_b = estimate_uncertainty(&m, &x, &cfg, &mut sample_stream(1, 0, 0)).unwrap();
        assert_eq!(shared_a, shared_b);
        assert_eq!(shared_a, map[&0]);
    }

    #[test]
    fn rounds_resample_perturbations() {
        let m = model(11);
        let x = [0.5, 0.5, 0.5];
        let cfg = UncertaintyConfig { seed: 3, ..Default::default() };
        let r0 = batch_score_uncertainty(&m, [(0, &x[..])], &cfg, 0).unwrap();
        let r1 = batch_score_uncertainty(&m, [(0, &x[..])], &cfg, 1).unwrap();
        assert_ne!(r0[&0], r1[&0]);
    }

    #[test]
    fn more_draws_reduce_variance() {
        let m = model(12);
        let x = [1.2, -0.7, 0.4];
        let variance = |draws: usize| {
            let cfg = UncertaintyConfig { draws, half_range: 0.3, seed: 0, ..Default::default() };
            let us: Vec<f64> = (0..200)
                .map(|r| estimate_uncertainty(&m, &x, &cfg, &mut sample_stream(99, r, 0)).unwrap())
                .collect();
            let mean = us.iter().sum::<f64>() / us.len() as f64;
            us.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / us.len() as f64
        };
        let (v2, v32) = (variance(2), variance(32));
        assert!(v32 < v2, "var(G=32)={v32} var(G=2)={v2}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = model(0);
        let cfg = UncertaintyConfig::<f64>::default();
        let empty: Vec<(SampleId, &[f64])> = Vec::new();
        assert!(batch_score_uncertainty(&m, empty, &cfg, 0).is_err());
    }
}
