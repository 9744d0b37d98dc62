//! Scalar numerics shared by every other module: the entropy function,
//! sigmoid, MSE/CE losses with their inverses, the loss-based uncertainty and
//! a central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// A value known to lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Probability<T>(T);

impl<T: Scalar> Probability<T> {
    pub fn new(value: T) -> Result<Self> {
        if value >= T::zero() && value <= T::one() {
            Ok(Self(value))
        } else {
            Err(Error::Domain(format!("probability {value} outside [0, 1]")))
        }
    }

    #[inline]
    pub fn value(self) -> T {
        self.0
    }

    /// `1 - p`.
    #[inline]
    pub fn complement(self) -> Self {
        Self(T::one() - self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Ce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "ce" => Ok(LossKind::Ce),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// A non-negative loss tagged with the function that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T> {
    value: T,
    kind: LossKind,
}

impl<T: Scalar> LossValue<T> {
    pub fn new(kind: LossKind, value: T) -> Result<Self> {
        if value.is_nan() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        if value < T::zero() {
            return Err(Error::Domain(format!("negative loss {value}")));
        }
        Ok(Self { value, kind })
    }

    #[inline]
    pub fn value(self) -> T {
        self.value
    }

    #[inline]
    pub fn kind(self) -> LossKind {
        self.kind
    }
}

/// Which entropy form the uncertainty estimator uses.
///
/// `OneSided` is `-p ln p`; `Binary` is the symmetric
/// `-p ln p - (1-p) ln(1-p)`, kept for sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    #[default]
    OneSided,
    Binary,
}

impl std::str::FromStr for EntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "one_sided" | "onesided" => Ok(EntropyMode::OneSided),
            "binary" => Ok(EntropyMode::Binary),
            other => Err(Error::Config(format!("unknown entropy mode `{other}`"))),
        }
    }
}

pub(crate) fn check_binary_label(y: usize) -> Result<()> {
    if y <= 1 {
        Ok(())
    } else {
        Err(Error::Domain(format!("label {y} is not binary")))
    }
}

/// `x ln x` with the `0 ln 0 = 0` convention.
#[inline]
fn xlnx<T: Scalar>(x: T) -> T {
    if x == T::zero() {
        T::zero()
    } else {
        x * x.ln()
    }
}

/// `H(p) = -p ln p`, zero at both `p = 0` and `p = 1`.
pub fn entropy<T: Scalar>(p: Probability<T>) -> T {
    let h = -xlnx(p.value());
    // -0.0 at p = 1
    h.max(T::zero())
}

pub fn entropy_with<T: Scalar>(mode: EntropyMode, p: Probability<T>) -> T {
    match mode {
        EntropyMode::OneSided => entropy(p),
        EntropyMode::Binary => entropy(p) + entropy(p.complement()),
    }
}

/// Shannon entropy `Σ -p_c ln p_c` of a distribution.
pub fn distribution_entropy<T: Scalar>(p: &[T]) -> Result<T> {
    let mut h = T::zero();
    for &pc in p {
        h = h + entropy(Probability::new(pc)?);
    }
    Ok(h)
}

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid<T: Scalar>(z: T) -> Probability<T> {
    let one = T::one();
    let v = if z >= T::zero() {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    };
    Probability(v)
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-sample binary loss.
///
/// `MSE = (ŷ - y)²`, `CE = -[y ln ŷ + (1 - y) ln(1 - ŷ)]`.
pub fn loss<T: Scalar>(kind: LossKind, y: usize, yhat: Probability<T>) -> Result<LossValue<T>> {
    check_binary_label(y)?;
    let p = yhat.value();
    let target = T::from_usize_lossy(y);
    let value = match kind {
        LossKind::Mse => (p - target).powi(2),
        LossKind::Ce => {
            // Only the term belonging to the label contributes.
            let q = if y == 1 { p } else { T::one() - p };
            if q == T::zero() {
                return Err(Error::Domain(format!(
                    "cross entropy undefined at prediction {p} for label {y}"
                )));
            }
            -q.ln()
        }
    };
    LossValue::new(kind, value.max(T::zero()))
}

/// Recovers the prediction that produced loss `l` for label `y`, taking the
/// root on the label's side of `[0, 1]`.
pub fn inverse_loss<T: Scalar>(kind: LossKind, y: usize, l: T) -> Result<Probability<T>> {
    check_binary_label(y)?;
    if l.is_nan() || l < T::zero() {
        return Err(Error::Range(format!("loss {l} has no preimage")));
    }
    let distance = match kind {
        LossKind::Mse => {
            if l > T::one() {
                return Err(Error::Range(format!(
                    "MSE loss {l} exceeds 1, no prediction in [0, 1]"
                )));
            }
            l.sqrt()
        }
        LossKind::Ce => T::one() - (-l).exp(),
    };
    let p = if y == 1 { T::one() - distance } else { distance };
    Probability::new(p).map_err(|_| Error::Range(format!("root {p} outside [0, 1]")))
}

/// `lu = H(L⁻¹(y, l))`.
pub fn loss_based_uncertainty<T: Scalar>(kind: LossKind, y: usize, l: T) -> Result<T> {
    inverse_loss(kind, y, l).map(entropy)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn finite_difference_gradient<T: Scalar, F>(f: F, x: T, h: T) -> T
where
    F: Fn(T) -> T,
{
    (f(x + h) - f(x - h)) / (h + h)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub(crate) fn median<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / T::lit(2.0)
    })
}
