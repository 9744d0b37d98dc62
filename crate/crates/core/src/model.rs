//! Two-layer perceptron with hand-written backpropagation.
//!
//! Parameters live in one flat buffer laid out as `[w1 | b1 | w2 | b2]`, with
//! both weight matrices row-major. [`Gradient`] uses the same layout, so an
//! SGD step is a single axpy over the buffer.
//!
//! A perturbation `t` can be injected at the hidden feature map: the forward
//! pass then uses `f ⊙ (1 + t)` in place of `f`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{self, check_binary_label, LossKind, Probability};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative<T: Scalar>(self, pre: T, out: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - out * out,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[default]
    Sigmoid,
    Softmax,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Head::Sigmoid),
            "softmax" => Ok(Head::Softmax),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

/// Everything a single forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// Hidden pre-activation `W1 x + b1`.
    pub pre_activation: Vec<T>,
    /// Hidden feature map after activation and (optional) perturbation.
    pub features: Vec<T>,
    /// Pre-head latent `W2 f + b2`.
    pub latent: Vec<T>,
    /// Head output: one probability for sigmoid, a distribution for softmax.
    pub prediction: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Probability assigned to class 1.
    pub fn positive_probability(&self) -> Probability<T> {
        let p = match self.prediction.len() {
            1 => self.prediction[0],
            _ => self.prediction[1],
        };
        Probability::new(p.max(T::zero()).min(T::one())).expect("clamped")
    }

    /// Arg-max class.
    pub fn predicted_class(&self) -> usize {
        if self.prediction.len() == 1 {
            usize::from(self.prediction[0] >= T::lit(0.5))
        } else {
            self.prediction
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (c, &p)| {
                    if p > best.1 {
                        (c, p)
                    } else {
                        best
                    }
                })
                .0
        }
    }
}

/// Flattened parameter gradient in [`Mlp`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T>(Vec<T>);

impl<T: Scalar> Gradient<T> {
    pub fn from_vec(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scaled(mut self, factor: T) -> Self {
        self.0.iter_mut().for_each(|v| *v = *v * factor);
        self
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == T::zero())
    }
}

/// `input → hidden (activation) → out (head)` classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    input_dim: usize,
    hidden_dim: usize,
    out_dim: usize,
    activation: Activation,
    head: Head,
    params: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    fn out_dim_for(head: Head, classes: usize) -> Result<usize> {
        match head {
            Head::Sigmoid if classes == 2 => Ok(1),
            Head::Sigmoid => Err(Error::Config(format!(
                "sigmoid head is binary, got {classes} classes"
            ))),
            Head::Softmax if classes >= 2 => Ok(classes),
            Head::Softmax => Err(Error::Config("softmax head needs ≥ 2 classes".into())),
        }
    }

    fn param_count(input_dim: usize, hidden_dim: usize, out_dim: usize) -> usize {
        hidden_dim * input_dim + hidden_dim + out_dim * hidden_dim + out_dim
    }

    /// All-zero model.
    pub fn zeros(
        input_dim: usize,
        hidden_dim: usize,
        classes: usize,
        activation: Activation,
        head: Head,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let out_dim = Self::out_dim_for(head, classes)?;
        Ok(Self {
            input_dim,
            hidden_dim,
            out_dim,
            activation,
            head,
            params: vec![T::zero(); Self::param_count(input_dim, hidden_dim, out_dim)],
        })
    }

    /// Uniform initialization in `[-1/√fan_in, 1/√fan_in]` per layer.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        classes: usize,
        activation: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(input_dim, hidden_dim, classes, activation, head)?;
        let first = hidden_dim * input_dim + hidden_dim;
        let bound_in = 1.0 / (input_dim as f64).sqrt();
        let bound_hidden = 1.0 / (hidden_dim as f64).sqrt();
        for (i, p) in model.params.iter_mut().enumerate() {
            let bound = if i < first { bound_in } else { bound_hidden };
            *p = T::lit(rng.gen_range(-bound..=bound));
        }
        Ok(model)
    }

    /// Builds a model from explicit parameter arrays.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        w1: Vec<T>,
        b1: Vec<T>,
        w2: Vec<T>,
        b2: Vec<T>,
        input_dim: usize,
        activation: Activation,
        head: Head,
    ) -> Result<Self> {
        let hidden_dim = b1.len();
        let out_dim = b2.len();
        let expect = |what, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    what,
                    expected,
                    actual,
                })
            }
        };
        expect("w1", hidden_dim * input_dim, w1.len())?;
        expect("w2", out_dim * hidden_dim, w2.len())?;
        match head {
            Head::Sigmoid => expect("b2", 1, out_dim)?,
            Head::Softmax if out_dim < 2 => expect("b2", 2, out_dim)?,
            Head::Softmax => {}
        }
        let mut params = w1;
        params.extend(b1);
        params.extend(w2);
        params.extend(b2);
        if let Some(bad) = params.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {bad}")));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            out_dim,
            activation,
            head,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn classes(&self) -> usize {
        match self.head {
            Head::Sigmoid => 2,
            Head::Softmax => self.out_dim,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden_dim * self.input_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.out_dim * self.hidden_dim;
        [w1, b1, w2, b2]
    }

    pub fn w1(&self) -> &[T] {
        let [w1, b1, ..] = self.offsets();
        &self.params[w1..b1]
    }

    pub fn b1(&self) -> &[T] {
        let [_, b1, w2, _] = self.offsets();
        &self.params[b1..w2]
    }

    pub fn w2(&self) -> &[T] {
        let [_, _, w2, b2] = self.offsets();
        &self.params[w2..b2]
    }

    pub fn b2(&self) -> &[T] {
        let [.., b2] = self.offsets();
        &self.params[b2..]
    }

    fn head_output(&self, latent: &[T]) -> Vec<T> {
        match self.head {
            Head::Sigmoid => vec![math::sigmoid(latent[0]).value()],
            Head::Softmax => math::softmax(latent),
        }
    }

    /// Forward pass, optionally perturbing the hidden feature map.
    pub fn forward(&self, x: &[T], perturbation: Option<&[T]>) -> Result<ForwardTrace<T>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        if let Some(t) = perturbation {
            if t.len() != self.hidden_dim {
                return Err(Error::DimensionMismatch {
                    what: "perturbation",
                    expected: self.hidden_dim,
                    actual: t.len(),
                });
            }
        }
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());

        let pre_activation: Vec<T> = (0..self.hidden_dim)
            .map(|h| {
                let row = &w1[h * self.input_dim..(h + 1) * self.input_dim];
                row.iter().zip(x).fold(b1[h], |acc, (&w, &xi)| acc + w * xi)
            })
            .collect();
        let mut features: Vec<T> = pre_activation
            .iter()
            .map(|&v| self.activation.apply(v))
            .collect();
        if let Some(t) = perturbation {
            for (f, &ti) in features.iter_mut().zip(t) {
                *f = *f * (T::one() + ti);
            }
        }
        let latent: Vec<T> = (0..self.out_dim)
            .map(|o| {
                let row = &w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
                row.iter().zip(&features).fold(b2[o], |acc, (&w, &f)| acc + w * f)
            })
            .collect();
        let prediction = self.head_output(&latent);
        Ok(ForwardTrace {
            pre_activation,
            features,
            latent,
            prediction,
        })
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y < self.classes() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "label {y} out of range for {} classes",
                self.classes()
            )))
        }
    }

    /// Loss of an already computed prediction.
    pub fn loss_of(&self, trace: &ForwardTrace<T>, y: usize, kind: LossKind) -> Result<T> {
        self.check_label(y)?;
        match self.head {
            Head::Sigmoid => {
                let p = Probability::new(trace.prediction[0])?;
                math::loss(kind, y, p).map(|l| l.value())
            }
            Head::Softmax => match kind {
                LossKind::Mse => Ok(trace
                    .prediction
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| {
                        let target = if c == y { T::one() } else { T::zero() };
                        (p - target).powi(2)
                    })
                    .sum()),
                LossKind::Ce => {
                    let py = trace.prediction[y];
                    if py == T::zero() {
                        Err(Error::Domain(format!("cross entropy undefined for class {y}")))
                    } else {
                        Ok(-py.ln())
                    }
                }
            },
        }
    }

    /// Unperturbed per-sample loss.
    pub fn sample_loss(&self, x: &[T], y: usize, kind: LossKind) -> Result<T> {
        let trace = self.forward(x, None)?;
        self.loss_of(&trace, y, kind)
    }

    /// `∂L/∂z` for every latent unit, given the head output.
    pub fn latent_gradient(&self, trace: &ForwardTrace<T>, y: usize, kind: LossKind) -> Result<Vec<T>> {
        self.check_label(y)?;
        let two = T::lit(2.0);
        Ok(match self.head {
            Head::Sigmoid => {
                let p = trace.prediction[0];
                let target = T::from_usize_lossy(y);
                match kind {
                    LossKind::Mse => vec![two * (p - target) * p * (T::one() - p)],
                    LossKind::Ce => vec![p - target],
                }
            }
            Head::Softmax => {
                let p = &trace.prediction;
                match kind {
                    LossKind::Ce => p
                        .iter()
                        .enumerate()
                        .map(|(c, &pc)| if c == y { pc - T::one() } else { pc })
                        .collect(),
                    LossKind::Mse => {
                        let g: Vec<T> = p
                            .iter()
                            .enumerate()
                            .map(|(c, &pc)| {
                                let target = if c == y { T::one() } else { T::zero() };
                                two * (pc - target)
                            })
                            .collect();
                        let mean: T = p.iter().zip(&g).map(|(&pc, &gc)| pc * gc).sum();
                        p.iter().zip(&g).map(|(&pc, &gc)| pc * (gc - mean)).collect()
                    }
                }
            }
        })
    }

    /// Exact gradient of the unperturbed per-sample loss w.r.t. every parameter.
    pub fn per_sample_gradient(&self, x: &[T], y: usize, kind: LossKind) -> Result<Gradient<T>> {
        let trace = self.forward(x, None)?;
        let dz = self.latent_gradient(&trace, y, kind)?;
        Ok(self.backprop(x, &trace, &dz))
    }

    fn backprop(&self, x: &[T], trace: &ForwardTrace<T>, dz: &[T]) -> Gradient<T> {
        let [_, b1_off, w2_off, b2_off] = self.offsets();
        let mut grad = vec![T::zero(); self.params.len()];
        let w2 = self.w2();

        for (o, &dzo) in dz.iter().enumerate() {
            for (h, &f) in trace.features.iter().enumerate() {
                grad[w2_off + o * self.hidden_dim + h] = dzo * f;
            }
            grad[b2_off + o] = dzo;
        }
        for h in 0..self.hidden_dim {
            let df: T = dz
                .iter()
                .enumerate()
                .map(|(o, &dzo)| w2[o * self.hidden_dim + h] * dzo)
                .sum();
            // The training path never perturbs, so f is the activation output.
            let dh = df
                * self
                    .activation
                    .derivative(trace.pre_activation[h], trace.features[h]);
            for (i, &xi) in x.iter().enumerate() {
                grad[h * self.input_dim + i] = dh * xi;
            }
            grad[b1_off + h] = dh;
        }
        Gradient(grad)
    }

    /// `w ← w − η · mean(grads)`.
    pub fn sgd_step(&mut self, grads: &[Gradient<T>], learning_rate: T) -> Result<()> {
        if !(learning_rate > T::zero()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if grads.is_empty() {
            return Ok(());
        }
        for g in grads {
            if g.len() != self.params.len() {
                return Err(Error::DimensionMismatch {
                    what: "gradient",
                    expected: self.params.len(),
                    actual: g.len(),
                });
            }
        }
        let scale = learning_rate / T::from_usize_lossy(grads.len());
        for (k, p) in self.params.iter_mut().enumerate() {
            let total: T = grads.iter().map(|g| g.0[k]).sum();
            *p = *p - scale * total;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// `∂L/∂ŷ = 2(ŷ − y)` for the MSE loss.
pub fn grad_wrt_prediction<T: Scalar>(y: usize, yhat: Probability<T>) -> Result<T> {
    check_binary_label(y)?;
    Ok(T::lit(2.0) * (yhat.value() - T::from_usize_lossy(y)))
}

/// Closed-form `∂L/∂z` for a sigmoid head under MSE:
/// `-2ŷ(1-ŷ)²` for `y = 1` and `2ŷ²(1-ŷ)` for `y = 0`.
pub fn grad_wrt_latent<T: Scalar>(head: Head, y: usize, yhat: Probability<T>) -> Result<T> {
    if head != Head::Sigmoid {
        return Err(Error::Domain(
            "closed-form latent gradient requires a sigmoid head".into(),
        ));
    }
    check_binary_label(y)?;
    let p = yhat.value();
    let q = T::one() - p;
    let two = T::lit(2.0);
    Ok(if y == 1 { -two * p * q * q } else { two * p * p * q })
}

/// A named, row-major parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub activation: Activation,
    pub head: Head,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub parameters: Vec<NamedArray>,
}

impl<T: Scalar> Mlp<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let array = |name: &str, shape: Vec<usize>, data: &[T]| NamedArray {
            name: name.to_string(),
            shape,
            data: data.iter().map(|v| v.to_f64_lossy()).collect(),
        };
        Checkpoint {
            activation: self.activation,
            head: self.head,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            out_dim: self.out_dim,
            parameters: vec![
                array("w1", vec![self.hidden_dim, self.input_dim], self.w1()),
                array("b1", vec![self.hidden_dim], self.b1()),
                array("w2", vec![self.out_dim, self.hidden_dim], self.w2()),
                array("b2", vec![self.out_dim], self.b2()),
            ],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let arr = ckpt
                .parameters
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing `{name}`")))?;
            if arr.shape != shape {
                return Err(Error::Data(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    arr.shape
                )));
            }
            if arr.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Data(format!("`{name}` data length disagrees with shape")));
            }
            Ok(arr.data.iter().map(|&v| T::lit(v)).collect())
        };
        let (i, h, o) = (ckpt.input_dim, ckpt.hidden_dim, ckpt.out_dim);
        Self::from_parts(
            get("w1", &[h, i])?,
            get("b1", &[h])?,
            get("w2", &[o, h])?,
            get("b2", &[o])?,
            i,
            ckpt.activation,
            ckpt.head,
        )
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}
