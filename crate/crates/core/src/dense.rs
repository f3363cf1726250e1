//! Fully connected layers, inverted dropout, and the softmax/cross-entropy head.

use crate::error::{invalid, Error, Result, Shape};
use crate::numerics::{selu, selu_derivative, Matrix, Scalar, SeededRng};

/// Log-probabilities are clamped from below at this value.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Selu,
    /// No nonlinearity; used for the logits that feed softmax.
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Selu => "selu",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "selu" => Some(Activation::Selu),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// `activation(W·x + b)` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseParams<T> {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseParams {
            w: Matrix::zeros(output, input),
            b: vec![T::zero(); output],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        DenseParams {
            w: Matrix::from_fn(output, input, |_, _| T::lit(rng.uniform(-limit, limit))),
            b: vec![T::zero(); output],
            activation,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w.cols()
    }

    pub fn output_size(&self) -> usize {
        self.w.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.len() != self.w.rows() {
            return Err(Error::DimensionMismatch {
                context: "dense bias",
                left: self.w.shape(),
                right: Shape(self.b.len(), 1),
            });
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size(), self.output_size(), self.activation)
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        vec![self.w.data(), &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.w.data_mut(), &mut self.b]
    }
}

/// Input and pre-activation kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCache<T> {
    pub x: Vec<T>,
    pub z: Vec<T>,
}

pub fn dense_forward<T: Scalar>(params: &DenseParams<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(dense_forward_cached(params, x)?.0)
}

pub fn dense_forward_cached<T: Scalar>(params: &DenseParams<T>, x: &[T]) -> Result<(Vec<T>, DenseCache<T>)> {
    let mut z = params.w.matvec(x)?;
    for (zi, &bi) in z.iter_mut().zip(&params.b) {
        *zi = *zi + bi;
    }
    let out = match params.activation {
        Activation::Selu => z.iter().map(|&v| selu(v)).collect(),
        Activation::Linear => z.clone(),
    };
    Ok((out, DenseCache { x: x.to_vec(), z }))
}

/// Returns parameter gradients and the gradient with respect to the input.
pub fn dense_backward<T: Scalar>(
    params: &DenseParams<T>,
    cache: &DenseCache<T>,
    grad_out: &[T],
) -> Result<(DenseParams<T>, Vec<T>)> {
    if cache.x.len() != params.input_size() || cache.z.len() != params.output_size() {
        return Err(Error::DimensionMismatch {
            context: "dense_backward cache vs params",
            left: params.w.shape(),
            right: Shape(cache.z.len(), cache.x.len()),
        });
    }
    if grad_out.len() != params.output_size() {
        return Err(Error::DimensionMismatch {
            context: "dense_backward upstream gradient",
            left: Shape(params.output_size(), 1),
            right: Shape(grad_out.len(), 1),
        });
    }
    let dz: Vec<T> = match params.activation {
        Activation::Selu => grad_out
            .iter()
            .zip(&cache.z)
            .map(|(&g, &z)| g * selu_derivative(z))
            .collect(),
        Activation::Linear => grad_out.to_vec(),
    };
    let mut grads = params.zeros_like();
    grads.w.add_outer(&dz, &cache.x);
    grads.b.copy_from_slice(&dz);
    let mut dx = vec![T::zero(); params.input_size()];
    params.w.add_transpose_matvec(&dz, &mut dx);
    Ok((grads, dx))
}

/// Inverted-dropout mask: entries are 0 or `1 / keep_probability`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    pub keep_probability: T,
    pub mask: Vec<T>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn identity(len: usize) -> Self {
        DropoutMask {
            keep_probability: T::one(),
            mask: vec![T::one(); len],
        }
    }

    pub fn draw(len: usize, rate: f64, rng: &mut SeededRng) -> Result<Self> {
        check_rate(rate)?;
        if rate == 0.0 {
            return Ok(Self::identity(len));
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let mask = (0..len)
            .map(|_| if rng.bernoulli(rate) { T::zero() } else { scale })
            .collect();
        Ok(DropoutMask {
            keep_probability: T::lit(keep),
            mask,
        })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(&self.mask).map(|(&v, &m)| v * m).collect()
    }

    /// Backward pass: the same elementwise scaling.
    pub fn backward(&self, grad: &[T]) -> Vec<T> {
        self.apply(grad)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Training mode zeroes each entry with probability `rate` and scales the
/// survivors by `1/(1 − rate)`; inference mode is the identity.
pub fn apply_dropout<T: Scalar>(
    x: &[T],
    rate: f64,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(Vec<T>, DropoutMask<T>)> {
    check_rate(rate)?;
    let mask = if training {
        DropoutMask::draw(x.len(), rate, rng)?
    } else {
        DropoutMask::identity(x.len())
    };
    Ok((mask.apply(x), mask))
}

/// `−Σ y_i ln(max(p_i, 1e−12))`; for a one-hot target this is `−ln p_true`.
pub fn cross_entropy<T: Scalar>(probabilities: &[T], onehot: &[T]) -> Result<T> {
    if probabilities.len() != onehot.len() {
        return Err(Error::DimensionMismatch {
            context: "cross_entropy",
            left: Shape(probabilities.len(), 1),
            right: Shape(onehot.len(), 1),
        });
    }
    let floor = T::lit(PROBABILITY_FLOOR);
    let mut loss = T::zero();
    for (&p, &y) in probabilities.iter().zip(onehot) {
        if y != T::zero() {
            loss = loss - y * p.max(floor).ln();
        }
    }
    Ok(loss)
}

/// Gradient of softmax followed by cross-entropy, taken at the logits.
pub fn softmax_cross_entropy_grad<T: Scalar>(probabilities: &[T], onehot: &[T]) -> Vec<T> {
    probabilities.iter().zip(onehot).map(|(&p, &y)| p - y).collect()
}
