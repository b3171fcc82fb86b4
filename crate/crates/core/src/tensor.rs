//! Dense parameter tensors and the handful of kernels the fusion heads need.
//!
//! Everything is row-major `Vec<T>` storage. Weight matrices of affine layers
//! are stored `[out, in]`, matching the checkpoint declaration order.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Floating point type the heads are generic over. `f32` is the training
/// default; `f64` is used for gradient checks.
pub trait Scalar:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// A named parameter (or gradient) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Self::zeros(other.name.clone(), &other.shape)
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<R: Rng>(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|v| *v = T::of(dist.sample(rng)));
        t
    }

    pub fn normal<R: Rng>(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|v| *v = T::of(dist.sample(rng)));
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSlot {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn build<T: Scalar, R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        match self.init {
            Init::FanIn(fan_in) => Tensor::fan_in_uniform(self.name.clone(), &self.shape, fan_in, rng),
            Init::Normal(std) => Tensor::normal(self.name.clone(), &self.shape, std, rng),
            Init::Zeros => Tensor::zeros(self.name.clone(), &self.shape),
            Init::Ones => Tensor::filled(self.name.clone(), &self.shape, T::one()),
        }
    }
}

/// Checks that `tensors` match `layout` by name and shape.
pub fn check_layout<T>(layout: &[ParamSlot], tensors: &[Tensor<T>]) -> Result<(), String> {
    if layout.len() != tensors.len() {
        return Err(format!("expected {} tensors, found {}", layout.len(), tensors.len()));
    }
    for (slot, t) in layout.iter().zip(tensors) {
        if slot.name != t.name {
            return Err(format!("expected tensor `{}`, found `{}`", slot.name, t.name));
        }
        if slot.shape != t.shape || t.data.len() != slot.shape.iter().product::<usize>() {
            return Err(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                t.name, t.shape, slot.shape
            ));
        }
    }
    Ok(())
}

/// Sum of element counts.
pub fn parameter_count<T>(tensors: &[Tensor<T>]) -> usize {
    tensors.iter().map(|t| t.data.len()).sum()
}

pub fn zeros_like_all<T: Scalar>(tensors: &[Tensor<T>]) -> Vec<Tensor<T>> {
    tensors.iter().map(Tensor::zeros_like).collect()
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<T: Scalar>(acc: &mut [Tensor<T>], other: &[Tensor<T>]) {
    debug_assert_eq!(acc.len(), other.len());
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.data.iter_mut().zip(&o.data) {
            *x += *y;
        }
    }
}

pub fn scale_all<T: Scalar>(tensors: &mut [Tensor<T>], factor: T) {
    for t in tensors {
        t.data.iter_mut().for_each(|v| *v *= factor);
    }
}

pub fn all_finite<T: Scalar>(tensors: &[Tensor<T>]) -> bool {
    tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
}

/// Dot product with eight independent partial sums, which lets the
/// compiler vectorize it.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ar.iter().zip(br) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y = W x + b` with `W` stored `[out, in]`.
pub fn affine<T: Scalar>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let in_dim = x.len();
    debug_assert_eq!(weight.len(), bias.len() * in_dim);
    bias.iter()
        .zip(weight.chunks_exact(in_dim.max(1)))
        .map(|(&b, row)| b + dot(row, x))
        .collect()
}

/// Backward of [`affine`]: accumulates into `d_weight`, `d_bias`, and returns `dx`.
pub fn affine_backward<T: Scalar>(
    weight: &[T],
    x: &[T],
    dy: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    let in_dim = x.len();
    let mut dx = vec![T::zero(); in_dim];
    for (o, &g) in dy.iter().enumerate() {
        d_bias[o] += g;
        if g == T::zero() {
            continue;
        }
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let drow = &mut d_weight[o * in_dim..(o + 1) * in_dim];
        for ((dw, d), (&w, &xi)) in drow.iter_mut().zip(dx.iter_mut()).zip(row.iter().zip(x)) {
            *dw += g * xi;
            *d += g * w;
        }
    }
    dx
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_sum = sum.ln() + max;
    let loss = log_sum - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&z| (z - log_sum).exp()).collect();
    grad[label] -= T::one();
    (loss, grad)
}
