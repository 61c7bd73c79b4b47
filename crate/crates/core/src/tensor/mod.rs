//! Dense row-major tensors and the differentiable primitives built on them.
//!
//! There is no autodiff tape here: every op returns its output together with
//! a context object whose `backward` method is the hand-written
//! vector-Jacobian product. Models wire those contexts into fixed chains.
//!
//! Precision policy: training runs in `f32`, gradient checking in `f64`.
//! Transcendentals go through `libm` so results do not depend on the host
//! libm.

pub mod adam;
pub mod gradcheck;
pub mod ops;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Element dtype codes shared with the on-disk tensor format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    I32 = 3,
}

/// Floating scalar the numeric kernels are generic over.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn minimum(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn ln_1p(self) -> Self {
        libm::log1pf(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn ln_1p(self) -> Self {
        libm::log1p(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor::new",
                detail: format!("shape {:?} does not fit {} elements", shape, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::ZERO; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    /// Rank-1 singleton; scalars on disk are stored as shape `[1]`.
    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Normal(0, std) entries; sampling happens in f64 so the stream is
    /// identical for every precision.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(standard_normal(rng) * std))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|x| x.to_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|x| x.to_f64() as f32)
    }

    /// Offset of `(row, col, chan)` in a rank-3 tensor.
    #[inline]
    pub fn at3(&self, r: usize, c: usize, k: usize) -> usize {
        (r * self.shape[1] + c) * self.shape[2] + k
    }

    #[inline]
    pub fn get3(&self, r: usize, c: usize, k: usize) -> F {
        self.data[self.at3(r, c, k)]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> usize {
        r * self.shape[1] + c
    }

    /// Every-op invariant: outputs must stay finite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

/// Trainable tensor: value plus gradient plus ADAM moment state, all shape
/// locked together.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub m1: Tensor<F>,
    pub m2: Tensor<F>,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(shape.clone()),
            m1: Tensor::zeros(shape.clone()),
            m2: Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::ZERO);
    }
}

/// Per-scene gradients, accumulated into the store in name order.
pub type GradMap<F> = BTreeMap<String, Tensor<F>>;

/// Named parameter store: every trainable tensor of a model plus
/// non-trainable buffers (batch-norm running stats, the random baseline's
/// label prior). BTreeMap keeps all iteration deterministic.
#[derive(Clone, Debug, Default)]
pub struct ModelParams<F> {
    pub params: BTreeMap<String, Parameter<F>>,
    pub buffers: BTreeMap<String, Tensor<F>>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<F: Scalar> ModelParams<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) {
        self.params.insert(name.to_string(), Parameter::new(value));
    }

    pub fn get(&self, name: &str) -> &Parameter<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Parameter<F> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor<F> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Gradients are zeroed at the start of each mini-batch.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.zero_grad();
        }
    }

    /// Fixed-order reduction of per-scene gradients.
    pub fn accumulate(&mut self, grads: &GradMap<F>) {
        for (name, g) in grads {
            let p = self.get_mut(name);
            p.grad.add_assign(g);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

/// Add `g` into `map[name]`, creating a zero tensor on first touch.
pub fn accumulate_grad<F: Scalar>(map: &mut GradMap<F>, name: &str, g: Tensor<F>) {
    match map.get_mut(name) {
        Some(t) => t.add_assign(&g),
        None => {
            map.insert(name.to_string(), g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn parameter_state_shapes_follow_value() {
        let p = Parameter::new(Tensor::<f32>::zeros(vec![3, 4]));
        assert_eq!(p.grad.shape(), &[3, 4]);
        assert_eq!(p.m1.shape(), &[3, 4]);
        assert_eq!(p.m2.shape(), &[3, 4]);
    }

    #[test]
    fn ensure_finite_rejects_nan() {
        let mut t = Tensor::<f32>::zeros(vec![2]);
        assert!(t.ensure_finite("test").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(t.ensure_finite("test").is_err());
    }

    #[test]
    fn scalar_tensor_is_rank_one() {
        let t = Tensor::<f64>::scalar(1.0);
        assert_eq!(t.shape(), &[1]);
    }
}
