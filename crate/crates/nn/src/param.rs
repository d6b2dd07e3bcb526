use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Standard deviation of the zero-mean Gaussian used for every weight tensor.
pub const INIT_STD: f64 = 0.02;

/// A named trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    name: String,
    shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![v; n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: Vec<usize>,
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(mean, std).expect("valid gaussian parameters");
        let mut p = Self::filled(name, shape, T::zero());
        for v in &mut p.value {
            *v = T::from_f64_lossy(normal.sample(rng));
        }
        p
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Uniform access to the parameters of a network, in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
