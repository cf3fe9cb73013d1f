//! Minimal deterministic NN core: f64 tensors, hand-written forward and
//! backward passes, and Adam. Everything is seeded and single-writer, so
//! repeated runs are bit-identical — a contract the training and
//! acceptance suites rely on.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod lstm;
pub mod ops;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// A named parameter array with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let value = ArrayD::zeros(IxDyn(shape));
        let grad = ArrayD::zeros(IxDyn(shape));
        Param { name: name.into(), value, grad }
    }

    /// He-uniform init: U(−√(6/fan_in), √(6/fan_in)) times `scale`.
    pub fn he_uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        use rand::Rng;
        let bound = (6.0 / fan_in as f64).sqrt() * scale;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        let grad = ArrayD::zeros(IxDyn(shape));
        Param { name: name.into(), value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters.
pub trait ParamSet {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
