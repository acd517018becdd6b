//! Named trainable parameters and the shared registry used for weight tying.

use std::cell::RefCell;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a parameter is filled by `init_parameters`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    /// Gaussian(0, sqrt(2/fan_in)).
    HeNormal { fan_in: usize },
    Zero,
    One,
    Const(f64),
}

#[derive(Debug)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub frozen: bool,
    pub init: InitKind,
}

pub type ParamRef<S> = Rc<RefCell<Parameter<S>>>;

impl<S: Scalar> Parameter<S> {
    pub fn zero_grad(&mut self) {
        self.grad.fill(S::ZERO);
    }
}

/// Ordered registry of parameters keyed by unique name path.
///
/// Weight tying is realized by two layers asking for the same key: both end
/// up holding one `ParamRef` storage.
pub struct ParamRegistry<S: Scalar> {
    params: IndexMap<String, ParamRef<S>>,
}

impl<S: Scalar> Default for ParamRegistry<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamRegistry<S> {
    pub fn new() -> Self {
        ParamRegistry {
            params: IndexMap::new(),
        }
    }

    /// Registers a fresh parameter; the name must be unused.
    pub fn create(&mut self, name: &str, shape: &[usize], init: InitKind) -> Result<ParamRef<S>> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("parameter name collision: {name}")));
        }
        let p = Rc::new(RefCell::new(Parameter {
            name: name.to_string(),
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            frozen: false,
            init,
        }));
        self.params.insert(name.to_string(), p.clone());
        Ok(p)
    }

    /// Reuses the parameter under `name` if present (tying), else creates it.
    /// A reuse with a different shape or init kind is a configuration error.
    pub fn get_or_create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: InitKind,
    ) -> Result<ParamRef<S>> {
        if let Some(existing) = self.params.get(name) {
            let p = existing.borrow();
            if p.value.shape() != shape || p.init != init {
                return Err(Error::Config(format!(
                    "tie key {name} reused with mismatched spec: existing {:?}, requested {:?}",
                    p.value.shape(),
                    shape
                )));
            }
            drop(p);
            return Ok(existing.clone());
        }
        self.create(name, shape, init)
    }

    pub fn get(&self, name: &str) -> Option<&ParamRef<S>> {
        self.params.get(name)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamRef<S>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&self) {
        for p in self.params.values() {
            p.borrow_mut().zero_grad();
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.borrow().value.numel()).sum()
    }

    /// Fills every parameter from its declared init kind. One RNG stream in
    /// registration order, so the result is fully determined by the seed.
    pub fn init_parameters(&self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.values() {
            let mut p = p.borrow_mut();
            match p.init {
                InitKind::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in p.value.data_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = S::from_f64(z * std);
                    }
                }
                InitKind::Zero => p.value.fill(S::ZERO),
                InitKind::One => p.value.fill(S::ONE),
                InitKind::Const(c) => p.value.fill(S::from_f64(c)),
            }
            p.zero_grad();
        }
        let _: u64 = rng.random(); // keep the stream length seed-dependent only
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_returns_same_storage() {
        let mut reg = ParamRegistry::<f32>::new();
        let a = reg
            .get_or_create("conv.weight", &[4, 3, 3, 3], InitKind::HeNormal { fan_in: 27 })
            .unwrap();
        let b = reg
            .get_or_create("conv.weight", &[4, 3, 3, 3], InitKind::HeNormal { fan_in: 27 })
            .unwrap();
        assert!(Rc::ptr_eq(&a, &b));
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn tie_with_mismatched_spec_fails() {
        let mut reg = ParamRegistry::<f32>::new();
        reg.get_or_create("w", &[2, 2], InitKind::Zero).unwrap();
        assert!(reg.get_or_create("w", &[2, 3], InitKind::Zero).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let mut reg = ParamRegistry::<f64>::new();
        let w = reg
            .create("w", &[8, 8], InitKind::HeNormal { fan_in: 64 })
            .unwrap();
        reg.init_parameters(7);
        let first = w.borrow().value.clone();
        reg.init_parameters(7);
        assert_eq!(w.borrow().value, first);
        reg.init_parameters(8);
        assert_ne!(w.borrow().value, first);
    }

    #[test]
    fn he_std_matches_fan_in() {
        let fan_in = 9 * 96;
        let mut reg = ParamRegistry::<f64>::new();
        let w = reg
            .create("w", &[16, 864], InitKind::HeNormal { fan_in })
            .unwrap();
        reg.init_parameters(0);
        let p = w.borrow();
        let n = p.value.numel() as f64;
        assert!(n >= 1e4);
        let mean: f64 = p.value.data().iter().sum::<f64>() / n;
        let var: f64 = p.value.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = (2.0 / fan_in as f64).sqrt();
        assert!((var.sqrt() - expect).abs() / expect < 0.05);
    }
}
