use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, redrawn outside ±2 std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named parameter tensors with same-shaped gradient buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: &str, shape: &[usize], init: Init, decay: bool, rng: &mut impl Rng) -> usize {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let x: f64 = dist.sample(rng);
                        if x.abs() <= 2.0 * std {
                            break x;
                        }
                    })
                    .collect()
            }
        };
        self.insert(name, shape, value, decay)
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<f64>, decay: bool) -> usize {
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; n],
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.0.len() != self.params.len() {
            return Err(Error::Shape("gradient set does not match parameter store".into()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if g.len() != p.grad.len() {
                return Err(Error::Shape(format!("gradient for `{}` has wrong length", p.name)));
            }
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn gradients(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| p.grad.clone()).collect())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for x in self.0.iter_mut().flatten() {
            *x *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}
