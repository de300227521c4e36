use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{lit, Scalar};

/// Flat parameter vector plus the named ranges carved out of it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    pub values: Vec<S>,
    pub names: Vec<(String, Range<usize>)>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<S> {
        vec![S::zero(); self.values.len()]
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.names.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `±sqrt(6 / fan_in)`.
    Kaiming { fan_in: usize },
    Uniform(f64),
}

pub struct ParamBuilder<S> {
    store: ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> ParamBuilder<S> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder { store: ParamStore { values: Vec::new(), names: Vec::new() }, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn alloc(&mut self, name: impl Into<String>, len: usize, init: Init) -> Range<usize> {
        let start = self.store.values.len();
        for _ in 0..len {
            let v = match init {
                Init::Zeros => 0.0,
                Init::Constant(c) => c,
                Init::Kaiming { fan_in } => {
                    let b = (6.0 / fan_in.max(1) as f64).sqrt();
                    self.rng.random_range(-b..b)
                }
                Init::Uniform(b) => self.rng.random_range(-b..b),
            };
            self.store.values.push(lit(v));
        }
        let r = start..start + len;
        self.store.names.push((name.into(), r.clone()));
        r
    }

    pub fn finish(self) -> ParamStore<S> {
        self.store
    }
}
