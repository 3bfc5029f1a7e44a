//! Flat parameter storage. Every trainable tensor is a named range of one
//! contiguous buffer, so optimizer state, gradients and checkpoints share a
//! single indexing scheme.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Range<usize> {
        let len = shape.iter().product();
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
            init,
        };
        self.total += len;
        let r = entry.range();
        self.entries.push(entry);
        r
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Fresh parameter values drawn from each entry's initializer.
    pub fn initialize<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![T::zero(); self.total];
        for e in &self.entries {
            let slot = &mut data[e.range()];
            match e.init {
                Init::Zeros => {}
                Init::Ones => slot.fill(T::one()),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    for v in slot.iter_mut() {
                        *v = T::of(dist.sample(&mut rng));
                    }
                }
            }
        }
        data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_contiguous() {
        let mut l = ParamLayout::default();
        let a = l.push("a", &[2, 3], Init::Zeros);
        let b = l.push("b", &[4], Init::Ones);
        assert_eq!(a, 0..6);
        assert_eq!(b, 6..10);
        assert_eq!(l.total(), 10);
        let p: Vec<f32> = l.initialize(0);
        assert!(p[..6].iter().all(|&v| v == 0.0));
        assert!(p[6..].iter().all(|&v| v == 1.0));
        assert_eq!(l.find("b").unwrap().shape, vec![4]);
    }

    #[test]
    fn init_is_seeded() {
        let mut l = ParamLayout::default();
        l.push("w", &[64], Init::Normal(0.02));
        let a: Vec<f64> = l.initialize(5);
        let b: Vec<f64> = l.initialize(5);
        let c: Vec<f64> = l.initialize(6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
