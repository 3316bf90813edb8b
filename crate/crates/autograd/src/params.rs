//! Named parameter tensors and their gradients.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::Mat;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Ordered, named collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Copies every tensor from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter names differ".into());
        }
        for (i, (dst, src)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if dst.dim() != src.dim() {
                return Err(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    self.names[i],
                    dst.dim(),
                    src.dim()
                ));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Xavier/Glorot uniform init.
pub fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit))
}

/// Sparse gradients aligned to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    tensors: Vec<Option<Mat>>,
}

impl Grads {
    pub fn empty(len: usize) -> Self {
        Grads {
            tensors: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.iter().all(Option::is_none)
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.tensors[id.0].as_ref()
    }

    pub fn set(&mut self, id: ParamId, g: Mat) {
        self.tensors[id.0] = Some(g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.tensors
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &Grads) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(src) = src {
                match dst {
                    Some(d) => *d += src,
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.tensors.iter_mut().flatten() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = Grads::empty(1);
        g.set(ParamId(0), array![[3.0, 4.0]]);
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn assign_from_rejects_shape_mismatch() {
        let mut a = ParamStore::new();
        a.add("w", Mat::zeros((2, 2)));
        let mut b = ParamStore::new();
        b.add("w", Mat::zeros((2, 3)));
        assert!(a.assign_from(&b).is_err());
    }
}
