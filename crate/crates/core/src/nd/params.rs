use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{arg_err, Result};

/// A named parameter array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(arg_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(arg_err!("non-finite tensor value {}", v));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Two-dimensional view: vectors become `1 x n`, higher ranks fold the
    /// leading dimensions into rows.
    pub fn to_matrix(&self) -> Matrix {
        let (rows, cols) = match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap_or(&1);
                (self.data.len() / cols.max(1), cols)
            }
        };
        Matrix::from_vec(rows, cols, self.data.clone()).expect("tensor length matches shape")
    }
}

/// Named trainable arrays in a deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new entry; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(arg_err!("duplicate parameter name `{}`", name));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Inserts or replaces an entry.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| arg_err!("missing parameter `{}`", name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape.clone())))
                .collect(),
        }
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape == vb.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self ← tau·candidate + (1 − tau)·self`, elementwise.
    pub fn soft_update(&mut self, candidate: &ParamStore, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(arg_err!("soft update rate {} outside [0, 1]", tau));
        }
        if !self.same_layout(candidate) {
            return Err(arg_err!("soft update between mismatched parameter layouts"));
        }
        for (mine, theirs) in self.entries.values_mut().zip(candidate.entries.values()) {
            for (a, b) in mine.data.iter_mut().zip(&theirs.data) {
                *a = tau * *b + (1.0 - tau) * *a;
            }
        }
        Ok(())
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn absorb_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.entries {
            self.entries
                .insert(alloc::format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}

/// Glorot-style uniform values in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    count: usize,
) -> Vec<f64> {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    (0..count)
        .map(|_| rng.random_range(-limit..=limit))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::filled(vec![2, 2], v)).unwrap();
        s
    }

    #[test]
    fn soft_update_endpoints_and_midpoint() {
        let target = store(10.0);
        let mut s = store(0.0);
        s.soft_update(&target, 0.0).unwrap();
        assert_eq!(s, store(0.0));
        s.soft_update(&target, 0.01).unwrap();
        for v in s.get("w").unwrap().data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
        s.soft_update(&target, 1.0).unwrap();
        assert_eq!(s, target);
    }

    #[test]
    fn soft_update_rejects_mismatch() {
        let mut s = store(0.0);
        let mut other = ParamStore::new();
        other.insert("w", Tensor::zeros(vec![4])).unwrap();
        assert!(s.soft_update(&other, 0.5).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store(0.0);
        assert!(s.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn tensor_rejects_nan_and_bad_shape() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0]).is_err());
    }

    #[test]
    fn prefix_round_trip() {
        let mut outer = ParamStore::new();
        outer.absorb_prefixed("den.", &store(1.0));
        assert!(outer.contains("den.w"));
        assert_eq!(outer.extract_prefixed("den."), store(1.0));
    }
}
