use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{arg_err, Result};

/// Multivariate observations with optional ground-truth hidden states.
///
/// Values are stored time-major (`t * n_vars + i`). States are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    n_states: usize,
    values: Vec<f64>,
    states: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        names: Vec<String>,
        n_states: usize,
        values: Vec<f64>,
        states: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(arg_err!("dataset needs at least one variable"));
        }
        if values.len() % n != 0 {
            return Err(arg_err!(
                "{} values do not fill rows of {} variables",
                values.len(),
                n
            ));
        }
        if let Some(v) = values.iter().position(|v| !v.is_finite()) {
            return Err(arg_err!(
                "non-finite observation at t={}, variable {}",
                v / n,
                v % n + 1
            ));
        }
        if let Some(s) = &states {
            if s.len() != values.len() {
                return Err(arg_err!(
                    "state matrix has {} entries, observations {}",
                    s.len(),
                    values.len()
                ));
            }
            if let Some(bad) = s.iter().find(|&&v| v >= n_states) {
                return Err(arg_err!("state {} outside 1..={}", bad + 1, n_states));
            }
        }
        Ok(Self {
            names,
            n_states,
            values,
            states,
        })
    }

    /// Default column names `x_1..x_N`.
    pub fn default_names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("x_{i}")).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_states(&self) -> bool {
        self.states.is_some()
    }

    #[inline]
    pub fn value(&self, t: usize, i: usize) -> f64 {
        self.values[t * self.names.len() + i]
    }

    pub fn state(&self, t: usize, i: usize) -> Option<usize> {
        self.states.as_ref().map(|s| s[t * self.names.len() + i])
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.names.len();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn states(&self) -> Option<&[usize]> {
        self.states.as_deref()
    }

    pub fn series(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.value(t, i)).collect()
    }

    pub fn state_series(&self, i: usize) -> Option<Vec<usize>> {
        let s = self.states.as_ref()?;
        let n = self.names.len();
        Some((0..self.len()).map(|t| s[t * n + i]).collect())
    }

    /// Fraction of steps variable `i` spends in each state.
    pub fn occupancy(&self, i: usize) -> Option<Vec<f64>> {
        let states = self.state_series(i)?;
        let mut counts = alloc::vec![0.0; self.n_states];
        for s in &states {
            counts[*s] += 1.0;
        }
        let total = states.len().max(1) as f64;
        Some(counts.into_iter().map(|c| c / total).collect())
    }

    /// Contiguous time slice.
    pub fn slice(&self, range: Range<usize>) -> Result<Dataset> {
        if range.start > range.end || range.end > self.len() {
            return Err(arg_err!(
                "slice {:?} of a length-{} dataset",
                range,
                self.len()
            ));
        }
        let n = self.names.len();
        let span = range.start * n..range.end * n;
        Ok(Dataset {
            names: self.names.clone(),
            n_states: self.n_states,
            values: self.values[span.clone()].to_vec(),
            states: self.states.as_ref().map(|s| s[span].to_vec()),
        })
    }

    /// Index of the first test step for a contiguous train fraction.
    pub fn split_index(&self, train_fraction: f64) -> Result<usize> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(arg_err!("train fraction {} outside (0, 1)", train_fraction));
        }
        Ok(libm::round(self.len() as f64 * train_fraction) as usize)
    }
}
