use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

/// Row-stochastic `n × c` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probabilities {
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl Probabilities {
    pub fn new(n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c || c == 0 {
            return Err(Error::Validation(format!(
                "{} probabilities do not form a {n}x{c} matrix",
                data.len()
            )));
        }
        Ok(Probabilities { n, c, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Validation("ragged probability rows".into()));
        }
        Self::new(rows.len(), c, rows.concat())
    }

    pub(crate) fn from_logits(logits: &[f32], n: usize, c: usize) -> Self {
        Probabilities {
            n,
            c,
            data: nn::softmax_rows(logits, c),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.c)
    }

    pub fn predicted(&self, i: usize) -> usize {
        nn::argmax(self.row(i))
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.row(i)[self.predicted(i)]
    }

    /// Top-1 minus top-2 probability of row `i`.
    pub fn margin(&self, i: usize) -> f64 {
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &p in self.row(i) {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        if self.c == 1 {
            return first;
        }
        first - second
    }

    pub fn accuracy(&self, truth: &[u32]) -> f64 {
        if truth.is_empty() {
            return 0.0;
        }
        let correct = (0..self.n)
            .filter(|&i| self.predicted(i) == truth[i] as usize)
            .count();
        correct as f64 / truth.len() as f64
    }
}
