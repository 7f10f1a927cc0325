//! Minimal dense-layer toolkit shared by the proxy and the simulated backbone.
//! Single precision, row-major, strictly sequential reductions.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Fully connected layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))` for weights and bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn zero_grad(&self) -> LinearGrad {
        LinearGrad {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.inputs);
        let mut y = Vec::with_capacity(rows * self.outputs);
        for xr in x.chunks_exact(self.inputs) {
            for (w, b) in self.weight.chunks_exact(self.inputs).zip(&self.bias) {
                y.push(dot(w, xr) + b);
            }
        }
        y
    }

    /// Accumulates parameter gradients for upstream gradient `dy` and returns `dx`
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &[f32],
        dy: &[f32],
        grad: &mut LinearGrad,
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let rows = dy.len() / self.outputs;
        let mut dx = need_input_grad.then(|| vec![0.0f32; rows * self.inputs]);
        for r in 0..rows {
            let xr = &x[r * self.inputs..(r + 1) * self.inputs];
            let dyr = &dy[r * self.outputs..(r + 1) * self.outputs];
            for (o, &g) in dyr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                axpy(g, xr, &mut grad.weight[o * self.inputs..(o + 1) * self.inputs]);
                if let Some(dx) = dx.as_mut() {
                    axpy(
                        g,
                        &self.weight[o * self.inputs..(o + 1) * self.inputs],
                        &mut dx[r * self.inputs..(r + 1) * self.inputs],
                    );
                }
            }
        }
        dx
    }

    pub fn params(&self) -> impl Iterator<Item = &f32> {
        self.weight.iter().chain(&self.bias)
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose forward activation was clipped by ReLU.
pub fn relu_backward(activated: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Row-wise softmax in double precision.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let start = out.len();
        let mut sum = 0.0;
        for &z in row {
            let e = (f64::from(z) - max).exp();
            sum += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= sum;
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f32], classes: usize, targets: &[u32]) -> (f64, Vec<f32>) {
    let probs = softmax_rows(logits, classes);
    let rows = targets.len();
    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (r, &t) in targets.iter().enumerate() {
        let p = &probs[r * classes..(r + 1) * classes];
        loss -= p[t as usize].max(1e-300).ln();
        for (k, &pk) in p.iter().enumerate() {
            let g = pk - if k == t as usize { 1.0 } else { 0.0 };
            grad.push((g * scale) as f32);
        }
    }
    (loss * scale, grad)
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// SGD with heavy-ball momentum and L2 weight decay applied to the gradient.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<f32>,
}

impl Momentum {
    pub fn new(len: usize, lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Momentum {
            lr,
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        debug_assert_eq!(params.len(), self.velocity.len());
        for ((w, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            let g = g + self.weight_decay * *w;
            *v = self.momentum * *v + g;
            *w -= self.lr * *v;
        }
    }
}

/// Momentum state for one linear layer (weight and bias share hyperparameters).
#[derive(Debug, Clone)]
pub struct LinearOpt {
    weight: Momentum,
    bias: Momentum,
}

impl LinearOpt {
    pub fn new(layer: &Linear, lr: f32, momentum: f32, weight_decay: f32) -> Self {
        LinearOpt {
            weight: Momentum::new(layer.weight.len(), lr, momentum, weight_decay),
            bias: Momentum::new(layer.bias.len(), lr, momentum, weight_decay),
        }
    }

    pub fn step(&mut self, layer: &mut Linear, grad: &LinearGrad) {
        self.weight.step(&mut layer.weight, &grad.weight);
        self.bias.step(&mut layer.bias, &grad.bias);
    }
}
