//! Minimal neural-network substrate with hand-written forward and backward passes.
//!
//! Every parameter is an `Array2<f64>` (biases are `1 x n` rows). A layer's gradient
//! is stored in a value of the same type, built with [`Params::zeros_like`], so
//! gradient accumulation, Adam and checkpointing all work through the [`Params`]
//! visitor.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod lstm;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_named, to_named, NamedTensor, Tensor};
pub use gradcheck::{grad_check, GradCheck};
pub use layers::{
    dropout_backward, dropout_forward, leaky_relu, leaky_relu_backward, BatchNorm, BnCache, Linear,
    BN_EPS, BN_MOMENTUM,
};
pub use lstm::{BiLstm, BiLstmCache, Lstm, LstmCache};

use ndarray::{Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Batch-normalization and dropout behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything owning trainable parameters, visited in a fixed order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>));
    fn params_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Array2<f64>)) {
        for p in self.params_mut() {
            f(p);
        }
    }

    fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p));
        out
    }

    fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n, p)));
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |p| p.fill(0.0));
        z
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let others = other.params();
        let mut i = 0;
        self.visit_mut(&mut |p| {
            *p += others[i];
            i += 1;
        });
    }

    fn flatten(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.iter().copied()).collect()
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            for v in p.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate up to and including `lr_drop_epoch` (1-based).
    pub lr: f64,
    /// Learning rate after `lr_drop_epoch`.
    pub lr_late: f64,
    pub lr_drop_epoch: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            lr_late: 1e-4,
            lr_drop_epoch: 100,
            dropout_rate: 0.2,
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.batch_size < 2 {
            return Err(crate::Error::InvalidInput("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(crate::Error::InvalidInput("dropout_rate must be in [0, 1)".into()));
        }
        if !(self.lr > 0.0 && self.lr_late > 0.0) {
            return Err(crate::Error::InvalidInput("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_drop_epoch {
            self.lr
        } else {
            self.lr_late
        }
    }
}

/// `U(-bound, bound)` with `bound = 1/sqrt(fan_in)`, the default fully-connected init.
pub fn kaiming_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Random matrix with orthonormal columns (or rows, whichever is fewer).
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let g = nalgebra::DMatrix::<f64>::from_fn(n, m, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Array2::from_shape_fn((rows, cols), |(i, j)| if rows >= cols { q[(i, j)] } else { q[(j, i)] })
}

/// Stacks equally shaped `T x C` windows into a `B x T x C` batch.
pub fn stack_windows<const C: usize>(windows: &[&[[f64; C]]]) -> Array3<f64> {
    let t = windows.first().map_or(0, |w| w.len());
    Array3::from_shape_fn((windows.len(), t, C), |(b, s, c)| windows[b][s][c])
}
