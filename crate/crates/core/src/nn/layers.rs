use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use super::{join, kaiming_uniform, Mode, Params};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Fully connected layer, `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w: kaiming_uniform(input, output, input, rng),
            b: kaiming_uniform(1, output, input, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// One-dimensional batch normalization over the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    mode: Mode,
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Array2::ones((1, features)),
            beta: Array2::zeros((1, features)),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, BnCache)> {
        let n = x.nrows();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let var = (x - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let x_hat = (x - &mean) * &inv_std;
        let y = &x_hat * &self.gamma + &self.beta;
        Ok((
            y,
            BnCache {
                mode,
                x_hat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Folds a training-mode batch's statistics into the running averages
    /// (unbiased variance, momentum 0.1).
    pub fn update_running(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = cache.x_hat.nrows() as f64;
        let unbiased = &cache.batch_var * (n / (n - 1.0));
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &cache.batch_mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + unbiased * BN_MOMENTUM;
    }

    pub fn backward(&self, cache: &BnCache, dy: &Array2<f64>, grad: &mut BatchNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx_hat = dy * &self.gamma;
        match cache.mode {
            Mode::Eval => dx_hat * &cache.inv_std,
            Mode::Train => {
                let n = dy.nrows() as f64;
                let sum_dx_hat = dx_hat.sum_axis(Axis(0));
                let sum_dx_hat_xhat = (&dx_hat * &cache.x_hat).sum_axis(Axis(0));
                let centered = dx_hat * n - &sum_dx_hat - &cache.x_hat * &sum_dx_hat_xhat;
                centered * &cache.inv_std / n
            }
        }
    }
}

impl Params for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Array2<f64>, dy: &Array2<f64>, slope: f64) -> Array2<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v < 0.0 {
            *d *= slope;
        }
    });
    dx
}

/// Inverted dropout. Returns the output and the scaled keep-mask (`None` when the
/// layer is the identity).
pub fn dropout_forward(
    x: &Array2<f64>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> (Array2<f64>, Option<Array2<f64>>) {
    if mode == Mode::Eval || rate == 0.0 {
        return (x.clone(), None);
    }
    let scale = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f64>() < rate { 0.0 } else { scale });
    (x * &mask, Some(mask))
}

pub fn dropout_backward(dy: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}
