//! The cross-modal model: vision and phone encoders, coordinate generator,
//! discriminator, their losses, adversarial training and phone-only inference.
//!
//! Inputs are z-scored per channel with training-set statistics. The generator
//! emits normalized camera-frame coordinates, which are mapped back to meters
//! with the training-set label statistics. The discriminator sees normalized
//! coordinates; the reconstruction regularizer and all reported errors are in
//! meters.

use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{apply_mask, Correspondence, FeatureMask, PhoneWindow, VISION_DIM, WINDOW_STEPS};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{
    adam_step, dropout_backward, dropout_forward, leaky_relu, leaky_relu_backward, load_named, to_named, AdamState,
    BatchNorm, BiLstm, BiLstmCache, BnCache, Linear, Mode, NamedTensor, Params, Tensor, TrainConfig,
};
use crate::rng::{self, Rng};

pub const EMBED_DIM: usize = 64;
pub const DISC_LSTM_DIM: usize = 8;
const GEN_WIDTHS: [usize; 6] = [EMBED_DIM, 64, 64, 64, 32, 3];
const DISC_WIDTHS: [usize; 4] = [2 * DISC_LSTM_DIM + 3, 8, 4, 1];
/// Samples per recurrent work unit. Fixed so results do not depend on thread count.
const LSTM_CHUNK: usize = 16;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-channel z-scoring statistics fitted on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub v_mean: Vec<f64>,
    pub v_std: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub p_std: Vec<f64>,
    pub c_mean: [f64; 3],
    pub c_std: [f64; 3],
}

fn mean_std(columns: usize, rows: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut sum = vec![0.0; columns];
    let mut sq = vec![0.0; columns];
    for r in rows {
        n += 1.0;
        for (c, x) in r.iter().enumerate() {
            sum[c] += x;
            sq[c] += x * x;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n - m * m).max(0.0);
            // Constant channels (the reported FTM std) pass through unscaled.
            if var.sqrt() < 1e-9 {
                1.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn fit(records: &[Correspondence], mask: &FeatureMask) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (v_mean, v_std) = mean_std(VISION_DIM, records.iter().flat_map(|r| r.v.iter().map(|s| s.to_vec())));
        let (p_mean, p_std) = mean_std(
            mask.width(),
            records.iter().flat_map(|r| {
                let m = apply_mask(&r.p, &r.rssi, mask);
                m.outer_iter().map(|row| row.to_vec()).collect::<Vec<_>>()
            }),
        );
        let (c_mean, c_std) = mean_std(3, records.iter().map(|r| r.c_gnd.to_vec()));
        Ok(Self {
            v_mean,
            v_std,
            p_mean,
            p_std,
            c_mean: [c_mean[0], c_mean[1], c_mean[2]],
            c_std: [c_std[0], c_std[1], c_std[2]],
        })
    }

    pub fn identity(mask: &FeatureMask) -> Self {
        Self {
            v_mean: vec![0.0; VISION_DIM],
            v_std: vec![1.0; VISION_DIM],
            p_mean: vec![0.0; mask.width()],
            p_std: vec![1.0; mask.width()],
            c_mean: [0.0; 3],
            c_std: [1.0; 3],
        }
    }

    pub fn vision(&self, records: &[&Correspondence]) -> Array3<f64> {
        Array3::from_shape_fn((records.len(), WINDOW_STEPS, VISION_DIM), |(b, t, c)| {
            (records[b].v[t][c] - self.v_mean[c]) / self.v_std[c]
        })
    }

    pub fn phone(&self, windows: &[(&PhoneWindow, &[f64; WINDOW_STEPS])], mask: &FeatureMask) -> Array3<f64> {
        let w = mask.width();
        let mut out = Array3::zeros((windows.len(), WINDOW_STEPS, w));
        for (b, (p, rssi)) in windows.iter().enumerate() {
            let m = apply_mask(p, rssi, mask);
            for t in 0..WINDOW_STEPS {
                for c in 0..w {
                    out[[b, t, c]] = (m[[t, c]] - self.p_mean[c]) / self.p_std[c];
                }
            }
        }
        out
    }

    pub fn coords(&self, c: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(c.raw_dim(), |(b, k)| (c[[b, k]] - self.c_mean[k]) / self.c_std[k])
    }

    pub fn denorm_coords(&self, c_n: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(c_n.raw_dim(), |(b, k)| c_n[[b, k]] * self.c_std[k] + self.c_mean[k])
    }
}

/// Runs a bidirectional LSTM over fixed-size chunks of the batch, in parallel when enabled.
fn bilstm_forward(m: &BiLstm, seq: &Array3<f64>) -> (Array2<f64>, Vec<BiLstmCache>) {
    let n = seq.dim().0;
    let starts: Vec<usize> = (0..n).step_by(LSTM_CHUNK).collect();
    let parts = exec::map(&starts, |&s0| {
        let chunk = seq.slice(s![s0..(s0 + LSTM_CHUNK).min(n), .., ..]).to_owned();
        m.forward(&chunk)
    });
    let outs: Vec<_> = parts.iter().map(|(o, _)| o.view()).collect();
    let out = if outs.is_empty() {
        Array2::zeros((0, m.output()))
    } else {
        concatenate(Axis(0), &outs).expect("same width")
    };
    (out, parts.into_iter().map(|(_, c)| c).collect())
}

/// Accumulates parameter gradients of a chunked forward pass into `grad`.
fn bilstm_backward(m: &BiLstm, caches: &[BiLstmCache], dout: &Array2<f64>, grad: &mut BiLstm) {
    let items: Vec<(usize, &BiLstmCache)> = caches.iter().enumerate().collect();
    let n = dout.nrows();
    let grads = exec::map(&items, |&(i, cache)| {
        let s0 = i * LSTM_CHUNK;
        let d = dout.slice(s![s0..(s0 + LSTM_CHUNK).min(n), ..]).to_owned();
        let mut g = m.zeros_like();
        m.backward(cache, &d, &mut g);
        g
    });
    for g in &grads {
        grad.add_assign(g);
    }
}

/// FC stack `64 -> 64 -> 64 -> 64 -> 32 -> 3`. The first three hidden layers use
/// batch norm, leaky ReLU and dropout; the fourth drops dropout; the output is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub fc: Vec<Linear>,
    pub bn: Vec<BatchNorm>,
}

#[derive(Clone, Debug)]
pub struct GenCache {
    inputs: Vec<Array2<f64>>,
    normed: Vec<Array2<f64>>,
    bn: Vec<BnCache>,
    masks: Vec<Option<Array2<f64>>>,
}

impl Generator {
    pub fn new(rng: &mut Rng) -> Self {
        Self {
            fc: (0..5).map(|i| Linear::new(GEN_WIDTHS[i], GEN_WIDTHS[i + 1], rng)).collect(),
            bn: (0..4).map(|i| BatchNorm::new(GEN_WIDTHS[i + 1])).collect(),
        }
    }

    pub fn zeros() -> Self {
        Self {
            fc: (0..5).map(|i| Linear::zeros(GEN_WIDTHS[i], GEN_WIDTHS[i + 1])).collect(),
            bn: (0..4).map(|i| BatchNorm::new(GEN_WIDTHS[i + 1])).collect(),
        }
    }

    pub fn forward(
        &self,
        e: &Array2<f64>,
        mode: Mode,
        dropout: f64,
        slope: f64,
        rng: &mut Rng,
    ) -> Result<(Array2<f64>, GenCache)> {
        let mut cache = GenCache {
            inputs: Vec::with_capacity(5),
            normed: Vec::with_capacity(4),
            bn: Vec::with_capacity(4),
            masks: Vec::with_capacity(4),
        };
        let mut x = e.clone();
        for i in 0..4 {
            let h = self.fc[i].forward(&x);
            let (n, bc) = self.bn[i].forward(&h, mode)?;
            let a = leaky_relu(&n, slope);
            let (next, mask) = if i < 3 {
                dropout_forward(&a, dropout, mode, rng)
            } else {
                (a, None)
            };
            cache.inputs.push(x);
            cache.normed.push(n);
            cache.bn.push(bc);
            cache.masks.push(mask);
            x = next;
        }
        let out = self.fc[4].forward(&x);
        cache.inputs.push(x);
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &GenCache, dout: &Array2<f64>, slope: f64, grad: &mut Generator) -> Array2<f64> {
        let mut dx = self.fc[4].backward(&cache.inputs[4], dout, &mut grad.fc[4]);
        for i in (0..4).rev() {
            let da = dropout_backward(&dx, cache.masks[i].as_ref());
            let dn = leaky_relu_backward(&cache.normed[i], &da, slope);
            let dh = self.bn[i].backward(&cache.bn[i], &dn, &mut grad.bn[i]);
            dx = self.fc[i].backward(&cache.inputs[i], &dh, &mut grad.fc[i]);
        }
        dx
    }

    pub fn update_running(&mut self, cache: &GenCache) {
        for (bn, c) in self.bn.iter_mut().zip(&cache.bn) {
            bn.update_running(c);
        }
    }
}

impl Params for Generator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        for (i, fc) in self.fc.iter().enumerate() {
            fc.visit(&crate::nn::join(prefix, &format!("fc{}", i + 1)), f);
            if let Some(bn) = self.bn.get(i) {
                bn.visit(&crate::nn::join(prefix, &format!("bn{}", i + 1)), f);
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        let mut bns = self.bn.iter_mut();
        for fc in self.fc.iter_mut() {
            out.extend(fc.params_mut());
            if let Some(bn) = bns.next() {
                out.extend(bn.params_mut());
            }
        }
        out
    }
}

/// Bidirectional LSTMs over `v` and `p` (width 8 each), concatenated with a
/// coordinate into a 19-vector, then `19 -> 8 -> 4 -> 1` with batch norm and leaky
/// ReLU on the hidden layers. The score is not squashed.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub lstm_v: BiLstm,
    pub lstm_p: BiLstm,
    pub fc: Vec<Linear>,
    pub bn: Vec<BatchNorm>,
}

/// Recurrent features of a batch, shared between the real and fake heads.
#[derive(Clone, Debug)]
pub struct DiscFeatures {
    pub features: Array2<f64>,
    cv: Vec<BiLstmCache>,
    cp: Vec<BiLstmCache>,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    inputs: Vec<Array2<f64>>,
    normed: Vec<Array2<f64>>,
    bn: Vec<BnCache>,
}

impl Discriminator {
    pub fn new(phone_width: usize, rng: &mut Rng) -> Self {
        Self {
            lstm_v: BiLstm::new(VISION_DIM, DISC_LSTM_DIM, rng),
            lstm_p: BiLstm::new(phone_width, DISC_LSTM_DIM, rng),
            fc: (0..3).map(|i| Linear::new(DISC_WIDTHS[i], DISC_WIDTHS[i + 1], rng)).collect(),
            bn: (0..2).map(|i| BatchNorm::new(DISC_WIDTHS[i + 1])).collect(),
        }
    }

    pub fn zeros(phone_width: usize) -> Self {
        Self {
            lstm_v: BiLstm::zeros(VISION_DIM, DISC_LSTM_DIM),
            lstm_p: BiLstm::zeros(phone_width, DISC_LSTM_DIM),
            fc: (0..3).map(|i| Linear::zeros(DISC_WIDTHS[i], DISC_WIDTHS[i + 1])).collect(),
            bn: (0..2).map(|i| BatchNorm::new(DISC_WIDTHS[i + 1])).collect(),
        }
    }

    pub fn features(&self, v: &Array3<f64>, p: &Array3<f64>) -> DiscFeatures {
        let (fv, cv) = bilstm_forward(&self.lstm_v, v);
        let (fp, cp) = bilstm_forward(&self.lstm_p, p);
        DiscFeatures {
            features: concatenate(Axis(1), &[fv.view(), fp.view()]).expect("same batch"),
            cv,
            cp,
        }
    }

    /// The 19-wide FC input: `[lstm_v, lstm_p, c]`.
    pub fn head_input(features: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[features.view(), c.view()]).expect("same batch")
    }

    pub fn head(&self, features: &Array2<f64>, c: &Array2<f64>, mode: Mode, slope: f64) -> Result<(Array2<f64>, HeadCache)> {
        let mut cache = HeadCache {
            inputs: Vec::with_capacity(3),
            normed: Vec::with_capacity(2),
            bn: Vec::with_capacity(2),
        };
        let mut x = Self::head_input(features, c);
        for i in 0..2 {
            let h = self.fc[i].forward(&x);
            let (n, bc) = self.bn[i].forward(&h, mode)?;
            let a = leaky_relu(&n, slope);
            cache.inputs.push(x);
            cache.normed.push(n);
            cache.bn.push(bc);
            x = a;
        }
        let out = self.fc[2].forward(&x);
        cache.inputs.push(x);
        Ok((out, cache))
    }

    /// Returns gradients with respect to the recurrent features and the coordinate.
    pub fn head_backward(
        &self,
        cache: &HeadCache,
        dscore: &Array2<f64>,
        slope: f64,
        grad: &mut Discriminator,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut dx = self.fc[2].backward(&cache.inputs[2], dscore, &mut grad.fc[2]);
        for i in (0..2).rev() {
            let dn = leaky_relu_backward(&cache.normed[i], &dx, slope);
            let dh = self.bn[i].backward(&cache.bn[i], &dn, &mut grad.bn[i]);
            dx = self.fc[i].backward(&cache.inputs[i], &dh, &mut grad.fc[i]);
        }
        let nf = 2 * DISC_LSTM_DIM;
        (dx.slice(s![.., ..nf]).to_owned(), dx.slice(s![.., nf..]).to_owned())
    }

    pub fn features_backward(&self, feats: &DiscFeatures, dfeat: &Array2<f64>, grad: &mut Discriminator) {
        let dv = dfeat.slice(s![.., ..DISC_LSTM_DIM]).to_owned();
        let dp = dfeat.slice(s![.., DISC_LSTM_DIM..]).to_owned();
        bilstm_backward(&self.lstm_v, &feats.cv, &dv, &mut grad.lstm_v);
        bilstm_backward(&self.lstm_p, &feats.cp, &dp, &mut grad.lstm_p);
    }

    pub fn update_running(&mut self, cache: &HeadCache) {
        for (bn, c) in self.bn.iter_mut().zip(&cache.bn) {
            bn.update_running(c);
        }
    }
}

impl Params for Discriminator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.lstm_v.visit(&crate::nn::join(prefix, "lstm_v"), f);
        self.lstm_p.visit(&crate::nn::join(prefix, "lstm_p"), f);
        for (i, fc) in self.fc.iter().enumerate() {
            fc.visit(&crate::nn::join(prefix, &format!("fc{}", i + 1)), f);
            if let Some(bn) = self.bn.get(i) {
                bn.visit(&crate::nn::join(prefix, &format!("bn{}", i + 1)), f);
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.lstm_v.params_mut();
        out.extend(self.lstm_p.params_mut());
        let mut bns = self.bn.iter_mut();
        for fc in self.fc.iter_mut() {
            out.extend(fc.params_mut());
            if let Some(bn) = bns.next() {
                out.extend(bn.params_mut());
            }
        }
        out
    }
}

/// Gradients of the generator-side objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GanGrads {
    pub enc_v: BiLstm,
    pub enc_p: BiLstm,
    pub gen: Generator,
}

impl Params for GanGrads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.enc_v.visit(&crate::nn::join(prefix, "enc_v"), f);
        self.enc_p.visit(&crate::nn::join(prefix, "enc_p"), f);
        self.gen.visit(&crate::nn::join(prefix, "gen"), f);
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.enc_v.params_mut();
        out.extend(self.enc_p.params_mut());
        out.extend(self.gen.params_mut());
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_emb: f64,
    pub l_d: f64,
    pub l_g_adv: f64,
    pub l_reg: f64,
    pub l_total: f64,
}

impl LossReport {
    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_emb", self.l_emb),
            ("l_d", self.l_d),
            ("l_g_adv", self.l_g_adv),
            ("l_reg", self.l_reg),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossReport,
}

/// Mean Euclidean distance between paired embeddings.
pub fn embedding_loss(e_v: &Array2<f64>, e_p: &Array2<f64>) -> f64 {
    embedding_loss_grad(e_v, e_p).0
}

/// Loss and its gradient with respect to `e_v` (the `e_p` gradient is the negation).
fn embedding_loss_grad(e_v: &Array2<f64>, e_p: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = e_v.nrows() as f64;
    let diff = e_v - e_p;
    let mut grad = Array2::zeros(diff.raw_dim());
    let mut total = 0.0;
    for (i, row) in diff.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        total += norm;
        if norm > 0.0 {
            grad.row_mut(i).assign(&(&row / (norm * b)));
        }
    }
    (total / b, grad)
}

/// Batch mean of `|c_gnd - c_hat|_1 + |c_gnd - c_hat|_2`.
pub fn regularizer(c_gnd: &Array2<f64>, c_hat: &Array2<f64>) -> f64 {
    regularizer_grad(c_gnd, c_hat).0
}

/// Loss and its gradient with respect to `c_hat`.
fn regularizer_grad(c_gnd: &Array2<f64>, c_hat: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = c_gnd.nrows() as f64;
    let diff = c_gnd - c_hat;
    let mut grad = Array2::zeros(diff.raw_dim());
    let mut total = 0.0;
    for (i, row) in diff.outer_iter().enumerate() {
        let l1: f64 = row.iter().map(|x| x.abs()).sum();
        let l2 = row.dot(&row).sqrt();
        total += l1 + l2;
        for (k, &d) in row.iter().enumerate() {
            let radial = if l2 > 0.0 { d / l2 } else { 0.0 };
            grad[[i, k]] = -(d.signum() * (d != 0.0) as u8 as f64 + radial) / b;
        }
    }
    (total / b, grad)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// `mean((D(real) - 1)^2) + mean(D(fake)^2)`.
pub fn lsgan_d_loss(real: &[f64], fake: &[f64]) -> f64 {
    mean(real.iter().map(|d| (d - 1.0).powi(2))) + mean(fake.iter().map(|d| d * d))
}

/// `mean((D(fake) - 1)^2)`.
pub fn lsgan_g_loss(fake: &[f64]) -> f64 {
    mean(fake.iter().map(|d| (d - 1.0).powi(2)))
}

/// A normalized training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub v: Array3<f64>,
    pub p: Array3<f64>,
    /// Labels in meters.
    pub c: Array2<f64>,
    /// Normalized labels.
    pub c_n: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            v: self.v.select(Axis(0), idx),
            p: self.p.select(Axis(0), idx),
            c: self.c.select(Axis(0), idx),
            c_n: self.c_n.select(Axis(0), idx),
        }
    }
}

/// Generator-side forward state reused by both the discriminator and generator steps.
pub struct GForward {
    pub e_v: Array2<f64>,
    pub e_p: Array2<f64>,
    /// Normalized generated coordinates.
    pub c_hat_n: Array2<f64>,
    cv: Vec<BiLstmCache>,
    cp: Vec<BiLstmCache>,
    gen: GenCache,
}

pub struct DStep {
    pub l_d: f64,
    pub grads: Discriminator,
    real: HeadCache,
    fake: HeadCache,
}

pub struct GStep {
    pub l_emb: f64,
    pub l_g_adv: f64,
    pub l_reg: f64,
    pub grads: GanGrads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub mask: FeatureMask,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub enc_v: BiLstm,
    pub enc_p: BiLstm,
    pub gen: Generator,
    pub disc: Discriminator,
    pub norm: Normalizer,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
}

impl GanModel {
    /// Freshly initialized model; weights are drawn from `cfg.seed`.
    pub fn new(mask: FeatureMask, norm: Normalizer, cfg: &TrainConfig) -> Result<Self> {
        mask.validate()?;
        cfg.validate()?;
        let mut rng = rng::derive(cfg.seed, "gan_init");
        let w = mask.width();
        Ok(Self {
            mask,
            dropout_rate: cfg.dropout_rate,
            leaky_slope: cfg.leaky_slope,
            enc_v: BiLstm::new(VISION_DIM, EMBED_DIM, &mut rng),
            enc_p: BiLstm::new(w, EMBED_DIM, &mut rng),
            gen: Generator::new(&mut rng),
            disc: Discriminator::new(w, &mut rng),
            norm,
            opt_g: AdamState::default(),
            opt_d: AdamState::default(),
        })
    }

    /// All weights zero; normalization is the identity.
    pub fn zeros(mask: FeatureMask) -> Self {
        let w = mask.width();
        Self {
            mask,
            dropout_rate: 0.2,
            leaky_slope: 0.2,
            enc_v: BiLstm::zeros(VISION_DIM, EMBED_DIM),
            enc_p: BiLstm::zeros(w, EMBED_DIM),
            gen: Generator::zeros(),
            disc: Discriminator::zeros(w),
            norm: Normalizer::identity(&mask),
            opt_g: AdamState::default(),
            opt_d: AdamState::default(),
        }
    }

    pub fn batch(&self, records: &[&Correspondence]) -> Batch {
        let c = Array2::from_shape_fn((records.len(), 3), |(b, k)| records[b].c_gnd[k]);
        let phones: Vec<_> = records.iter().map(|r| (&r.p, &r.rssi)).collect();
        Batch {
            v: self.norm.vision(records),
            p: self.norm.phone(&phones, &self.mask),
            c_n: self.norm.coords(&c),
            c,
        }
    }

    /// `(e_v, e_p)` for a batch.
    pub fn embed(&self, batch: &Batch) -> (Array2<f64>, Array2<f64>) {
        (bilstm_forward(&self.enc_v, &batch.v).0, bilstm_forward(&self.enc_p, &batch.p).0)
    }

    /// Generated coordinates in meters.
    pub fn generate(&self, e_p: &Array2<f64>, mode: Mode, rng: &mut Rng) -> Result<Array2<f64>> {
        let (c_n, _) = self.gen.forward(e_p, mode, self.dropout_rate, self.leaky_slope, rng)?;
        Ok(self.norm.denorm_coords(&c_n))
    }

    /// Discriminator scores for coordinates `c` given in meters.
    pub fn discriminate(&self, batch: &Batch, c: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        let feats = self.disc.features(&batch.v, &batch.p);
        Ok(self.disc.head(&feats.features, &self.norm.coords(c), mode, self.leaky_slope)?.0)
    }

    pub fn g_forward(&self, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<GForward> {
        let (e_v, cv) = bilstm_forward(&self.enc_v, &batch.v);
        let (e_p, cp) = bilstm_forward(&self.enc_p, &batch.p);
        let (c_hat_n, gen) = self.gen.forward(&e_p, mode, self.dropout_rate, self.leaky_slope, rng)?;
        Ok(GForward {
            e_v,
            e_p,
            c_hat_n,
            cv,
            cp,
            gen,
        })
    }

    /// Discriminator loss and its parameter gradients, with the generated
    /// coordinates `c_fake_n` held constant.
    pub fn d_step(&self, batch: &Batch, c_fake_n: &Array2<f64>, mode: Mode) -> Result<DStep> {
        let slope = self.leaky_slope;
        let b = batch.len() as f64;
        let feats = self.disc.features(&batch.v, &batch.p);
        let (sr, real) = self.disc.head(&feats.features, &batch.c_n, mode, slope)?;
        let (sf, fake) = self.disc.head(&feats.features, c_fake_n, mode, slope)?;
        let l_d = lsgan_d_loss(sr.as_slice().expect("contiguous"), sf.as_slice().expect("contiguous"));
        let mut grads = self.disc.zeros_like();
        let dsr = sr.mapv(|d| 2.0 * (d - 1.0) / b);
        let dsf = sf.mapv(|d| 2.0 * d / b);
        let (df_r, _) = self.disc.head_backward(&real, &dsr, slope, &mut grads);
        let (df_f, _) = self.disc.head_backward(&fake, &dsf, slope, &mut grads);
        self.disc.features_backward(&feats, &(df_r + df_f), &mut grads);
        Ok(DStep { l_d, grads, real, fake })
    }

    /// Generator-side objective `L_emb + L_adv + g` and gradients for both
    /// encoders and the generator. Discriminator parameters are held constant.
    pub fn g_step(&self, batch: &Batch, fwd: &GForward, mode: Mode) -> Result<GStep> {
        let slope = self.leaky_slope;
        let b = batch.len() as f64;
        let c_hat = self.norm.denorm_coords(&fwd.c_hat_n);
        let (l_emb, de_v) = embedding_loss_grad(&fwd.e_v, &fwd.e_p);
        let (l_reg, dc_hat) = regularizer_grad(&batch.c, &c_hat);
        let c_std = ndarray::arr1(&self.norm.c_std);
        let mut dc_n = dc_hat * &c_std;

        // The recurrent features depend only on D's weights, so their backward
        // pass is skipped here.
        let feats = self.disc.features(&batch.v, &batch.p);
        let (score, head) = self.disc.head(&feats.features, &fwd.c_hat_n, mode, slope)?;
        let l_g_adv = lsgan_g_loss(score.as_slice().expect("contiguous"));
        let dscore = score.mapv(|d| 2.0 * (d - 1.0) / b);
        let mut scratch = self.disc.zeros_like();
        let (_, dc_adv) = self.disc.head_backward(&head, &dscore, slope, &mut scratch);
        dc_n += &dc_adv;

        let mut grads = GanGrads {
            enc_v: self.enc_v.zeros_like(),
            enc_p: self.enc_p.zeros_like(),
            gen: self.gen.zeros_like(),
        };
        let de_p_gen = self.gen.backward(&fwd.gen, &dc_n, slope, &mut grads.gen);
        bilstm_backward(&self.enc_p, &fwd.cp, &(de_p_gen - &de_v), &mut grads.enc_p);
        bilstm_backward(&self.enc_v, &fwd.cv, &de_v, &mut grads.enc_v);
        Ok(GStep {
            l_emb,
            l_g_adv,
            l_reg,
            grads,
        })
    }

    /// One discriminator step followed by one generator-side step.
    pub fn train_batch(&mut self, batch: &Batch, lr: f64, rng: &mut Rng) -> Result<LossReport> {
        let fwd = self.g_forward(batch, Mode::Train, rng)?;
        self.gen.update_running(&fwd.gen);

        let d = self.d_step(batch, &fwd.c_hat_n, Mode::Train)?;
        self.disc.update_running(&d.real);
        self.disc.update_running(&d.fake);
        let dgrads = d.grads.params();
        adam_step(self.disc.params_mut(), &dgrads, &mut self.opt_d, lr);

        let g = self.g_step(batch, &fwd, Mode::Train)?;
        let ggrads = g.grads.params();
        let mut params = self.enc_v.params_mut();
        params.extend(self.enc_p.params_mut());
        params.extend(self.gen.params_mut());
        adam_step(params, &ggrads, &mut self.opt_g, lr);

        Ok(LossReport {
            l_emb: g.l_emb,
            l_d: d.l_d,
            l_g_adv: g.l_g_adv,
            l_reg: g.l_reg,
            l_total: g.l_emb + g.l_g_adv + g.l_reg,
        })
    }

    /// Phone-only inference in eval mode; coordinates in meters.
    pub fn infer(&self, phones: &[(&PhoneWindow, &[f64; WINDOW_STEPS])]) -> Result<Vec<[f64; 3]>> {
        if phones.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.norm.phone(phones, &self.mask);
        let (e_p, _) = bilstm_forward(&self.enc_p, &p);
        // Eval mode never draws from the generator.
        let mut unused = rng::derive(0, "eval");
        let c = self.generate(&e_p, Mode::Eval, &mut unused)?;
        Ok(c.outer_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }

    pub fn infer_records(&self, records: &[Correspondence]) -> Result<Vec<[f64; 3]>> {
        let phones: Vec<_> = records.iter().map(|r| (&r.p, &r.rssi)).collect();
        self.infer(&phones)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&Checkpoint::from_model(self))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        ckpt.into_model()
    }
}

/// Trains for `cfg.epochs` epochs and returns per-epoch mean losses.
///
/// Each epoch reshuffles with a seed derived from `(cfg.seed, epoch)`. Batches
/// smaller than two samples are dropped because batch norm needs at least two.
pub fn train(model: &mut GanModel, data: &[Correspondence], cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    train_with_offset(model, data, cfg, 0)
}

/// [`train`], numbering epochs after `epoch_offset` (for continued training).
pub fn train_with_offset(
    model: &mut GanModel,
    data: &[Correspondence],
    cfg: &TrainConfig,
    epoch_offset: usize,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let refs: Vec<&Correspondence> = data.iter().collect();
    let all = model.batch(&refs);
    let mut dropout_rng = rng::derive(cfg.seed, "train/dropout");
    let mut history = Vec::with_capacity(cfg.epochs);
    for e in 1..=cfg.epochs {
        let epoch = epoch_offset + e;
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng::derive(cfg.seed, &format!("train/shuffle/{epoch}")));
        let mut sum = LossReport::default();
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let batch = all.select(idx);
            let r = model.train_batch(&batch, lr, &mut dropout_rng)?;
            if let Some(what) = r.first_non_finite() {
                return Err(Error::DivergenceDetected { epoch, what });
            }
            sum.l_emb += r.l_emb;
            sum.l_d += r.l_d;
            sum.l_g_adv += r.l_g_adv;
            sum.l_reg += r.l_reg;
            sum.l_total += r.l_total;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::BatchTooSmall(data.len()));
        }
        let n = batches as f64;
        history.push(EpochLoss {
            epoch,
            loss: LossReport {
                l_emb: sum.l_emb / n,
                l_d: sum.l_d / n,
                l_g_adv: sum.l_g_adv / n,
                l_reg: sum.l_reg / n,
                l_total: sum.l_total / n,
            },
        });
    }
    Ok(history)
}

pub fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,l_emb,l_d,l_g_adv,l_reg\n");
    for h in history {
        let l = &h.loss;
        out.push_str(&format!("{},{},{},{},{}\n", h.epoch, l.l_emb, l.l_d, l.l_g_adv, l.l_reg));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamRecord {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamRecord {
    fn from_state(s: &AdamState) -> Self {
        Self {
            step: s.step,
            m: s.m.iter().map(Tensor::from_array2).collect(),
            v: s.v.iter().map(Tensor::from_array2).collect(),
        }
    }

    fn into_state(self) -> Result<AdamState> {
        Ok(AdamState {
            step: self.step,
            m: self.m.iter().map(Tensor::to_array2).collect::<Result<_>>()?,
            v: self.v.iter().map(Tensor::to_array2).collect::<Result<_>>()?,
        })
    }
}

/// On-disk model: named parameter tensors, batch-norm running statistics,
/// optimizer state and the input normalizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub mask: FeatureMask,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub normalizer: Normalizer,
    pub params: Vec<NamedTensor>,
    pub running: Vec<NamedTensor>,
    adam_g: AdamRecord,
    adam_d: AdamRecord,
}

fn running_stats(m: &GanModel) -> Vec<NamedTensor> {
    let bns = m.gen.bn.iter().enumerate().map(|(i, b)| (format!("gen.bn{}", i + 1), b));
    let dbns = m.disc.bn.iter().enumerate().map(|(i, b)| (format!("disc.bn{}", i + 1), b));
    bns.chain(dbns)
        .flat_map(|(name, b)| {
            [
                NamedTensor {
                    name: format!("{name}.running_mean"),
                    tensor: Tensor::from_array1(&b.running_mean),
                },
                NamedTensor {
                    name: format!("{name}.running_var"),
                    tensor: Tensor::from_array1(&b.running_var),
                },
            ]
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(m: &GanModel) -> Self {
        let mut params = to_named(&m.enc_v, "enc_v");
        params.extend(to_named(&m.enc_p, "enc_p"));
        params.extend(to_named(&m.gen, "gen"));
        params.extend(to_named(&m.disc, "disc"));
        Self {
            version: CHECKPOINT_VERSION,
            mask: m.mask,
            dropout_rate: m.dropout_rate,
            leaky_slope: m.leaky_slope,
            normalizer: m.norm.clone(),
            params,
            running: running_stats(m),
            adam_g: AdamRecord::from_state(&m.opt_g),
            adam_d: AdamRecord::from_state(&m.opt_d),
        }
    }

    pub fn into_model(self) -> Result<GanModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut m = GanModel::zeros(self.mask);
        let sizes = [m.enc_v.params().len(), m.enc_p.params().len(), m.gen.params().len(), m.disc.params().len()];
        if self.params.len() != sizes.iter().sum::<usize>() {
            return Err(Error::Checkpoint("parameter tensor count mismatch".into()));
        }
        let (a, rest) = self.params.split_at(sizes[0]);
        let (b, rest) = rest.split_at(sizes[1]);
        let (c, d) = rest.split_at(sizes[2]);
        load_named(&mut m.enc_v, "enc_v", a)?;
        load_named(&mut m.enc_p, "enc_p", b)?;
        load_named(&mut m.gen, "gen", c)?;
        load_named(&mut m.disc, "disc", d)?;
        let expected = running_stats(&m);
        if expected.len() != self.running.len() {
            return Err(Error::Checkpoint("running statistics count mismatch".into()));
        }
        let mut it = self.running.iter();
        for bn in m.gen.bn.iter_mut().chain(m.disc.bn.iter_mut()) {
            for target in [&mut bn.running_mean, &mut bn.running_var] {
                let t = it.next().expect("count checked").tensor.to_array1()?;
                if t.len() != target.len() {
                    return Err(Error::Checkpoint("running statistics shape mismatch".into()));
                }
                *target = t;
            }
        }
        m.dropout_rate = self.dropout_rate;
        m.leaky_slope = self.leaky_slope;
        m.norm = self.normalizer;
        m.opt_g = self.adam_g.into_state()?;
        m.opt_d = self.adam_d.into_state()?;
        Ok(m)
    }
}
