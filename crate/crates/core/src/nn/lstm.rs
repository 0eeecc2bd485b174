use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use super::{join, kaiming_uniform, orthogonal, Params};
use crate::rng::Rng;

/// Single-direction LSTM. `w` is `(input + hidden) x 4*hidden`, gate columns
/// ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Clone, Debug)]
struct StepCache {
    z_in: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c_prev: Array2<f64>,
    tanh_c: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    steps: Vec<StepCache>,
    reverse: bool,
    input: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Lstm {
    /// Orthogonal recurrent kernel, uniform input kernel, forget-gate bias 1.
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut w = Array2::zeros((input + hidden, 4 * hidden));
        w.slice_mut(s![..input, ..]).assign(&kaiming_uniform(input, 4 * hidden, hidden, rng));
        for gate in 0..4 {
            w.slice_mut(s![input.., gate * hidden..(gate + 1) * hidden])
                .assign(&orthogonal(hidden, hidden, rng));
        }
        let mut b = Array2::zeros((1, 4 * hidden));
        b.slice_mut(s![.., hidden..2 * hidden]).fill(1.0);
        Self { w, b }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Array2::zeros((input + hidden, 4 * hidden)),
            b: Array2::zeros((1, 4 * hidden)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.ncols() / 4
    }

    pub fn input(&self) -> usize {
        self.w.nrows() - self.hidden()
    }

    /// Runs over `seq` (`B x T x input`), backwards in time when `reverse`, and
    /// returns the final hidden state `B x hidden`.
    pub fn forward(&self, seq: &Array3<f64>, reverse: bool) -> (Array2<f64>, LstmCache) {
        let (batch, steps, input) = seq.dim();
        let hd = self.hidden();
        let mut h = Array2::<f64>::zeros((batch, hd));
        let mut c = Array2::<f64>::zeros((batch, hd));
        let mut cache = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let mut z_in = Array2::zeros((batch, input + hd));
            z_in.slice_mut(s![.., ..input]).assign(&seq.index_axis(Axis(1), t));
            z_in.slice_mut(s![.., input..]).assign(&h);
            let z = z_in.dot(&self.w) + &self.b;
            let i = z.slice(s![.., ..hd]).mapv(sigmoid);
            let f = z.slice(s![.., hd..2 * hd]).mapv(sigmoid);
            let g = z.slice(s![.., 2 * hd..3 * hd]).mapv(f64::tanh);
            let o = z.slice(s![.., 3 * hd..]).mapv(sigmoid);
            let c_new = &f * &c + &i * &g;
            let tanh_c = c_new.mapv(f64::tanh);
            h = &o * &tanh_c;
            cache.push(StepCache {
                z_in,
                i,
                f,
                g,
                o,
                c_prev: std::mem::replace(&mut c, c_new),
                tanh_c,
            });
        }
        (
            h,
            LstmCache {
                steps: cache,
                reverse,
                input,
            },
        )
    }

    /// Back-propagates `dh_final` through time. Accumulates into `grad` and returns
    /// `dL/dseq` in the original time order.
    pub fn backward(&self, cache: &LstmCache, dh_final: &Array2<f64>, grad: &mut Lstm) -> Array3<f64> {
        let hd = self.hidden();
        let input = cache.input;
        let steps = cache.steps.len();
        let batch = dh_final.nrows();
        let mut dseq = Array3::zeros((batch, steps, input));
        let mut dh = dh_final.clone();
        let mut dc = Array2::<f64>::zeros((batch, hd));
        let mut dz = Array2::<f64>::zeros((batch, 4 * hd));
        for k in (0..steps).rev() {
            let st = &cache.steps[k];
            let t = if cache.reverse { steps - 1 - k } else { k };
            let d_o = &dh * &st.tanh_c;
            let dct = &dc + &(&dh * &st.o * &st.tanh_c.mapv(|v| 1.0 - v * v));
            let di = &dct * &st.g;
            let dg = &dct * &st.i;
            let df = &dct * &st.c_prev;
            dc = &dct * &st.f;
            dz.slice_mut(s![.., ..hd]).assign(&(di * &st.i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., hd..2 * hd]).assign(&(df * &st.f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * hd..3 * hd]).assign(&(dg * &st.g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * hd..]).assign(&(d_o * &st.o.mapv(|v| v * (1.0 - v))));
            grad.w += &st.z_in.t().dot(&dz);
            grad.b += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dz_in = dz.dot(&self.w.t());
            dseq.index_axis_mut(Axis(1), t).assign(&dz_in.slice(s![.., ..input]));
            dh = dz_in.slice(s![.., input..]).to_owned();
        }
        dseq
    }

    /// Loop-form single-sample forward, used as an independent reference.
    pub fn forward_reference(&self, seq: ArrayView2<f64>, reverse: bool) -> Vec<f64> {
        let hd = self.hidden();
        let input = self.input();
        let steps = seq.nrows();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let mut z = vec![0.0; 4 * hd];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = self.b[[0, j]];
                for r in 0..input {
                    acc += seq[[t, r]] * self.w[[r, j]];
                }
                for r in 0..hd {
                    acc += h[r] * self.w[[input + r, j]];
                }
                *zj = acc;
            }
            for u in 0..hd {
                let ig = sigmoid(z[u]);
                let fg = sigmoid(z[hd + u]);
                let gg = z[2 * hd + u].tanh();
                let og = sigmoid(z[3 * hd + u]);
                c[u] = fg * c[u] + ig * gg;
                h[u] = og * c[u].tanh();
            }
        }
        h
    }
}

impl Params for Lstm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Bidirectional LSTM returning `[h_forward_final, h_backward_final]`, with the
/// output width split evenly between the two directions.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

#[derive(Clone, Debug)]
pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
}

impl BiLstm {
    /// `output` is the concatenated width and must be even.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        assert!(output % 2 == 0, "bidirectional output width must be even");
        Self {
            forward: Lstm::new(input, output / 2, rng),
            backward: Lstm::new(input, output / 2, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            forward: Lstm::zeros(input, output / 2),
            backward: Lstm::zeros(input, output / 2),
        }
    }

    pub fn input(&self) -> usize {
        self.forward.input()
    }

    pub fn output(&self) -> usize {
        2 * self.forward.hidden()
    }

    pub fn forward(&self, seq: &Array3<f64>) -> (Array2<f64>, BiLstmCache) {
        let (hf, fwd) = self.forward.forward(seq, false);
        let (hb, bwd) = self.backward.forward(seq, true);
        let out = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("same batch");
        (out, BiLstmCache { fwd, bwd })
    }

    pub fn backward(&self, cache: &BiLstmCache, dout: &Array2<f64>, grad: &mut BiLstm) -> Array3<f64> {
        let h = self.forward.hidden();
        let dhf = dout.slice(s![.., ..h]).to_owned();
        let dhb = dout.slice(s![.., h..]).to_owned();
        let dsf = self.forward.backward(&cache.fwd, &dhf, &mut grad.forward);
        let dsb = self.backward.backward(&cache.bwd, &dhb, &mut grad.backward);
        dsf + dsb
    }

    pub fn forward_reference(&self, seq: ArrayView2<f64>) -> Vec<f64> {
        let mut out = self.forward.forward_reference(seq, false);
        out.extend(self.backward.forward_reference(seq, true));
        out
    }
}

impl Params for BiLstm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.forward.visit(&join(prefix, "fwd"), f);
        self.backward.visit(&join(prefix, "bwd"), f);
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.forward.params_mut();
        out.extend(self.backward.params_mut());
        out
    }
}
