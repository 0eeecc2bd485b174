use ndarray::Array2;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[&Array2<f64>]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: shapes.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: Vec<&mut Array2<f64>>, grads: &[&Array2<f64>], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    if state.m.is_empty() {
        *state = AdamState::new(grads);
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        ndarray::Zip::from(p).and(&**g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
    }
}
