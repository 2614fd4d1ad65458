//! Adaptive-moment gradient descent with bias correction.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::ops::Scalar;
use super::{GradStore, ModelParamsT};

pub(crate) struct Adam<F: Scalar> {
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ModelParamsT<F>, lr: f64) -> Self {
        let zeros = |p: &ModelParamsT<F>| {
            p.iter()
                .map(|(k, t)| (k.to_string(), ArrayD::zeros(t.raw_dim())))
                .collect()
        };
        Adam {
            m: zeros(params),
            v: zeros(params),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ModelParamsT<F>, grads: &GradStore<F>) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        let bc1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let names: Vec<String> = params.tensor_names().map(|s| s.to_string()).collect();
        for name in names {
            let g = grads.get(&name);
            let m = self.m.get_mut(&name).expect("moment buffer");
            let v = self.v.get_mut(&name).expect("moment buffer");
            ndarray::Zip::from(m).and(v).and(params.tensor_mut(&name)).and(g).for_each(
                |m, v, p, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                },
            );
        }
    }
}
