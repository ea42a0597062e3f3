//! SGD with momentum and Adam, matching the common deep-learning semantics:
//! SGD applies weight decay as additive L2 on the gradient before the
//! momentum update; Adam uses bias-corrected first/second moments.

use ndarray::{Array1, Array2};

use crate::linalg::Scalar;
use crate::nn::{Mlp, MlpGrads};

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD state; velocities are shaped like the MLP it was created for.
pub struct Sgd<F> {
    cfg: SgdConfig,
    velocity: Vec<(Array2<F>, Array1<F>)>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(cfg: SgdConfig, model: &Mlp<F>) -> Self {
        let velocity = MlpGrads::zeros_like(model).layers;
        Sgd { cfg, velocity }
    }

    pub fn step(&mut self, model: &mut Mlp<F>, grads: &MlpGrads<F>) {
        let lr = F::from_f64(self.cfg.learning_rate);
        let mu = F::from_f64(self.cfg.momentum);
        let wd = F::from_f64(self.cfg.weight_decay);
        for ((layer, (gw, gb)), (vw, vb)) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.velocity)
        {
            ndarray::Zip::from(&mut layer.weight)
                .and(gw)
                .and(vw)
                .for_each(|p, &g, v| {
                    *v = mu * *v + g + wd * *p;
                    *p -= lr * *v;
                });
            ndarray::Zip::from(&mut layer.bias)
                .and(gb)
                .and(vb)
                .for_each(|p, &g, v| {
                    *v = mu * *v + g + wd * *p;
                    *p -= lr * *v;
                });
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state (first/second moments plus step counter).
pub struct Adam<F> {
    cfg: AdamConfig,
    step: u32,
    m: Vec<(Array2<F>, Array1<F>)>,
    v: Vec<(Array2<F>, Array1<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, model: &Mlp<F>) -> Self {
        Adam {
            cfg,
            step: 0,
            m: MlpGrads::zeros_like(model).layers,
            v: MlpGrads::zeros_like(model).layers,
        }
    }

    pub fn step(&mut self, model: &mut Mlp<F>, grads: &MlpGrads<F>) {
        self.step += 1;
        let lr = F::from_f64(self.cfg.learning_rate);
        let bias1 = F::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bias2 = F::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let eps = F::from_f64(self.cfg.epsilon);
        let one = F::one();
        let update = move |p: &mut F, g: F, m: &mut F, v: &mut F| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut layer.weight)
                .and(gw)
                .and(mw)
                .and(vw)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(gb)
                .and(mb)
                .and(vb)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}
