//! Adam optimizer over a [`ParamStore`].

use crate::scalar::{c, Scalar};
use crate::tensor::{Gradients, Mat, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    first: Vec<Mat<T>>,
    second: Vec<Mat<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, v)| Mat::zeros(v.dim())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let cfg = self.config;
        let (b1, b2): (T, T) = (c(cfg.beta1), c(cfg.beta2));
        let correct1 = T::one() - b1.powi(self.step);
        let correct2 = T::one() - b2.powi(self.step);
        let lr: T = c(cfg.lr);
        let eps: T = c(cfg.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let i = id.index();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mh = *m / correct1;
                    let vh = *v / correct2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
