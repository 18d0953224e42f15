use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Self::for_shapes(net.params().iter().map(|p| p.len()), config)
    }

    pub fn for_shapes(lens: impl IntoIterator<Item = usize>, config: AdamConfig) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = lens
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params`. `loss` names the objective in errors.
    pub fn update(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Tensor],
        loss: &'static str,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of loss `{loss}`")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[Tensor], loss: &'static str) -> Result<()> {
        self.update(net.params_mut(), grads, loss)
    }
}

/// `target ← η·online + (1 − η)·target`, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::contract(format!("polyak rate {eta} outside [0, 1]")));
    }
    if target.spec() != online.spec() {
        return Err(Error::contract(format!(
            "polyak between mismatched networks {:?} / {:?}",
            target.spec(),
            online.spec()
        )));
    }
    for (t, o) in target.params_mut().into_iter().zip(online.params()) {
        if t.shape() != o.shape() {
            return Err(Error::Shape {
                op: "polyak",
                lhs: t.shape().to_vec(),
                rhs: o.shape().to_vec(),
            });
        }
        for (t, &o) in t.data_mut().iter_mut().zip(o.data()) {
            *t = eta * o + (1.0 - eta) * *t;
        }
    }
    Ok(())
}

/// L2 norm over a list of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}
