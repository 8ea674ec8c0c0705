//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ViTParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && [self.lr, self.eps, self.weight_decay]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "optimizer needs lr > 0, 0 < beta1, beta2 < 1, eps > 0, weight_decay >= 0; got {self:?}"
            )))
        }
    }
}

/// One AdamW update of a flat parameter, where `t` is the 1-based step.
///
/// `w <- w - lr*wd*w`, then `w <- w - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_update(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..w.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= cfg.lr * cfg.weight_decay * w[i];
        w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// First and second moment estimates per parameter, plus the number of
/// updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: ViTParams<Tensor>,
    pub v: ViTParams<Tensor>,
}

impl AdamWState {
    pub fn zeros_like(params: &ViTParams<Tensor>) -> Self {
        let zeros = params.map(|_, t| Tensor::zeros(t.shape()));
        AdamWState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Updates every parameter in place from its gradient.
pub fn adamw_step(
    params: &mut ViTParams<Tensor>,
    grads: &ViTParams<Tensor>,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let grads = grads.named();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    let params = params.named_mut();
    if grads.len() != params.len() || ms.len() != params.len() || vs.len() != params.len() {
        return Err(Error::contract(
            "optimizer state does not match the parameters",
        ));
    }
    for (((name, w), (_, g)), ((_, m), (_, v))) in
        params.into_iter().zip(grads).zip(ms.into_iter().zip(vs))
    {
        if g.shape() != w.shape() || m.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::contract(format!(
                "{name}: weight {:?}, gradient {:?}, moments {:?}/{:?}",
                w.shape(),
                g.shape(),
                m.shape(),
                v.shape()
            )));
        }
        let mut wd = w.data().to_vec();
        let mut md = m.data().to_vec();
        let mut vd = v.data().to_vec();
        adamw_update(&mut wd, g.data(), &mut md, &mut vd, t, cfg);
        *w = Tensor::new(w.shape().to_vec(), wd)?;
        *m = Tensor::new(m.shape().to_vec(), md)?;
        *v = Tensor::new(v.shape().to_vec(), vd)?;
    }
    Ok(())
}
