use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numerics::{Scalar, Tensor};

/// Adam moments and hyperparameters for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn with_defaults(params: &ParamStore, lr: f64) -> Self {
        Self::new(params, lr, 0.9, 0.999, 1e-8)
    }

    fn check(&self, params: &ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[grads.len(), self.m.len(), self.v.len()]));
        }
        for ((p, g), (m, v)) in params.tensors().iter().zip(grads).zip(self.m.iter().zip(&self.v)) {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Shapes and finiteness are checked before
/// anything changes, so a refused step leaves parameters and state intact.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    state.check(params, grads)?;
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = (b1 * *mj as f64 + (1.0 - b1) * gj as f64) as Scalar;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            let gj = gj as f64;
            *vj = (b2 * *vj as f64 + (1.0 - b2) * gj * gj) as Scalar;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mj as f64 / c1;
            let v_hat = vj as f64 / c2;
            *pj = (*pj as f64 - state.lr * m_hat / (v_hat.sqrt() + state.eps)) as Scalar;
        }
    }
    Ok(())
}
