//! Adam with bias correction, plus the adaptive gradient clipping rule that
//! rescales an unbounded gradient flow against a bounded reference flow.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamHyper {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// First/second-moment accumulators shaped like the parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over an ordered parameter list.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoreError::shape(
            "adam_step",
            format!("{} parameter tensors", state.m.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads)
        .zip(state.m.iter().zip(state.v.iter()))
    {
        if !p.same_shape(g) || !p.same_shape(m) || !p.same_shape(v) {
            return Err(CoreError::shape(
                "adam_step",
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gi;
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= h.lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Rescale `g_m` so its norm never exceeds `‖g_u‖`:
/// `g_a = min(‖g_u‖, ‖g_m‖) · g_m / ‖g_m‖`, with `‖g_m‖ = 0` passed through.
pub fn clip_adaptive(g_u: &Tensor, g_m: &Tensor) -> Result<Tensor> {
    if !g_u.same_shape(g_m) {
        return Err(CoreError::shape(
            "clip_adaptive",
            format!("{:?}", g_u.shape()),
            format!("{:?}", g_m.shape()),
        ));
    }
    Ok(clip_adaptive_multi(&[g_u.clone()], &[g_m.clone()])?.pop().expect("one part"))
}

/// Multi-tensor variant: both flows are treated as one concatenated vector,
/// so the norms in the clipping rule are global.
pub fn clip_adaptive_multi(g_u: &[Tensor], g_m: &[Tensor]) -> Result<Vec<Tensor>> {
    if g_u.len() != g_m.len() {
        return Err(CoreError::shape(
            "clip_adaptive",
            format!("{} tensors", g_u.len()),
            format!("{}", g_m.len()),
        ));
    }
    for (u, m) in g_u.iter().zip(g_m) {
        if !u.same_shape(m) {
            return Err(CoreError::shape(
                "clip_adaptive",
                format!("{:?}", u.shape()),
                format!("{:?}", m.shape()),
            ));
        }
    }
    let norm_m = global_norm(g_m);
    if norm_m == 0.0 {
        return Ok(g_m.to_vec());
    }
    let norm_u = global_norm(g_u);
    let scale = norm_u.min(norm_m) / norm_m;
    Ok(g_m.iter().map(|t| t.scaled(scale)).collect())
}

/// Euclidean norm over the concatenation of all coordinates.
pub fn global_norm(parts: &[Tensor]) -> f64 {
    parts
        .iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
