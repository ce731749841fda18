//! AdamW with decoupled weight decay.
//!
//! ```text
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! m̂ = m / (1−β1ᵗ),  v̂ = v / (1−β2ᵗ)
//! θ ← θ − lr·( m̂ / (√v̂ + ε) + λ·θ )
//! ```

use crate::error::{Error, Result};
use crate::milnet::{MilGrads, MilParams, TENSOR_NAMES};

use super::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: MilParams,
    pub v: MilParams,
    pub step_count: u64,
}

impl AdamWState {
    pub fn new(params: &MilParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step_count: 0,
        }
    }
}

/// One in-place optimizer step. A non-finite gradient aborts before any
/// parameter is touched.
pub fn adamw_step(
    params: &mut MilParams,
    grads: &MilGrads,
    state: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(Error::validation("optimizer tensors differ in shape"));
    }
    for (name, g) in TENSOR_NAMES.iter().zip(grads.tensors()) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name}[{i}] is {} at optimizer step {}",
                g[i],
                state.step_count + 1
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let (lr, wd, b1, b2, eps) = (
        cfg.learning_rate,
        cfg.weight_decay,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    );

    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((theta, g), m), v) in tensors {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milnet::{MilModel, ModelConfig};

    fn setup() -> (MilParams, TrainConfig) {
        let m = MilModel::init(ModelConfig::new(3).with_widths(4, 2), 1).unwrap();
        (m.params, TrainConfig::default())
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let (mut p, mut cfg) = setup();
        cfg.weight_decay = 0.0;
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamWState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn decay_only_step_is_geometric() {
        let (mut p, cfg) = setup();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        let ratio = 1.0 - cfg.learning_rate * cfg.weight_decay;
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y * ratio).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, mut cfg) = setup();
        cfg.learning_rate = 1e-3;
        cfg.weight_decay = 0.0;
        p.bc[0] = 1.0;
        let mut g = p.zeros_like();
        g.bc[0] = 0.5;
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        // m̂/√v̂ = sign(g) up to ε
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.bc[0] - expected).abs() < 1e-15);
        assert!((p.bc[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut p, cfg) = setup();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.ua[[1, 2]] = f64::NAN;
        let mut st = AdamWState::new(&p);
        let err = adamw_step(&mut p, &g, &mut st, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref msg) if msg.contains("Ua")));
        assert_eq!(p, before);
        assert_eq!(st.step_count, 0);
    }
}
