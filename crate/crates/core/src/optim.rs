use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
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

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update using each parameter's `grad` slot.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, (name, t)) in params.iter().enumerate() {
        match &t.grad {
            None => {
                return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
            }
            Some(g) if g.len() != state.m[i].len() => {
                return Err(Error::dim("adam_step", &[g.len()], &[state.m[i].len()]));
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = p.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.grad = Some(g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::vector(vec![v]));
        }
        s
    }

    fn set_grads(s: &mut ParamStore, grads: &[f64]) {
        for (t, &g) in s.tensors_mut().iter_mut().zip(grads) {
            t.grad = Some(vec![g]);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[0.7]);
        let mut st = AdamState::new(&s);
        set_grads(&mut s, &[0.0]);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.tensors_mut()[0].data(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0]);
        let mut st = AdamState::new(&s);
        set_grads(&mut s, &[1.0]);
        adam_step(&mut s, &mut st, &AdamConfig::with_lr(0.001)).unwrap();
        // m_hat = v_hat = 1 at t = 1
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((s.tensors_mut()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn params_update_independently() {
        let mut a = store(&[1.0, 1.0]);
        let mut b = a.clone();
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        set_grads(&mut a, &[0.5, 2.0]);
        set_grads(&mut b, &[0.5, -7.0]);
        let cfg = AdamConfig::default();
        adam_step(&mut a, &mut sa, &cfg).unwrap();
        adam_step(&mut b, &mut sb, &cfg).unwrap();
        assert_eq!(a.tensors_mut()[0].data(), b.tensors_mut()[0].data());
        assert_ne!(a.tensors_mut()[1].data(), b.tensors_mut()[1].data());
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s = store(&[1.0]);
        let mut st = AdamState::new(&s);
        assert!(matches!(
            adam_step(&mut s, &mut st, &AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }
}
