use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One decoupled-weight-decay Adam update. Decay multiplies weights flagged
/// `decay` by `1 - lr * weight_decay`; it never enters the moments.
pub fn optimizer_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamWConfig, lr: f64) -> Result<()> {
    if grads.0.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("optimizer buffers do not match parameters".into()));
    }
    if let Some((p, _)) = params.params.iter().zip(&grads.0).find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.params.iter_mut().enumerate() {
        let shrink = if p.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads.0[k]);
        for i in 0..p.value.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.value[i] = p.value[i] * shrink - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;
    use rand::SeedableRng;

    fn scalar(x: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        s.push("w", &[1], Init::Zeros, decay, &mut rng);
        s.params[0].value[0] = x;
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = scalar(0.7, true);
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..3 {
            optimizer_step(&mut p, &Gradients(vec![vec![0.0]]), &mut st, &cfg, 1e-3).unwrap();
        }
        assert_eq!(p.params[0].value[0], 0.7);
    }

    #[test]
    fn constant_gradient_hand_computed() {
        let (g, lr) = (0.5, 0.01);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = scalar(1.0, true);
        let mut st = AdamState::new(&p);
        optimizer_step(&mut p, &Gradients(vec![vec![g]]), &mut st, &cfg, lr).unwrap();
        // m1 = 0.1 g, v1 = 0.001 g^2; bias correction restores g and g^2.
        let want1 = 1.0 - lr * g / (g + 1e-8);
        assert!((p.params[0].value[0] - want1).abs() < 1e-15);
        optimizer_step(&mut p, &Gradients(vec![vec![g]]), &mut st, &cfg, lr).unwrap();
        let m2 = 0.9 * 0.1 * g + 0.1 * g;
        let v2 = 0.999 * 0.001 * g * g + 0.001 * g * g;
        let step2 = lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p.params[0].value[0] - (want1 - step2)).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_geometrically() {
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let lr = 0.01;
        let mut p = scalar(2.0, true);
        let mut st = AdamState::new(&p);
        for k in 1..=5 {
            optimizer_step(&mut p, &Gradients(vec![vec![0.0]]), &mut st, &cfg, lr).unwrap();
            assert!((p.params[0].value[0] - 2.0 * (1.0 - lr * 0.1f64).powi(k)).abs() < 1e-15);
        }
        let mut q = scalar(2.0, false);
        let mut st = AdamState::new(&q);
        optimizer_step(&mut q, &Gradients(vec![vec![0.0]]), &mut st, &cfg, lr).unwrap();
        assert_eq!(q.params[0].value[0], 2.0);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = scalar(1.0, true);
        let mut st = AdamState::new(&p);
        let r = optimizer_step(&mut p, &Gradients(vec![vec![f64::NAN]]), &mut st, &AdamWConfig::default(), 1e-3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p.params[0].value[0], 1.0);
    }
}
