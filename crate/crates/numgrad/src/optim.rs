use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// First and second moment estimates, one slot per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        Self::new(&sizes)
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(Error::Contract(format!(
            "adamw: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let n = p.numel();
        if g.len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::Contract(format!(
                "adamw slot {i}: param {:?}, grad {}, state {}",
                p.shape(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *x -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *x);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut st = AdamWState::new(&[3]);
        let cfg = AdamWConfig::default().with_weight_decay(0.0);
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[&[0.0; 3]], &mut st, 1e-2, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decay_alone_shrinks_by_factor() {
        let mut p = Tensor::vector(vec![2.0, -4.0]);
        let mut st = AdamWState::new(&[2]);
        let cfg = AdamWConfig::default().with_weight_decay(0.1);
        adamw_step(&mut [&mut p], &[&[0.0; 2]], &mut st, 0.05, &cfg).unwrap();
        let f = 1.0 - 0.05 * 0.1;
        assert!((p.data()[0] - 2.0 * f).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * f).abs() < 1e-15);
    }

    #[test]
    fn mismatched_state_is_contract_error() {
        let mut p = Tensor::vector(vec![0.0; 2]);
        let mut st = AdamWState::new(&[3]);
        let r = adamw_step(&mut [&mut p], &[&[0.0; 2]], &mut st, 1e-3, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
