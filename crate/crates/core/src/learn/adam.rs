use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "gradient length");
    assert_eq!(params.len(), state.m.len(), "optimizer state length");
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!((s.m.clone(), s.v.clone(), s.t), (vec![0.0; 2], vec![0.0; 2], 1));
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut s = AdamState::new(3);
        let g = [3.0, -0.5, 1e-3];
        adam_step(&mut p, &g, &mut s, 0.01);
        for (p, g) in p.iter().zip(g) {
            let expect = -0.01 * g / (g.abs() + EPS);
            assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
        }
    }

    #[test]
    fn two_step_hand_trace() {
        // Scalar, g = 2 twice, lr = 0.1.
        // t=1: m = 0.2, v = 0.004, m̂ = 2, v̂ = 4, step = 0.1·2/(2+ε).
        // t=2: m = 0.38, v = 0.007996, m̂ = 0.38/0.19 = 2, v̂ = 0.007996/0.001999 = 4.
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut s, 0.1);
        adam_step(&mut p, &[2.0], &mut s, 0.1);
        let step = 0.1 * 2.0 / (2.0 + EPS);
        assert!((p[0] - (1.0 - 2.0 * step)).abs() < 1e-12);
        assert!((s.m[0] - 0.38).abs() < 1e-15);
        assert!((s.v[0] - 0.007996).abs() < 1e-15);
        assert_eq!(s.t, 2);
    }
}
