//! Adam optimizer over named parameter sets.

use super::ParamSet;
use crate::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }
}

/// One bias-corrected Adam update, applied in place parameter-by-parameter
/// in sorted name order.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, hp: &AdamParams) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, value) in params.iter_mut() {
        let g = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        let m = state.m.get_mut(name).expect("moment buffer");
        let v = state.v.get_mut(name).expect("moment buffer");
        let (mv, vv) = (m.values_mut(), v.values_mut());
        let pv = value.values_mut();
        for i in 0..pv.len() {
            let gi = g.values()[i];
            mv[i] = hp.beta1 * mv[i] + (1.0 - hp.beta1) * gi;
            vv[i] = hp.beta2 * vv[i] + (1.0 - hp.beta2) * gi * gi;
            let m_hat = mv[i] / bc1;
            let v_hat = vv[i] / bc2;
            pv[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single(1.5);
        let grads = single(0.0);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamParams::default());
        assert_eq!(params.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn zero_lr_leaves_params_but_moments_move() {
        let mut params = single(1.5);
        let grads = single(0.7);
        let mut state = AdamState::new(&params);
        let hp = AdamParams {
            lr: 0.0,
            ..AdamParams::default()
        };
        adam_step(&mut params, &grads, &mut state, &hp);
        assert_eq!(params.get("w").unwrap().item(), 1.5);
        let (m, _) = state.moments("w").unwrap();
        assert!(m.item() != 0.0, "first moment should track the gradient");
    }

    #[test]
    fn single_step_matches_hand_computed_recurrence() {
        // Straight-line evaluation of the Adam formulas, independent of the
        // implementation above.
        let (p0, g, lr, b1, b2, eps): (f64, f64, f64, f64, f64, f64) =
            (1.0, 0.5, 0.1, 0.9, 0.999, 1e-8);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = p0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut params = single(p0);
        let grads = single(g);
        let mut state = AdamState::new(&params);
        let hp = AdamParams {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        adam_step(&mut params, &grads, &mut state, &hp);
        let got = params.get("w").unwrap().item();
        assert!(
            (got - expected).abs() < 1e-15,
            "adam step {got} vs hand-computed {expected}"
        );
    }
}
