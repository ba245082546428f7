use serde::{Deserialize, Serialize};

use crate::controller::MonotoneParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const STABILIZER: f64 = 1e-8;

/// Moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Bias-corrected update of `x` in place.
    pub fn update(&mut self, x: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(x.len(), self.m.len(), "parameter length mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for k in 0..x.len() {
            let g = grad[k];
            self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * g;
            self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            x[k] -= lr * mh / (vh.sqrt() + STABILIZER);
        }
    }
}

/// One Adam step on the hats followed by projection onto the feasible set.
pub fn adam_step(state: &mut AdamState, params: &mut MonotoneParams, grad: &[f64], lr: f64) {
    let mut flat = params.flatten();
    state.update(&mut flat, grad, lr);
    params.set_flat(&flat);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power_net::bundled;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(1);
        let mut x = [1.0];
        s.update(&mut x, &[1.0], 0.05);
        assert!((x[0] - 0.95).abs() < 1e-8);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let c = bundled::case3();
        let mut p = MonotoneParams::droop(&c, &[1.0, 2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(p.len());
        adam_step(&mut s, &mut p, &vec![0.0; before.len()], 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn projection_clips_to_zero() {
        let c = bundled::case3();
        let mut p = MonotoneParams::droop(&c, &[0.01, 2.0, 3.0]).unwrap();
        let mut s = AdamState::new(p.len());
        let mut g = vec![0.0; p.len()];
        g[0] = 1.0;
        adam_step(&mut s, &mut p, &g, 0.5);
        assert_eq!(p.bus(0).q_hat[0], 0.0);
    }
}
