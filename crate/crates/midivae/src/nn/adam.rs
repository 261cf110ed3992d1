//! Adam with optional global-norm gradient clipping.

use ndarray::Array2;

use super::params::{ParamGrads, ParamSet};

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps taken so far (bias correction uses `step + 1`).
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        let m = params.iter().map(|(_, _, v)| Array2::zeros(v.raw_dim())).collect();
        let v = params.iter().map(|(_, _, v)| Array2::zeros(v.raw_dim())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One update. Only parameters that actually received a gradient move;
    /// a parameter untouched by the loss keeps its moments unchanged.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &mut ParamGrads, clip_norm: Option<f64>) {
        if let Some(clip) = clip_norm {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in grads.ids() {
            let g = grads.get(id).expect("id from grads");
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let value = params.value_mut(id);
            for ((p, &mi), &vi) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        let id = params.register("x", Array2::from_elem((1, 2), 4.0));
        let mut adam = Adam::new(&params, 0.1);
        for _ in 0..500 {
            let x = params.value(id).clone();
            let mut grads = ParamGrads::new();
            grads.accumulate(vec![(id, 2.0 * &x)], 1.0); // d/dx of |x|^2
            adam.apply(&mut params, &mut grads, Some(1.0));
        }
        let x = params.value(id);
        assert!(x.iter().all(|v| v.abs() < 1e-2), "did not converge: {x:?}");
    }

    #[test]
    fn untouched_params_do_not_move() {
        let mut params = ParamSet::new();
        let a = params.register("a", Array2::from_elem((1, 1), 1.0));
        let b = params.register("b", Array2::from_elem((1, 1), 1.0));
        let mut adam = Adam::new(&params, 0.1);
        let mut grads = ParamGrads::new();
        grads.accumulate(vec![(a, Array2::from_elem((1, 1), 1.0))], 1.0);
        adam.apply(&mut params, &mut grads, None);
        assert!(params.value(a)[[0, 0]] < 1.0);
        assert_eq!(params.value(b)[[0, 0]], 1.0);
    }
}
