//! Adam optimizer over a fixed list of parameter tensors.

use crate::tensor::Tensor;
use rayon::prelude::*;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment state is positional: slot `i` always pairs with the `i`-th tensor
/// handed to [`Adam::step`], in the model's canonical parameter order.
pub struct Adam {
    lr: f64,
    t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr,
            t: 0,
            moments: param_sizes
                .iter()
                .map(|&n| (vec![0.0; n], vec![0.0; n]))
                .collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advance the step counter; call once per update, before
    /// [`Adam::apply_param`].
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter in its canonical slot.
    pub fn apply_param(&mut self, slot: usize, param: &mut Tensor, grad: &[f64]) {
        assert!(self.t > 0, "begin_step before apply_param");
        assert_eq!(param.len(), grad.len(), "gradient shape mismatch");
        let (m, v) = &mut self.moments[slot];
        assert_eq!(m.len(), grad.len(), "moment shape mismatch in slot {slot}");
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let lr = self.lr;
        let data = param.data_mut();
        let update = |((x, g), (m, v)): ((&mut f64, &f64), (&mut f64, &mut f64))| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *x -= lr * mh / (vh.sqrt() + EPS);
        };
        if data.len() >= 1 << 16 {
            data.par_iter_mut()
                .zip(grad.par_iter())
                .zip(m.par_iter_mut().zip(v.par_iter_mut()))
                .for_each(update);
        } else {
            data.iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .for_each(update);
        }
    }

    /// One update over all parameters; `grads[i]` matches `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.moments.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len());
        self.begin_step();
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            self.apply_param(i, p, g);
        }
    }

    /// Moment vectors for checkpointing, in parameter order.
    pub fn state(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.moments
    }

    pub fn restore(&mut self, t: u64, moments: Vec<(Vec<f64>, Vec<f64>)>) {
        assert_eq!(moments.len(), self.moments.len());
        self.t = t;
        self.moments = moments;
    }
}
